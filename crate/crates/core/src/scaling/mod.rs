//! Power-law fits `L(x) = (C/x)^α + δ` and the mixed model/data form
//! `L(N, D) = ((C_N/N)^{α_N/γ} + C_D/D)^γ + δ`.

mod lm;
mod sweep;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use lm::levenberg_marquardt;
pub use sweep::{run_sweep, SweepConfig, SweepPoint};

const MAX_ITER: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub c: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r_squared: f64,
}

impl ScalingFit {
    pub fn new(c: f64, alpha: f64, delta: f64) -> Self {
        ScalingFit {
            c,
            alpha,
            delta,
            r_squared: f64::NAN,
        }
    }

    pub fn predict(&self, x: f64) -> Result<f64> {
        predict(self, x)
    }
}

/// `(C/x)^α + δ`.
pub fn predict(fit: &ScalingFit, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(x));
    }
    Ok((fit.alpha * (fit.c.ln() - x.ln())).exp() + fit.delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub c_n: f64,
    pub alpha_n: f64,
    pub gamma: f64,
    pub c_d: f64,
    pub delta: f64,
    pub r_squared: f64,
}

impl MixedFit {
    pub fn predict(&self, n: f64, d: f64) -> Result<f64> {
        for v in [n, d] {
            if !(v > 0.0) {
                return Err(Error::Domain(v));
            }
        }
        let a = (self.alpha_n / self.gamma * (self.c_n.ln() - n.ln())).exp();
        let b = (self.c_d.ln() - d.ln()).exp();
        Ok((self.gamma * (a + b).ln()).exp() + self.delta)
    }
}

fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn softplus_inv(d: f64) -> f64 {
    let d = d.max(1e-8);
    if d > 30.0 {
        d
    } else {
        d.exp_m1().ln()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v
}

fn ss_tot(ys: &[f64]) -> Result<f64> {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
    if ss <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    Ok(ss)
}

fn single_model(lx: &[f64]) -> impl Fn(&[f64], usize) -> (f64, Vec<f64>) + '_ {
    move |t: &[f64], i: usize| {
        let alpha = t[1].exp();
        let gap = t[0] - lx[i];
        let power = (alpha * gap).exp();
        (
            power + softplus(t[2]),
            vec![power * alpha, power * alpha * gap, sigmoid(t[2])],
        )
    }
}

fn check_points(xs: impl Iterator<Item = f64>, ys: &[f64], min: usize) -> Result<()> {
    if ys.len() < min {
        return Err(Error::Fit(format!(
            "need at least {min} points, got {}",
            ys.len()
        )));
    }
    for x in xs {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Domain(x));
        }
    }
    if let Some(y) = ys.iter().find(|y| !y.is_finite()) {
        return Err(Error::Domain(*y));
    }
    Ok(())
}

/// Starting points for [`fit_single`]: α on a fixed grid, C at quantiles of
/// `xs`, δ at 0 and half the smallest target.
pub fn initial_guesses(xs: &[f64], ys: &[f64]) -> Vec<ScalingFit> {
    let sx = sorted(xs.iter().copied());
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = Vec::new();
    for alpha in [0.05, 0.1, 0.2, 0.4] {
        for q in [0.1, 0.5, 0.9] {
            for delta in [0.0, (y_min / 2.0).max(0.0)] {
                out.push(ScalingFit::new(quantile(&sx, q), alpha, delta));
            }
        }
    }
    out
}

fn sse_single(fit: &ScalingFit, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| (predict(fit, x).unwrap_or(f64::NAN) - y).powi(2))
        .sum()
}

/// Best-of-many-starts damped Gauss-Newton fit of `(C/x)^α + δ`.
pub fn fit_single(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} xs for {} ys", xs.len(), ys.len())));
    }
    check_points(xs.iter().copied(), ys, 4)?;
    let sst = ss_tot(ys)?;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let model = single_model(&lx);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut worst_report = Vec::new();
    for g in initial_guesses(xs, ys) {
        let theta0 = [g.c.ln(), g.alpha.ln(), softplus_inv(g.delta)];
        let r = levenberg_marquardt(&model, ys, &theta0, MAX_ITER);
        if !r.converged || !r.sse.is_finite() {
            worst_report.push(r.sse);
            continue;
        }
        if best.as_ref().is_none_or(|(s, _)| r.sse < *s) {
            best = Some((r.sse, r.theta));
        }
    }
    let (sse, t) = best.ok_or_else(|| {
        Error::Fit(format!(
            "no start converged; final residuals {worst_report:?}"
        ))
    })?;
    Ok(ScalingFit {
        c: t[0].exp(),
        alpha: t[1].exp(),
        delta: softplus(t[2]),
        r_squared: 1.0 - sse / sst,
    })
}

/// R² of a given single-variable fit on `(xs, ys)`.
pub fn r_squared(fit: &ScalingFit, xs: &[f64], ys: &[f64]) -> Result<f64> {
    Ok(1.0 - sse_single(fit, xs, ys) / ss_tot(ys)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    Fixed(f64),
    Free,
}

/// One `(N, D, L)` observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPoint {
    pub n: f64,
    pub d: f64,
    pub y: f64,
}

/// Fits the mixed law; θ = (ln C_N, ln α_N, ln C_D, softplus⁻¹ δ[, ln γ]).
pub fn fit_mixed(points: &[MixedPoint], gamma: Gamma) -> Result<MixedFit> {
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    check_points(points.iter().flat_map(|p| [p.n, p.d]), &ys, 8)?;
    let distinct = |v: Vec<f64>| {
        let mut v = sorted(v.into_iter());
        v.dedup();
        v
    };
    let ns = distinct(points.iter().map(|p| p.n).collect());
    let ds = distinct(points.iter().map(|p| p.d).collect());
    if ns.len() < 2 || ds.len() < 2 {
        return Err(Error::Fit(format!(
            "points span {} distinct N and {} distinct D; need at least 2 of each",
            ns.len(),
            ds.len()
        )));
    }
    if let Gamma::Fixed(g) = gamma {
        if !(g > 0.0) {
            return Err(Error::Domain(g));
        }
    }
    let sst = ss_tot(&ys)?;
    let ln_n: Vec<f64> = points.iter().map(|p| p.n.ln()).collect();
    let ln_d: Vec<f64> = points.iter().map(|p| p.d.ln()).collect();
    let model = |t: &[f64], i: usize| -> (f64, Vec<f64>) {
        let gam = match gamma {
            Gamma::Fixed(g) => g,
            Gamma::Free => t[4].exp(),
        };
        let alpha = t[1].exp();
        let gap_n = t[0] - ln_n[i];
        let a = (alpha / gam * gap_n).exp();
        let b = (t[2] - ln_d[i]).exp();
        let u = a + b;
        let g = (gam * u.ln()).exp();
        let mut grad = vec![
            g * a * alpha / u,
            g * a * alpha * gap_n / u,
            g * gam * b / u,
            sigmoid(t[3]),
        ];
        if matches!(gamma, Gamma::Free) {
            let da_dgam = -a * alpha * gap_n / (gam * gam);
            grad.push(g * gam * (u.ln() + gam * da_dgam / u));
        }
        (g + softplus(t[3]), grad)
    };
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let gammas: Vec<f64> = match gamma {
        Gamma::Fixed(g) => vec![g],
        Gamma::Free => vec![0.5, 1.0, 2.0],
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut finals = Vec::new();
    for alpha in [0.05, 0.1, 0.2, 0.4] {
        for qn in [0.1, 0.5, 0.9] {
            for qd in [0.1, 0.5, 0.9] {
                for delta in [0.0, (y_min / 2.0).max(0.0)] {
                    for &g in &gammas {
                        let mut t0 = vec![
                            quantile(&ns, qn).ln(),
                            f64::ln(alpha),
                            quantile(&ds, qd).ln(),
                            softplus_inv(delta),
                        ];
                        if matches!(gamma, Gamma::Free) {
                            t0.push(g.ln());
                        }
                        let r = levenberg_marquardt(&model, &ys, &t0, MAX_ITER);
                        if !r.converged || !r.sse.is_finite() {
                            finals.push(r.sse);
                            continue;
                        }
                        if best.as_ref().is_none_or(|(s, _)| r.sse < *s) {
                            best = Some((r.sse, r.theta));
                        }
                    }
                }
            }
        }
    }
    let (sse, t) =
        best.ok_or_else(|| Error::Fit(format!("no start converged; final residuals {finals:?}")))?;
    Ok(MixedFit {
        c_n: t[0].exp(),
        alpha_n: t[1].exp(),
        gamma: match gamma {
            Gamma::Fixed(g) => g,
            Gamma::Free => t[4].exp(),
        },
        c_d: t[2].exp(),
        delta: softplus(t[3]),
        r_squared: 1.0 - sse / sst,
    })
}

/// Points read from CSV: header `x,y` for single fits or `n,d,y` for mixed.
#[derive(Clone, Debug, PartialEq)]
pub enum Points {
    Single { xs: Vec<f64>, ys: Vec<f64> },
    Mixed(Vec<MixedPoint>),
}

pub fn read_points(path: &Path) -> Result<Points> {
    parse_points(&std::fs::read_to_string(path)?)
}

pub fn parse_points(text: &str) -> Result<Points> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format("empty points file".into()))?
        .split(',')
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let rows: Vec<Vec<f64>> = lines
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::Format(format!(
            "row has {} fields, header has {}",
            r.len(),
            header.len()
        )));
    }
    match header
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["x", "y"] => Ok(Points::Single {
            xs: rows.iter().map(|r| r[0]).collect(),
            ys: rows.iter().map(|r| r[1]).collect(),
        }),
        ["n", "d", "y"] => Ok(Points::Mixed(
            rows.iter()
                .map(|r| MixedPoint {
                    n: r[0],
                    d: r[1],
                    y: r[2],
                })
                .collect(),
        )),
        other => Err(Error::Format(format!("unknown points header {other:?}"))),
    }
}
