use nalgebra::{DMatrix, DVector};

/// Outcome of one damped Gauss-Newton run.
#[derive(Clone, Debug)]
pub(crate) struct LmResult {
    pub theta: Vec<f64>,
    pub sse: f64,
    pub converged: bool,
}

/// Minimizes `Σ_i (f(θ, i) − y_i)²` with Levenberg-Marquardt.
///
/// `model(θ, i)` returns the prediction at point `i` and its gradient in θ.
pub(crate) fn levenberg_marquardt(
    model: &dyn Fn(&[f64], usize) -> (f64, Vec<f64>),
    ys: &[f64],
    theta0: &[f64],
    max_iter: usize,
) -> LmResult {
    let p = theta0.len();
    let n = ys.len();
    let eval = |theta: &[f64]| -> (f64, DMatrix<f64>, DVector<f64>) {
        let mut jac = DMatrix::zeros(n, p);
        let mut res = DVector::zeros(n);
        let mut sse = 0.0;
        for i in 0..n {
            let (f, g) = model(theta, i);
            res[i] = f - ys[i];
            sse += res[i] * res[i];
            for (j, gj) in g.into_iter().enumerate() {
                jac[(i, j)] = gj;
            }
        }
        (sse, jac, res)
    };
    let mut theta = theta0.to_vec();
    let (mut sse, mut jac, mut res) = eval(&theta);
    if !sse.is_finite() {
        return LmResult {
            theta,
            sse,
            converged: false,
        };
    }
    let mut mu = 1e-3;
    let mut converged = false;
    for _ in 0..max_iter {
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        if grad.amax() <= 1e-15 * (1.0 + sse) {
            converged = true;
            break;
        }
        let mut improved = false;
        while mu < 1e16 {
            let mut a = jtj.clone();
            for j in 0..p {
                a[(j, j)] += mu * jtj[(j, j)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let step = chol.solve(&(-&grad));
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let (c_sse, c_jac, c_res) = eval(&cand);
            if c_sse.is_finite() && c_sse <= sse {
                let rel = (sse - c_sse) / sse.max(f64::MIN_POSITIVE);
                let small_step =
                    step.amax() <= 1e-14 * (1.0 + theta.iter().fold(0.0f64, |a, t| a.max(t.abs())));
                theta = cand;
                sse = c_sse;
                jac = c_jac;
                res = c_res;
                mu = (mu / 3.0).max(1e-15);
                improved = true;
                if rel < 1e-16 || small_step || sse == 0.0 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            // No descent direction left at any damping: a stationary point.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmResult {
        theta,
        sse,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_linear_least_squares_problem() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let model = |t: &[f64], i: usize| (t[0] * xs[i] + t[1], vec![xs[i], 1.0]);
        let r = levenberg_marquardt(&model, &ys, &[0.0, 0.0], 100);
        assert!(r.converged);
        assert!((r.theta[0] - 2.0).abs() < 1e-9 && (r.theta[1] + 1.0).abs() < 1e-9);
    }
}
