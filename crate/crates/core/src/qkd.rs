//! Query-only distillation of the teacher query tower into a small student,
//! plus an executable check of the risk-gap bound this implies.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query};
use crate::encoder::{
    embed_documents, embed_queries, render_query, DocField, QueryForm, RenderedPrompt, Tokenizer,
    TowerParams,
};
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the cosine term.
    pub lambda: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    pub max_len: usize,
    pub optim: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            epochs: 8,
            max_steps: None,
            batch: 64,
            seed: 0,
            max_len: 128,
            optim: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::config("batch and epochs must be positive"));
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `‖q − s‖² − λ·cos(q, s)` for one teacher/student pair.
pub fn qkd_loss(teacher: ArrayView1<f64>, student: ArrayView1<f64>, lambda: f64) -> Result<f64> {
    qkd_loss_grad(teacher, student, lambda).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the student vector. The teacher is
/// treated as a constant.
pub fn qkd_loss_grad(
    teacher: ArrayView1<f64>,
    student: ArrayView1<f64>,
    lambda: f64,
) -> Result<(f64, Array1<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher dim {} vs student dim {}",
            teacher.len(),
            student.len()
        )));
    }
    let (nq, ns) = (norm(teacher), norm(student));
    if nq == 0.0 {
        return Err(Error::DegenerateEmbedding("teacher query".into()));
    }
    if ns == 0.0 {
        return Err(Error::DegenerateEmbedding("student query".into()));
    }
    let diff = &student - &teacher;
    let dot = teacher.dot(&student);
    let cos = dot / (nq * ns);
    let loss = diff.dot(&diff) - lambda * cos;
    let d_cos = (&teacher / (nq * ns)) - &(&student * (dot / (nq * ns * ns * ns)));
    let grad = diff * 2.0 - d_cos * lambda;
    Ok((loss, grad))
}

/// Rendered student inputs paired with frozen teacher targets.
#[derive(Clone, Debug)]
pub struct DistillData {
    pub prompts: Vec<RenderedPrompt>,
    pub targets: Array2<f64>,
}

/// Embeds every query with the frozen teacher and renders the student input.
pub fn prepare_distill(
    queries: &[Query],
    teacher: &TowerParams,
    teacher_tok: &Tokenizer,
    student_tok: &Tokenizer,
    max_len: usize,
) -> Result<DistillData> {
    let targets = embed_queries(teacher, teacher_tok, queries, QueryForm::Teacher, max_len)?;
    let prompts = queries
        .iter()
        .map(|q| render_query(q, student_tok, QueryForm::Student, max_len))
        .collect::<Result<_>>()?;
    Ok(DistillData { prompts, targets })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub student: TowerParams,
    pub curve: Vec<DistillRecord>,
}

/// Mean loss over `idx` and, if requested, its gradient for the student.
pub fn distill_batch_loss(
    student: &TowerParams,
    data: &DistillData,
    idx: &[usize],
    lambda: f64,
    with_grads: bool,
) -> Result<(f64, Option<TowerParams>)> {
    let scale = 1.0 / idx.len() as f64;
    let mut grads = with_grads.then(|| TowerParams::zeros(student.config));
    let mut total = 0.0;
    for &i in idx {
        let p = &data.prompts[i];
        let (embs, cache) = student.embed_cached(&p.tokens, &p.positions)?;
        let (l, g) = qkd_loss_grad(data.targets.row(i), embs[0].view(), lambda)?;
        if !l.is_finite() {
            return Err(Error::numerics("L_QKD"));
        }
        total += l;
        if let Some(grads) = grads.as_mut() {
            let g = g * scale;
            student.backward_embed(&cache, &p.positions, &[g.view()], grads);
        }
    }
    Ok((total * scale, grads))
}

pub fn planned_distill_steps(n: usize, cfg: &DistillConfig) -> usize {
    let total = n.div_ceil(cfg.batch) * cfg.epochs;
    cfg.max_steps.map_or(total, |cap| total.min(cap))
}

/// Fits the student to the frozen teacher targets in `data`.
pub fn distill(
    student: TowerParams,
    data: &DistillData,
    cfg: &DistillConfig,
) -> Result<DistillOutput> {
    cfg.validate()?;
    let n = data.prompts.len();
    if n == 0 {
        return Err(Error::config("no distillation queries"));
    }
    if data.targets.ncols() != student.config.dim {
        return Err(Error::Shape(format!(
            "teacher dim {} vs student dim {}",
            data.targets.ncols(),
            student.config.dim
        )));
    }
    let total = planned_distill_steps(n, cfg);
    let mut student = student;
    let mut opt = AdamW::new(cfg.optim.clone(), &[&student]);
    let mut rng = rng_for(cfg.seed, "distill-shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if step >= total {
                break 'epochs;
            }
            let (loss, grads) = distill_batch_loss(&student, data, chunk, cfg.lambda, true)
                .map_err(|e| match e {
                    Error::Numerics { term, .. } => Error::Numerics {
                        term,
                        step: Some(step),
                    },
                    other => other,
                })?;
            let g = grads.expect("gradients requested");
            opt.step(&mut [&mut student], &[&g], lr_at(&cfg.optim, step, total));
            if !student.is_finite() {
                return Err(Error::Numerics {
                    term: "student parameters".into(),
                    step: Some(step),
                });
            }
            if step % 50 == 0 {
                log::info!("distill step {step}/{total} loss {loss:.5}");
            }
            curve.push(DistillRecord { step, loss });
            step += 1;
        }
    }
    Ok(DistillOutput { student, curve })
}

pub fn write_distill_curve(path: &Path, curve: &[DistillRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss")?;
    for r in curve {
        writeln!(w, "{},{}", r.step, r.loss)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `‖s − q‖ / ‖q‖` over rows.
pub fn mean_relative_error(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<f64> {
    if teacher.dim() != student.dim() || teacher.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let mut acc = 0.0;
    for (q, s) in teacher.outer_iter().zip(student.outer_iter()) {
        let nq = norm(q);
        if nq == 0.0 {
            return Err(Error::DegenerateEmbedding("teacher query".into()));
        }
        acc += norm((&s - &q).view()) / nq;
    }
    Ok(acc / teacher.nrows() as f64)
}

/// Both sides of the distillation risk-gap bound over one labeled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k_norm: f64,
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Pointwise loss `(1 − y)·s + softplus(−s)`.
pub fn pointwise_loss(s: f64, y: f64) -> f64 {
    let softplus = if -s > 30.0 { -s } else { (-s).exp().ln_1p() };
    (1.0 - y) * s + softplus
}

/// Evaluates the bound from row-aligned teacher queries, student queries,
/// document embeddings and 0/1 labels, using dot-product scores.
pub fn bound_from_embeddings(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    docs: ArrayView2<f64>,
    labels: &[f64],
) -> Result<BoundReport> {
    let n = labels.len();
    if teacher.dim() != student.dim() || teacher.dim() != docs.dim() || teacher.nrows() != n {
        return Err(Error::Shape(format!(
            "teacher {:?}, student {:?}, docs {:?}, labels {n}",
            teacher.dim(),
            student.dim(),
            docs.dim()
        )));
    }
    if n == 0 {
        return Err(Error::config("bound check needs at least one sample"));
    }
    let mut k_norm: f64 = 0.0;
    let mut gap = 0.0;
    let mut dev = 0.0;
    for i in 0..n {
        let d = docs.row(i);
        k_norm = k_norm.max(norm(d));
        let (q, s) = (teacher.row(i), student.row(i));
        gap += pointwise_loss(s.dot(&d), labels[i]) - pointwise_loss(q.dot(&d), labels[i]);
        dev += norm((&s - &q).view());
    }
    let lhs = gap / n as f64;
    let rhs = 2.0 * k_norm / n as f64 * dev;
    Ok(BoundReport {
        k_norm,
        n,
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

/// One labeled query-document pair for the bound check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundSample {
    pub query: Query,
    pub doc: Document,
    pub label: f64,
}

/// Embeds the sample with all three towers and evaluates the bound on the
/// full-dimension `[EMB]` document embedding.
pub fn check_bound(
    samples: &[BoundSample],
    teacher: &TowerParams,
    student: &TowerParams,
    doc_tower: &TowerParams,
    teacher_tok: &Tokenizer,
    student_tok: &Tokenizer,
    max_len: usize,
) -> Result<BoundReport> {
    let queries: Vec<Query> = samples.iter().map(|s| s.query.clone()).collect();
    let docs: Vec<Document> = samples.iter().map(|s| s.doc.clone()).collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let q = embed_queries(teacher, teacher_tok, &queries, QueryForm::Teacher, max_len)?;
    let s = embed_queries(student, student_tok, &queries, QueryForm::Student, max_len)?;
    let d = embed_documents(doc_tower, teacher_tok, &docs, max_len)?;
    bound_from_embeddings(
        q.view(),
        s.view(),
        d[DocField::Emb as usize].view(),
        &labels,
    )
}
