//! Batched loss kernels as [`Graph`] operations.
//!
//! Each operation evaluates its kernel and the closed-form gradients once,
//! at construction; the backward rule only rescales them by the upstream
//! gradient.

use std::collections::BTreeMap;

use super::kernels::{aug_grad_with_terms, s2s_grad, softmax_nll, z2s_grad, AugDenominator, ContrastiveParams};
use crate::error::{Error, Result};
use crate::mathcore::{dot, Graph, Matrix, Var};

fn check_labels(labels: &[usize], rows: usize, classes: usize, op: &'static str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input(format!("{op}: empty batch")));
    }
    if labels.len() != rows {
        return Err(Error::shape(op, rows, labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("{op}: label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean softmax cross-entropy over rows of `logits`. With `weights`, row `i`
/// uses the calibrated normalizer with weights `weights[i]`.
pub fn ce_mean(g: &mut Graph, logits: Var, labels: &[usize], weights: Option<&[Vec<f64>]>) -> Result<Var> {
    let z = g.value(logits);
    check_labels(labels, z.rows(), z.cols(), "ce_mean")?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for (i, &y) in labels.iter().enumerate() {
        let w = weights.map(|w| w[i].as_slice());
        let (l, gi) = softmax_nll(z.row(i), y, w)?;
        total += l;
        for (o, v) in grad.row_mut(i).iter_mut().zip(gi) {
            *o = v / n;
        }
    }
    Ok(g.custom(
        &[logits],
        Matrix::scalar(total / n),
        Box::new(move |up, _, _| vec![grad.scale(up.item())]),
    ))
}

/// Mean margin contrastive loss of embedding rows against the rows of `table`.
pub fn z2s_mean(g: &mut Graph, emb: Var, labels: &[usize], table: Var, cp: &ContrastiveParams) -> Result<Var> {
    let (e, t) = (g.value(emb), g.value(table));
    if e.cols() != t.cols() {
        return Err(Error::shape("z2s_mean", t.cols(), e.cols()));
    }
    check_labels(labels, e.rows(), t.rows(), "z2s_mean")?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut de = Matrix::zeros(e.rows(), e.cols());
    let mut dt = Matrix::zeros(t.rows(), t.cols());
    for (i, &y) in labels.iter().enumerate() {
        let (l, gi, gt) = z2s_grad(e.row(i), y, t, cp)?;
        total += l;
        for (o, v) in de.row_mut(i).iter_mut().zip(gi) {
            *o = v / n;
        }
        dt.axpy(1.0 / n, &gt)?;
    }
    Ok(g.custom(
        &[emb, table],
        Matrix::scalar(total / n),
        Box::new(move |up, _, _| vec![de.scale(up.item()), dt.scale(up.item())]),
    ))
}

/// Cross-prototype contrastive loss between two tables.
pub fn s2s(g: &mut Graph, a: Var, b: Var, cp: &ContrastiveParams) -> Result<Var> {
    let (l, da, db) = s2s_grad(g.value(a), g.value(b), cp)?;
    Ok(g.custom(
        &[a, b],
        Matrix::scalar(l),
        Box::new(move |up, _, _| vec![da.scale(up.item()), db.scale(up.item())]),
    ))
}

/// Mean implicit-augmentation loss over the rows of `features`, with the
/// covariance of each row's class taken from `sigmas` (held constant).
#[allow(clippy::too_many_arguments)]
pub fn aug_mean(
    g: &mut Graph,
    features: Var,
    w: Var,
    b: Var,
    labels: &[usize],
    sigmas: &[Matrix],
    lambda: f64,
    variant: AugDenominator,
) -> Result<Var> {
    let (f, wm, bm) = (g.value(features), g.value(w), g.value(b));
    let (c, d) = wm.shape();
    if f.cols() != d || bm.shape() != (1, c) || sigmas.len() != c {
        return Err(Error::shape(
            "aug_mean",
            format!("features x{d}, bias 1x{c}, {c} covariances"),
            format!("features {:?}, bias {:?}, {} covariances", f.shape(), bm.shape(), sigmas.len()),
        ));
    }
    check_labels(labels, f.rows(), c, "aug_mean")?;
    let n = labels.len() as f64;
    let bias = bm.as_slice();
    // quadratic terms depend only on the label
    let mut terms: BTreeMap<usize, (Vec<f64>, Matrix)> = BTreeMap::new();
    for &y in labels {
        terms.entry(y).or_insert_with(|| {
            let sigma = &sigmas[y];
            let wy = wm.row(y);
            let mut u = Matrix::zeros(c, d);
            let mut q = vec![0.0; c];
            for ci in 0..c {
                let diff: Vec<f64> = wm.row(ci).iter().zip(wy).map(|(a, b)| a - b).collect();
                let ui = sigma.matvec(&diff).expect("square covariance");
                q[ci] = dot(&diff, &ui);
                u.row_mut(ci).copy_from_slice(&ui);
            }
            (q, u)
        });
    }
    let mut total = 0.0;
    let mut df = Matrix::zeros(f.rows(), d);
    let mut dw = Matrix::zeros(c, d);
    let mut db = Matrix::zeros(1, c);
    for (i, &y) in labels.iter().enumerate() {
        let (q, u) = &terms[&y];
        let (l, gf, gw, gb) = aug_grad_with_terms(f.row(i), y, wm, bias, q, u, lambda, variant)?;
        total += l;
        for (o, v) in df.row_mut(i).iter_mut().zip(gf) {
            *o = v / n;
        }
        dw.axpy(1.0 / n, &gw)?;
        for (o, v) in db.as_mut_slice().iter_mut().zip(gb) {
            *o += v / n;
        }
    }
    Ok(g.custom(
        &[features, w, b],
        Matrix::scalar(total / n),
        Box::new(move |up, _, _| {
            let k = up.item();
            vec![df.scale(k), dw.scale(k), db.scale(k)]
        }),
    ))
}
