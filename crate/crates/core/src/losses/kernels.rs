//! Per-sample loss kernels with closed-form gradients.

use serde::{Deserialize, Serialize};

use crate::banks::SemanticTable;
use crate::error::{Error, Result};
use crate::mathcore::{check_psd, dot, log_softmax, logsumexp, Matrix};

/// Tolerance on the norm of inputs that must be unit vectors.
pub const UNIT_TOL: f64 = 1e-6;

/// Training sample counts `n_c^d`, one row per training domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainClassCounts {
    counts: Vec<Vec<u64>>,
}

impl DomainClassCounts {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let classes = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || classes == 0 {
            return Err(Error::Input("counts table is empty".into()));
        }
        for (d, row) in counts.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape("DomainClassCounts", classes, row.len()));
            }
            if row.iter().sum::<u64>() == 0 {
                return Err(Error::Input(format!("domain {d} has no training samples")));
            }
        }
        Ok(Self { counts })
    }

    pub fn domains(&self) -> usize {
        self.counts.len()
    }

    pub fn classes(&self) -> usize {
        self.counts[0].len()
    }

    pub fn row(&self, domain: usize) -> &[u64] {
        &self.counts[domain]
    }

    pub fn get(&self, domain: usize, class: usize) -> u64 {
        self.counts[domain][class]
    }

    /// Row as calibration weights.
    pub fn weights(&self, domain: usize) -> Vec<f64> {
        self.counts[domain].iter().map(|&n| n as f64).collect()
    }

    /// `M^d`: classes with at least one training sample in `domain`.
    pub fn mask(&self, domain: usize) -> Vec<bool> {
        self.counts[domain].iter().map(|&n| n > 0).collect()
    }

    /// Per-class totals over all training domains.
    pub fn totals(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// `Y^tr`: classes seen in at least one training domain.
    pub fn known_classes(&self) -> Vec<bool> {
        self.totals().iter().map(|&n| n > 0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParams {
    /// Additive margin on the positive similarity.
    pub alpha: f64,
    /// Temperature, strictly positive.
    pub tau: f64,
}

impl ContrastiveParams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let cp = Self { alpha, tau };
        cp.validate()?;
        Ok(cp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    /// Augmentation intensity.
    pub lambda: f64,
    /// Number of semantically closest classes pooled into a covariance.
    pub k: usize,
}

impl AugParams {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.k < 1 || self.k > classes {
            return Err(Error::Config(format!(
                "top-k must lie in 1..={classes}, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Form of the augmented softmax denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugDenominator {
    /// `Σ_c exp(w_cᵀf + b_c + λ/2·q_c)`; reduces to cross-entropy at λ = 0.
    #[default]
    Derivation,
    /// `Σ_c exp(w_yᵀf + b_y + λ/2·q_c)`, the target logit repeated in every
    /// term. Kept for comparison only: the loss no longer depends on `f`.
    AsPrinted,
}

/// `−log softmax(scores)[target]` restricted to entries with positive
/// weight, and its gradient with respect to `scores`.
pub fn softmax_nll(scores: &[f64], target: usize, weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let logp = log_softmax(scores, weights)?;
    let lt = logp[target];
    if lt == f64::NEG_INFINITY {
        return Err(Error::Input(format!("target {target} has zero weight")));
    }
    let mut grad: Vec<f64> = logp
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
        .collect();
    grad[target] -= 1.0;
    // −lt loses all precision when the target dominates; sum the rest instead
    let shifted: Vec<f64> = logp.iter().map(|&l| l - lt).collect();
    let loss = if shifted.iter().all(|&a| a <= 0.0) {
        shifted
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, &a)| a.exp())
            .sum::<f64>()
            .ln_1p()
    } else {
        -lt
    };
    Ok((loss, grad))
}

/// Plain softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(softmax_nll(logits, label, None)?.0)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Input(format!("label {label} out of range for {classes} classes")));
    }
    Ok(())
}

/// Distribution-calibrated cross-entropy
/// `−log( n_y e^{z_y} / Σ_c n_c e^{z_c} )` with the domain's training counts.
pub fn dc_loss(logits: &[f64], label: usize, domain: usize, counts: &DomainClassCounts) -> Result<f64> {
    Ok(dc_loss_grad(logits, label, domain, counts)?.0)
}

pub fn dc_loss_grad(
    logits: &[f64],
    label: usize,
    domain: usize,
    counts: &DomainClassCounts,
) -> Result<(f64, Vec<f64>)> {
    if domain >= counts.domains() {
        return Err(Error::Input(format!("domain {domain} has no counts row")));
    }
    if logits.len() != counts.classes() {
        return Err(Error::shape("dc_loss", counts.classes(), logits.len()));
    }
    check_label(label, logits.len())?;
    if counts.get(domain, label) == 0 {
        return Err(Error::Input(format!(
            "class {label} has no training samples in domain {domain}"
        )));
    }
    softmax_nll(logits, label, Some(&counts.weights(domain)))
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Input(format!("{what} is not unit-normalized (norm {n})")));
    }
    Ok(())
}

/// Margin contrastive loss of one embedding against a table of class rows:
/// positive score `(⟨e,s_y⟩ − α)/τ`, negatives `⟨e,s_j⟩/τ`.
pub fn z2s_loss(embedding: &[f64], label: usize, table: &SemanticTable, cp: &ContrastiveParams) -> Result<f64> {
    cp.validate()?;
    check_unit(embedding, "embedding")?;
    if embedding.len() != table.dim() {
        return Err(Error::shape("z2s_loss", table.dim(), embedding.len()));
    }
    check_label(label, table.classes())?;
    Ok(z2s_grad(embedding, label, table.matrix(), cp)?.0)
}

/// Value and gradients `(∂/∂embedding, ∂/∂table)` of the margin contrastive
/// loss. No normalization checks.
pub fn z2s_grad(
    embedding: &[f64],
    label: usize,
    table: &Matrix,
    cp: &ContrastiveParams,
) -> Result<(f64, Vec<f64>, Matrix)> {
    let scores: Vec<f64> = table
        .iter_rows()
        .enumerate()
        .map(|(j, s)| {
            let sim = dot(embedding, s);
            if j == label { (sim - cp.alpha) / cp.tau } else { sim / cp.tau }
        })
        .collect();
    let (loss, g) = softmax_nll(&scores, label, None)?;
    let mut d_emb = vec![0.0; embedding.len()];
    let mut d_table = Matrix::zeros(table.rows(), table.cols());
    for (j, &gj) in g.iter().enumerate() {
        let k = gj / cp.tau;
        for (de, &s) in d_emb.iter_mut().zip(table.row(j)) {
            *de += k * s;
        }
        for (dt, &e) in d_table.row_mut(j).iter_mut().zip(embedding) {
            *dt = k * e;
        }
    }
    Ok((loss, d_emb, d_table))
}

/// Cross-prototype contrastive loss between two completed prototype tables,
/// averaged over classes.
pub fn s2s_loss(s_m: &Matrix, s_n: &Matrix, cp: &ContrastiveParams) -> Result<f64> {
    cp.validate()?;
    if s_m.shape() != s_n.shape() {
        return Err(Error::shape(
            "s2s_loss",
            format!("{:?}", s_m.shape()),
            format!("{:?}", s_n.shape()),
        ));
    }
    for r in s_m.iter_rows().chain(s_n.iter_rows()) {
        check_unit(r, "prototype row")?;
    }
    Ok(s2s_grad(s_m, s_n, cp)?.0)
}

/// Value and gradients `(∂/∂s_m, ∂/∂s_n)` of the cross-prototype loss.
pub fn s2s_grad(a: &Matrix, b: &Matrix, cp: &ContrastiveParams) -> Result<(f64, Matrix, Matrix)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("s2s", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let c = a.rows();
    if c < 2 {
        return Err(Error::Input("s2s needs at least two classes".into()));
    }
    let ab = a.matmul_t(b)?;
    let aa = a.matmul_t(a)?;
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(b.rows(), b.cols());
    let mut total = 0.0;
    let inv_c = 1.0 / c as f64;
    // score layout: [positive, b_j (j≠c)..., a_j (j≠c)...]
    let mut scores = Vec::with_capacity(2 * c - 1);
    let mut who: Vec<(bool, usize)> = Vec::with_capacity(2 * c - 1);
    for ci in 0..c {
        scores.clear();
        who.clear();
        scores.push((ab[(ci, ci)] - cp.alpha) / cp.tau);
        who.push((false, ci));
        for j in (0..c).filter(|&j| j != ci) {
            scores.push(ab[(ci, j)] / cp.tau);
            who.push((false, j));
        }
        for j in (0..c).filter(|&j| j != ci) {
            scores.push(aa[(ci, j)] / cp.tau);
            who.push((true, j));
        }
        let (loss, g) = softmax_nll(&scores, 0, None)?;
        total += loss;
        for (&gk, &(from_a, j)) in g.iter().zip(&who) {
            let k = gk * inv_c / cp.tau;
            if k == 0.0 {
                continue;
            }
            let other = if from_a { a.row(j).to_vec() } else { b.row(j).to_vec() };
            let anchor = a.row(ci).to_vec();
            for (d, o) in da.row_mut(ci).iter_mut().zip(&other) {
                *d += k * o;
            }
            let target = if from_a { da.row_mut(j) } else { db.row_mut(j) };
            for (d, x) in target.iter_mut().zip(&anchor) {
                *d += k * x;
            }
        }
    }
    Ok((total * inv_c, da, db))
}

/// Implicit-augmentation surrogate loss for one sample.
pub fn aug_loss(
    feature: &[f64],
    label: usize,
    w: &Matrix,
    b: &[f64],
    sigma_prime: &Matrix,
    lambda: f64,
    variant: AugDenominator,
) -> Result<f64> {
    check_aug_shapes(feature.len(), label, w, b, sigma_prime)?;
    check_psd(sigma_prime, "aug_loss covariance")?;
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(aug_grad(feature, label, w, b, sigma_prime, lambda, variant)?.0)
}

fn check_aug_shapes(d: usize, label: usize, w: &Matrix, b: &[f64], sigma: &Matrix) -> Result<()> {
    if w.cols() != d {
        return Err(Error::shape("aug: W columns", d, w.cols()));
    }
    if b.len() != w.rows() {
        return Err(Error::shape("aug: bias", w.rows(), b.len()));
    }
    if sigma.shape() != (d, d) {
        return Err(Error::shape("aug: covariance", format!("{d}x{d}"), format!("{:?}", sigma.shape())));
    }
    check_label(label, w.rows())
}

/// `(w_c − w_y)ᵀ Σ (w_c − w_y)` and `Σ (w_c − w_y)` for every class `c`.
fn quad_terms(w: &Matrix, label: usize, sigma: &Matrix) -> (Vec<f64>, Matrix) {
    let (c, d) = w.shape();
    let wy = w.row(label);
    let mut u = Matrix::zeros(c, d);
    let mut q = vec![0.0; c];
    let mut diff = vec![0.0; d];
    for ci in 0..c {
        for ((df, &a), &bv) in diff.iter_mut().zip(w.row(ci)).zip(wy) {
            *df = a - bv;
        }
        let ui = sigma.matvec(&diff).expect("shape checked");
        q[ci] = dot(&diff, &ui);
        u.row_mut(ci).copy_from_slice(&ui);
    }
    (q, u)
}

/// Value and gradients `(∂/∂f, ∂/∂W, ∂/∂b)` of the augmentation loss with
/// the covariance held fixed.
pub fn aug_grad(
    feature: &[f64],
    label: usize,
    w: &Matrix,
    b: &[f64],
    sigma: &Matrix,
    lambda: f64,
    variant: AugDenominator,
) -> Result<(f64, Vec<f64>, Matrix, Vec<f64>)> {
    let (q, u) = quad_terms(w, label, sigma);
    aug_grad_with_terms(feature, label, w, b, &q, &u, lambda, variant)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn aug_grad_with_terms(
    feature: &[f64],
    label: usize,
    w: &Matrix,
    b: &[f64],
    q: &[f64],
    u: &Matrix,
    lambda: f64,
    variant: AugDenominator,
) -> Result<(f64, Vec<f64>, Matrix, Vec<f64>)> {
    let (c, d) = w.shape();
    let mut df = vec![0.0; d];
    let mut dw = Matrix::zeros(c, d);
    let mut db = vec![0.0; c];
    match variant {
        AugDenominator::Derivation => {
            let logits: Vec<f64> = (0..c)
                .map(|ci| dot(w.row(ci), feature) + b[ci] + 0.5 * lambda * q[ci])
                .collect();
            let (loss, g) = softmax_nll(&logits, label, None)?;
            for ci in 0..c {
                let gc = g[ci];
                db[ci] = gc;
                for k in 0..d {
                    df[k] += gc * w[(ci, k)];
                    dw[(ci, k)] += gc * (feature[k] + lambda * u[(ci, k)]);
                    dw[(label, k)] -= gc * lambda * u[(ci, k)];
                }
            }
            Ok((loss, df, dw, db))
        }
        AugDenominator::AsPrinted => {
            let terms: Vec<f64> = q.iter().map(|&qc| 0.5 * lambda * qc).collect();
            let lse = logsumexp(&terms);
            for ci in 0..c {
                let r = (terms[ci] - lse).exp();
                for k in 0..d {
                    dw[(ci, k)] += r * lambda * u[(ci, k)];
                    dw[(label, k)] -= r * lambda * u[(ci, k)];
                }
            }
            Ok((lse, df, dw, db))
        }
    }
}

/// Upper bound on `E[CE]` for features drawn from `N(μ_y, λΣ_y)`:
/// `log Σ_c exp((w_c−w_y)ᵀμ_y + (b_c−b_y) + λ/2 (w_c−w_y)ᵀΣ_y(w_c−w_y))`.
pub fn aug_bound(
    mu_y: &[f64],
    sigma_y: &Matrix,
    w: &Matrix,
    b: &[f64],
    label: usize,
    lambda: f64,
) -> Result<f64> {
    check_aug_shapes(mu_y.len(), label, w, b, sigma_y)?;
    check_psd(sigma_y, "aug_bound covariance")?;
    let wy = w.row(label);
    let terms: Vec<f64> = (0..w.rows())
        .map(|c| {
            let diff: Vec<f64> = w.row(c).iter().zip(wy).map(|(a, b)| a - b).collect();
            dot(&diff, mu_y) + (b[c] - b[label]) + 0.5 * lambda * sigma_y.quad_form(&diff)
        })
        .collect();
    Ok(logsumexp(&terms))
}
