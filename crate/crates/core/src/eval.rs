//! Leave-one-domain-out evaluation with confidence-thresholded open-class
//! rejection, and feature-space diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::banks::CovarianceBank;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::mathcore::{dot, log_softmax, psd_sqrt, Matrix};
use crate::model::ModelParams;

/// Score compared against the rejection threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// Largest softmax probability over the training label set.
    #[default]
    MaxProb,
    /// Largest raw logit over the training label set.
    MaxLogit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenDecision {
    /// `None` is the OPEN decision.
    pub class: Option<usize>,
    pub confidence: f64,
}

/// Decision over logits that all belong to the training label set.
pub fn predict_open(logits: &[f64], threshold: f64) -> OpenDecision {
    let known = vec![true; logits.len()];
    predict_open_masked(logits, &known, threshold, Confidence::MaxProb)
}

/// Decision restricted to the classes with `known[c]`; ties in the argmax
/// go to the lowest index.
pub fn predict_open_masked(logits: &[f64], known: &[bool], threshold: f64, conf: Confidence) -> OpenDecision {
    let mut best: Option<usize> = None;
    for c in (0..logits.len()).filter(|&c| known[c]) {
        if best.is_none_or(|b| logits[c] > logits[b]) {
            best = Some(c);
        }
    }
    let Some(best) = best else {
        return OpenDecision { class: None, confidence: 0.0 };
    };
    let confidence = match conf {
        Confidence::MaxLogit => logits[best],
        Confidence::MaxProb => {
            let w: Vec<f64> = known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            log_softmax(logits, Some(&w)).map_or(0.0, |lp| lp[best].exp())
        }
    };
    OpenDecision {
        class: (confidence >= threshold).then_some(best),
        confidence,
    }
}

/// `2ab/(a+b)`, zero when both are zero.
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    #[serde(default)]
    pub confidence: Confidence,
    /// Pool samples across domains for Acc instead of averaging per domain.
    #[serde(default)]
    pub pooled_acc: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            confidence: Confidence::MaxProb,
            pooled_acc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    /// Accuracy on non-open test samples, percent.
    pub acc: f64,
    pub known_samples: usize,
    pub open_samples: usize,
    /// Fraction of open samples rejected, percent; `None` without open samples.
    pub open_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub open: bool,
    /// Exact-class accuracy for known classes, rejection rate for open ones.
    pub acc: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub heldout_domain: usize,
    pub threshold: f64,
    pub acc_u: f64,
    pub acc: f64,
    pub h: f64,
    /// Pooled accuracy on non-open samples (`a` of H).
    pub known_acc: f64,
    /// Pooled rejection rate on open samples (`b` of H).
    pub open_acc: Option<f64>,
    /// Set when H could not be formed and Acc is reported in its place.
    pub h_flag: Option<String>,
    pub per_domain: Vec<DomainMetrics>,
    pub per_class: Vec<ClassMetrics>,
}

fn pct(hit: usize, n: usize) -> f64 {
    if n == 0 { 0.0 } else { 100.0 * hit as f64 / n as f64 }
}

/// Logits of the given samples under `params`.
pub fn logits_for(params: &ModelParams, dataset: &Dataset, idx: &[usize]) -> Result<Matrix> {
    if idx.is_empty() {
        return Ok(Matrix::zeros(0, params.config.classes));
    }
    let z = params.forward_features(&dataset.features(idx))?;
    params.forward_logits(&z)
}

/// Metrics on the test split; Acc-U on `heldout`, Acc and H over all domains.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, heldout: usize, opts: &EvalOptions) -> Result<MetricReport> {
    let test = dataset.indices(Split::Test, None);
    if !test.iter().any(|&i| dataset.samples()[i].d == heldout) {
        return Err(Error::Input(format!("held-out domain {heldout} has no test samples")));
    }
    let known = dataset.counts().known_classes();
    let logits = logits_for(params, dataset, &test)?;
    let c = dataset.classes();
    let k = dataset.domains();
    // (hits, n) per domain for known and open samples
    let mut dom_known = vec![(0usize, 0usize); k];
    let mut dom_open = vec![(0usize, 0usize); k];
    let mut cls = vec![(0usize, 0usize); c];
    for (row, &i) in test.iter().enumerate() {
        let s = &dataset.samples()[i];
        let dec = predict_open_masked(logits.row(row), &known, opts.threshold, opts.confidence);
        let (hit, slot) = if known[s.y] {
            (dec.class == Some(s.y), &mut dom_known[s.d])
        } else {
            (dec.class.is_none(), &mut dom_open[s.d])
        };
        slot.0 += usize::from(hit);
        slot.1 += 1;
        cls[s.y].0 += usize::from(hit);
        cls[s.y].1 += 1;
    }
    let per_domain: Vec<DomainMetrics> = (0..k)
        .map(|d| DomainMetrics {
            domain: d,
            acc: pct(dom_known[d].0, dom_known[d].1),
            known_samples: dom_known[d].1,
            open_samples: dom_open[d].1,
            open_acc: (dom_open[d].1 > 0).then(|| pct(dom_open[d].0, dom_open[d].1)),
        })
        .collect();
    let sum = |v: &[(usize, usize)]| v.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let (kh, kn) = sum(&dom_known);
    let (oh, on) = sum(&dom_open);
    let acc_u = pct(dom_known[heldout].0, dom_known[heldout].1);
    let with_known: Vec<&DomainMetrics> = per_domain.iter().filter(|m| m.known_samples > 0).collect();
    let acc = if opts.pooled_acc {
        pct(kh, kn)
    } else if with_known.is_empty() {
        0.0
    } else {
        with_known.iter().map(|m| m.acc).sum::<f64>() / with_known.len() as f64
    };
    let known_acc = pct(kh, kn);
    let open_acc = (on > 0).then(|| pct(oh, on));
    let (h, h_flag) = match open_acc {
        Some(b) => (harmonic(known_acc, b), None),
        None => (acc, Some("no open-class samples; H reported as Acc".to_string())),
    };
    let per_class = cls
        .iter()
        .enumerate()
        .map(|(class, &(hit, n))| ClassMetrics {
            class,
            open: !known[class],
            acc: pct(hit, n),
            samples: n,
        })
        .collect();
    Ok(MetricReport {
        heldout_domain: heldout,
        threshold: opts.threshold,
        acc_u,
        acc,
        h,
        known_acc,
        open_acc,
        h_flag,
        per_domain,
        per_class,
    })
}

/// Closed-set accuracy over the known classes, percent, averaged per domain.
pub fn closed_set_accuracy(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<f64> {
    let known = dataset.counts().known_classes();
    let mut accs = Vec::new();
    for d in 0..dataset.domains() {
        let idx: Vec<usize> = dataset
            .indices(split, Some(d))
            .into_iter()
            .filter(|&i| known[dataset.samples()[i].y])
            .collect();
        if idx.is_empty() {
            continue;
        }
        let logits = logits_for(params, dataset, &idx)?;
        let hits = idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| predict_open_masked(logits.row(r), &known, 0.0, Confidence::MaxProb).class == Some(dataset.samples()[i].y))
            .count();
        accs.push(pct(hits, idx.len()));
    }
    Ok(if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 })
}

/// A scored sample for threshold selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Pooled `(a, b)` of H at `threshold`; `b` is `None` without open samples.
pub fn known_open_accuracy(scored: &[Scored], known: &[bool], threshold: f64, conf: Confidence) -> (f64, Option<f64>) {
    let (mut kh, mut kn, mut oh, mut on) = (0, 0, 0, 0);
    for s in scored {
        let dec = predict_open_masked(&s.logits, known, threshold, conf);
        if known[s.label] {
            kn += 1;
            kh += usize::from(dec.class == Some(s.label));
        } else {
            on += 1;
            oh += usize::from(dec.class.is_none());
        }
    }
    (pct(kh, kn), (on > 0).then(|| pct(oh, on)))
}

/// Grid threshold maximizing H on `scored`; ties go to the smallest threshold.
/// Without open samples H is taken as the known accuracy.
pub fn select_threshold(scored: &[Scored], known: &[bool], grid: &[f64], conf: Confidence) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Input("threshold grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &t in &sorted {
        let (a, b) = known_open_accuracy(scored, known, t, conf);
        let h = b.map_or(a, |b| harmonic(a, b));
        if h > best.0 {
            best = (h, t);
        }
    }
    Ok(best.1)
}

/// Thresholds `0, 0.02, …, 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 50.0).collect()
}

/// Validation samples of the training domains with their logits.
pub fn validation_scored(params: &ModelParams, dataset: &Dataset) -> Result<Vec<Scored>> {
    let idx = dataset.indices(Split::Val, None);
    let logits = logits_for(params, dataset, &idx)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(r, &i)| Scored {
            logits: logits.row(r).to_vec(),
            label: dataset.samples()[i].y,
        })
        .collect())
}

/// Threshold maximizing validation H over `grid`.
pub fn select_validation_threshold(params: &ModelParams, dataset: &Dataset, grid: &[f64], conf: Confidence) -> Result<f64> {
    let scored = validation_scored(params, dataset)?;
    select_threshold(&scored, &dataset.counts().known_classes(), grid, conf)
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^{½} Σ₂ Σ₁^{½})^{½})`.
pub fn frechet_distance(mu1: &[f64], sigma1: &Matrix, mu2: &[f64], sigma2: &Matrix) -> Result<f64> {
    if mu1.len() != mu2.len() || sigma1.shape() != sigma2.shape() || sigma1.rows() != mu1.len() {
        return Err(Error::shape("frechet_distance", mu1.len(), mu2.len()));
    }
    let r1 = psd_sqrt(sigma1)?;
    let inner = r1.matmul(sigma2)?.matmul(&r1)?.symmetrized();
    let cross = psd_sqrt(&inner)?;
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = mean_term + sigma1.trace() + sigma2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// `d(i, j) = exp(−‖Σ_i − Σ_j‖_F)`.
pub fn covariance_distance_matrix(bank: &CovarianceBank) -> Matrix {
    let c = bank.classes();
    let mut out = Matrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            let v = (-bank.sigma[i].sub(&bank.sigma[j]).expect("same shape").frobenius_norm()).exp();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Mean and population covariance of the feature rows.
pub fn gaussian_fit(z: &Matrix) -> (Vec<f64>, Matrix) {
    let mut bank = CovarianceBank::new(1, z.cols());
    if z.rows() > 0 {
        bank.update_covariance(z, &vec![0; z.rows()]).expect("shapes agree");
    }
    (bank.mu.row(0).to_vec(), bank.sigma.swap_remove(0))
}

/// Fréchet distances between the feature distributions of every pair of
/// domains within `split`.
pub fn inter_domain_frechet(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<Matrix> {
    let k = dataset.domains();
    let fits: Vec<Option<(Vec<f64>, Matrix)>> = (0..k)
        .map(|d| {
            let idx = dataset.indices(split, Some(d));
            if idx.is_empty() {
                return Ok(None);
            }
            Ok(Some(gaussian_fit(&params.forward_features(&dataset.features(&idx))?)))
        })
        .collect::<Result<_>>()?;
    let mut out = Matrix::filled(k, k, f64::NAN);
    for i in 0..k {
        for j in 0..k {
            if let (Some((m1, s1)), Some((m2, s2))) = (&fits[i], &fits[j]) {
                out[(i, j)] = frechet_distance(m1, s1, m2, s2)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

/// Gallery samples ranked by `⟨e(f(x_q)), e(f(x_g))⟩`, ties by sample index;
/// the query itself is skipped.
pub fn topk_retrieval(params: &ModelParams, dataset: &Dataset, query: usize, gallery: &[usize], k: usize) -> Result<Retrieval> {
    if gallery.is_empty() {
        return Err(Error::Input("retrieval gallery is empty".into()));
    }
    let cand: Vec<usize> = gallery.iter().copied().filter(|&g| g != query).collect();
    let embed = |idx: &[usize]| -> Result<Matrix> { params.encode(&params.forward_features(&dataset.features(idx))?) };
    let q = embed(&[query])?;
    let e = if cand.is_empty() { Matrix::zeros(0, q.cols()) } else { embed(&cand)? };
    let mut ranked: Vec<(usize, f64)> = cand.iter().enumerate().map(|(r, &g)| (g, dot(q.row(0), e.row(r)))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = k > ranked.len();
    ranked.truncate(k);
    Ok(Retrieval {
        indices: ranked.iter().map(|r| r.0).collect(),
        similarities: ranked.iter().map(|r| r.1).collect(),
        truncated,
    })
}

/// Writes `domain,label,z_0,…` rows of `f(x)` for every sample.
pub fn dump_features(params: &ModelParams, dataset: &Dataset, path: &Path) -> Result<()> {
    let d_v = params.config.d_v;
    let mut out = String::from("domain,label");
    for k in 0..d_v {
        write!(out, ",z_{k}").expect("string write");
    }
    out.push('\n');
    let all: Vec<usize> = (0..dataset.samples().len()).collect();
    if !all.is_empty() {
        let z = params.forward_features(&dataset.features(&all))?;
        for (r, s) in dataset.samples().iter().enumerate() {
            write!(out, "{},{}", s.d, s.y).expect("string write");
            for v in z.row(r) {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a feature dump into `(domain, label)` keys and the feature matrix.
pub fn load_features(path: &Path) -> Result<(Vec<(usize, usize)>, Matrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols = header.split(',').count().saturating_sub(2);
    let mut keys = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| Error::Parse { path: path.into(), line: i + 2, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols + 2 {
            return Err(bad(format!("expected {} fields", cols + 2)));
        }
        let d = f[0].parse().map_err(|_| bad("invalid domain".into()))?;
        let y = f[1].parse().map_err(|_| bad("invalid label".into()))?;
        keys.push((d, y));
        for v in &f[2..] {
            data.push(v.parse::<f64>().map_err(|_| bad(format!("invalid number {v:?}")))?);
        }
    }
    let m = Matrix::from_vec(keys.len(), cols, data)?;
    Ok((keys, m))
}
