//! Synthetic long-tailed multi-domain benchmark, CSV loaders and
//! instance-level batch sampling.
//!
//! Dataset CSV grammar:
//!
//! ```text
//! header := "domain,label,split" ("," "x_" INDEX)*
//! row    := UINT "," UINT "," ("train" | "val" | "test") ("," FLOAT)*
//! ```
//!
//! Embedding CSV grammar:
//!
//! ```text
//! header := "label" ("," "s_" INDEX)*
//! row    := UINT ("," FLOAT)*
//! ```
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`, so save/load round trips are exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::banks::SemanticTable;
use crate::error::{Error, Result};
use crate::losses::DomainClassCounts;
use crate::mathcore::{unit_normalize, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
    pub split: Split,
}

/// Samples of every split, training counts and the semantic table.
///
/// Training domains are `0..K`; any further domain index appears only in
/// the val/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    counts: DomainClassCounts,
    semantic: SemanticTable,
    domains: usize,
    d_x: usize,
    train_index: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates the split invariants and derives the training counts.
    pub fn new(samples: Vec<Sample>, semantic: SemanticTable) -> Result<Self> {
        let classes = semantic.classes();
        let d_x = samples.first().map_or(0, |s| s.x.len());
        if samples.is_empty() || d_x == 0 {
            return Err(Error::Input("dataset has no samples".into()));
        }
        let domains = samples.iter().map(|s| s.d).max().unwrap_or(0) + 1;
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != d_x {
                return Err(Error::Input(format!("sample {i} has {} features, expected {d_x}", s.x.len())));
            }
            if s.y >= classes {
                return Err(Error::Input(format!("sample {i} has label {} >= {classes}", s.y)));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("sample {i} has a non-finite feature")));
            }
        }
        let train_domains = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.d + 1)
            .max()
            .unwrap_or(0);
        if train_domains == 0 {
            return Err(Error::Input("dataset has no training samples".into()));
        }
        let mut train_index = vec![Vec::new(); train_domains];
        let mut rows = vec![vec![0u64; classes]; train_domains];
        for (i, s) in samples.iter().enumerate().filter(|(_, s)| s.split == Split::Train) {
            train_index[s.d].push(i);
            rows[s.d][s.y] += 1;
        }
        if let Some(d) = train_index.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!(
                "training domains must be 0..{train_domains}; domain {d} has no training samples"
            )));
        }
        let counts = DomainClassCounts::new(rows)?;
        let known = counts.known_classes();
        for s in samples.iter().filter(|s| s.split == Split::Val) {
            if s.d >= train_domains || (known[s.y] && counts.get(s.d, s.y) == 0) {
                return Err(Error::Input(format!(
                    "val sample of class {} in domain {} has no training counterpart",
                    s.y, s.d
                )));
            }
        }
        Ok(Self {
            samples,
            counts,
            semantic,
            domains,
            d_x,
            train_index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn counts(&self) -> &DomainClassCounts {
        &self.counts
    }

    pub fn semantic(&self) -> &SemanticTable {
        &self.semantic
    }

    pub fn classes(&self) -> usize {
        self.semantic.classes()
    }

    /// All domains, including those without training data.
    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn train_domains(&self) -> usize {
        self.train_index.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn train_indices(&self, domain: usize) -> &[usize] {
        self.train_index.get(domain).map_or(&[], Vec::as_slice)
    }

    /// Indices of samples in `split`, optionally restricted to one domain.
    pub fn indices(&self, split: Split, domain: Option<usize>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && domain.is_none_or(|d| s.d == d))
            .map(|(i, _)| i)
            .collect()
    }

    /// Feature rows of the given samples.
    pub fn features(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d_x);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].x);
        }
        Matrix::from_vec(idx.len(), self.d_x, data).expect("sized")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].y).collect()
    }
}

/// One instance-level batch from a single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub domain: usize,
    pub x: Matrix,
    pub y: Vec<usize>,
}

/// `b` samples drawn uniformly with replacement from the domain's training split.
pub fn sample_batch(dataset: &Dataset, domain: usize, b: usize, rng: &mut Rng) -> Result<Batch> {
    let pool = dataset.train_indices(domain);
    if pool.is_empty() {
        return Err(Error::Input(format!("domain {domain} has no training samples")));
    }
    if b == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..b).map(|_| pool[rng.below(pool.len())]).collect();
    Ok(Batch {
        domain,
        x: dataset.features(&idx),
        y: dataset.labels(&idx),
    })
}

/// `⌊ n_max · (n_min/n_max)^{√(c−1)/curve_scale} ⌋` for the 1-based rank `c`.
pub fn longtail_counts(c: usize, n_max: u64, n_min: u64, classes: usize, curve_scale: f64) -> u64 {
    debug_assert!(c >= 1 && c <= classes);
    let expo = ((c - 1) as f64).sqrt() / curve_scale;
    let v = n_max as f64 * (expo * (n_min as f64 / n_max as f64).ln()).exp();
    // guard against 19.999999… at exact endpoints
    (v + 1e-9).floor() as u64
}

/// Number of training domains carrying each rank band of classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailDomainBudget {
    /// Domains for the most frequent third of the known classes; `None` = all.
    pub head: Option<usize>,
    pub middle: usize,
    pub tail: usize,
}

impl Default for TailDomainBudget {
    fn default() -> Self {
        Self {
            head: None,
            middle: 2,
            tail: 1,
        }
    }
}

impl TailDomainBudget {
    /// Domains carrying the class of 0-based rank `r` among `known` classes.
    pub fn domains_for(&self, r: usize, known: usize, train_domains: usize) -> usize {
        let band = 3 * r / known.max(1);
        match band {
            0 => self.head.unwrap_or(train_domains),
            1 => self.middle,
            _ => self.tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_domains: usize,
    pub d_x: usize,
    pub d_s: usize,
    /// Dimension of the latent class geometry shared by inputs and semantics.
    pub latent_dim: usize,
    pub n_max: u64,
    pub n_min: u64,
    /// Defaults to `√(known − 1)`, which makes the rarest known class hit `n_min`.
    #[serde(default)]
    pub curve_scale: Option<f64>,
    /// Rarest ranks given no training samples at all (open classes).
    #[serde(default)]
    pub open_classes: usize,
    pub anchor_spread: f64,
    pub noise_scale: f64,
    /// Spread of the per-class log-scales of the within-class covariance.
    #[serde(default = "default_cov_variation")]
    pub cov_variation: f64,
    pub semantic_noise: f64,
    #[serde(default)]
    pub tail_domain_budget: TailDomainBudget,
    pub transform_strength: f64,
    /// Dimension of the nuisance subspace carrying domain style.
    #[serde(default)]
    pub style_dim: usize,
    /// Spread of the per-domain style offsets in the nuisance subspace.
    #[serde(default)]
    pub style_strength: f64,
    pub val_per_class: usize,
    /// Validation samples per open class and training domain; they only
    /// serve threshold selection.
    #[serde(default)]
    pub val_open_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cov_variation() -> f64 {
    0.5
}

impl SyntheticConfig {
    /// Desk-scale default: 20 classes, 4 training domains and 1 held out.
    pub fn desk() -> Self {
        Self {
            classes: 20,
            train_domains: 4,
            d_x: 16,
            d_s: 12,
            latent_dim: 8,
            n_max: 400,
            n_min: 5,
            curve_scale: None,
            open_classes: 2,
            anchor_spread: 1.0,
            noise_scale: 0.5,
            cov_variation: 0.5,
            semantic_noise: 0.1,
            tail_domain_budget: TailDomainBudget::default(),
            transform_strength: 0.0,
            style_dim: 8,
            style_strength: 2.0,
            val_per_class: 20,
            val_open_per_class: 20,
            test_per_class: 100,
            seed: 0,
        }
    }

    /// Class-count curve of the long-tailed training split (50 classes,
    /// 1565 down to 20, curve scale 7).
    pub fn paper_counts() -> Self {
        Self {
            classes: 50,
            n_max: 1565,
            n_min: 20,
            curve_scale: Some(7.0),
            open_classes: 0,
            ..Self::desk()
        }
    }

    pub fn known_classes(&self) -> usize {
        self.classes - self.open_classes
    }

    pub fn curve_scale(&self) -> f64 {
        self.curve_scale
            .unwrap_or_else(|| ((self.known_classes().max(2) - 1) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("data.{field}: {why}")));
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes".into());
        }
        if self.open_classes >= self.classes {
            return bad("open_classes", "at least one class must have training data".into());
        }
        if self.train_domains < 1 {
            return bad("train_domains", "need at least 1 training domain".into());
        }
        for (f, v) in [("d_x", self.d_x), ("d_s", self.d_s), ("latent_dim", self.latent_dim)] {
            if v == 0 {
                return bad(f, "must be >= 1".into());
            }
        }
        if self.n_min < 1 || self.n_max < self.n_min {
            return bad("n_min", format!("need n_max >= n_min >= 1, got {} and {}", self.n_max, self.n_min));
        }
        if !(self.curve_scale() > 0.0) {
            return bad("curve_scale", "must be > 0".into());
        }
        let b = &self.tail_domain_budget;
        for (f, v) in [("head", b.head.unwrap_or(self.train_domains)), ("middle", b.middle), ("tail", b.tail)] {
            if v < 1 {
                return bad(
                    &format!("tail_domain_budget.{f}"),
                    "infeasible budget: a class would be assigned 0 domains".into(),
                );
            }
            if v > self.train_domains {
                return bad(
                    &format!("tail_domain_budget.{f}"),
                    format!("{v} domains requested but only {} exist", self.train_domains),
                );
            }
        }
        for (f, v) in [
            ("anchor_spread", self.anchor_spread),
            ("noise_scale", self.noise_scale),
            ("semantic_noise", self.semantic_noise),
            ("transform_strength", self.transform_strength),
            ("cov_variation", self.cov_variation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(f, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Per-class total training counts, by label (label = frequency rank − 1).
    pub fn class_totals(&self) -> Vec<u64> {
        let known = self.known_classes();
        let scale = self.curve_scale();
        (0..self.classes)
            .map(|c| {
                if c < known {
                    longtail_counts(c + 1, self.n_max, self.n_min, known, scale)
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Splits `total` across `k` carriers as evenly as possible, remainder first.
fn split_even(total: u64, k: usize) -> Vec<u64> {
    let base = total / k as u64;
    let rem = (total % k as u64) as usize;
    (0..k).map(|i| base + u64::from(i < rem)).collect()
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).expect("sized").scale(scale)
}

/// Class geometry and domain styles from which samples are drawn.
struct World {
    anchors: Matrix,
    /// Per-class diagonal scales of the within-class noise, latent space.
    scales: Matrix,
    lift: Matrix,
    nuisance: Matrix,
    styles: Vec<Style>,
    noise: f64,
}

/// Per-domain warp `x ↦ A x + t` and nuisance offset and noise scales.
struct Style {
    a: Matrix,
    t: Vec<f64>,
    offset: Vec<f64>,
    spread: Vec<f64>,
}

impl World {
    fn new(cfg: &SyntheticConfig, rng: &mut Rng) -> Self {
        let l = cfg.latent_dim;
        let anchors = random_matrix(&mut rng.fork_named("anchors"), cfg.classes, l, cfg.anchor_spread);
        // covariance scales vary smoothly with the anchor so that
        // semantically close classes share similar covariances
        let mix = random_matrix(&mut rng.fork_named("cov"), l, l, cfg.cov_variation / (l as f64).sqrt());
        let mut scales = Matrix::zeros(cfg.classes, l);
        for c in 0..cfg.classes {
            let m = mix.matvec(anchors.row(c)).expect("sized");
            for (s, v) in scales.row_mut(c).iter_mut().zip(m) {
                *s = v.exp();
            }
        }
        let lift = random_matrix(&mut rng.fork_named("lift"), cfg.d_x, l, 1.0 / (l as f64).sqrt());
        let k = cfg.style_dim;
        let nuisance = random_matrix(&mut rng.fork_named("nuisance"), cfg.d_x, k, 1.0 / (k.max(1) as f64).sqrt());
        let mut style_rng = rng.fork_named("styles");
        let styles = (0..=cfg.train_domains)
            .map(|_| {
                let r = random_matrix(&mut style_rng, cfg.d_x, cfg.d_x, 1.0);
                let rn = r.frobenius_norm() / (cfg.d_x as f64).sqrt();
                let a = Matrix::identity(cfg.d_x)
                    .add(&r.scale(cfg.transform_strength / rn.max(1e-12)))
                    .expect("square");
                let t: Vec<f64> = style_rng
                    .normal_vec(cfg.d_x)
                    .into_iter()
                    .map(|v| v * cfg.transform_strength)
                    .collect();
                let offset = style_rng.normal_vec(k).into_iter().map(|v| v * cfg.style_strength).collect();
                let spread = style_rng.normal_vec(k).into_iter().map(|v| (0.5 * v).exp() * cfg.style_strength).collect();
                Style { a, t, offset, spread }
            })
            .collect();
        Self {
            anchors,
            scales,
            lift,
            nuisance,
            styles,
            noise: cfg.noise_scale,
        }
    }

    fn draw(&self, class: usize, domain: usize, rng: &mut Rng) -> Vec<f64> {
        let u: Vec<f64> = self
            .anchors
            .row(class)
            .iter()
            .zip(self.scales.row(class))
            .map(|(a, s)| a + self.noise * s * rng.normal())
            .collect();
        let st = &self.styles[domain];
        let n: Vec<f64> = st.offset.iter().zip(&st.spread).map(|(o, s)| o + s * rng.normal()).collect();
        let mut v = self.lift.matvec(&u).expect("sized");
        if !n.is_empty() {
            for (vi, ni) in v.iter_mut().zip(self.nuisance.matvec(&n).expect("sized")) {
                *vi += ni;
            }
        }
        st.a.matvec(&v).expect("sized").iter().zip(&st.t).map(|(x, b)| x + b).collect()
    }
}

fn semantic_table(cfg: &SyntheticConfig, anchors: &Matrix, rng: &mut Rng) -> Result<SemanticTable> {
    let proj = random_matrix(&mut rng.fork_named("projection"), cfg.d_s, cfg.latent_dim, 1.0);
    let mut noise = rng.fork_named("semantic-noise");
    let mut s = Matrix::zeros(cfg.classes, cfg.d_s);
    for c in 0..cfg.classes {
        let p: Vec<f64> = proj
            .matvec(anchors.row(c))
            .expect("sized")
            .into_iter()
            .map(|v| v + cfg.semantic_noise * noise.normal())
            .collect();
        let u = unit_normalize(&p)
            .map_err(|e| Error::Config(format!("data: degenerate semantic row for class {c}: {e}")))?;
        s.row_mut(c).copy_from_slice(&u);
    }
    SemanticTable::new(s)
}

/// Per-domain training counts implied by the config (before drawing samples).
pub fn assign_counts(cfg: &SyntheticConfig, rng: &mut Rng) -> Vec<Vec<u64>> {
    let known = cfg.known_classes();
    let totals = cfg.class_totals();
    let mut rows = vec![vec![0u64; cfg.classes]; cfg.train_domains];
    for (c, &n) in totals.iter().enumerate().take(known) {
        let k = cfg
            .tail_domain_budget
            .domains_for(c, known, cfg.train_domains)
            .min(n as usize)
            .max(1);
        let carriers = rng.choose_distinct(cfg.train_domains, k);
        let mut carriers_sorted = carriers.clone();
        carriers_sorted.sort_unstable();
        for (d, m) in carriers_sorted.into_iter().zip(split_even(n, k)) {
            rows[d][c] = m;
        }
    }
    // every training domain needs at least one class; give an empty one a
    // share of the head class
    for d in 0..cfg.train_domains {
        if rows[d].iter().all(|&n| n == 0) {
            let donor = (0..cfg.train_domains).max_by_key(|&e| rows[e][0]).expect("nonempty");
            if rows[donor][0] > 1 {
                rows[donor][0] -= 1;
                rows[d][0] += 1;
            }
        }
    }
    rows
}

/// Draws the full benchmark. Training domains are `0..K`; domain `K` is
/// held out and appears in the test split only.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let world = World::new(cfg, &mut root.fork_named("world"));
    let semantic = semantic_table(cfg, &world.anchors, &mut root.fork_named("semantic"))?;
    let rows = assign_counts(cfg, &mut root.fork_named("assignment"));
    let mut samples = Vec::new();
    for (d, row) in rows.iter().enumerate() {
        let mut rng = root.fork_named("train").fork(d as u64);
        for (c, &n) in row.iter().enumerate() {
            for _ in 0..n {
                samples.push(Sample { x: world.draw(c, d, &mut rng), y: c, d, split: Split::Train });
            }
        }
    }
    for (d, row) in rows.iter().enumerate() {
        let mut rng = root.fork_named("val").fork(d as u64);
        for (c, &n) in row.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for _ in 0..cfg.val_per_class {
                samples.push(Sample { x: world.draw(c, d, &mut rng), y: c, d, split: Split::Val });
            }
        }
        for c in cfg.known_classes()..cfg.classes {
            for _ in 0..cfg.val_open_per_class {
                samples.push(Sample { x: world.draw(c, d, &mut rng), y: c, d, split: Split::Val });
            }
        }
    }
    for d in 0..=cfg.train_domains {
        let mut rng = root.fork_named("test").fork(d as u64);
        for c in 0..cfg.classes {
            for _ in 0..cfg.test_per_class {
                samples.push(Sample { x: world.draw(c, d, &mut rng), y: c, d, split: Split::Test });
            }
        }
    }
    Dataset::new(samples, semantic)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_floats(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("invalid number {f:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, line, format!("non-finite value {f:?}")))
            }
        })
        .collect()
}

fn check_header(path: &Path, header: Option<&str>, fixed: &[&str], prefix: &str) -> Result<usize> {
    let header = header.ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < fixed.len() || cols[..fixed.len()] != *fixed {
        return Err(parse_err(path, 1, format!("header must start with {}", fixed.join(","))));
    }
    for (k, c) in cols[fixed.len()..].iter().enumerate() {
        if *c != format!("{prefix}{k}") {
            return Err(parse_err(path, 1, format!("expected column {prefix}{k}, found {c:?}")));
        }
    }
    Ok(cols.len() - fixed.len())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, ",{v}").expect("string write");
    }
}

/// Parses the embedding CSV; rows are re-normalized to unit length.
pub fn load_embeddings(path: &Path, classes: usize, d_s: usize) -> Result<SemanticTable> {
    let text = read(path)?;
    let mut lines = text.lines();
    let dim = check_header(path, lines.next(), &["label"], "s_")?;
    if dim != d_s {
        return Err(parse_err(path, 1, format!("expected {d_s} embedding columns, found {dim}")));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; classes];
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != d_s + 1 {
            return Err(parse_err(path, ln, format!("expected {} fields, found {}", d_s + 1, fields.len())));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("invalid label {:?}", fields[0])))?;
        if label >= classes {
            return Err(parse_err(path, ln, format!("label {label} out of range for {classes} classes")));
        }
        if rows[label].is_some() {
            return Err(parse_err(path, ln, format!("duplicate label {label}")));
        }
        let v = parse_floats(path, ln, &fields[1..])?;
        let u = unit_normalize(&v).map_err(|e| parse_err(path, ln, e.to_string()))?;
        rows[label] = Some(u);
    }
    if let Some(missing) = rows.iter().position(Option::is_none) {
        return Err(parse_err(path, text.lines().count(), format!("missing embedding for class {missing}")));
    }
    let data: Vec<f64> = rows.into_iter().flatten().flatten().collect();
    SemanticTable::new(Matrix::from_vec(classes, d_s, data)?)
}

pub fn save_embeddings(table: &SemanticTable, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for k in 0..table.dim() {
        write!(out, ",s_{k}").expect("string write");
    }
    out.push('\n');
    for c in 0..table.classes() {
        write!(out, "{c}").expect("string write");
        push_floats(&mut out, table.row(c));
        out.push('\n');
    }
    write(path, &out)
}

pub fn save_samples(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("domain,label,split");
    for k in 0..dataset.d_x() {
        write!(out, ",x_{k}").expect("string write");
    }
    out.push('\n');
    for s in dataset.samples() {
        write!(out, "{},{},{}", s.d, s.y, s.split.as_str()).expect("string write");
        push_floats(&mut out, &s.x);
        out.push('\n');
    }
    write(path, &out)
}

/// Parses a dataset CSV together with its embedding CSV.
pub fn load_dataset(samples_path: &Path, embeddings_path: &Path, classes: usize, d_s: usize) -> Result<Dataset> {
    let semantic = load_embeddings(embeddings_path, classes, d_s)?;
    let text = read(samples_path)?;
    let mut lines = text.lines();
    let d_x = check_header(samples_path, lines.next(), &["domain", "label", "split"], "x_")?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != d_x + 3 {
            return Err(parse_err(samples_path, ln, format!("expected {} fields, found {}", d_x + 3, fields.len())));
        }
        let d: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(samples_path, ln, format!("invalid domain {:?}", fields[0])))?;
        let y: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(samples_path, ln, format!("invalid label {:?}", fields[1])))?;
        if y >= classes {
            return Err(parse_err(samples_path, ln, format!("label {y} out of range for {classes} classes")));
        }
        let split = Split::parse(fields[2])
            .ok_or_else(|| parse_err(samples_path, ln, format!("invalid split {:?}", fields[2])))?;
        let x = parse_floats(samples_path, ln, &fields[3..])?;
        samples.push(Sample { x, y, d, split });
    }
    Dataset::new(samples, semantic)
}
