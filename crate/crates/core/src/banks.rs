//! Semantic table, per-domain visual prototype banks and the per-class
//! running covariance bank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DomainClassCounts;
use crate::mathcore::{dot, unit_normalize, Graph, Matrix, Var};
use crate::model::{ModelParams, Net};

/// Tolerance on the row norms of a [`SemanticTable`].
pub const SEMANTIC_UNIT_TOL: f64 = 1e-10;

/// Default EMA weight of the newest batch mean.
pub const DEFAULT_EMA: f64 = 0.5;

/// Unit-normalized class embeddings, one row per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SemanticTable {
    s: Matrix,
}

impl SemanticTable {
    /// Validates that every row is unit length and that there are ≥ 2 classes.
    pub fn new(s: Matrix) -> Result<Self> {
        if s.rows() < 2 {
            return Err(Error::Input(format!("semantic table needs >= 2 classes, got {}", s.rows())));
        }
        for (c, r) in s.iter_rows().enumerate() {
            let n = dot(r, r).sqrt();
            if (n - 1.0).abs() > SEMANTIC_UNIT_TOL {
                return Err(Error::Input(format!("semantic row {c} has norm {n}")));
            }
        }
        Ok(Self { s })
    }

    /// Normalizes every row first.
    pub fn from_raw(raw: &Matrix) -> Result<Self> {
        let mut s = Matrix::zeros(raw.rows(), raw.cols());
        for (c, r) in raw.iter_rows().enumerate() {
            let u = unit_normalize(r).map_err(|e| Error::Input(format!("semantic row {c}: {e}")))?;
            s.row_mut(c).copy_from_slice(&u);
        }
        Self::new(s)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.s
    }

    pub fn classes(&self) -> usize {
        self.s.rows()
    }

    pub fn dim(&self) -> usize {
        self.s.cols()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.s.row(c)
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        dot(self.s.row(i), self.s.row(j))
    }

    /// `k` classes most similar to `c`, by descending `s_cᵀs_i`, ties to the
    /// lower index.
    pub fn top_k(&self, c: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.classes()).collect();
        idx.sort_by(|&a, &b| {
            self.similarity(c, b)
                .total_cmp(&self.similarity(c, a))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

impl TryFrom<Matrix> for SemanticTable {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<SemanticTable> for Matrix {
    fn from(t: SemanticTable) -> Matrix {
        t.s
    }
}

/// Per-class means of `features` over the rows carrying each label.
pub fn class_means(features: &Matrix, labels: &[usize], classes: usize) -> Result<Vec<Option<Vec<f64>>>> {
    if features.rows() != labels.len() {
        return Err(Error::shape("class_means", features.rows(), labels.len()));
    }
    let mut sums = vec![vec![0.0; features.cols()]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &y) in features.iter_rows().zip(labels) {
        if y >= classes {
            return Err(Error::Input(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(r) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Visual prototypes `v^n` with presence masks `M^n`, one table per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    v: Vec<Matrix>,
    mask: Vec<Vec<bool>>,
    ema: f64,
}

impl PrototypeBank {
    /// Zero prototypes; masks follow the positivity pattern of `counts`.
    pub fn new(counts: &DomainClassCounts, d_v: usize, ema: f64) -> Result<Self> {
        let mask = (0..counts.domains()).map(|d| counts.mask(d)).collect();
        Self::with_mask(mask, d_v, ema)
    }

    /// One table shared by all domains, masked by the union of classes.
    pub fn global(counts: &DomainClassCounts, d_v: usize, ema: f64) -> Result<Self> {
        Self::with_mask(vec![counts.known_classes()], d_v, ema)
    }

    pub fn with_mask(mask: Vec<Vec<bool>>, d_v: usize, ema: f64) -> Result<Self> {
        if !(ema > 0.0 && ema <= 1.0) {
            return Err(Error::Config(format!("prototype ema must lie in (0, 1], got {ema}")));
        }
        let classes = mask.first().map_or(0, Vec::len);
        if mask.iter().any(|m| m.len() != classes) {
            return Err(Error::Input("ragged prototype mask".into()));
        }
        Ok(Self {
            v: vec![Matrix::zeros(classes, d_v); mask.len()],
            mask,
            ema,
        })
    }

    pub fn domains(&self) -> usize {
        self.v.len()
    }

    pub fn classes(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn ema(&self) -> f64 {
        self.ema
    }

    pub fn table(&self, domain: usize) -> &Matrix {
        &self.v[domain]
    }

    pub fn mask(&self, domain: usize) -> &[bool] {
        &self.mask[domain]
    }

    fn check_labels(&self, domain: usize, labels: &[usize]) -> Result<()> {
        if domain >= self.domains() {
            return Err(Error::Input(format!("no prototype table for domain {domain}")));
        }
        for &y in labels {
            if y >= self.classes() || !self.mask[domain][y] {
                return Err(Error::Input(format!("class {y} is not present in domain {domain}")));
            }
        }
        Ok(())
    }

    /// `v_c ← ema·mean_c + (1−ema)·v_c` for every class in the batch.
    pub fn update_prototypes(&mut self, domain: usize, features: &Matrix, labels: &[usize]) -> Result<()> {
        self.check_labels(domain, labels)?;
        if features.cols() != self.v[domain].cols() {
            return Err(Error::shape("update_prototypes", self.v[domain].cols(), features.cols()));
        }
        let means = class_means(features, labels, self.classes())?;
        let ema = self.ema;
        for (c, m) in means.iter().enumerate() {
            if let Some(m) = m {
                for (v, x) in self.v[domain].row_mut(c).iter_mut().zip(m) {
                    *v = ema * x + (1.0 - ema) * *v;
                }
            }
        }
        Ok(())
    }

    /// The updated table as a graph node: rows of classes in the batch are
    /// differentiable in `features` through the fresh batch mean; the old
    /// prototypes enter as constants.
    pub fn updated_table(&self, g: &mut Graph, domain: usize, features: Var, labels: &[usize]) -> Result<Var> {
        self.check_labels(domain, labels)?;
        let feats = g.value(features);
        if feats.cols() != self.v[domain].cols() || feats.rows() != labels.len() {
            return Err(Error::shape(
                "updated_table",
                format!("{}x{}", labels.len(), self.v[domain].cols()),
                format!("{:?}", feats.shape()),
            ));
        }
        let means = class_means(feats, labels, self.classes())?;
        let ema = self.ema;
        let mut value = self.v[domain].clone();
        let mut counts = vec![0usize; self.classes()];
        for &y in labels {
            counts[y] += 1;
        }
        for (c, m) in means.iter().enumerate() {
            if let Some(m) = m {
                for (v, x) in value.row_mut(c).iter_mut().zip(m) {
                    *v = ema * x + (1.0 - ema) * *v;
                }
            }
        }
        let labels = labels.to_vec();
        Ok(g.custom(
            &[features],
            value,
            Box::new(move |up, p, _| {
                let mut out = Matrix::zeros(p[0].rows(), p[0].cols());
                for (i, &y) in labels.iter().enumerate() {
                    let k = ema / counts[y] as f64;
                    for (o, u) in out.row_mut(i).iter_mut().zip(up.row(y)) {
                        *o = k * u;
                    }
                }
                vec![out]
            }),
        ))
    }

    /// `ŝ^n`: encoded prototypes where the mask is set, semantic rows elsewhere.
    pub fn complete_semantic(&self, params: &ModelParams, table: &SemanticTable, domain: usize) -> Result<Matrix> {
        let mut g = Graph::new();
        let mut net = Net::constant(params, &mut g, crate::model::Mode::Eval);
        let v = g.constant(self.v[domain].clone());
        let out = complete_semantic_graph(&mut g, &mut net, v, self.mask(domain), table)?;
        Ok(g.value(out).clone())
    }
}

/// Graph form of the masked completion `e(v)·M ⊕ s·M̃`.
pub fn complete_semantic_graph(
    g: &mut Graph,
    net: &mut Net,
    prototypes: Var,
    mask: &[bool],
    table: &SemanticTable,
) -> Result<Var> {
    if mask.len() != table.classes() || g.value(prototypes).rows() != table.classes() {
        return Err(Error::shape("complete_semantic", table.classes(), mask.len()));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
    let s = g.constant(table.matrix().clone());
    if idx.is_empty() {
        return Ok(s);
    }
    let rows = g.gather_rows(prototypes, &idx);
    let enc = net.encode(g, rows)?;
    g.overlay_rows(s, enc, &idx)
}

/// Row-wise decoder application `v̂ = dec(ŝ)`.
pub fn decode_prototypes(s_hat: &Matrix, params: &ModelParams) -> Result<Matrix> {
    if s_hat.cols() != params.config.d_s {
        return Err(Error::shape("decode_prototypes", params.config.d_s, s_hat.cols()));
    }
    params.decode(s_hat)
}

/// Running per-class mean, population covariance and count, pooled over
/// all training domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBank {
    pub mu: Matrix,
    pub sigma: Vec<Matrix>,
    pub n: Vec<u64>,
}

impl CovarianceBank {
    pub fn new(classes: usize, d_v: usize) -> Self {
        Self {
            mu: Matrix::zeros(classes, d_v),
            sigma: vec![Matrix::zeros(d_v, d_v); classes],
            n: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// Merges the batch statistics of every class into the running ones.
    pub fn update_covariance(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::shape("update_covariance", features.rows(), labels.len()));
        }
        if features.cols() != self.dim() {
            return Err(Error::shape("update_covariance", self.dim(), features.cols()));
        }
        if !features.is_finite() {
            return Err(Error::Input("update_covariance: non-finite feature".into()));
        }
        let d = self.dim();
        let means = class_means(features, labels, self.classes())?;
        for (c, mb) in means.into_iter().enumerate() {
            let Some(mb) = mb else { continue };
            let mut sb = Matrix::zeros(d, d);
            let mut m = 0u64;
            for (r, _) in features.iter_rows().zip(labels).filter(|(_, &y)| y == c) {
                m += 1;
                let diff: Vec<f64> = r.iter().zip(&mb).map(|(x, u)| x - u).collect();
                for i in 0..d {
                    for j in 0..d {
                        sb[(i, j)] += diff[i] * diff[j];
                    }
                }
            }
            let (nf, mf) = (self.n[c] as f64, m as f64);
            let tot = nf + mf;
            let delta: Vec<f64> = self.mu.row(c).iter().zip(&mb).map(|(a, b)| a - b).collect();
            let cross = nf * mf / (tot * tot);
            let old = &self.sigma[c];
            let mut new = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    new[(i, j)] = (nf * old[(i, j)] + sb[(i, j)]) / tot + cross * delta[i] * delta[j];
                }
            }
            self.sigma[c] = new.symmetrized();
            for (u, b) in self.mu.row_mut(c).iter_mut().zip(&mb) {
                *u = (nf * *u + mf * b) / tot;
            }
            self.n[c] += m;
        }
        Ok(())
    }

    /// Semantic-similarity-guided covariance per class. Returns the blended
    /// matrices and, per class, whether all selected counts were zero (the
    /// blend is then the zero matrix).
    pub fn blend_covariance(&self, table: &SemanticTable, k: usize, weighted: bool) -> Result<(Vec<Matrix>, Vec<bool>)> {
        let c = self.classes();
        if table.classes() != c {
            return Err(Error::shape("blend_covariance", c, table.classes()));
        }
        if k < 1 || k > c {
            return Err(Error::Input(format!("top-k must lie in 1..={c}, got {k}")));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(c);
        let mut flags = Vec::with_capacity(c);
        for cls in 0..c {
            let sel = table.top_k(cls, k);
            let total: u64 = sel.iter().map(|&i| self.n[i]).sum();
            let mut acc = Matrix::zeros(d, d);
            if total == 0 {
                out.push(acc);
                flags.push(true);
                continue;
            }
            for &i in &sel {
                let w = if weighted { self.n[i] as f64 / total as f64 } else { 1.0 / k as f64 };
                acc.axpy(w, &self.sigma[i])?;
            }
            out.push(acc);
            flags.push(false);
        }
        Ok((out, flags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::{symmetric_eigen, Rng};
    use crate::model::ModelConfig;

    fn counts(rows: Vec<Vec<u64>>) -> DomainClassCounts {
        DomainClassCounts::new(rows).unwrap()
    }

    #[test]
    fn semantic_table_validation() {
        assert!(SemanticTable::new(Matrix::identity(2)).is_ok());
        assert!(SemanticTable::new(Matrix::identity(1)).is_err());
        assert!(SemanticTable::new(Matrix::diag(&[1.0, 2.0])).is_err());
        let t = SemanticTable::from_raw(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert_eq!(t.matrix(), &Matrix::identity(2));
    }

    #[test]
    fn ema_update_examples() {
        let mut bank = PrototypeBank::new(&counts(vec![vec![2, 3, 0]]), 2, DEFAULT_EMA).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        bank.update_prototypes(0, &f, &[0, 0]).unwrap();
        assert_eq!(bank.table(0).row(0), &[1.0, 1.0]);
        assert_eq!(bank.table(0).row(1), &[0.0, 0.0]);

        let mut fixed = bank.clone();
        let at_fixed = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        fixed.update_prototypes(0, &at_fixed, &[0]).unwrap();
        assert_eq!(fixed.table(0).row(0), &[1.0, 1.0]);

        assert!(matches!(bank.update_prototypes(0, &at_fixed, &[2]), Err(Error::Input(_))));
        assert_eq!(bank.table(0).row(2), &[0.0, 0.0]);
    }

    fn identity_encoder_params(d: usize, c: usize) -> ModelParams {
        let cfg = ModelConfig { d_x: d, hidden: vec![], d_v: d, d_s: d, classes: c, use_batch_standardization: false };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.enc.w = Matrix::identity(d);
        p.dec.w = Matrix::identity(d);
        p
    }

    #[test]
    fn completion_examples() {
        let table = SemanticTable::new(Matrix::identity(2)).unwrap();
        let p = identity_encoder_params(2, 2);
        let mut bank = PrototypeBank::new(&counts(vec![vec![1, 0], vec![4, 4]]), 2, 0.5).unwrap();
        let f = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        bank.update_prototypes(0, &f, &[0]).unwrap();
        let s = bank.complete_semantic(&p, &table, 0).unwrap();
        assert!((s[(0, 0)] - 0.6).abs() < 1e-15 && (s[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(s.row(1), table.row(1));

        let empty = PrototypeBank::with_mask(vec![vec![false, false]], 2, 0.5).unwrap();
        assert_eq!(&empty.complete_semantic(&p, &table, 0).unwrap(), table.matrix());
    }

    #[test]
    fn decode_examples() {
        let p = identity_encoder_params(3, 2);
        let s = Matrix::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(decode_prototypes(&s, &p).unwrap(), s);

        let mut z = identity_encoder_params(3, 2);
        z.dec.w = Matrix::zeros(3, 3);
        z.dec.b = Matrix::row_vector(&[0.5, 1.0, 2.0]);
        let v = decode_prototypes(&s, &z).unwrap();
        for r in v.iter_rows() {
            assert_eq!(r, &[0.5, 1.0, 2.0]);
        }
    }

    fn population_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mut mu = vec![0.0; d];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut s = Matrix::zeros(d, d);
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    s[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / n;
                }
            }
        }
        (mu, s)
    }

    #[test]
    fn streaming_matches_one_shot() {
        let mut rng = Rng::new(9);
        let mut bank = CovarianceBank::new(3, 4);
        let mut seen: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
        for _ in 0..12 {
            let m = 1 + rng.below(9);
            let x = Matrix::from_vec(m, 4, rng.normal_vec(4 * m)).unwrap().map(|v| 3.0 * v + 1.0);
            let y: Vec<usize> = (0..m).map(|_| rng.below(2)).collect();
            bank.update_covariance(&x, &y).unwrap();
            for (r, &c) in x.iter_rows().zip(&y) {
                seen[c].push(r.to_vec());
            }
        }
        for c in 0..2 {
            let (mu, s) = population_cov(&seen[c]);
            assert_eq!(bank.n[c] as usize, seen[c].len());
            for (a, b) in bank.mu.row(c).iter().zip(&mu) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(bank.sigma[c].max_abs_diff(&s) < 1e-10);
        }
        assert_eq!(bank.n[2], 0);
        assert_eq!(bank.sigma[2], Matrix::zeros(4, 4));
    }

    #[test]
    fn first_sample_has_zero_covariance() {
        let mut bank = CovarianceBank::new(2, 2);
        bank.update_covariance(&Matrix::row_vector(&[1.5, -2.0]), &[1]).unwrap();
        assert_eq!(bank.mu.row(1), &[1.5, -2.0]);
        assert_eq!(bank.sigma[1], Matrix::zeros(2, 2));
        assert_eq!(bank.n, vec![0, 1]);
    }

    #[test]
    fn blend_worked_example() {
        // s0·s1 = 0.8 > s0·s2 = 0
        let table = SemanticTable::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let mut bank = CovarianceBank::new(3, 2);
        bank.n = vec![10, 2, 5];
        bank.sigma = vec![Matrix::identity(2).scale(2.0), Matrix::identity(2), Matrix::identity(2).scale(7.0)];
        let (s, flags) = bank.blend_covariance(&table, 2, true).unwrap();
        assert!(s[0].max_abs_diff(&Matrix::identity(2).scale(22.0 / 12.0)) < 1e-15);
        assert!(flags.iter().all(|f| !f));

        let (s1, _) = bank.blend_covariance(&table, 1, true).unwrap();
        assert_eq!(s1, bank.sigma);

        let (u, _) = bank.blend_covariance(&table, 2, false).unwrap();
        assert!(u[0].max_abs_diff(&Matrix::identity(2).scale(1.5)) < 1e-15);

        bank.n = vec![0, 0, 4];
        let (_, flags) = bank.blend_covariance(&table, 2, true).unwrap();
        assert_eq!(flags, vec![true, true, false]);
    }

    #[test]
    fn blend_is_psd() {
        let mut rng = Rng::new(10);
        let table = SemanticTable::from_raw(&Matrix::from_vec(5, 3, rng.normal_vec(15)).unwrap()).unwrap();
        let mut bank = CovarianceBank::new(5, 3);
        let x = Matrix::from_vec(40, 3, rng.normal_vec(120)).unwrap();
        let y: Vec<usize> = (0..40).map(|_| rng.below(5)).collect();
        bank.update_covariance(&x, &y).unwrap();
        for weighted in [true, false] {
            let (s, _) = bank.blend_covariance(&table, 3, weighted).unwrap();
            for m in &s {
                let (vals, _) = symmetric_eigen(m).unwrap();
                assert!(vals.iter().all(|&v| v >= -1e-10));
            }
        }
    }
}
