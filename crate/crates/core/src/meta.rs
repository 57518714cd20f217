//! Episodic meta-train / meta-test optimization with ablation toggles.
//!
//! One step: split the training domains, compute the meta-train loss on one
//! batch per meta-train domain (updating the prototype and covariance banks
//! in between, in the order of the training algorithm), take an inner step,
//! evaluate the meta-test loss at the inner parameters on the held-aside
//! domains, and finally step the original parameters on
//! `L_mtr + w_mte·L_mte`.

use serde::{Deserialize, Serialize};

use crate::banks::{complete_semantic_graph, CovarianceBank, PrototypeBank, SemanticTable, DEFAULT_EMA};
use crate::data::{sample_batch, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::closed_set_accuracy;
use crate::losses::{ops, s2z_graph, AugDenominator, AugParams, ContrastiveParams, DomainClassCounts};
use crate::mathcore::{fd_grad_with, Graph, Matrix, Rng, RngState, Var};
use crate::model::{Mode, ModelConfig, ModelParams, Net, Observed};

/// Largest parameter count for which the finite-difference meta-gradient
/// may be requested.
pub const FD_EXACT_MAX_PARAMS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    /// Plain softmax cross-entropy.
    Ce,
    /// Distribution-calibrated cross-entropy.
    Dc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// The meta-test gradient at θ' stands in for its gradient w.r.t. θ.
    #[default]
    FirstOrder,
    /// Full derivative through the inner step, by central differences.
    FdExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub classifier: Classifier,
    pub use_z2s: bool,
    pub use_s2s: bool,
    pub use_s2z: bool,
    pub use_aug: bool,
    pub use_meta: bool,
    /// One prototype table shared by every domain.
    pub single_prototype: bool,
    /// Unweighted mean in the covariance blend.
    pub unweighted_blend: bool,
}

impl Ablation {
    pub const ROWS: [&'static str; 12] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l"];

    /// Every component on.
    pub fn full() -> Self {
        Self {
            classifier: Classifier::Dc,
            use_z2s: true,
            use_s2s: true,
            use_s2z: true,
            use_aug: true,
            use_meta: true,
            single_prototype: false,
            unweighted_blend: false,
        }
    }

    /// Configuration of an ablation row; accepts `"j"` or `"row_j"`.
    pub fn row(id: &str) -> Result<Self> {
        let key = id.strip_prefix("row_").unwrap_or(id);
        let none = Self {
            classifier: Classifier::Dc,
            use_z2s: false,
            use_s2s: false,
            use_s2z: false,
            use_aug: false,
            use_meta: false,
            single_prototype: false,
            unweighted_blend: false,
        };
        let a = match key {
            "a" => Self { classifier: Classifier::Ce, ..none },
            "b" => none,
            "c" => Self { classifier: Classifier::Ce, use_meta: true, ..none },
            "d" => Self { use_meta: true, ..none },
            "e" => Self { use_z2s: true, ..none },
            "f" => Self { use_z2s: true, use_s2s: true, ..none },
            "g" => Self { use_z2s: true, use_s2s: true, use_s2z: true, ..none },
            "h" => Self { use_aug: true, ..none },
            "i" => Self { use_meta: false, ..Self::full() },
            "j" => Self::full(),
            "k" => Self { single_prototype: true, ..Self::full() },
            "l" => Self { unweighted_blend: true, ..Self::full() },
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row {other:?}; expected one of a..l"
                )))
            }
        };
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner learning rate.
    pub beta1: f64,
    /// Outer learning rate, decayed by 0.1 at 40% and 80% of training.
    pub beta2: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w_mte: f64,
    /// Training length in epochs.
    pub t_max: usize,
    /// Epoch from which covariances are tracked and augmentation applies.
    pub t_sigma: usize,
    #[serde(default = "one")]
    pub steps_per_epoch: usize,
    /// Per-domain batch size.
    pub batch_size: usize,
    pub cp: ContrastiveParams,
    pub ap: AugParams,
    #[serde(default)]
    pub meta_mode: MetaMode,
    pub ablation: Ablation,
    #[serde(default = "one")]
    pub mte_size: usize,
    #[serde(default = "default_ema")]
    pub ema: f64,
    #[serde(default)]
    pub aug_denominator_variant: AugDenominator,
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
    /// L2 coefficient added to the outer gradient; 0 is plain SGD.
    #[serde(default)]
    pub weight_decay: f64,
    /// Steps between validation evaluations; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_ema() -> f64 {
    DEFAULT_EMA
}

fn default_fd_eps() -> f64 {
    1e-5
}

impl TrainConfig {
    /// Hyperparameters of the reference configuration.
    pub fn paper_s1() -> Self {
        Self {
            beta1: 0.2,
            beta2: 0.1,
            w1: 0.1,
            w2: 0.1,
            w3: 0.1,
            w4: 0.1,
            w_mte: 0.3,
            t_max: 100,
            t_sigma: 40,
            steps_per_epoch: 1,
            batch_size: 48,
            cp: ContrastiveParams { alpha: 0.1, tau: 1.0 / 30.0 },
            ap: AugParams { lambda: 5.0, k: 5 },
            meta_mode: MetaMode::FirstOrder,
            ablation: Ablation::full(),
            mte_size: 1,
            ema: DEFAULT_EMA,
            aug_denominator_variant: AugDenominator::Derivation,
            fd_eps: 1e-5,
            weight_decay: 0.0,
            eval_every: 0,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.t_max * self.steps_per_epoch
    }

    /// First step at which covariances are tracked.
    pub fn sigma_step(&self) -> usize {
        self.t_sigma * self.steps_per_epoch
    }

    /// Outer learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps() as f64;
        let passed = [0.4, 0.8].iter().filter(|&&m| step as f64 >= m * total).count();
        self.beta2 * 0.1f64.powi(passed as i32)
    }

    pub fn validate(&self, train_domains: usize, classes: usize, num_params: usize) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("train.{field}: {why}")));
        for (f, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("w4", self.w4),
            ("w_mte", self.w_mte),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(f, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.t_sigma > self.t_max {
            return bad("t_sigma", format!("{} exceeds t_max {}", self.t_sigma, self.t_max));
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        self.cp.validate()?;
        self.ap.validate(classes)?;
        if self.ablation.use_meta && (self.mte_size < 1 || self.mte_size >= train_domains) {
            return bad(
                "mte_size",
                format!("must satisfy 1 <= mte_size < {train_domains} training domains, got {}", self.mte_size),
            );
        }
        if !(self.ema > 0.0 && self.ema <= 1.0) {
            return bad("ema", format!("must lie in (0, 1], got {}", self.ema));
        }
        if !(self.fd_eps > 0.0 && self.fd_eps <= 1e-2) {
            return bad("fd_eps", format!("must lie in (0, 1e-2], got {}", self.fd_eps));
        }
        if self.meta_mode == MetaMode::FdExact && num_params > FD_EXACT_MAX_PARAMS {
            return bad(
                "meta_mode",
                format!("fd_exact needs <= {FD_EXACT_MAX_PARAMS} parameters, model has {num_params}"),
            );
        }
        Ok(())
    }
}

/// Immutable inputs shared by every step.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: TrainConfig,
    pub counts: DomainClassCounts,
    pub table: SemanticTable,
}

impl Context {
    fn proto_slot(&self, domain: usize) -> usize {
        if self.cfg.ablation.single_prototype { 0 } else { domain }
    }

    fn aug_active(&self, step: usize) -> bool {
        self.cfg.ablation.use_aug && step >= self.cfg.sigma_step()
    }
}

/// Mutable per-run state besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Banks {
    pub protos: PrototypeBank,
    pub cov: CovarianceBank,
    /// Blended covariances of the current step, when augmentation is active.
    pub sigma_prime: Option<Vec<Matrix>>,
}

impl Banks {
    pub fn new(ctx: &Context, d_v: usize) -> Result<Self> {
        let protos = if ctx.cfg.ablation.single_prototype {
            PrototypeBank::global(&ctx.counts, d_v, ctx.cfg.ema)?
        } else {
            PrototypeBank::new(&ctx.counts, d_v, ctx.cfg.ema)?
        };
        Ok(Self {
            protos,
            cov: CovarianceBank::new(ctx.counts.classes(), d_v),
            sigma_prime: None,
        })
    }
}

/// Random disjoint split of the training domains, both halves sorted.
pub fn split_domains(train_domains: &[usize], mte_size: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if mte_size < 1 || mte_size >= train_domains.len() {
        return Err(Error::Config(format!(
            "mte_size must satisfy 1 <= mte_size < {}, got {mte_size}",
            train_domains.len()
        )));
    }
    let picks = rng.choose_distinct(train_domains.len(), mte_size);
    let mut mte: Vec<usize> = picks.iter().map(|&i| train_domains[i]).collect();
    mte.sort_unstable();
    let mtr = train_domains.iter().copied().filter(|d| !mte.contains(d)).collect();
    Ok((mtr, mte))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MtrTerms {
    pub cls: f64,
    pub z2s: f64,
    pub s2s: f64,
    pub s2z: f64,
    pub aug: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MteTerms {
    pub mcls: f64,
    pub mz2s: f64,
    pub maug: f64,
}

pub struct MtrOutput {
    pub value: f64,
    pub terms: MtrTerms,
    pub grads: Vec<Matrix>,
    pub observed: Vec<Observed>,
}

pub struct MteOutput {
    pub value: f64,
    pub terms: MteTerms,
    pub grads: Option<Vec<Matrix>>,
}

fn stack(batches: &[Batch]) -> Result<(Matrix, Vec<usize>, Vec<usize>)> {
    if batches.is_empty() || batches.iter().any(|b| b.y.is_empty()) {
        return Err(Error::Input("empty batch".into()));
    }
    let cols = batches[0].x.cols();
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    for b in batches {
        data.extend_from_slice(b.x.as_slice());
        y.extend_from_slice(&b.y);
        d.extend(std::iter::repeat_n(b.domain, b.y.len()));
    }
    Ok((Matrix::from_vec(y.len(), cols, data)?, y, d))
}

fn classification(g: &mut Graph, ctx: &Context, logits: Var, y: &[usize], d: &[usize]) -> Result<Var> {
    match ctx.cfg.ablation.classifier {
        Classifier::Ce => ops::ce_mean(g, logits, y, None),
        Classifier::Dc => {
            let w: Vec<Vec<f64>> = d.iter().map(|&dom| ctx.counts.weights(dom)).collect();
            for (&yi, &di) in y.iter().zip(d) {
                if ctx.counts.get(di, yi) == 0 {
                    return Err(Error::Input(format!("class {yi} has no training samples in domain {di}")));
                }
            }
            ops::ce_mean(g, logits, y, Some(&w))
        }
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let k = 1.0 / terms.len() as f64;
    let pairs: Vec<(Var, f64)> = terms.iter().map(|&t| (t, k)).collect();
    Ok(Some(g.weighted_sum(&pairs)?))
}

fn value(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item())
}

/// Builds `L_mtr` on `g` and advances the banks (prototypes, then
/// covariances) exactly once.
pub fn meta_train_graph(
    g: &mut Graph,
    net: &mut Net,
    banks: &mut Banks,
    ctx: &Context,
    batches: &[Batch],
    step: usize,
) -> Result<(Var, MtrTerms)> {
    let cfg = &ctx.cfg;
    let ab = &cfg.ablation;
    let (x, y, d) = stack(batches)?;
    let xv = g.constant(x);
    let z = net.features(g, xv)?;
    let logits = net.logits(g, z)?;
    let cls = classification(g, ctx, logits, &y, &d)?;

    let z2s = if ab.use_z2s {
        let e = net.encode(g, z)?;
        let s = g.constant(ctx.table.matrix().clone());
        Some(ops::z2s_mean(g, e, &y, s, &cfg.cp)?)
    } else {
        None
    };

    // prototype update from f(x), then completed tables
    let mut slots: Vec<(usize, Vec<usize>)> = Vec::new();
    for (start, b) in batches.iter().scan(0, |off, b| {
        let s = *off;
        *off += b.y.len();
        Some((s, b))
    }) {
        let rows: Vec<usize> = (start..start + b.y.len()).collect();
        let slot = ctx.proto_slot(b.domain);
        match slots.iter_mut().find(|(s, _)| *s == slot) {
            Some((_, r)) => r.extend(rows),
            None => slots.push((slot, rows)),
        }
    }
    let mut s_hat = Vec::new();
    let mut v_hat = Vec::new();
    let need_tables = ab.use_s2s || ab.use_s2z;
    for (slot, rows) in &slots {
        let labels: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
        if need_tables {
            let zs = g.gather_rows(z, rows);
            let v_new = banks.protos.updated_table(g, *slot, zs, &labels)?;
            let sh = complete_semantic_graph(g, net, v_new, banks.protos.mask(*slot), &ctx.table)?;
            let vh = net.decode(g, sh)?;
            s_hat.push(sh);
            v_hat.push(vh);
        }
        let zs_val = g.value(z).select_rows(rows);
        banks.protos.update_prototypes(*slot, &zs_val, &labels)?;
    }

    let s2s = if ab.use_s2s {
        let mut pair_terms = Vec::new();
        for m in 0..s_hat.len() {
            for n in 0..s_hat.len() {
                if m != n {
                    pair_terms.push(ops::s2s(g, s_hat[m], s_hat[n], &cfg.cp)?);
                }
            }
        }
        let s = g.constant(ctx.table.matrix().clone());
        let mut sem_terms = Vec::new();
        for &sh in &s_hat {
            sem_terms.push(ops::s2s(g, sh, s, &cfg.cp)?);
        }
        let parts: Vec<Var> = [mean_of(g, &pair_terms)?, mean_of(g, &sem_terms)?].into_iter().flatten().collect();
        let pairs: Vec<(Var, f64)> = parts.iter().map(|&p| (p, 1.0)).collect();
        Some(g.weighted_sum(&pairs)?)
    } else {
        None
    };

    let s2z = if ab.use_s2z {
        let mut terms = Vec::new();
        for &vh in &v_hat {
            terms.push(s2z_graph(g, net, vh, &ctx.table, &cfg.cp)?);
        }
        mean_of(g, &terms)?
    } else {
        None
    };

    banks.sigma_prime = None;
    let aug = if ctx.aug_active(step) {
        banks.cov.update_covariance(g.value(z), &y)?;
        let (sp, _) = banks.cov.blend_covariance(&ctx.table, cfg.ap.k, !ab.unweighted_blend)?;
        let l = ops::aug_mean(g, z, net.cls.w, net.cls.b, &y, &sp, cfg.ap.lambda, cfg.aug_denominator_variant)?;
        banks.sigma_prime = Some(sp);
        Some(l)
    } else {
        None
    };

    let terms = MtrTerms {
        cls: g.value(cls).item(),
        z2s: value(g, z2s),
        s2s: value(g, s2s),
        s2z: value(g, s2z),
        aug: value(g, aug),
    };
    let mut parts = vec![(cls, 1.0)];
    for (v, w) in [(z2s, cfg.w1), (s2s, cfg.w2), (s2z, cfg.w3), (aug, cfg.w4)] {
        if let Some(v) = v {
            parts.push((v, w));
        }
    }
    Ok((g.weighted_sum(&parts)?, terms))
}

/// Builds `L_mte` at the inner parameters bound in `net`. `mtr_domains` are
/// the domains whose completed tables the meta-test embeddings align to.
pub fn meta_test_graph(
    g: &mut Graph,
    net: &mut Net,
    banks: &Banks,
    ctx: &Context,
    batches: &[Batch],
    mtr_domains: &[usize],
    step: usize,
) -> Result<(Var, MteTerms)> {
    if let Some(b) = batches.iter().find(|b| mtr_domains.contains(&b.domain)) {
        return Err(Error::Protocol(format!(
            "domain {} is in both the meta-train and meta-test split",
            b.domain
        )));
    }
    let cfg = &ctx.cfg;
    let ab = &cfg.ablation;
    let (x, y, d) = stack(batches)?;
    let xv = g.constant(x);
    let z = net.features(g, xv)?;
    let logits = net.logits(g, z)?;
    let mcls = classification(g, ctx, logits, &y, &d)?;

    let mz2s = if ab.use_z2s {
        let e = net.encode(g, z)?;
        let s = g.constant(ctx.table.matrix().clone());
        let to_sem = ops::z2s_mean(g, e, &y, s, &cfg.cp)?;
        let mut slots: Vec<usize> = mtr_domains.iter().map(|&n| ctx.proto_slot(n)).collect();
        slots.dedup();
        let mut to_proto = Vec::new();
        for slot in slots {
            let v = g.constant(banks.protos.table(slot).clone());
            let sh = complete_semantic_graph(g, net, v, banks.protos.mask(slot), &ctx.table)?;
            to_proto.push(ops::z2s_mean(g, e, &y, sh, &cfg.cp)?);
        }
        let mut parts = vec![(to_sem, 1.0)];
        if let Some(p) = mean_of(g, &to_proto)? {
            parts.push((p, 1.0));
        }
        Some(g.weighted_sum(&parts)?)
    } else {
        None
    };

    let maug = match (&banks.sigma_prime, ctx.aug_active(step)) {
        (Some(sp), true) => Some(ops::aug_mean(
            g,
            z,
            net.cls.w,
            net.cls.b,
            &y,
            sp,
            cfg.ap.lambda,
            cfg.aug_denominator_variant,
        )?),
        _ => None,
    };

    let terms = MteTerms {
        mcls: g.value(mcls).item(),
        mz2s: value(g, mz2s),
        maug: value(g, maug),
    };
    let mut parts = vec![(mcls, 1.0)];
    for (v, w) in [(mz2s, cfg.w1), (maug, cfg.w4)] {
        if let Some(v) = v {
            parts.push((v, w));
        }
    }
    Ok((g.weighted_sum(&parts)?, terms))
}

/// `L_mtr`, its gradient, and the bank updates of the meta-train phase.
pub fn meta_train_losses(
    params: &ModelParams,
    batches: &[Batch],
    banks: &mut Banks,
    ctx: &Context,
    step: usize,
) -> Result<MtrOutput> {
    let mut g = Graph::new();
    let mut net = Net::param(params, &mut g, Mode::Train);
    let (loss, terms) = meta_train_graph(&mut g, &mut net, banks, ctx, batches, step)?;
    let gr = g.backward(loss)?;
    let grads: Vec<Matrix> = net.vars().iter().map(|&v| gr.get(v)).collect();
    Ok(MtrOutput {
        value: g.value(loss).item(),
        terms,
        grads,
        observed: net.take_observed(),
    })
}

/// `L_mte` at `params_prime`, with its gradient w.r.t. `params_prime` when requested.
pub fn meta_test_losses(
    params_prime: &ModelParams,
    batches: &[Batch],
    banks: &Banks,
    ctx: &Context,
    mtr_domains: &[usize],
    step: usize,
    with_grad: bool,
) -> Result<MteOutput> {
    let mut g = Graph::new();
    let mut net = if with_grad {
        Net::param(params_prime, &mut g, Mode::Train)
    } else {
        Net::constant(params_prime, &mut g, Mode::Train)
    };
    let (loss, terms) = meta_test_graph(&mut g, &mut net, banks, ctx, batches, mtr_domains, step)?;
    let grads = if with_grad {
        let gr = g.backward(loss)?;
        Some(net.vars().iter().map(|&v| gr.get(v)).collect())
    } else {
        None
    };
    Ok(MteOutput {
        value: g.value(loss).item(),
        terms,
        grads,
    })
}

/// `θ' = θ − β₁∇L_mtr`.
pub fn inner_step(params: &ModelParams, grads: &[Matrix], beta1: f64) -> Result<ModelParams> {
    params.apply_blocks(grads, beta1)
}

/// `θ − lr·(∇L_mtr + w_mte·∇L_mte)`.
pub fn outer_step(params: &ModelParams, mtr: &[Matrix], mte: Option<&[Matrix]>, w_mte: f64, lr: f64) -> Result<ModelParams> {
    let total = combine(mtr, mte, w_mte)?;
    params.apply_blocks(&total, lr)
}

fn combine(mtr: &[Matrix], mte: Option<&[Matrix]>, w_mte: f64) -> Result<Vec<Matrix>> {
    let mut total = mtr.to_vec();
    if let Some(mte) = mte {
        if mte.len() != total.len() {
            return Err(Error::shape("outer_step", total.len(), mte.len()));
        }
        for (t, m) in total.iter_mut().zip(mte) {
            t.axpy(w_mte, m)?;
        }
    }
    Ok(total)
}

/// Gradient w.r.t. θ of `L_mte(θ − β₁∇L_mtr(θ))`, by central differences.
/// Each evaluation replays the meta-train phase on a copy of `banks_before`.
pub fn fd_meta_test_gradient(
    params: &ModelParams,
    banks_before: &Banks,
    ctx: &Context,
    mtr: &[Batch],
    mte: &[Batch],
    mtr_domains: &[usize],
    step: usize,
) -> Result<Vec<Matrix>> {
    let n = params.num_params();
    if n > FD_EXACT_MAX_PARAMS {
        return Err(Error::Config(format!(
            "fd_exact needs <= {FD_EXACT_MAX_PARAMS} parameters, model has {n}"
        )));
    }
    let phi = |blocks: &[Matrix]| -> Result<f64> {
        let p = params.with_blocks(blocks)?;
        let mut banks = banks_before.clone();
        let out = meta_train_losses(&p, mtr, &mut banks, ctx, step)?;
        let prime = inner_step(&p, &out.grads, ctx.cfg.beta1)?;
        Ok(meta_test_losses(&prime, mte, &banks, ctx, mtr_domains, step, false)?.value)
    };
    Ok(fd_grad_with(phi, &params.blocks(), ctx.cfg.fd_eps)?.grads)
}

/// Meta-train gradient with the first-order and finite-difference meta-test
/// gradients at one state, for comparing the two modes.
pub struct MetaGradients {
    pub mtr: Vec<Matrix>,
    pub first_order_mte: Vec<Matrix>,
    pub exact_mte: Vec<Matrix>,
}

impl MetaGradients {
    pub fn first_order_outer(&self, w_mte: f64) -> Vec<f64> {
        flat(&combine(&self.mtr, Some(&self.first_order_mte), w_mte).expect("same shapes"))
    }

    pub fn exact_outer(&self, w_mte: f64) -> Vec<f64> {
        flat(&combine(&self.mtr, Some(&self.exact_mte), w_mte).expect("same shapes"))
    }
}

pub fn flat(blocks: &[Matrix]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect()
}

pub fn meta_gradients(
    params: &ModelParams,
    banks: &Banks,
    ctx: &Context,
    mtr: &[Batch],
    mte: &[Batch],
    step: usize,
) -> Result<MetaGradients> {
    let mtr_domains: Vec<usize> = mtr.iter().map(|b| b.domain).collect();
    let mut after = banks.clone();
    let out = meta_train_losses(params, mtr, &mut after, ctx, step)?;
    let prime = inner_step(params, &out.grads, ctx.cfg.beta1)?;
    let fo = meta_test_losses(&prime, mte, &after, ctx, &mtr_domains, step, true)?;
    let exact = fd_meta_test_gradient(params, banks, ctx, mtr, mte, &mtr_domains, step)?;
    Ok(MetaGradients {
        mtr: out.grads,
        first_order_mte: fo.grads.expect("requested"),
        exact_mte: exact,
    })
}

/// Everything logged for one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr_outer: f64,
    pub mtr_domains: Vec<usize>,
    pub mte_domains: Vec<usize>,
    pub l_cls: f64,
    pub l_z2s: f64,
    pub l_s2s: f64,
    pub l_s2z: f64,
    pub l_aug: f64,
    pub l_mcls: f64,
    pub l_mz2s: f64,
    pub l_maug: f64,
    pub l_mtr: f64,
    pub l_mte: f64,
    pub grad_norm_mtr: f64,
    pub grad_norm_mte: f64,
    pub grad_norm_total: f64,
}

fn norm(blocks: &[Matrix]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| b.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Serializable trainer position, sufficient to resume bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub params: ModelParams,
    pub banks: Banks,
    pub rng: RngState,
    pub mte_batches_read: u64,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    ctx: Context,
    params: ModelParams,
    banks: Banks,
    rng: Rng,
    step: usize,
    mte_batches_read: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        model.validate()?;
        if model.d_x != dataset.d_x() || model.classes != dataset.classes() || model.d_s != dataset.semantic().dim() {
            return Err(Error::Config(format!(
                "model dims (d_x {}, classes {}, d_s {}) do not match the dataset (d_x {}, classes {}, d_s {})",
                model.d_x,
                model.classes,
                model.d_s,
                dataset.d_x(),
                dataset.classes(),
                dataset.semantic().dim()
            )));
        }
        let root = Rng::new(cfg.seed);
        let params = ModelParams::init(model, &mut root.fork_named("init"))?;
        cfg.validate(dataset.train_domains(), dataset.classes(), params.num_params())?;
        let ctx = Context {
            cfg: cfg.clone(),
            counts: dataset.counts().clone(),
            table: dataset.semantic().clone(),
        };
        let banks = Banks::new(&ctx, model.d_v)?;
        Ok(Self {
            dataset,
            ctx,
            params,
            banks,
            rng: root.fork_named("train"),
            step: 0,
            mte_batches_read: 0,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            params: self.params.clone(),
            banks: self.banks.clone(),
            rng: self.rng.state(),
            mte_batches_read: self.mte_batches_read,
        }
    }

    pub fn restore(&mut self, state: TrainerState) -> Result<()> {
        if state.params.block_shapes() != self.params.block_shapes() {
            return Err(Error::Config("checkpoint parameters do not match the model config".into()));
        }
        self.step = state.step;
        self.params = state.params;
        self.banks = state.banks;
        self.rng = Rng::from_state(&state.rng)?;
        self.mte_batches_read = state.mte_batches_read;
        Ok(())
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn banks(&self) -> &Banks {
        &self.banks
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.ctx.cfg.total_steps()
    }

    /// Meta-test batches drawn so far.
    pub fn mte_batches_read(&self) -> u64 {
        self.mte_batches_read
    }

    fn batches(&mut self, domains: &[usize]) -> Result<Vec<Batch>> {
        domains
            .iter()
            .map(|&d| sample_batch(self.dataset, d, self.ctx.cfg.batch_size, &mut self.rng))
            .collect()
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = self.ctx.cfg.clone();
        let all: Vec<usize> = (0..self.dataset.train_domains()).collect();
        let (mtr_domains, mte_domains) = if cfg.ablation.use_meta {
            split_domains(&all, cfg.mte_size, &mut self.rng)?
        } else {
            (all, Vec::new())
        };
        let mtr = self.batches(&mtr_domains)?;
        let banks_before = (cfg.meta_mode == MetaMode::FdExact).then(|| self.banks.clone());
        let out = meta_train_losses(&self.params, &mtr, &mut self.banks, &self.ctx, self.step)?;

        let mut mte_terms = MteTerms::default();
        let mut l_mte = 0.0;
        let mut g_mte: Option<Vec<Matrix>> = None;
        if cfg.ablation.use_meta && cfg.w_mte > 0.0 {
            let mte = self.batches(&mte_domains)?;
            self.mte_batches_read += mte.len() as u64;
            let prime = inner_step(&self.params, &out.grads, cfg.beta1)?;
            let fo = meta_test_losses(
                &prime,
                &mte,
                &self.banks,
                &self.ctx,
                &mtr_domains,
                self.step,
                cfg.meta_mode == MetaMode::FirstOrder,
            )?;
            mte_terms = fo.terms;
            l_mte = fo.value;
            g_mte = match cfg.meta_mode {
                MetaMode::FirstOrder => fo.grads,
                MetaMode::FdExact => Some(fd_meta_test_gradient(
                    &self.params,
                    banks_before.as_ref().expect("cloned for fd_exact"),
                    &self.ctx,
                    &mtr,
                    &mte,
                    &mtr_domains,
                    self.step,
                )?),
            };
        }
        let lr = cfg.lr_at(self.step);
        let mut total = combine(&out.grads, g_mte.as_deref(), cfg.w_mte)?;
        if cfg.weight_decay > 0.0 {
            for (t, p) in total.iter_mut().zip(self.params.blocks()) {
                t.axpy(cfg.weight_decay, &p)?;
            }
        }
        let mut next = self.params.apply_blocks(&total, lr)?;
        next.absorb_stats(&out.observed);
        if !next.is_finite() {
            return Err(Error::Input(format!("parameters diverged at step {}", self.step)));
        }
        self.params = next;
        let report = StepReport {
            step: self.step,
            lr_outer: lr,
            mtr_domains,
            mte_domains,
            l_cls: out.terms.cls,
            l_z2s: out.terms.z2s,
            l_s2s: out.terms.s2s,
            l_s2z: out.terms.s2z,
            l_aug: out.terms.aug,
            l_mcls: mte_terms.mcls,
            l_mz2s: mte_terms.mz2s,
            l_maug: mte_terms.maug,
            l_mtr: out.value,
            l_mte,
            grad_norm_mtr: norm(&out.grads),
            grad_norm_mte: g_mte.as_deref().map_or(0.0, norm),
            grad_norm_total: norm(&total),
        };
        self.step += 1;
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    /// Closed-set validation accuracy, percent.
    pub val_acc: f64,
}

pub struct RunOutput {
    pub params: ModelParams,
    pub banks: Banks,
    pub reports: Vec<StepReport>,
    pub history: Vec<MetricPoint>,
}

/// Runs all remaining steps of `trainer`, evaluating on the validation split
/// every `eval_every` steps and at the end.
pub fn run_trainer(trainer: &mut Trainer<'_>) -> Result<RunOutput> {
    let every = trainer.ctx.cfg.eval_every;
    let mut reports = Vec::new();
    let mut history = Vec::new();
    while !trainer.is_done() {
        reports.push(trainer.step()?);
        if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
            history.push(MetricPoint {
                step: trainer.step,
                val_acc: closed_set_accuracy(&trainer.params, trainer.dataset, Split::Val)?,
            });
        }
    }
    history.push(MetricPoint {
        step: trainer.step,
        val_acc: closed_set_accuracy(&trainer.params, trainer.dataset, Split::Val)?,
    });
    Ok(RunOutput {
        params: trainer.params.clone(),
        banks: trainer.banks.clone(),
        reports,
        history,
    })
}

/// Trains from scratch for the configured number of steps.
pub fn run(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutput> {
    let mut t = Trainer::new(dataset, model, cfg)?;
    run_trainer(&mut t)
}
