//! Feature extractor `f`, classifier `h`, encoder `e: Z → S` and decoder
//! `dec: S → Z` as small dense networks.
//!
//! Parameters are plain value snapshots ([`ModelParams`]). Differentiable
//! forward passes are built on a [`Graph`] through a [`Net`], which binds
//! every parameter block to a graph node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{GradResult, Graph, Matrix, Rng, Var};

/// Floor on row norms before unit normalization of encoder outputs.
pub const ENCODER_EPS: f64 = 1e-12;
/// Variance floor of batch standardization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running standardization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_x: usize,
    /// Hidden widths of `f`; empty means a single affine layer.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub d_v: usize,
    pub d_s: usize,
    pub classes: usize,
    #[serde(default)]
    pub use_batch_standardization: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [("d_x", self.d_x), ("d_v", self.d_v), ("d_s", self.d_s), ("classes", self.classes)];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` of every layer of `f`.
    fn f_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d_x];
        widths.extend(&self.hidden);
        widths.push(self.d_v);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// `y = x·Wᵀ + b` with `W` stored as `out × in` and `b` as `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(output, input),
            b: Matrix::zeros(1, output),
        }
    }

    /// Symmetric uniform initialization scaled by `1/√fan_in`.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n| (0..n).map(|_| rng.uniform_range(-bound, bound)).collect::<Vec<_>>();
        let w = Matrix::from_vec(output, input, draw(output * input)).expect("sized");
        let b = Matrix::from_vec(1, output, draw(output)).expect("sized");
        Self { w, b }
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    pub fn output(&self) -> usize {
        self.w.rows()
    }
}

/// Running column statistics for batch standardization of `e` and `dec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub enc_mean: Vec<f64>,
    pub enc_var: Vec<f64>,
    pub dec_mean: Vec<f64>,
    pub dec_var: Vec<f64>,
}

impl NormStats {
    fn new(d_s: usize, d_v: usize) -> Self {
        Self {
            enc_mean: vec![0.0; d_s],
            enc_var: vec![1.0; d_s],
            dec_mean: vec![0.0; d_v],
            dec_var: vec![1.0; d_v],
        }
    }

    fn blend(running: &mut [f64], batch: &[f64]) {
        for (r, b) in running.iter_mut().zip(batch) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub f: Vec<Affine>,
    /// Classifier `h`: weights `C × d_v`, biases `1 × C`.
    pub cls: Affine,
    pub enc: Affine,
    pub dec: Affine,
    pub norm: Option<NormStats>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let f = config
            .f_dims()
            .into_iter()
            .map(|(i, o)| Affine::init(i, o, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            f,
            cls: Affine::init(config.d_v, config.classes, rng),
            enc: Affine::init(config.d_v, config.d_s, rng),
            dec: Affine::init(config.d_s, config.d_v, rng),
            norm: config
                .use_batch_standardization
                .then(|| NormStats::new(config.d_s, config.d_v)),
        })
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            f: config.f_dims().into_iter().map(|(i, o)| Affine::zeros(i, o)).collect(),
            cls: Affine::zeros(config.d_v, config.classes),
            enc: Affine::zeros(config.d_v, config.d_s),
            dec: Affine::zeros(config.d_s, config.d_v),
            norm: config
                .use_batch_standardization
                .then(|| NormStats::new(config.d_s, config.d_v)),
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.f.iter().chain([&self.cls, &self.enc, &self.dec])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.f
            .iter_mut()
            .chain([&mut self.cls, &mut self.enc, &mut self.dec])
    }

    /// Parameter blocks in the fixed order: `f` layers `(W, b)…`, then
    /// classifier, encoder and decoder.
    pub fn blocks(&self) -> Vec<Matrix> {
        self.layers().flat_map(|a| [a.w.clone(), a.b.clone()]).collect()
    }

    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.layers().flat_map(|a| [a.w.shape(), a.b.shape()]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|a| a.w.len() + a.b.len()).sum()
    }

    /// Same architecture with the given blocks (order of [`Self::blocks`]).
    pub fn with_blocks(&self, blocks: &[Matrix]) -> Result<Self> {
        let shapes = self.block_shapes();
        if blocks.len() != shapes.len() {
            return Err(Error::shape("with_blocks", shapes.len(), blocks.len()));
        }
        for (b, s) in blocks.iter().zip(&shapes) {
            if b.shape() != *s {
                return Err(Error::shape("with_blocks", format!("{s:?}"), format!("{:?}", b.shape())));
            }
        }
        let mut out = self.clone();
        for (layer, pair) in out.layers_mut().zip(blocks.chunks(2)) {
            layer.w = pair[0].clone();
            layer.b = pair[1].clone();
        }
        Ok(out)
    }

    /// `θ − lr·∇`, leaving `self` untouched.
    pub fn apply_step(&self, grads: &GradResult, lr: f64) -> Result<Self> {
        self.apply_blocks(&grads.grads, lr)
    }

    pub fn apply_blocks(&self, grads: &[Matrix], lr: f64) -> Result<Self> {
        let mut blocks = self.blocks();
        if grads.len() != blocks.len() {
            return Err(Error::shape("apply_step", blocks.len(), grads.len()));
        }
        for (p, g) in blocks.iter_mut().zip(grads) {
            p.axpy(-lr, g)?;
        }
        self.with_blocks(&blocks)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|a| a.w.is_finite() && a.b.is_finite())
    }

    /// Folds batch statistics observed by a training [`Net`] into the
    /// running statistics.
    pub fn absorb_stats(&mut self, observed: &[Observed]) {
        let Some(norm) = self.norm.as_mut() else { return };
        for o in observed {
            match o.block {
                NormBlock::Encoder => {
                    NormStats::blend(&mut norm.enc_mean, &o.mean);
                    NormStats::blend(&mut norm.enc_var, &o.var);
                }
                NormBlock::Decoder => {
                    NormStats::blend(&mut norm.dec_mean, &o.mean);
                    NormStats::blend(&mut norm.dec_var, &o.var);
                }
            }
        }
    }

    fn eval_with<F>(&self, input: &Matrix, f: F) -> Result<Matrix>
    where
        F: FnOnce(&mut Net, &mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let mut net = Net::constant(self, &mut g, Mode::Eval);
        let x = g.constant(input.clone());
        let out = f(&mut net, &mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// `z = f(x)` for a batch of inputs (evaluation mode).
    pub fn forward_features(&self, x: &Matrix) -> Result<Matrix> {
        self.eval_with(x, |n, g, x| n.features(g, x))
    }

    /// `h(z) = W z + b` for a batch of features.
    pub fn forward_logits(&self, z: &Matrix) -> Result<Matrix> {
        self.eval_with(z, |n, g, z| n.logits(g, z))
    }

    /// Unit-normalized semantic embeddings `e(z)`.
    pub fn encode(&self, z: &Matrix) -> Result<Matrix> {
        self.eval_with(z, |n, g, z| n.encode(g, z))
    }

    pub fn decode(&self, s: &Matrix) -> Result<Matrix> {
        self.eval_with(s, |n, g, s| n.decode(g, s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for standardization; observed statistics recorded.
    Train,
    /// Running statistics for standardization.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormBlock {
    Encoder,
    Decoder,
}

/// Batch statistics seen during a training forward pass.
#[derive(Clone, Debug)]
pub struct Observed {
    pub block: NormBlock,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

/// Parameter blocks bound to nodes of one [`Graph`].
pub struct Net {
    pub f: Vec<AffineVars>,
    pub cls: AffineVars,
    pub enc: AffineVars,
    pub dec: AffineVars,
    norm: Option<NormStats>,
    mode: Mode,
    observed: Vec<Observed>,
}

impl Net {
    fn bind(params: &ModelParams, g: &mut Graph, mode: Mode, leaf: fn(&mut Graph, Matrix) -> Var) -> Self {
        let mut bind = |a: &Affine| AffineVars {
            w: leaf(g, a.w.clone()),
            b: leaf(g, a.b.clone()),
        };
        let f = params.f.iter().map(&mut bind).collect();
        let cls = bind(&params.cls);
        let enc = bind(&params.enc);
        let dec = bind(&params.dec);
        Self {
            f,
            cls,
            enc,
            dec,
            norm: params.norm.clone(),
            mode,
            observed: Vec::new(),
        }
    }

    /// Binds every block as a differentiable leaf.
    pub fn param(params: &ModelParams, g: &mut Graph, mode: Mode) -> Self {
        Self::bind(params, g, mode, Graph::param)
    }

    /// Binds every block as a constant.
    pub fn constant(params: &ModelParams, g: &mut Graph, mode: Mode) -> Self {
        Self::bind(params, g, mode, Graph::constant)
    }

    /// Leaves in the order of [`ModelParams::blocks`].
    pub fn vars(&self) -> Vec<Var> {
        self.f
            .iter()
            .chain([&self.cls, &self.enc, &self.dec])
            .flat_map(|a| [a.w, a.b])
            .collect()
    }

    pub fn take_observed(&mut self) -> Vec<Observed> {
        std::mem::take(&mut self.observed)
    }

    fn affine(g: &mut Graph, a: AffineVars, x: Var) -> Result<Var> {
        let y = g.matmul_t(x, a.w)?;
        g.add_row(y, a.b)
    }

    fn standardize(&mut self, g: &mut Graph, x: Var, block: NormBlock) -> Result<Var> {
        let Some(norm) = &self.norm else { return Ok(x) };
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_standardize(x, BN_EPS);
                self.observed.push(Observed { block, mean, var });
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = match block {
                    NormBlock::Encoder => (&norm.enc_mean, &norm.enc_var),
                    NormBlock::Decoder => (&norm.dec_mean, &norm.dec_var),
                };
                g.standardize_with(x, mean, var, BN_EPS)
            }
        }
    }

    /// `f(x)`: affine layers with rectifiers between them; the last layer is linear.
    pub fn features(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.f.len() - 1;
        for (i, layer) in self.f.clone().into_iter().enumerate() {
            h = Self::affine(g, layer, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        Self::affine(g, self.cls, z)
    }

    /// `e(z)`: affine, optional standardization, rectifier, unit normalization.
    pub fn encode(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let y = Self::affine(g, self.enc, z)?;
        let y = self.standardize(g, y, NormBlock::Encoder)?;
        let y = g.relu(y);
        Ok(g.row_normalize(y, ENCODER_EPS))
    }

    /// `dec(s)`: affine, optional standardization, rectifier.
    pub fn decode(&mut self, g: &mut Graph, s: Var) -> Result<Var> {
        let y = Self::affine(g, self.dec, s)?;
        let y = self.standardize(g, y, NormBlock::Decoder)?;
        Ok(g.relu(y))
    }
}
