//! The classification, alignment and augmentation losses.
//!
//! [`kernels`] holds per-sample scalar forms with validation and closed-form
//! gradients; [`ops`] exposes batched versions as graph operations for
//! training.

pub mod kernels;
pub mod ops;

pub use kernels::{
    aug_bound, aug_grad, aug_loss, cross_entropy, dc_loss, dc_loss_grad, s2s_grad, s2s_loss, softmax_nll, z2s_grad,
    z2s_loss, AugDenominator, AugParams, ContrastiveParams, DomainClassCounts, UNIT_TOL,
};

use crate::banks::SemanticTable;
use crate::error::{Error, Result};
use crate::mathcore::{Graph, Matrix, Var};
use crate::model::{Mode, ModelParams, Net};

/// Cycle loss on reconstructed prototypes: mean cross-entropy of `h(v̂_i)`
/// against class `i`, plus the cross-prototype loss between `e(v̂)` and the
/// semantic table.
pub fn s2z_loss(v_hat: &Matrix, params: &ModelParams, table: &SemanticTable, cp: &ContrastiveParams) -> Result<f64> {
    cp.validate()?;
    if !v_hat.is_finite() {
        return Err(Error::Input("s2z_loss: non-finite prototypes".into()));
    }
    let mut g = Graph::new();
    let mut net = Net::constant(params, &mut g, Mode::Eval);
    let v = g.constant(v_hat.clone());
    let out = s2z_graph(&mut g, &mut net, v, table, cp)?;
    Ok(g.value(out).item())
}

/// Graph form of [`s2z_loss`].
pub fn s2z_graph(g: &mut Graph, net: &mut Net, v_hat: Var, table: &SemanticTable, cp: &ContrastiveParams) -> Result<Var> {
    let c = table.classes();
    let v = g.value(v_hat);
    if v.rows() != c {
        return Err(Error::shape("s2z_loss", c, v.rows()));
    }
    let labels: Vec<usize> = (0..c).collect();
    let logits = net.logits(g, v_hat)?;
    let ce = ops::ce_mean(g, logits, &labels, None)?;
    let enc = net.encode(g, v_hat)?;
    let s = g.constant(table.matrix().clone());
    let align = ops::s2s(g, enc, s, cp)?;
    g.weighted_sum(&[(ce, 1.0), (align, 1.0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::Rng;
    use crate::model::ModelConfig;

    fn setup(seed: u64) -> (ModelParams, SemanticTable, Rng) {
        let mut rng = Rng::new(seed);
        let cfg = ModelConfig { d_x: 3, hidden: vec![], d_v: 4, d_s: 3, classes: 3, use_batch_standardization: false };
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let t = SemanticTable::from_raw(&Matrix::from_vec(3, 3, rng.normal_vec(9)).unwrap()).unwrap();
        (p, t, rng)
    }

    #[test]
    fn s2z_uniform_logits_give_ln_c() {
        let (mut p, t, mut rng) = setup(1);
        p.cls.w = Matrix::zeros(3, 4);
        p.cls.b = Matrix::zeros(1, 3);
        let v = Matrix::from_vec(3, 4, rng.normal_vec(12)).unwrap();
        let cp = ContrastiveParams::new(0.1, 0.5).unwrap();
        let total = s2z_loss(&v, &p, &t, &cp).unwrap();
        let e = p.encode(&v).unwrap();
        let second = s2s_loss(&e, t.matrix(), &cp).unwrap();
        assert!((total - second - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn s2z_is_sum_of_independent_terms() {
        let (p, t, mut rng) = setup(2);
        let v = Matrix::from_vec(3, 4, rng.normal_vec(12)).unwrap();
        let cp = ContrastiveParams::new(0.1, 0.3).unwrap();
        let logits = p.forward_logits(&v).unwrap();
        let ce: f64 = (0..3).map(|i| cross_entropy(logits.row(i), i).unwrap()).sum::<f64>() / 3.0;
        let e = p.encode(&v).unwrap();
        let expected = ce + s2s_loss(&e, t.matrix(), &cp).unwrap();
        assert!((s2z_loss(&v, &p, &t, &cp).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn s2z_encoder_matching_table() {
        // identity encoder on nonnegative unit rows reproduces them
        let cfg = ModelConfig { d_x: 2, hidden: vec![], d_v: 2, d_s: 2, classes: 2, use_batch_standardization: false };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.enc.w = Matrix::identity(2);
        let t = SemanticTable::new(Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap()).unwrap();
        let cp = ContrastiveParams::new(0.0, 1.0).unwrap();
        let l = s2z_loss(t.matrix(), &p, &t, &cp).unwrap();
        let expected = 2f64.ln() + s2s_loss(t.matrix(), t.matrix(), &cp).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }
}
