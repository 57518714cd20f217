//! Gradient-check suite: every loss, through the graph operation used in
//! training, against central differences at random points.

use serde::Serialize;

use crate::banks::SemanticTable;
use crate::error::{Error, Result};
use crate::losses::{ops, s2z_graph, AugDenominator, ContrastiveParams};
use crate::mathcore::{Graph, GradResult, Matrix, Rng, Var};
use crate::model::{Mode, ModelConfig, ModelParams, Net};

pub const LOSSES: [&str; 5] = ["dc", "z2s", "s2s", "s2z", "aug"];

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;

/// Absolute floor of the relative-error denominator; coordinates whose true
/// gradient is below it are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub worst_point: usize,
    pub pass: bool,
}

/// `max_i |a_i − f_i| / max(|a_i|, |f_i|, REL_FLOOR)`.
pub fn relative_error(analytic: &GradResult, numeric: &GradResult) -> f64 {
    analytic
        .flat()
        .iter()
        .zip(numeric.flat())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn random(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).expect("sized").scale(scale)
}

fn random_cp(rng: &mut Rng) -> ContrastiveParams {
    ContrastiveParams {
        alpha: rng.uniform_range(0.0, 0.3),
        tau: rng.uniform_range(1.0 / 30.0, 1.0),
    }
}

/// Analytic and numeric gradient of one loss at one random point.
type Pair = (GradResult, GradResult);

fn graph_pair<F>(loss: F, params: &[Matrix]) -> Result<Pair>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let a = crate::mathcore::grad(&loss, params)?;
    let n = crate::mathcore::fd_grad(&loss, params, FD_EPS)?;
    Ok((a, n))
}

fn dc_point(rng: &mut Rng) -> Result<Pair> {
    let (n, c) = (4, 6);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let weights: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            (0..c)
                .map(|k| if k == y { 1.0 + rng.below(20) as f64 } else { rng.below(4) as f64 * rng.below(30) as f64 })
                .collect()
        })
        .collect();
    let logits = random(rng, n, c, 2.0);
    graph_pair(move |g, v| ops::ce_mean(g, v[0], &labels, Some(&weights)), &[logits])
}

fn z2s_point(rng: &mut Rng) -> Result<Pair> {
    let (n, c, d) = (4, 6, 5);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let cp = random_cp(rng);
    let params = [random(rng, n, d, 1.0), random(rng, c, d, 1.0)];
    graph_pair(
        move |g, v| {
            let e = g.row_normalize(v[0], 1e-12);
            let s = g.row_normalize(v[1], 1e-12);
            ops::z2s_mean(g, e, &labels, s, &cp)
        },
        &params,
    )
}

fn s2s_point(rng: &mut Rng) -> Result<Pair> {
    let (c, d) = (6, 5);
    let cp = random_cp(rng);
    let params = [random(rng, c, d, 1.0), random(rng, c, d, 1.0)];
    graph_pair(
        move |g, v| {
            let a = g.row_normalize(v[0], 1e-12);
            let b = g.row_normalize(v[1], 1e-12);
            ops::s2s(g, a, b, &cp)
        },
        &params,
    )
}

fn s2z_point(rng: &mut Rng) -> Result<Pair> {
    let cfg = ModelConfig {
        d_x: 3,
        hidden: vec![4],
        d_v: 4,
        d_s: 5,
        classes: 6,
        use_batch_standardization: true,
    };
    let model = ModelParams::init(&cfg, rng)?;
    let table = SemanticTable::from_raw(&random(rng, cfg.classes, cfg.d_s, 1.0))?;
    let cp = random_cp(rng);
    let mut blocks = vec![random(rng, cfg.classes, cfg.d_v, 1.0)];
    blocks.extend(model.blocks());
    let build = |blocks: &[Matrix], g: &mut Graph, differentiable: bool| -> Result<(Var, Vec<Var>)> {
        let p = model.with_blocks(&blocks[1..])?;
        let (v, mut net) = if differentiable {
            (g.param(blocks[0].clone()), Net::param(&p, g, Mode::Train))
        } else {
            (g.constant(blocks[0].clone()), Net::constant(&p, g, Mode::Train))
        };
        let out = s2z_graph(g, &mut net, v, &table, &cp)?;
        let mut vars = vec![v];
        vars.extend(net.vars());
        Ok((out, vars))
    };
    let analytic = {
        let mut g = Graph::new();
        let (out, vars) = build(&blocks, &mut g, true)?;
        let gr = g.backward(out)?;
        GradResult {
            value: g.value(out).item(),
            grads: vars.iter().map(|&v| gr.get(v)).collect(),
        }
    };
    let numeric = crate::mathcore::fd_grad_with(
        |b: &[Matrix]| {
            let mut g = Graph::new();
            let (out, _) = build(b, &mut g, false)?;
            Ok(g.value(out).item())
        },
        &blocks,
        FD_EPS,
    )?;
    Ok((analytic, numeric))
}

fn aug_point(rng: &mut Rng) -> Result<Pair> {
    let (n, c, d) = (4, 5, 4);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let lambda = rng.uniform_range(0.0, 2.0);
    let sigmas: Vec<Matrix> = (0..c)
        .map(|_| {
            let a = random(rng, d, d, 0.5);
            a.matmul_t(&a).expect("square")
        })
        .collect();
    let params = [random(rng, n, d, 1.0), random(rng, c, d, 0.7), random(rng, 1, c, 0.5)];
    graph_pair(
        move |g, v| ops::aug_mean(g, v[0], v[1], v[2], &labels, &sigmas, lambda, AugDenominator::Derivation),
        &params,
    )
}

/// Runs the suite. `sign_flip` negates the analytic gradient of the named
/// loss, to exercise the failure path.
pub fn run_suite(points: usize, tol: f64, seed: u64, sign_flip: Option<&str>) -> Result<Vec<GradcheckRow>> {
    if points == 0 {
        return Err(Error::Config("gradcheck needs at least one point".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("gradcheck tolerance must be positive, got {tol}")));
    }
    if let Some(name) = sign_flip {
        if !LOSSES.contains(&name) {
            return Err(Error::Config(format!("unknown loss {name:?}; expected one of {}", LOSSES.join(", "))));
        }
    }
    let root = Rng::new(seed);
    let mut rows = Vec::new();
    for name in LOSSES {
        let base = root.fork_named(name);
        let mut worst = (0.0f64, 0usize);
        for p in 0..points {
            let mut rng = base.fork(p as u64);
            let (mut a, n) = match name {
                "dc" => dc_point(&mut rng)?,
                "z2s" => z2s_point(&mut rng)?,
                "s2s" => s2s_point(&mut rng)?,
                "s2z" => s2z_point(&mut rng)?,
                _ => aug_point(&mut rng)?,
            };
            if sign_flip == Some(name) {
                a.grads = a.grads.iter().map(|m| m.scale(-1.0)).collect();
            }
            let err = relative_error(&a, &n);
            if err > worst.0 || err.is_nan() {
                worst = (err, p);
            }
        }
        rows.push(GradcheckRow {
            loss: name.to_string(),
            points,
            max_rel_err: worst.0,
            worst_point: worst.1,
            pass: worst.0 < tol,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        let r = |v: f64| GradResult { value: 0.0, grads: vec![Matrix::scalar(v)] };
        assert_eq!(relative_error(&r(2.0), &r(1.0)), 0.5);
        assert!((relative_error(&r(1e-9), &r(2e-9)) - 1e-9 / REL_FLOOR).abs() < 1e-18);
    }

    #[test]
    fn suite_rejects_unknown_fault_target() {
        assert!(run_suite(1, 1e-4, 0, Some("nope")).is_err());
        assert!(run_suite(0, 1e-4, 0, None).is_err());
    }
}
