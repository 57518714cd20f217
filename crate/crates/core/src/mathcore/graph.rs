//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a closure mapping the upstream gradient to gradients of its parents.
//! [`Graph::backward`] walks the tape once in reverse. Nodes that do not
//! depend on any parameter leaf are skipped.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(upstream, parent values, own value)` to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Matrix, &[&Matrix], &Matrix) -> Vec<Matrix>>;

struct Node {
    value: Matrix,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let needs_grad = backward.is_some() && parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Appends an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Matrix, backward: BackwardFn) -> Var {
        self.push(value, parents.iter().map(|v| v.0).collect(), Some(backward))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| {
                vec![g.matmul_t(p[1]).unwrap(), p[0].t_matmul(g).unwrap()]
            })),
        ))
    }

    /// `a · bᵀ`; the layout used by affine maps with `out × in` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| {
                vec![g.matmul(p[1]).unwrap(), g.t_matmul(p[0]).unwrap()]
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g.scale(k)])),
        )
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(bias));
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", am.cols()),
                format!("{}x{}", bm.rows(), bm.cols()),
            ));
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *v += b;
            }
        }
        Ok(self.push(
            value,
            vec![a.0, bias.0],
            Some(Box::new(|g, _, _| {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in g.iter_rows() {
                    for (o, v) in gb.as_mut_slice().iter_mut().zip(r) {
                        *o += v;
                    }
                }
                vec![g.clone(), gb]
            })),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut out = g.clone();
                for (o, &x) in out.as_mut_slice().iter_mut().zip(p[0].as_slice()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                vec![out]
            })),
        )
    }

    /// Scales every row to unit length; rows with norm ≤ `eps` are divided
    /// by `eps` instead.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.iter_rows().map(|r| dot(r, r).sqrt().max(eps)).collect();
        let mut value = x.clone();
        for (i, &n) in norms.iter().enumerate() {
            for v in value.row_mut(i) {
                *v /= n;
            }
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, p, y| {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for (i, &n) in norms.iter().enumerate() {
                    let gi = g.row(i);
                    let yi = y.row(i);
                    let raw_norm = dot(p[0].row(i), p[0].row(i)).sqrt();
                    if raw_norm > eps {
                        let yg = dot(yi, gi);
                        for ((o, &gv), &yv) in out.row_mut(i).iter_mut().zip(gi).zip(yi) {
                            *o = (gv - yv * yg) / n;
                        }
                    } else {
                        for (o, &gv) in out.row_mut(i).iter_mut().zip(gi) {
                            *o = gv / n;
                        }
                    }
                }
                vec![out]
            })),
        )
    }

    /// Column-wise standardization with batch statistics,
    /// `(x − mean) / sqrt(var + eps)`. Returns the output together with the
    /// batch mean and population variance.
    pub fn batch_standardize(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let x = self.value(a);
        let (n, d) = x.shape();
        let nf = n as f64;
        let mut mean = vec![0.0; d];
        for r in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / nf;
            }
        }
        let mut var = vec![0.0; d];
        for r in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / nf;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = x.clone();
        for i in 0..n {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let out = self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, y| {
                let (n, d) = g.shape();
                let nf = n as f64;
                let mut sum_g = vec![0.0; d];
                let mut sum_gy = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        sum_g[j] += g[(i, j)];
                        sum_gy[j] += g[(i, j)] * y[(i, j)];
                    }
                }
                let mut out = Matrix::zeros(n, d);
                for i in 0..n {
                    for j in 0..d {
                        out[(i, j)] =
                            inv_std[j] / nf * (nf * g[(i, j)] - sum_g[j] - y[(i, j)] * sum_gy[j]);
                    }
                }
                vec![out]
            })),
        );
        (out, mean, var)
    }

    /// Column-wise `(x − mean) / sqrt(var + eps)` with fixed statistics.
    pub fn standardize_with(&mut self, a: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let x = self.value(a);
        if mean.len() != x.cols() || var.len() != x.cols() {
            return Err(Error::shape("standardize_with", x.cols(), mean.len()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut out = g.clone();
                for i in 0..out.rows() {
                    for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                        *v *= inv_std[j];
                    }
                }
                vec![out]
            })),
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src_rows = self.value(a).rows();
        let value = self.value(a).select_rows(idx);
        let idx = idx.to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut out = Matrix::zeros(src_rows, g.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                vec![out]
            })),
        )
    }

    /// Copy of `base` whose rows `idx[k]` are replaced by row `k` of `rows`.
    pub fn overlay_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (b, r) = (self.value(base), self.value(rows));
        if b.cols() != r.cols() || r.rows() != idx.len() {
            return Err(Error::shape(
                "overlay_rows",
                format!("{} rows of width {}", idx.len(), b.cols()),
                format!("{}x{}", r.rows(), r.cols()),
            ));
        }
        let mut value = b.clone();
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(i).copy_from_slice(r.row(k));
        }
        let idx = idx.to_vec();
        Ok(self.push(
            value,
            vec![base.0, rows.0],
            Some(Box::new(move |g, _, _| {
                let mut gb = g.clone();
                let gr = g.select_rows(&idx);
                for &i in &idx {
                    gb.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                }
                vec![gb, gr]
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", cols, m.cols()));
            }
            counts.push(m.rows());
            data.extend_from_slice(m.as_slice());
        }
        let total: usize = counts.iter().sum();
        let value = Matrix::from_vec(total, cols, data)?;
        Ok(self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _, _| {
                let mut start = 0;
                counts
                    .iter()
                    .map(|&n| {
                        let idx: Vec<usize> = (start..start + n).collect();
                        start += n;
                        g.select_rows(&idx)
                    })
                    .collect()
            })),
        ))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let value = Matrix::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![Matrix::filled(r, c, g.item())])),
        )
    }

    /// `Σ_k w_k · x_k` over 1×1 nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(Error::shape("weighted_sum", "1x1", format!("{:?}", m.shape())));
            }
            total += w * m.item();
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        Ok(self.push(
            Matrix::scalar(total),
            terms.iter().map(|t| t.0 .0).collect(),
            Some(Box::new(move |g, _, _| {
                weights.iter().map(|w| Matrix::scalar(w * g.item())).collect()
            })),
        ))
    }

    /// Scalar 1×1 constant `value`.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// Reverse pass from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.shape() != (1, 1) {
            return Err(Error::Construction(format!(
                "gradient root must be scalar, got {:?}",
                rv.shape()
            )));
        }
        if !rv.is_finite() {
            return Err(Error::Input(format!("non-finite loss value {}", rv.item())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let Some(upstream) = grads[i].take() else { continue };
            let parent_vals: Vec<&Matrix> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(&upstream, &parent_vals, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp)?,
                    slot @ None => *slot = Some(gp),
                }
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 1.0]]).unwrap());
        let w = g.param(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let b = g.param(Matrix::row_vector(&[0.0, 0.0, 0.1]));
        let z = g.matmul_t(x, w).unwrap();
        let z = g.add_row(z, b).unwrap();
        let r = g.relu(z);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        // z = [[1,-2,-0.9],[0.5,1,1.6]]; active: (0,0),(1,0),(1,1),(1,2)
        assert_eq!(grads.get(b).as_slice(), &[2.0, 1.0, 1.0]);
        assert_eq!(
            grads.get(w).as_slice(),
            &[1.5, -1.0, 0.5, 1.0, 0.5, 1.0]
        );
        assert!(!g.needs_grad(x));
    }

    #[test]
    fn non_scalar_root_is_a_construction_error() {
        let mut g = Graph::new();
        let a = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::Construction(_))));
    }

    #[test]
    fn overlay_and_gather_route_gradients() {
        let mut g = Graph::new();
        let base = g.param(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let rows = g.param(Matrix::from_rows(&[vec![10.0]]).unwrap());
        let o = g.overlay_rows(base, rows, &[1]).unwrap();
        assert_eq!(g.value(o).as_slice(), &[1.0, 10.0, 3.0]);
        let picked = g.gather_rows(o, &[1, 1, 2]);
        let s = g.sum(picked);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(rows).as_slice(), &[2.0]);
        assert_eq!(grads.get(base).as_slice(), &[0.0, 0.0, 1.0]);
    }
}
