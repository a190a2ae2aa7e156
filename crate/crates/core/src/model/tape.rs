//! Reverse-mode gradient tape over small dense vectors.
//!
//! Nodes hold vector values; parameters enter only through [`Tape::affine`].
//! Scalar nodes are length-one vectors.

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Scores are clipped to this interval inside the cross-entropy.
pub const BCE_CLIP: f64 = 1e-7;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Affine { x: NodeId, w: ParamId, b: ParamId },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Concat(Vec<NodeId>),
    SquaredNorm(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
    Bce { logit: NodeId, label: f64 },
    Moments(Vec<NodeId>),
    Covariance(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation; consumed by [`Tape::backward`].
pub struct Tape<'p> {
    id: u64,
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

/// `out = w x + b` for a row-major `w` of shape `[out.len(), x.len()]`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc + bias;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a {0,1} (or soft) label, with the
/// score clipped to `[BCE_CLIP, 1 - BCE_CLIP]`.
pub fn bce_from_logit(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit).clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

fn bce_grad(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit);
    if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
        return 0.0;
    }
    p - label
}

/// Mean squared per-dimension batch mean plus mean squared deviation of the
/// per-dimension (population) variance from one.
pub fn moment_penalty(rows: &[&[f64]]) -> f64 {
    let (means, vars) = batch_moments(rows);
    let d = means.len() as f64;
    means.iter().map(|m| m * m).sum::<f64>() / d
        + vars.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / d
}

/// Mean squared off-diagonal entry of the (population) batch covariance.
/// Zero for a single dimension.
pub fn covariance_penalty(rows: &[&[f64]]) -> f64 {
    let d = rows[0].len();
    if d < 2 {
        return 0.0;
    }
    let cov = batch_covariance(rows);
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += cov[i * d + j] * cov[i * d + j];
            }
        }
    }
    s / (d * (d - 1)) as f64
}

/// Row-major `d x d` population covariance.
fn batch_covariance(rows: &[&[f64]]) -> Vec<f64> {
    let (means, _) = batch_moments(rows);
    let d = means.len();
    let n = rows.len() as f64;
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let a = r[i] - means[i];
            for j in 0..d {
                cov[i * d + j] += a * (r[j] - means[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n);
    cov
}

fn batch_moments(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut means = vec![0.0; d];
    for r in rows {
        for (m, v) in means.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in vars.iter_mut().zip(r.iter()).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    vars.iter_mut().for_each(|s| *s /= n);
    (means, vars)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        assert_eq!(id.tape, self.id, "node from a different tape");
        &self.nodes[id.index].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.index].requires_grad
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Copies `x` into a constant: no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).to_vec();
        self.constant(value)
    }

    pub fn affine(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wt = self.params.get(w);
        let bt = self.params.get(b);
        let mut out = vec![0.0; bt.len()];
        affine(&wt.data, &bt.data, self.value(x), &mut out);
        self.push(out, Op::Affine { x, w, b }, true)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let value = parts.iter().flat_map(|p| self.value(*p).to_vec()).collect();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    pub fn squared_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(vec![v], Op::SquaredNorm(x), rg)
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v = terms.iter().map(|(n, c)| c * self.scalar(*n)).sum();
        let rg = terms.iter().any(|(n, _)| self.rg(*n));
        self.push(vec![v], Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn bce_with_logit(&mut self, logit: NodeId, label: f64) -> NodeId {
        let v = bce_from_logit(self.scalar(logit), label);
        let rg = self.rg(logit);
        self.push(vec![v], Op::Bce { logit, label }, rg)
    }

    /// See [`moment_penalty`]. Requires at least two rows.
    pub fn moment_penalty(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.len() < 2 {
            return Err(Error::Empty("moment penalty needs at least two latents"));
        }
        let v = {
            let vals: Vec<&[f64]> = rows.iter().map(|r| self.value(*r)).collect();
            moment_penalty(&vals)
        };
        let rg = rows.iter().any(|r| self.rg(*r));
        Ok(self.push(vec![v], Op::Moments(rows.to_vec()), rg))
    }

    /// See [`covariance_penalty`]. Requires at least two rows.
    pub fn covariance_penalty(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.len() < 2 {
            return Err(Error::Empty("covariance penalty needs at least two latents"));
        }
        let v = {
            let vals: Vec<&[f64]> = rows.iter().map(|r| self.value(*r)).collect();
            covariance_penalty(&vals)
        };
        let rg = rows.iter().any(|r| self.rg(*r));
        Ok(self.push(vec![v], Op::Covariance(rows.to_vec()), rg))
    }

    /// Exact gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads = self.params.zeros_like();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    pub fn backward_into(&self, loss: NodeId, grads: &mut Gradients) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::UnrecordedLoss);
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.nodes[loss.index].value.len(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
            match &mut adj[id.index] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let n_in = xv.len();
                    {
                        let gw = grads.get_mut(*w);
                        for (row, go) in gw.chunks_exact_mut(n_in).zip(&g) {
                            if *go != 0.0 {
                                for (r, xi) in row.iter_mut().zip(xv) {
                                    *r += go * xi;
                                }
                            }
                        }
                    }
                    grads
                        .get_mut(*b)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, go)| *a += go);
                    if self.rg(*x) {
                        let wt = &self.params.get(*w).data;
                        let mut gx = vec![0.0; n_in];
                        for (row, go) in wt.chunks_exact(n_in).zip(&g) {
                            for (gxi, wi) in gx.iter_mut().zip(row) {
                                *gxi += go * wi;
                            }
                        }
                        acc(&mut adj, *x, &gx);
                    }
                }
                Op::Tanh(x) => {
                    let gx: Vec<f64> = node
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(y, go)| go * (1.0 - y * y))
                        .collect();
                    acc(&mut adj, *x, &gx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, &g);
                    }
                    if self.rg(*b) {
                        acc(&mut adj, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, &g);
                    }
                    if self.rg(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        acc(&mut adj, *b, &neg);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.rg(*p) {
                            acc(&mut adj, *p, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::SquaredNorm(x) => {
                    let gx: Vec<f64> = self.value(*x).iter().map(|v| 2.0 * v * g[0]).collect();
                    acc(&mut adj, *x, &gx);
                }
                Op::WeightedSum(terms) => {
                    for (n, c) in terms {
                        if self.rg(*n) {
                            acc(&mut adj, *n, &[c * g[0]]);
                        }
                    }
                }
                Op::Bce { logit, label } => {
                    let d = bce_grad(self.scalar(*logit), *label);
                    acc(&mut adj, *logit, &[d * g[0]]);
                }
                Op::Moments(rows) => {
                    let vals: Vec<&[f64]> = rows.iter().map(|r| self.value(*r)).collect();
                    let (means, vars) = batch_moments(&vals);
                    let n = rows.len() as f64;
                    let d = means.len() as f64;
                    for (r, row) in rows.iter().zip(&vals) {
                        if !self.rg(*r) {
                            continue;
                        }
                        let gr: Vec<f64> = row
                            .iter()
                            .zip(means.iter().zip(&vars))
                            .map(|(z, (m, v))| {
                                g[0] * (2.0 * m / (d * n) + 4.0 * (v - 1.0) * (z - m) / (d * n))
                            })
                            .collect();
                        acc(&mut adj, *r, &gr);
                    }
                }
                Op::Covariance(rows) => {
                    let vals: Vec<&[f64]> = rows.iter().map(|r| self.value(*r)).collect();
                    let d = vals[0].len();
                    if d < 2 {
                        continue;
                    }
                    let (means, _) = batch_moments(&vals);
                    let cov = batch_covariance(&vals);
                    let scale = 4.0 * g[0] / ((d * (d - 1)) as f64 * rows.len() as f64);
                    for (r, row) in rows.iter().zip(&vals) {
                        if !self.rg(*r) {
                            continue;
                        }
                        let gr: Vec<f64> = (0..d)
                            .map(|i| {
                                let mut s = 0.0;
                                for j in (0..d).filter(|&j| j != i) {
                                    s += cov[i * d + j] * (row[j] - means[j]);
                                }
                                scale * s
                            })
                            .collect();
                        acc(&mut adj, *r, &gr);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParameterStore, ParamId, ParamId) {
        let mut p = ParameterStore::new();
        let w = p
            .add("w", &[2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6])
            .unwrap();
        let b = p.add("b", &[2], vec![0.05, -0.1]).unwrap();
        (p, w, b)
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let (p, _, _) = store();
        let mut tape = Tape::new(&p);
        let c = tape.constant(vec![3.0]);
        let g = tape.backward(c).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn foreign_loss_rejected() {
        let (p, _, _) = store();
        let mut other = Tape::new(&p);
        let loss = other.constant(vec![1.0]);
        let tape = Tape::new(&p);
        assert!(matches!(tape.backward(loss), Err(Error::UnrecordedLoss)));
    }

    #[test]
    fn affine_tanh_gradient_by_hand() {
        let (p, w, b) = store();
        let mut tape = Tape::new(&p);
        let x = tape.constant(vec![1.0, 2.0, -1.0]);
        let y = tape.affine(x, w, b);
        let h = tape.tanh(y);
        let loss = tape.squared_norm(h);
        let g = tape.backward(loss).unwrap();
        // y0 = 0.1 - 0.4 - 0.3 + 0.05 = -0.55 ; y1 = 0.5 + 0.8 + 0.6 - 0.1 = 1.8
        let (t0, t1) = ((-0.55f64).tanh(), 1.8f64.tanh());
        let d0 = 2.0 * t0 * (1.0 - t0 * t0);
        let d1 = 2.0 * t1 * (1.0 - t1 * t1);
        let expect_b = [d0, d1];
        for (a, e) in g.get(b).iter().zip(expect_b) {
            assert!((a - e).abs() < 1e-12);
        }
        let expect_w = [d0, 2.0 * d0, -d0, d1, 2.0 * d1, -d1];
        for (a, e) in g.get(w).iter().zip(expect_w) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_cuts_path() {
        let (p, w, b) = store();
        let mut tape = Tape::new(&p);
        let x = tape.constant(vec![1.0, 2.0, -1.0]);
        let y = tape.affine(x, w, b);
        let cut = tape.stop_gradient(y);
        let loss = tape.squared_norm(cut);
        let g = tape.backward(loss).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn bce_clipping_and_values() {
        assert!((bce_from_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_from_logit(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let saturated = bce_from_logit(-100.0, 1.0);
        assert!((saturated + (BCE_CLIP).ln()).abs() < 1e-9);
        assert_eq!(bce_grad(100.0, 1.0), 0.0);
    }

    #[test]
    fn moment_penalty_values() {
        let a = [1.0, -1.0];
        let b = [-1.0, 1.0];
        assert!(moment_penalty(&[&a, &b]).abs() < 1e-15);
        let z = [0.0, 0.0];
        assert!((moment_penalty(&[&z, &z]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_penalty_values() {
        // perfectly correlated columns: cov = [[1,1],[1,1]] -> off-diagonal mean 1
        let a = [1.0, 1.0];
        let b = [-1.0, -1.0];
        assert!((covariance_penalty(&[&a, &b]) - 1.0).abs() < 1e-15);
        let c = [1.0, -1.0];
        let d = [-1.0, -1.0];
        let e = [1.0, 1.0];
        let f = [-1.0, 1.0];
        assert!(covariance_penalty(&[&c, &d, &e, &f]).abs() < 1e-15);
        assert_eq!(covariance_penalty(&[&[2.0][..], &[1.0][..]]), 0.0);
    }

    #[test]
    fn covariance_gradient_matches_finite_differences() {
        let mut p = ParameterStore::new();
        let w = p
            .add("w", &[3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9])
            .unwrap();
        let b = p.add("b", &[3], vec![0.1, 0.0, -0.2]).unwrap();
        let inputs = [[1.0, 0.5], [-0.3, 2.0], [0.7, -1.2], [0.0, 0.4]];
        let run = |p: &ParameterStore| {
            let mut tape = Tape::new(p);
            let rows: Vec<NodeId> = inputs
                .iter()
                .map(|x| {
                    let c = tape.constant(x.to_vec());
                    let y = tape.affine(c, w, b);
                    tape.tanh(y)
                })
                .collect();
            let loss = tape.covariance_penalty(&rows).unwrap();
            (tape.scalar(loss), tape.backward(loss).unwrap())
        };
        let (_, g) = run(&p);
        for off in 0..9 {
            let mut hi = p.clone();
            hi.flat_set(off, p.flat_get(off) + 1e-6);
            let mut lo = p.clone();
            lo.flat_set(off, p.flat_get(off) - 1e-6);
            let num = (run(&hi).0 - run(&lo).0) / 2e-6;
            assert!((num - g.flat_get(off)).abs() < 1e-8, "{off}: {num} vs {}", g.flat_get(off));
        }
    }
}
