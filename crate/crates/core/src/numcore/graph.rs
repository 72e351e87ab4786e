//! Reverse-mode differentiation over a per-step tape.
//!
//! Every operation evaluates eagerly, stores its value on the tape and
//! records a closure mapping the output gradient to one gradient per
//! parent. [`Graph::backward`] replays the closures in reverse order and
//! accumulates leaf gradients into the bound [`ParamStore`]. A graph is
//! built for one forward pass and then dropped.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

type Backward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    param: Option<ParamId>,
    /// Whether a parameter is among the node's ancestors.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax of `tau * v` over the last axis, max-subtracted.
pub(crate) fn softmax_rows(v: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (row, o) in v.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row
            .iter()
            .map(|&x| tau * x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (tau * x - max).exp();
            total += *oi;
        }
        o.iter_mut().for_each(|x| *x /= total);
    }
    out
}

fn last_dim(t: &Tensor) -> usize {
    t.shape()[t.rank() - 1]
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

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        debug_assert!(value.is_finite(), "non-finite value {value:?}");
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: Some(backward),
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter's current value as a leaf whose gradient flows back
    /// into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a one-element output with respect to every tape entry
    /// that depends on a parameter; `None` elsewhere.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::dim("backward", root.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(grads)
    }

    /// Backpropagates from `loss` and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.accumulate(id, &g);
            }
        }
        Ok(())
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.matmul(&bv)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                vec![
                    Tensor::new(&[m, k], ga).unwrap(),
                    Tensor::new(&[k, n], gb).unwrap(),
                ]
            }),
        ))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the layout used by every weight matrix here.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::dim("matmul_nt", xv.shape(), wv.shape()));
        }
        let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(xv.data(), wv.data(), &mut out, m, k, n);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[x, w],
            Box::new(move |g| {
                let mut gx = vec![0.0; m * k];
                matmul_into(g.data(), wv.data(), &mut gx, m, n, k);
                let mut gw = vec![0.0; n * k];
                matmul_tn_into(g.data(), xv.data(), &mut gw, m, n, k);
                vec![
                    Tensor::new(&[m, k], gx).unwrap(),
                    Tensor::new(&[n, k], gw).unwrap(),
                ]
            }),
        ))
    }

    /// `x · wᵀ + b` with `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row(y, b)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], Box::new(|g| vec![g.clone(), g.map(|x| -x)])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                vec![
                    g.zip_map(&bv, |x, y| x * y).unwrap(),
                    g.zip_map(&av, |x, y| x * y).unwrap(),
                ]
            }),
        ))
    }

    /// `s * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, &[a], Box::new(move |g| vec![g.map(|x| scale * x)]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    /// Adds `b[n]` to every length-`n` row along the last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = last_dim(av);
        if bv.rank() != 1 || bv.numel() != n {
            return Err(Error::dim("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, &x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![g.clone(), Tensor::vector(&gb)]
            }),
        ))
    }

    /// Multiplies every length-`n` row along the last axis by `b[n]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let n = last_dim(&av);
        if bv.rank() != 1 || bv.numel() != n {
            return Err(Error::dim("mul_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(bv.data()) {
                *o *= x;
            }
        }
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut ga = g.clone();
                let mut gb = vec![0.0; n];
                for ((grow, arow), garow) in g
                    .data()
                    .chunks(n)
                    .zip(av.data().chunks(n))
                    .zip(ga.data_mut().chunks_mut(n))
                {
                    for j in 0..n {
                        garow[j] = grow[j] * bv.data()[j];
                        gb[j] += grow[j] * arow[j];
                    }
                }
                vec![ga, Tensor::vector(&gb)]
            }),
        ))
    }

    /// Multiplies row `i` of `a[B×K]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a).clone(), self.value(s).clone());
        if av.rank() != 2 || sv.rank() != 1 || sv.numel() != av.shape()[0] {
            return Err(Error::dim("scale_rows", av.shape(), sv.shape()));
        }
        let k = av.shape()[1];
        let mut out = av.clone();
        for (row, &x) in out.data_mut().chunks_mut(k).zip(sv.data()) {
            row.iter_mut().for_each(|o| *o *= x);
        }
        Ok(self.push(
            out,
            &[a, s],
            Box::new(move |g| {
                let mut ga = g.clone();
                let mut gs = vec![0.0; sv.numel()];
                for (i, (grow, garow)) in g
                    .data()
                    .chunks(k)
                    .zip(ga.data_mut().chunks_mut(k))
                    .enumerate()
                {
                    let arow = av.row(i);
                    for j in 0..k {
                        garow[j] = grow[j] * sv.data()[i];
                        gs[i] += grow[j] * arow[j];
                    }
                }
                vec![ga, Tensor::vector(&gs)]
            }),
        ))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let av = self.value(a).clone();
        let out = av.map(f);
        let saved = out.clone();
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(saved.data())
                    .map(|((&gi, &x), &y)| gi * df(x, y))
                    .collect();
                vec![Tensor::new(g.shape(), data).unwrap()]
            }),
        )
    }

    /// Elementwise logistic function, computed without overflow.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `ln(a + eps)`; callers guarantee `a + eps > 0`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, move |x| (x + eps).ln(), move |x, _| 1.0 / (x + eps))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    // ---- reductions and reshaping ------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        self.push(
            out,
            &[a],
            Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = av.reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g| vec![g.reshape(&orig).unwrap()]),
        ))
    }

    /// `[a | b]` along the last axis of two 2-D tensors with equal rows.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (rows, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(rows * (p + q));
        for i in 0..rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        Ok(self.push(
            Tensor::new(&[rows, p + q], data)?,
            &[a, b],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for row in g.data().chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![
                    Tensor::new(&[rows, p], ga).unwrap(),
                    Tensor::new(&[rows, q], gb).unwrap(),
                ]
            }),
        ))
    }

    /// Column `c` of `a[B×L]` as a vector of length `B`.
    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || c >= av.shape()[1] {
            return Err(Error::dim("column", av.shape(), &[c]));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let data: Vec<f64> = (0..rows).map(|i| av.data()[i * cols + c]).collect();
        Ok(self.push(
            Tensor::vector(&data),
            &[a],
            Box::new(move |g| {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..rows {
                    ga[i * cols + c] = g.data()[i];
                }
                vec![Tensor::new(&[rows, cols], ga).unwrap()]
            }),
        ))
    }

    /// Stacks length-`B` vectors as the columns of a `[B×L]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = cols
            .first()
            .ok_or_else(|| Error::Contract("stack_cols of nothing".into()))?;
        let rows = self.value(*first).numel();
        let l = cols.len();
        let mut data = vec![0.0; rows * l];
        for (c, v) in cols.iter().enumerate() {
            let vv = self.value(*v);
            if vv.rank() != 1 || vv.numel() != rows {
                return Err(Error::dim("stack_cols", &[rows], vv.shape()));
            }
            for i in 0..rows {
                data[i * l + c] = vv.data()[i];
            }
        }
        Ok(self.push(
            Tensor::new(&[rows, l], data)?,
            cols,
            Box::new(move |g| {
                (0..l)
                    .map(|c| {
                        let col: Vec<f64> = (0..rows).map(|i| g.data()[i * l + c]).collect();
                        Tensor::vector(&col)
                    })
                    .collect()
            }),
        ))
    }

    // ---- normalisation, softmax and losses ---------------------------

    /// Root-mean-square normalisation over the last axis:
    /// `gamma * h / sqrt(mean(h^2) + eps) + beta`.
    ///
    /// A row with `mean(h^2) + eps == 0` maps to `beta`.
    pub fn rms_norm(&mut self, h: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (hv, gv, bv) = (
            self.value(h).clone(),
            self.value(gamma).clone(),
            self.value(beta).clone(),
        );
        let d = last_dim(&hv);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("rms_norm", hv.shape(), gv.shape()));
        }
        if eps < 0.0 {
            return Err(Error::Contract(format!(
                "rms_norm eps must be >= 0, got {eps}"
            )));
        }
        let inv_r: Vec<f64> = hv
            .data()
            .chunks(d)
            .map(|row| {
                let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64 + eps;
                if ms > 0.0 {
                    1.0 / ms.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = hv.clone();
        for (row, &ir) in out.data_mut().chunks_mut(d).zip(&inv_r) {
            for j in 0..d {
                row[j] = gv.data()[j] * row[j] * ir + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            &[h, gamma, beta],
            Box::new(move |g| {
                let mut gh = vec![0.0; hv.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (i, ((grow, hrow), ghrow)) in g
                    .data()
                    .chunks(d)
                    .zip(hv.data().chunks(d))
                    .zip(gh.chunks_mut(d))
                    .enumerate()
                {
                    let ir = inv_r[i];
                    let mut dot = 0.0;
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j] * ir;
                        gb[j] += grow[j];
                        dot += grow[j] * gv.data()[j] * hrow[j];
                    }
                    let coeff = dot * ir * ir * ir / d as f64;
                    for j in 0..d {
                        ghrow[j] = grow[j] * gv.data()[j] * ir - hrow[j] * coeff;
                    }
                }
                vec![
                    Tensor::new(hv.shape(), gh).unwrap(),
                    Tensor::vector(&gg),
                    Tensor::vector(&gb),
                ]
            }),
        ))
    }

    /// Softmax of `tau * v` over the last axis.
    pub fn softmax_temp(&mut self, v: Var, tau: f64) -> Var {
        let vv = self.value(v);
        let n = last_dim(vv);
        let shape = vv.shape().to_vec();
        let y = Tensor::new(&shape, softmax_rows(vv.data(), n, tau)).unwrap();
        let saved = y.clone();
        self.push(
            y,
            &[v],
            Box::new(move |g| {
                let mut gv = vec![0.0; saved.numel()];
                for ((grow, yrow), out) in g
                    .data()
                    .chunks(n)
                    .zip(saved.data().chunks(n))
                    .zip(gv.chunks_mut(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = tau * yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Tensor::new(&shape, gv).unwrap()]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// evaluated with a fused log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits).clone();
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Label {
                index,
                label,
                classes: k,
            });
        }
        let probs = softmax_rows(lv.data(), k, 1.0);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            &[logits],
            Box::new(move |g| {
                let scale = g.item() / b as f64;
                let mut gl = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    gl[i * k + label] -= 1.0;
                }
                gl.iter_mut().for_each(|x| *x *= scale);
                vec![Tensor::new(&[b, k], gl).unwrap()]
            }),
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(scores)` and constant
    /// `targets`, computed from the pre-sigmoid scores.
    pub fn bce_with_logits(&mut self, scores: Var, targets: &Tensor) -> Result<Var> {
        let sv = self.value(scores).clone();
        if sv.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", sv.shape(), targets.shape()));
        }
        let n = sv.numel() as f64;
        let loss: f64 = sv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / n;
        let targets = targets.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            &[scores],
            Box::new(move |g| {
                let scale = g.item() / n;
                let data = sv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| scale * (sigmoid_scalar(x) - t))
                    .collect();
                vec![Tensor::new(sv.shape(), data).unwrap()]
            }),
        ))
    }

    // ---- signal ops used by the backbone -----------------------------

    /// Same-padded temporal convolution of every channel with every kernel:
    /// `x[B×C×T]`, `kernels[F×k]` (k odd) → `[B×F×C×T]`.
    pub fn conv_temporal(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x).clone(), self.value(kernels).clone());
        if xv.rank() != 3 || kv.rank() != 2 {
            return Err(Error::dim("conv_temporal", xv.shape(), kv.shape()));
        }
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (f, k) = (kv.shape()[0], kv.shape()[1]);
        check_kernel(k, t)?;
        let mut out = vec![0.0; b * f * c * t];
        for bi in 0..b {
            for fi in 0..f {
                for ci in 0..c {
                    let src = &xv.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    let dst =
                        &mut out[((bi * f + fi) * c + ci) * t..((bi * f + fi) * c + ci + 1) * t];
                    conv1d_same(src, kv.row(fi), dst);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[b, f, c, t], out)?,
            &[x, kernels],
            Box::new(move |g| {
                let mut gx = vec![0.0; b * c * t];
                let mut gk = vec![0.0; f * k];
                for bi in 0..b {
                    for fi in 0..f {
                        for ci in 0..c {
                            let go = &g.data()
                                [((bi * f + fi) * c + ci) * t..((bi * f + fi) * c + ci + 1) * t];
                            let src = &xv.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                            conv1d_same_backward(
                                src,
                                kv.row(fi),
                                go,
                                &mut gx[(bi * c + ci) * t..(bi * c + ci + 1) * t],
                                &mut gk[fi * k..(fi + 1) * k],
                            );
                        }
                    }
                }
                vec![
                    Tensor::new(&[b, c, t], gx).unwrap(),
                    Tensor::new(&[f, k], gk).unwrap(),
                ]
            }),
        ))
    }

    /// Weighted sum over the channel axis: `u[B×F×C×T]`, `w[F×C]` → `[B×F×T]`.
    pub fn spatial_collapse(&mut self, u: Var, weights: Var) -> Result<Var> {
        let (uv, wv) = (self.value(u).clone(), self.value(weights).clone());
        if uv.rank() != 4 || wv.shape() != [uv.shape()[1], uv.shape()[2]] {
            return Err(Error::dim("spatial_collapse", uv.shape(), wv.shape()));
        }
        let (b, f, c, t) = (uv.shape()[0], uv.shape()[1], uv.shape()[2], uv.shape()[3]);
        let mut out = vec![0.0; b * f * t];
        for bi in 0..b {
            for fi in 0..f {
                let dst = &mut out[(bi * f + fi) * t..(bi * f + fi + 1) * t];
                for ci in 0..c {
                    let w = wv.data()[fi * c + ci];
                    let src =
                        &uv.data()[((bi * f + fi) * c + ci) * t..((bi * f + fi) * c + ci + 1) * t];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[b, f, t], out)?,
            &[u, weights],
            Box::new(move |g| {
                let mut gu = vec![0.0; b * f * c * t];
                let mut gw = vec![0.0; f * c];
                for bi in 0..b {
                    for fi in 0..f {
                        let go = &g.data()[(bi * f + fi) * t..(bi * f + fi + 1) * t];
                        for ci in 0..c {
                            let w = wv.data()[fi * c + ci];
                            let base = ((bi * f + fi) * c + ci) * t;
                            let src = &uv.data()[base..base + t];
                            let mut acc = 0.0;
                            for ti in 0..t {
                                gu[base + ti] = w * go[ti];
                                acc += go[ti] * src[ti];
                            }
                            gw[fi * c + ci] += acc;
                        }
                    }
                }
                vec![
                    Tensor::new(&[b, f, c, t], gu).unwrap(),
                    Tensor::new(&[f, c], gw).unwrap(),
                ]
            }),
        ))
    }

    /// Spatial filtering before any temporal processing:
    /// `x[B×C×T]`, `w[F×C]` → `[B×F×T]`.
    pub fn spatial_mix(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(weights).clone());
        if xv.rank() != 3 || wv.rank() != 2 || wv.shape()[1] != xv.shape()[1] {
            return Err(Error::dim("spatial_mix", xv.shape(), wv.shape()));
        }
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let f = wv.shape()[0];
        let x_grad = self.needs_grad(x);
        let mut out = vec![0.0; b * f * t];
        for bi in 0..b {
            matmul_into(
                wv.data(),
                &xv.data()[bi * c * t..(bi + 1) * c * t],
                &mut out[bi * f * t..(bi + 1) * f * t],
                f,
                c,
                t,
            );
        }
        Ok(self.push(
            Tensor::new(&[b, f, t], out)?,
            &[x, weights],
            Box::new(move |g| {
                let mut gw = vec![0.0; f * c];
                for bi in 0..b {
                    let go = &g.data()[bi * f * t..(bi + 1) * f * t];
                    let xs = &xv.data()[bi * c * t..(bi + 1) * c * t];
                    matmul_nt_into(go, xs, &mut gw, f, t, c);
                }
                let gx = if x_grad {
                    let mut gx = vec![0.0; b * c * t];
                    for bi in 0..b {
                        let go = &g.data()[bi * f * t..(bi + 1) * f * t];
                        matmul_tn_into(
                            wv.data(),
                            go,
                            &mut gx[bi * c * t..(bi + 1) * c * t],
                            f,
                            c,
                            t,
                        );
                    }
                    Tensor::new(&[b, c, t], gx).unwrap()
                } else {
                    // discarded by the tape
                    Tensor::scalar(0.0)
                };
                vec![gx, Tensor::new(&[f, c], gw).unwrap()]
            }),
        ))
    }

    /// Same-padded temporal convolution with one kernel per feature map:
    /// `u[B×F×T]`, `kernels[F×k]` → `[B×F×T]`.
    pub fn depthwise_conv(&mut self, u: Var, kernels: Var) -> Result<Var> {
        let (uv, kv) = (self.value(u).clone(), self.value(kernels).clone());
        if uv.rank() != 3 || kv.rank() != 2 || kv.shape()[0] != uv.shape()[1] {
            return Err(Error::dim("depthwise_conv", uv.shape(), kv.shape()));
        }
        let (b, f, t) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let k = kv.shape()[1];
        check_kernel(k, t)?;
        let mut out = vec![0.0; b * f * t];
        for bi in 0..b {
            for fi in 0..f {
                let r = (bi * f + fi) * t..(bi * f + fi + 1) * t;
                conv1d_same(&uv.data()[r.clone()], kv.row(fi), &mut out[r]);
            }
        }
        Ok(self.push(
            Tensor::new(&[b, f, t], out)?,
            &[u, kernels],
            Box::new(move |g| {
                let mut gu = vec![0.0; b * f * t];
                let mut gk = vec![0.0; f * k];
                for bi in 0..b {
                    for fi in 0..f {
                        let r = (bi * f + fi) * t..(bi * f + fi + 1) * t;
                        conv1d_same_backward(
                            &uv.data()[r.clone()],
                            kv.row(fi),
                            &g.data()[r.clone()],
                            &mut gu[r],
                            &mut gk[fi * k..(fi + 1) * k],
                        );
                    }
                }
                vec![
                    Tensor::new(&[b, f, t], gu).unwrap(),
                    Tensor::new(&[f, k], gk).unwrap(),
                ]
            }),
        ))
    }

    /// Adds `bias[F]` to every time step of feature map `F` in `u[B×F×T]`.
    pub fn add_channel_bias(&mut self, u: Var, bias: Var) -> Result<Var> {
        let (uv, bv) = (self.value(u), self.value(bias));
        if uv.rank() != 3 || bv.shape() != [uv.shape()[1]] {
            return Err(Error::dim("add_channel_bias", uv.shape(), bv.shape()));
        }
        let (f, t) = (uv.shape()[1], uv.shape()[2]);
        let mut out = uv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(t).enumerate() {
            let bias = bv.data()[i % f];
            chunk.iter_mut().for_each(|x| *x += bias);
        }
        Ok(self.push(
            out,
            &[u, bias],
            Box::new(move |g| {
                let mut gb = vec![0.0; f];
                for (i, chunk) in g.data().chunks(t).enumerate() {
                    gb[i % f] += chunk.iter().sum::<f64>();
                }
                vec![g.clone(), Tensor::vector(&gb)]
            }),
        ))
    }

    /// Non-overlapping mean pooling along time; a trailing remainder shorter
    /// than `stride` is dropped. `u[B×F×T]` → `[B×F×⌊T/stride⌋]`.
    pub fn mean_pool(&mut self, u: Var, stride: usize) -> Result<Var> {
        let uv = self.value(u);
        if uv.rank() != 3 || stride == 0 || stride > uv.shape()[2] {
            return Err(Error::dim("mean_pool", uv.shape(), &[stride]));
        }
        let (b, f, t) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let tp = t / stride;
        let mut out = vec![0.0; b * f * tp];
        for (src, dst) in uv.data().chunks(t).zip(out.chunks_mut(tp)) {
            for (j, o) in dst.iter_mut().enumerate() {
                *o = src[j * stride..(j + 1) * stride].iter().sum::<f64>() / stride as f64;
            }
        }
        Ok(self.push(
            Tensor::new(&[b, f, tp], out)?,
            &[u],
            Box::new(move |g| {
                let mut gu = vec![0.0; b * f * t];
                for (go, dst) in g.data().chunks(tp).zip(gu.chunks_mut(t)) {
                    for (j, &x) in go.iter().enumerate() {
                        dst[j * stride..(j + 1) * stride]
                            .iter_mut()
                            .for_each(|d| *d = x / stride as f64);
                    }
                }
                vec![Tensor::new(&[b, f, t], gu).unwrap()]
            }),
        ))
    }

    // ---- patch ops used by the hierarchical encoder ------------------

    /// Sliding windows of length `w` every `s` samples: `z[B×T']` →
    /// `[B×n×w]` with `n = ⌊(T'−w)/s⌋ + 1`.
    pub fn patchify(&mut self, z: Var, w: usize, s: usize) -> Result<Var> {
        let zv = self.value(z);
        if zv.rank() != 2 {
            return Err(Error::dim("patchify", zv.shape(), &[w, s]));
        }
        let (b, tp) = (zv.shape()[0], zv.shape()[1]);
        let n = patch_count(tp, w, s)?;
        let mut out = Vec::with_capacity(b * n * w);
        for row in zv.data().chunks(tp) {
            for i in 0..n {
                out.extend_from_slice(&row[i * s..i * s + w]);
            }
        }
        Ok(self.push(
            Tensor::new(&[b, n, w], out)?,
            &[z],
            Box::new(move |g| {
                let mut gz = vec![0.0; b * tp];
                for (bi, dst) in gz.chunks_mut(tp).enumerate() {
                    for i in 0..n {
                        let go = &g.data()[(bi * n + i) * w..(bi * n + i + 1) * w];
                        dst[i * s..i * s + w]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(d, &x)| *d += x);
                    }
                }
                vec![Tensor::new(&[b, tp], gz).unwrap()]
            }),
        ))
    }

    /// Averages each length-`w` patch into `d` contiguous bins with
    /// boundaries `⌊j·w/d⌋`. Bins that would be empty (`d > w`) take the
    /// single sample at their start.
    pub fn adaptive_pool(&mut self, p: Var, d: usize) -> Result<Var> {
        let pv = self.value(p);
        if pv.rank() != 3 || d == 0 {
            return Err(Error::dim("adaptive_pool", pv.shape(), &[d]));
        }
        let (b, n, w) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let bins = pool_bins(w, d);
        let mut out = Vec::with_capacity(b * n * d);
        for patch in pv.data().chunks(w) {
            for &(lo, hi) in &bins {
                out.push(patch[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
            }
        }
        Ok(self.push(
            Tensor::new(&[b, n, d], out)?,
            &[p],
            Box::new(move |g| {
                let mut gp = vec![0.0; b * n * w];
                for (go, dst) in g.data().chunks(d).zip(gp.chunks_mut(w)) {
                    for (&(lo, hi), &x) in bins.iter().zip(go) {
                        let share = x / (hi - lo) as f64;
                        dst[lo..hi].iter_mut().for_each(|v| *v += share);
                    }
                }
                vec![Tensor::new(&[b, n, w], gp).unwrap()]
            }),
        ))
    }

    /// Multiplies every patch of sample `b` by that sample's gate vector:
    /// `p[B×n×d]`, `gate[B×d]` → `[B×n×d]`.
    pub fn gate_patches(&mut self, p: Var, gate: Var) -> Result<Var> {
        let (pv, gv) = (self.value(p).clone(), self.value(gate).clone());
        if pv.rank() != 3 || gv.shape() != [pv.shape()[0], pv.shape()[2]] {
            return Err(Error::dim("gate_patches", pv.shape(), gv.shape()));
        }
        let (b, n, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let mut out = pv.clone();
        for bi in 0..b {
            let grow = gv.row(bi);
            for i in 0..n {
                let base = (bi * n + i) * d;
                for j in 0..d {
                    out.data_mut()[base + j] *= grow[j];
                }
            }
        }
        Ok(self.push(
            out,
            &[p, gate],
            Box::new(move |g| {
                let mut gp = vec![0.0; b * n * d];
                let mut gg = vec![0.0; b * d];
                for bi in 0..b {
                    for i in 0..n {
                        let base = (bi * n + i) * d;
                        for j in 0..d {
                            gp[base + j] = g.data()[base + j] * gv.data()[bi * d + j];
                            gg[bi * d + j] += g.data()[base + j] * pv.data()[base + j];
                        }
                    }
                }
                vec![
                    Tensor::new(&[b, n, d], gp).unwrap(),
                    Tensor::new(&[b, d], gg).unwrap(),
                ]
            }),
        ))
    }

    /// Patch `t` of every sample: `p[B×n×d]` → `[B×d]`.
    pub fn patch_at(&mut self, p: Var, t: usize) -> Result<Var> {
        let pv = self.value(p);
        if pv.rank() != 3 || t >= pv.shape()[1] {
            return Err(Error::dim("patch_at", pv.shape(), &[t]));
        }
        let (b, n, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&pv.data()[(bi * n + t) * d..(bi * n + t + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(&[b, d], out)?,
            &[p],
            Box::new(move |g| {
                let mut gp = vec![0.0; b * n * d];
                for bi in 0..b {
                    gp[(bi * n + t) * d..(bi * n + t + 1) * d]
                        .copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                vec![Tensor::new(&[b, n, d], gp).unwrap()]
            }),
        ))
    }
}

/// Number of windows of length `w` at stride `s` over `len` samples.
pub fn patch_count(len: usize, w: usize, s: usize) -> Result<usize> {
    if w == 0 || w > len {
        return Err(Error::Config(format!(
            "patch window {w} must lie in [1, {len}]"
        )));
    }
    if s == 0 || s > w {
        return Err(Error::Config(format!(
            "patch stride {s} must lie in [1, {w}]"
        )));
    }
    Ok((len - w) / s + 1)
}

/// Half-open bin ranges for adaptive average pooling of `w` samples into `d` bins.
pub(crate) fn pool_bins(w: usize, d: usize) -> Vec<(usize, usize)> {
    (0..d)
        .map(|j| {
            let lo = j * w / d;
            let hi = ((j + 1) * w / d).max(lo + 1).min(w);
            let lo = lo.min(w - 1);
            (lo, hi)
        })
        .collect()
}

fn check_kernel(k: usize, t: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal kernel length {k} must be odd"
        )));
    }
    if k > t {
        return Err(Error::Config(format!(
            "temporal kernel length {k} exceeds signal length {t}"
        )));
    }
    Ok(())
}

/// Centered cross-correlation with zero padding: `dst[i] = Σ_j k[j]·src[i+j−k/2]`.
fn conv1d_same(src: &[f64], kernel: &[f64], dst: &mut [f64]) {
    let (t, k) = (src.len(), kernel.len());
    let half = k / 2;
    for (i, d) in dst.iter_mut().enumerate() {
        // taps j with 0 <= i + j - half < t
        let lo = half.saturating_sub(i);
        let hi = k.min(t + half - i);
        let base = i + lo - half;
        *d = kernel[lo..hi]
            .iter()
            .zip(&src[base..base + hi - lo])
            .map(|(a, b)| a * b)
            .sum();
    }
}

fn conv1d_same_backward(
    src: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_src: &mut [f64],
    grad_k: &mut [f64],
) {
    let (t, k) = (src.len(), kernel.len());
    let half = k / 2;
    for (i, &go) in grad_out.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        let lo = half.saturating_sub(i);
        let hi = k.min(t + half - i);
        let base = i + lo - half;
        for ((gs, &kv), (gk, &sv)) in grad_src[base..base + hi - lo]
            .iter_mut()
            .zip(&kernel[lo..hi])
            .zip(grad_k[lo..hi].iter_mut().zip(&src[base..base + hi - lo]))
        {
            *gs += go * kv;
            *gk += go * sv;
        }
    }
}
