//! Multi-scale hierarchical signal processing.
//!
//! The backbone output `z[B×T']` is cut into overlapping windows, each
//! window is average-pooled to `d` values, and the patch sequence is read
//! by a gated recurrent low-level encoder (LLE) whose final state is
//! RMS-normalised. A high-level encoder (HLE) takes one recurrent step per
//! reasoning cycle on the LLE summary, carrying its state from cycle to
//! cycle, and a shared affine head maps that state to class logits.
//!
//! From the second cycle on, patches are softly suppressed by a sigmoid gate
//! computed from the previous cycle's HLE state; the same gate vector is
//! applied to every patch of a sample.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{glorot, init_uniform};
use crate::numcore::{patch_count, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MhspConfig {
    /// Patch windows; one entry is the single-scale model, several entries
    /// run each scale through the shared LLE and average the summaries.
    pub windows: Vec<usize>,
    /// Patch stride; 0 means half the window (at least 1).
    pub stride: usize,
    /// Pooled patch dimension `d`.
    pub patch_dim: usize,
    /// Hidden size `d_h` of both encoders.
    pub hidden_dim: usize,
    pub max_cycles: usize,
    /// RMS-normalisation epsilon.
    pub eps: f64,
}

impl Default for MhspConfig {
    fn default() -> Self {
        Self {
            windows: vec![16],
            stride: 0,
            patch_dim: 8,
            hidden_dim: 32,
            max_cycles: 4,
            eps: 1e-5,
        }
    }
}

impl MhspConfig {
    pub fn stride_for(&self, window: usize) -> usize {
        if self.stride == 0 {
            (window / 2).max(1)
        } else {
            self.stride
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(
                "patch windows must be a non-empty list of positive sizes".into(),
            ));
        }
        for &w in &self.windows {
            let s = self.stride_for(w);
            if s > w {
                return Err(Error::Config(format!(
                    "patch stride {s} exceeds window {w}"
                )));
            }
        }
        if self.patch_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "patch_dim and hidden_dim must be positive".into(),
            ));
        }
        if self.max_cycles == 0 {
            return Err(Error::Config("max_cycles must be at least 1".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Checks every window against the backbone output length.
    pub fn validate_input(&self, len: usize) -> Result<()> {
        for &w in &self.windows {
            patch_count(len, w, self.stride_for(w))?;
        }
        Ok(())
    }
}

/// Parameters of one gated recurrent cell, weights laid out `[d_h × d_in]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wb = glorot(hidden_dim, input_dim);
        let ub = glorot(hidden_dim, hidden_dim);
        let mut weight = |name: &str, cols: usize, bound: f64| {
            store.add(
                format!("{prefix}.{name}"),
                init_uniform(&[hidden_dim, cols], bound, rng),
            )
        };
        let w_z = weight("w_z", input_dim, wb)?;
        let w_r = weight("w_r", input_dim, wb)?;
        let w_h = weight("w_h", input_dim, wb)?;
        let u_z = weight("u_z", hidden_dim, ub)?;
        let u_r = weight("u_r", hidden_dim, ub)?;
        let u_h = weight("u_h", hidden_dim, ub)?;
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::zeros(&[hidden_dim]))?;
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::zeros(&[hidden_dim]))?;
        let b_h = store.add(format!("{prefix}.b_h"), Tensor::zeros(&[hidden_dim]))?;
        Ok(Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundGru {
        BoundGru {
            w_z: g.param(store, self.w_z),
            w_r: g.param(store, self.w_r),
            w_h: g.param(store, self.w_h),
            u_z: g.param(store, self.u_z),
            u_r: g.param(store, self.u_r),
            u_h: g.param(store, self.u_h),
            b_z: g.param(store, self.b_z),
            b_r: g.param(store, self.b_r),
            b_h: g.param(store, self.b_h),
        }
    }
}

/// [`GruParams`] bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

/// One gated recurrent step on `x[B×d_in]` from `h[B×d_h]`.
pub fn gru_step(g: &mut Graph, p: &BoundGru, x: Var, h: Var) -> Result<Var> {
    let xz = g.linear(x, p.w_z, p.b_z)?;
    let hz = g.matmul_nt(h, p.u_z)?;
    let pre_z = g.add(xz, hz)?;
    let z = g.sigmoid(pre_z);

    let xr = g.linear(x, p.w_r, p.b_r)?;
    let hr = g.matmul_nt(h, p.u_r)?;
    let pre_r = g.add(xr, hr)?;
    let r = g.sigmoid(pre_r);

    let xh = g.linear(x, p.w_h, p.b_h)?;
    let rh = g.mul(r, h)?;
    let hh = g.matmul_nt(rh, p.u_h)?;
    let pre_h = g.add(xh, hh)?;
    let cand = g.tanh(pre_h);

    let keep = g.one_minus(z);
    let old = g.mul(keep, h)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// Low-level encoder: a [`GruParams`] cell plus the RMS-normalisation tail.
#[derive(Clone, Debug)]
pub struct LleParams {
    pub cell: GruParams,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLle {
    pub cell: BoundGru,
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LleParams {
    pub fn bind(&self, g: &mut Graph, store: &ParamStore, eps: f64) -> BoundLle {
        BoundLle {
            cell: self.cell.bind(g, store),
            gamma: g.param(store, self.gamma),
            beta: g.param(store, self.beta),
            eps,
        }
    }
}

/// Top-down gate `sigmoid(W_g h + b_g)`, `W_g[d×d_h]`, `b_g[d]`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGate {
    pub w: Var,
    pub b: Var,
}

/// Shared affine map from HLE state to class logits.
#[derive(Clone, Debug)]
pub struct LogitHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MhspParams {
    pub gate: GateParams,
    pub lle: LleParams,
    pub hle: GruParams,
    pub head: LogitHead,
}

impl MhspParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: &MhspConfig,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, dh) = (cfg.patch_dim, cfg.hidden_dim);
        let gate = GateParams {
            w: store.add("gate.w", init_uniform(&[d, dh], glorot(d, dh), rng))?,
            b: store.add("gate.b", Tensor::zeros(&[d]))?,
        };
        let lle = LleParams {
            cell: GruParams::init(store, "lle", d, dh, rng)?,
            gamma: store.add("lle.gamma", Tensor::ones(&[dh]))?,
            beta: store.add("lle.beta", Tensor::zeros(&[dh]))?,
        };
        let hle = GruParams::init(store, "hle", dh, dh, rng)?;
        let head = LogitHead {
            w: store.add(
                "head.w",
                init_uniform(&[classes, dh], glorot(classes, dh), rng),
            )?,
            b: store.add("head.b", Tensor::zeros(&[classes]))?,
        };
        Ok(Self {
            gate,
            lle,
            hle,
            head,
        })
    }
}

/// Output of one reasoning cycle on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CycleVars {
    /// 1-based cycle index.
    pub cycle: usize,
    /// `ℓ^(c)`, `[B×K]`.
    pub logits: Var,
    /// `g^(c) = h_HLE^(c)`, `[B×d_h]`.
    pub state: Var,
}

/// Decides after each cycle whether to stop.
pub trait Halter {
    fn observe(&mut self, g: &mut Graph, cycle: &CycleVars) -> Result<bool>;
}

#[derive(Clone, Debug)]
pub struct CycleRun {
    pub cycles: Vec<CycleVars>,
    pub halted_early: bool,
}

/// `z[B×T']` → `[B×n×w]`, see [`Graph::patchify`].
pub fn patchify(g: &mut Graph, z: Var, window: usize, stride: usize) -> Result<Var> {
    g.patchify(z, window, stride)
}

/// `[B×n×w]` → `[B×n×d]`, see [`Graph::adaptive_pool`].
pub fn adaptive_pool(g: &mut Graph, patches: Var, d: usize) -> Result<Var> {
    g.adaptive_pool(patches, d)
}

/// Applies the top-down gate; patches pass unchanged when there is no
/// previous HLE state (cycle 1).
pub fn top_down_gate(
    g: &mut Graph,
    patches: Var,
    h_prev: Option<Var>,
    gate: &BoundGate,
) -> Result<Var> {
    let Some(h) = h_prev else {
        return Ok(patches);
    };
    let pre = g.linear(h, gate.w, gate.b)?;
    let gv = g.sigmoid(pre);
    g.gate_patches(patches, gv)
}

/// Runs the LLE over the patch sequence `[B×n×d]` from a zero state and
/// returns the normalised final state `[B×d_h]`.
pub fn lle_forward(g: &mut Graph, lle: &BoundLle, patches: Var) -> Result<Var> {
    let shape = g.value(patches).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("lle_forward", &shape, &[3]));
    }
    let (b, n) = (shape[0], shape[1]);
    let dh = g.value(lle.gamma).numel();
    let mut h = g.constant(Tensor::zeros(&[b, dh]));
    for t in 0..n {
        let p = g.patch_at(patches, t)?;
        h = gru_step(g, &lle.cell, p, h)?;
    }
    g.rms_norm(h, lle.gamma, lle.beta, lle.eps)
}

/// One HLE step with `h_lle` as input and the carried HLE state as prior.
pub fn hle_forward(g: &mut Graph, hle: &BoundGru, h_lle: Var, h_carry: Var) -> Result<Var> {
    gru_step(g, hle, h_lle, h_carry)
}

/// Runs up to `max_cycles` LLE→HLE cycles on `z[B×T']`.
///
/// After each cycle the optional halter sees the cycle output and may end
/// the run; cycles are never cut below one.
pub fn run_cycles(
    g: &mut Graph,
    store: &ParamStore,
    params: &MhspParams,
    cfg: &MhspConfig,
    z: Var,
    max_cycles: usize,
    mut halter: Option<&mut dyn Halter>,
) -> Result<CycleRun> {
    if max_cycles == 0 {
        return Err(Error::Config("cycle budget must be at least 1".into()));
    }
    let batch = g.value(z).shape()[0];
    let mut scales = Vec::with_capacity(cfg.windows.len());
    for &w in &cfg.windows {
        let raw = patchify(g, z, w, cfg.stride_for(w))?;
        scales.push(adaptive_pool(g, raw, cfg.patch_dim)?);
    }
    let gate = BoundGate {
        w: g.param(store, params.gate.w),
        b: g.param(store, params.gate.b),
    };
    let lle = params.lle.bind(g, store, cfg.eps);
    let hle = params.hle.bind(g, store);
    let head_w = g.param(store, params.head.w);
    let head_b = g.param(store, params.head.b);

    let mut carry = g.constant(Tensor::zeros(&[batch, cfg.hidden_dim]));
    let mut prev: Option<Var> = None;
    let mut cycles = Vec::with_capacity(max_cycles);
    let mut halted_early = false;
    for c in 1..=max_cycles {
        let mut summary: Option<Var> = None;
        for &p in &scales {
            let gated = top_down_gate(g, p, prev, &gate)?;
            let h = lle_forward(g, &lle, gated)?;
            summary = Some(match summary {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
        }
        let mut h_lle = summary.expect("at least one scale");
        if scales.len() > 1 {
            h_lle = g.scale(h_lle, 1.0 / scales.len() as f64);
        }
        let h_hle = hle_forward(g, &hle, h_lle, carry)?;
        let logits = g.linear(h_hle, head_w, head_b)?;
        let out = CycleVars {
            cycle: c,
            logits,
            state: h_hle,
        };
        cycles.push(out);
        carry = h_hle;
        prev = Some(h_hle);
        if let Some(h) = halter.as_deref_mut() {
            if h.observe(g, &out)? && c < max_cycles {
                halted_early = true;
                break;
            }
        }
    }
    Ok(CycleRun {
        cycles,
        halted_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        init_uniform(shape, 1.0, rng)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `W·v` for a row-major `[rows × v.len()]` matrix.
    fn matvec(w: &Tensor, v: &[f64]) -> Vec<f64> {
        let cols = v.len();
        (0..w.shape()[0])
            .map(|i| (0..cols).map(|j| w.data()[i * cols + j] * v[j]).sum())
            .collect()
    }

    /// Gated recurrent step written out with plain loops, independent of the tape.
    fn oracle_gru_step(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let v = |id: ParamId| store.get(id).value.clone();
        let (wz, wr, wh) = (v(p.w_z), v(p.w_r), v(p.w_h));
        let (uz, ur, uh) = (v(p.u_z), v(p.u_r), v(p.u_h));
        let (bz, br, bh) = (v(p.b_z), v(p.b_r), v(p.b_h));
        let dh = h.len();
        let (wzx, uzh) = (matvec(&wz, x), matvec(&uz, h));
        let (wrx, urh) = (matvec(&wr, x), matvec(&ur, h));
        let z: Vec<f64> = (0..dh)
            .map(|i| sigmoid(wzx[i] + uzh[i] + bz.data()[i]))
            .collect();
        let r: Vec<f64> = (0..dh)
            .map(|i| sigmoid(wrx[i] + urh[i] + br.data()[i]))
            .collect();
        let rh: Vec<f64> = (0..dh).map(|i| r[i] * h[i]).collect();
        let (whx, uhrh) = (matvec(&wh, x), matvec(&uh, &rh));
        (0..dh)
            .map(|i| {
                let cand = (whx[i] + uhrh[i] + bh.data()[i]).tanh();
                (1.0 - z[i]) * h[i] + z[i] * cand
            })
            .collect()
    }

    fn oracle_rms(h: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let r = (h.iter().map(|x| x * x).sum::<f64>() / h.len() as f64 + eps).sqrt();
        (0..h.len())
            .map(|i| gamma[i] * h[i] / r + beta[i])
            .collect()
    }

    struct Fixture {
        store: ParamStore,
        params: MhspParams,
        cfg: MhspConfig,
    }

    fn fixture(d: usize, dh: usize, classes: usize, seed: u64) -> Fixture {
        let cfg = MhspConfig {
            windows: vec![4],
            stride: 2,
            patch_dim: d,
            hidden_dim: dh,
            max_cycles: 3,
            eps: 1e-5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = MhspParams::init(&mut store, &cfg, classes, &mut rng).unwrap();
        // non-zero biases and norm affine so the oracle exercises them
        for id in [
            params.lle.cell.b_z,
            params.lle.cell.b_r,
            params.lle.cell.b_h,
            params.lle.beta,
            params.hle.b_z,
            params.hle.b_r,
            params.hle.b_h,
            params.gate.b,
            params.head.b,
        ] {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = rand_tensor(&shape, &mut rng);
        }
        let shape = store.get(params.lle.gamma).value.shape().to_vec();
        store.get_mut(params.lle.gamma).value =
            rand_tensor(&shape, &mut rng).map(|x| 1.0 + 0.5 * x);
        Fixture { store, params, cfg }
    }

    fn lle_on(fx: &Fixture, patches: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let lle = fx.params.lle.bind(&mut g, &fx.store, fx.cfg.eps);
        let p = g.constant(patches.clone());
        let out = lle_forward(&mut g, &lle, p).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn lle_matches_hand_unrolled_recurrence() {
        let (d, dh) = (4, 5);
        let fx = fixture(d, dh, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gamma = fx.store.get(fx.params.lle.gamma).value.data().to_vec();
        let beta = fx.store.get(fx.params.lle.beta).value.data().to_vec();
        for n in [1, 2] {
            let patches = rand_tensor(&[1, n, d], &mut rng);
            let mut h = vec![0.0; dh];
            for t in 0..n {
                h = oracle_gru_step(
                    &fx.store,
                    &fx.params.lle.cell,
                    &patches.data()[t * d..(t + 1) * d],
                    &h,
                );
            }
            let expected = oracle_rms(&h, &gamma, &beta, fx.cfg.eps);
            let got = lle_on(&fx, &patches);
            for (a, b) in got.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lle_single_step_is_update_gate_times_candidate() {
        // With h_0 = 0 the first step reduces to z_1 ⊙ tanh(W_h p_1 + b_h).
        let (d, dh) = (3, 4);
        let fx = fixture(d, dh, 2, 21);
        let p1 = [0.3, -0.7, 1.1];
        let v = |id| fx.store.get(id).value.clone();
        let cell = &fx.params.lle.cell;
        let wz = matvec(&v(cell.w_z), &p1);
        let wh = matvec(&v(cell.w_h), &p1);
        let h1: Vec<f64> = (0..dh)
            .map(|i| {
                sigmoid(wz[i] + v(cell.b_z).data()[i]) * (wh[i] + v(cell.b_h).data()[i]).tanh()
            })
            .collect();
        let expected = oracle_rms(
            &h1,
            v(fx.params.lle.gamma).data(),
            v(fx.params.lle.beta).data(),
            fx.cfg.eps,
        );
        let got = lle_on(&fx, &Tensor::new(&[1, 1, d], p1.to_vec()).unwrap());
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lle_with_zero_parameters_returns_zero() {
        let (d, dh) = (3, 4);
        let mut fx = fixture(d, dh, 2, 5);
        let ids: Vec<_> = fx.store.ids().collect();
        for id in ids {
            let name = fx.store.get(id).name.clone();
            if name.starts_with("lle.") {
                let shape = fx.store.get(id).value.shape().to_vec();
                fx.store.get_mut(id).value = if name == "lle.gamma" {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = lle_on(&fx, &rand_tensor(&[2, 5, d], &mut rng));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_shift_moves_output_exactly() {
        let fx = fixture(3, 4, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches = rand_tensor(&[2, 3, 3], &mut rng);
        let base = lle_on(&fx, &patches);
        let mut shifted = Fixture {
            store: fx.store.clone(),
            params: fx.params.clone(),
            cfg: fx.cfg.clone(),
        };
        let delta = 0.75;
        let beta = shifted
            .store
            .get(fx.params.lle.beta)
            .value
            .map(|b| b + delta);
        shifted.store.get_mut(fx.params.lle.beta).value = beta;
        let moved = lle_on(&shifted, &patches);
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((b - a - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn hle_examples() {
        let dh = 3;
        let fx = fixture(2, dh, 2, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&[1, dh], &mut rng);
        let carry = rand_tensor(&[1, dh], &mut rng);
        let mut g = Graph::new();
        let hle = fx.params.hle.bind(&mut g, &fx.store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(carry.clone()));
        let out = hle_forward(&mut g, &hle, xv, cv).unwrap();
        let expected = oracle_gru_step(&fx.store, &fx.params.hle, x.data(), carry.data());
        for (a, b) in g.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }

        // update gate saturated closed keeps the carried state
        let mut closed = fx.store.clone();
        closed.get_mut(fx.params.hle.b_z).value = Tensor::full(&[dh], -50.0);
        let mut g = Graph::new();
        let hle = fx.params.hle.bind(&mut g, &closed);
        let (xv, cv) = (g.constant(x), g.constant(carry.clone()));
        let out = hle_forward(&mut g, &hle, xv, cv).unwrap();
        assert!(g.value(out).max_abs_diff(&carry) < 1e-12);

        // all-zero parameters and zero carry give zero
        let mut zero = fx.store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            if zero.get(id).name.starts_with("hle.") {
                zero.get_mut(id).value.fill(0.0);
            }
        }
        let mut g = Graph::new();
        let hle = fx.params.hle.bind(&mut g, &zero);
        let xv = g.constant(Tensor::full(&[1, dh], 0.4));
        let cv = g.constant(Tensor::zeros(&[1, dh]));
        let out = hle_forward(&mut g, &hle, xv, cv).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_tensor(&[2, 3, 4], &mut rng);
        let h = rand_tensor(&[2, 5], &mut rng);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let hv = g.constant(h);
        let zero = BoundGate {
            w: g.constant(Tensor::zeros(&[4, 5])),
            b: g.constant(Tensor::zeros(&[4])),
        };
        let first = top_down_gate(&mut g, pv, None, &zero).unwrap();
        assert_eq!(g.value(first), &p);
        let half = top_down_gate(&mut g, pv, Some(hv), &zero).unwrap();
        assert!(g.value(half).max_abs_diff(&p.map(|x| x / 2.0)) < 1e-15);
        let open = BoundGate {
            w: g.constant(Tensor::zeros(&[4, 5])),
            b: g.constant(Tensor::full(&[4], 50.0)),
        };
        let o = top_down_gate(&mut g, pv, Some(hv), &open).unwrap();
        assert!(g.value(o).max_abs_diff(&p) < 1e-12);
    }

    struct FireAt(usize);

    impl Halter for FireAt {
        fn observe(&mut self, _g: &mut Graph, c: &CycleVars) -> Result<bool> {
            Ok(c.cycle >= self.0)
        }
    }

    fn run(
        fx: &Fixture,
        z: &Tensor,
        budget: usize,
        halter: Option<&mut dyn Halter>,
    ) -> (Graph, CycleRun) {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let r = run_cycles(&mut g, &fx.store, &fx.params, &fx.cfg, zv, budget, halter).unwrap();
        (g, r)
    }

    #[test]
    fn cycle_budget_and_halting() {
        let fx = fixture(4, 5, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let z = rand_tensor(&[2, 8], &mut rng);
        assert_eq!(run(&fx, &z, 1, None).1.cycles.len(), 1);
        let (_, r) = run(&fx, &z, 4, None);
        assert_eq!(r.cycles.len(), 4);
        assert!(!r.halted_early);
        let mut h = FireAt(2);
        let (g, r) = run(&fx, &z, 4, Some(&mut h));
        assert_eq!(r.cycles.len(), 2);
        assert!(r.halted_early);
        assert_eq!(g.value(r.cycles[1].logits).shape(), &[2, 4]);
        assert_eq!(g.value(r.cycles[1].state).shape(), &[2, 5]);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let mut fx = fixture(4, 5, 3, 41);
        fx.store.get_mut(fx.params.gate.b).value = Tensor::full(&[4], 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z = rand_tensor(&[2, 10], &mut rng);
        let (g1, r1) = run(&fx, &z, 3, None);
        let (g2, r2) = run(&fx, &z, 3, None);
        for (a, b) in r1.cycles.iter().zip(&r2.cycles) {
            assert_eq!(g1.value(a.logits), g2.value(b.logits));
        }
    }

    #[test]
    fn multi_scale_runs_each_window() {
        let mut fx = fixture(4, 5, 3, 51);
        fx.cfg.windows = vec![4, 6];
        fx.cfg.stride = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let z = rand_tensor(&[1, 12], &mut rng);
        let (_, r) = run(&fx, &z, 2, None);
        assert_eq!(r.cycles.len(), 2);
        assert!(fx.cfg.validate_input(5).is_err());
    }

    #[test]
    fn full_stack_gradcheck() {
        // B=2, n=3, d=4, d_h=5, K=4: T'=8, w=4, s=2 gives n=3.
        let mut fx = fixture(4, 5, 4, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let z = rand_tensor(&[2, 8], &mut rng);
        let labels = [1usize, 3];
        let (params, cfg) = (fx.params.clone(), fx.cfg.clone());
        let report = grad_check(
            &mut fx.store,
            |s, g| {
                let zv = g.constant(z.clone());
                let r = run_cycles(g, s, &params, &cfg, zv, 3, None)?;
                g.cross_entropy(r.cycles.last().unwrap().logits, &labels)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.params.len(), 2 + 11 + 9 + 2);
    }

    /// Window offsets produced by explicitly sliding over the sequence.
    fn enumerate_windows(len: usize, w: usize, s: usize) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut start = 0;
        while start + w <= len {
            offsets.push(start);
            start += s;
        }
        offsets
    }

    #[test]
    fn patchify_examples() {
        assert_eq!(patch_count(8, 4, 2).unwrap(), 3);
        assert_eq!(enumerate_windows(8, 4, 2), vec![0, 2, 4]);
        for s in 1..=8 {
            assert_eq!(patch_count(8, 8, s).unwrap(), 1);
        }
        assert_eq!(patch_count(10, 4, 3).unwrap(), 3);
        assert!(matches!(patch_count(4, 5, 1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn patch_count_matches_enumeration(
            (len, w, s) in (1usize..60).prop_flat_map(|len| (Just(len), 1..=len))
                .prop_flat_map(|(len, w)| (Just(len), Just(w), 1..=w)),
        ) {
            let n = patch_count(len, w, s).unwrap();
            let offsets = enumerate_windows(len, w, s);
            prop_assert_eq!(n, offsets.len());
            let mut g = Graph::new();
            let z = g.constant(Tensor::new(&[1, len], (0..len).map(|i| i as f64).collect()).unwrap());
            let p = g.patchify(z, w, s).unwrap();
            for (i, off) in offsets.iter().enumerate() {
                prop_assert_eq!(g.value(p).data()[i * w], *off as f64);
            }
        }

        #[test]
        fn adaptive_pool_preserves_constants(w in 1usize..20, d in 1usize..20, c in -10.0f64..10.0) {
            let mut g = Graph::new();
            let p = g.constant(Tensor::full(&[1, 2, w], c));
            let out = g.adaptive_pool(p, d).unwrap();
            prop_assert_eq!(g.value(out).shape(), &[1, 2, d][..]);
            for &v in g.value(out).data() {
                prop_assert!((v - c).abs() < 1e-12);
            }
        }

        #[test]
        fn lle_is_batch_order_equivariant(seed in any::<u64>()) {
            let fx = fixture(3, 4, 2, 77);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_tensor(&[3, 4, 3], &mut rng);
            let perm = [2usize, 0, 1];
            let permuted = Tensor::stack(&perm.iter().map(|&i| p.index_outer(i)).collect::<Vec<_>>()).unwrap();
            let a = lle_on(&fx, &p);
            let b = lle_on(&fx, &permuted);
            for (row, &src) in perm.iter().enumerate() {
                prop_assert_eq!(b.row(row), a.row(src));
            }
        }
    }
}
