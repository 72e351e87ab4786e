//! Compact convolutional feature extractor: raw trial `[B×C×T]` to a flat
//! feature vector `[B×T']`.
//!
//! Stage order is spatial filter, per-filter temporal convolution, bias,
//! activation, optional further temporal blocks, then mean pooling. Because
//! the temporal kernels are shared across electrodes, filtering space first
//! is algebraically identical to [`Graph::conv_temporal`] followed by
//! [`Graph::spatial_collapse`] and much cheaper on 22-channel input.
//!
//! The output is flattened filters-major then time: `z[f·T_pool + t]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::init_uniform;
use crate::numcore::{Graph, ParamId, ParamStore, Var};

/// Floor added inside the log of the square-log activation.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Exponential linear unit.
    Elu,
    /// Square before pooling and log after, i.e. log band power.
    SquareLog,
    Linear,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "square-log" => Ok(Activation::SquareLog),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Elu => "elu",
            Activation::SquareLog => "square-log",
            Activation::Linear => "linear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Shallow,
    Compact,
    Deep,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Preset::Shallow),
            "compact" => Ok(Preset::Compact),
            "deep" => Ok(Preset::Deep),
            other => Err(Error::Config(format!(
                "unknown backbone preset {other:?} (expected shallow|compact|deep)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Shallow => "shallow",
            Preset::Compact => "compact",
            Preset::Deep => "deep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Odd temporal kernel length in samples.
    pub temporal_kernel: usize,
    pub temporal_filters: usize,
    pub pool_stride: usize,
    pub activation: Activation,
    /// Number of temporal convolution blocks.
    pub depth: usize,
}

impl BackboneConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Shallow => Self {
                temporal_kernel: 25,
                temporal_filters: 16,
                pool_stride: 15,
                activation: Activation::SquareLog,
                depth: 1,
            },
            Preset::Compact => Self {
                temporal_kernel: 25,
                temporal_filters: 8,
                pool_stride: 15,
                activation: Activation::Elu,
                depth: 2,
            },
            Preset::Deep => Self {
                temporal_kernel: 11,
                temporal_filters: 16,
                pool_stride: 15,
                activation: Activation::Elu,
                depth: 3,
            },
        }
    }

    /// Length of the pooled time axis for a `T`-sample trial.
    pub fn pooled_len(&self, samples: usize) -> usize {
        samples / self.pool_stride
    }

    /// `T'` for a `T`-sample trial.
    pub fn output_dim(&self, samples: usize) -> usize {
        self.temporal_filters * self.pooled_len(samples)
    }

    /// Checks the config against the trial geometry and the largest patch
    /// window that will be slid over the output.
    pub fn validate(&self, channels: usize, samples: usize, max_window: usize) -> Result<()> {
        if channels == 0 || samples == 0 {
            return Err(Error::Config(
                "trials must have channels and samples".into(),
            ));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.temporal_kernel > samples {
            return Err(Error::Config(format!(
                "temporal_kernel {} exceeds trial length {samples}",
                self.temporal_kernel
            )));
        }
        if self.temporal_filters == 0 || self.depth == 0 {
            return Err(Error::Config(
                "temporal_filters and depth must be positive".into(),
            ));
        }
        if self.pool_stride == 0 || self.pool_stride > samples {
            return Err(Error::Config(format!(
                "pool_stride {} must lie in [1, {samples}]",
                self.pool_stride
            )));
        }
        let out = self.output_dim(samples);
        if out < max_window {
            return Err(Error::Config(format!(
                "backbone output length {out} is shorter than patch window {max_window}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub spatial: ParamId,
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl BackboneParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let f = cfg.temporal_filters;
        let spatial = store.add(
            "backbone.spatial",
            init_uniform(&[f, channels], (1.0 / channels as f64).sqrt(), rng),
        )?;
        let mut kernels = Vec::with_capacity(cfg.depth);
        let mut biases = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let bound = (3.0 / cfg.temporal_kernel as f64).sqrt();
            kernels.push(store.add(
                format!("backbone.kernel{i}"),
                init_uniform(&[f, cfg.temporal_kernel], bound, rng),
            )?);
            biases.push(store.add(
                format!("backbone.bias{i}"),
                crate::numcore::Tensor::zeros(&[f]),
            )?);
        }
        Ok(Self {
            spatial,
            kernels,
            biases,
        })
    }
}

/// Feature maps before pooling, `[B×F×T]`. For the square-log activation
/// these are the squared maps.
pub fn backbone_features(
    g: &mut Graph,
    store: &ParamStore,
    params: &BackboneParams,
    cfg: &BackboneConfig,
    x: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("backbone", &shape, &[3]));
    }
    cfg.validate(shape[1], shape[2], 1)?;
    let spatial = g.param(store, params.spatial);
    let mut u = g.spatial_mix(x, spatial)?;
    for (block, (&k, &b)) in params.kernels.iter().zip(&params.biases).enumerate() {
        let kv = g.param(store, k);
        let bv = g.param(store, b);
        u = g.depthwise_conv(u, kv)?;
        u = g.add_channel_bias(u, bv)?;
        let last = block + 1 == params.kernels.len();
        u = match cfg.activation {
            Activation::Elu => g.elu(u),
            Activation::SquareLog if last => g.square(u),
            Activation::SquareLog | Activation::Linear => u,
        };
    }
    Ok(u)
}

/// Full backbone: `x[B×C×T]` → `z[B×T']`.
pub fn backbone_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &BackboneParams,
    cfg: &BackboneConfig,
    x: Var,
) -> Result<Var> {
    let u = backbone_features(g, store, params, cfg, x)?;
    let mut pooled = g.mean_pool(u, cfg.pool_stride)?;
    if cfg.activation == Activation::SquareLog {
        pooled = g.ln_eps(pooled, LOG_FLOOR);
    }
    let shape = g.value(pooled).shape().to_vec();
    g.reshape(pooled, &[shape[0], shape[1] * shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn linear_cfg(kernel: usize, filters: usize, stride: usize) -> BackboneConfig {
        BackboneConfig {
            temporal_kernel: kernel,
            temporal_filters: filters,
            pool_stride: stride,
            activation: Activation::Linear,
            depth: 1,
        }
    }

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::new(&shape, data).unwrap();
    }

    fn run(store: &ParamStore, params: &BackboneParams, cfg: &BackboneConfig, x: Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = backbone_forward(&mut g, store, params, cfg, xv).unwrap();
        g.value(z).clone()
    }

    #[test]
    fn identity_kernels_pass_input_through() {
        let x = Tensor::new(&[1, 1, 6], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        for kernel in [vec![1.0], vec![0.0, 1.0, 0.0]] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(Tensor::new(&[1, kernel.len()], kernel).unwrap());
            let u = g.conv_temporal(xv, kv).unwrap();
            assert_eq!(g.value(u).data(), x.data());
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[2, 3, 5]));
        let kv = g.constant(Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap());
        let u = g.conv_temporal(xv, kv).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_longer_than_signal_is_config_error() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 1, 3]));
        let kv = g.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(g.conv_temporal(xv, kv), Err(Error::Config(_))));
    }

    #[test]
    fn spatial_collapse_examples() {
        let mut g = Graph::new();
        let u = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let uv = g.constant(u);
        let w = g.constant(Tensor::ones(&[1, 1]));
        let out = g.spatial_collapse(uv, w).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);

        let c = 4;
        let u = Tensor::full(&[1, 1, c, 5], 2.5);
        let uv = g.constant(u);
        let w = g.constant(Tensor::full(&[1, c], 1.0 / c as f64));
        let out = g.spatial_collapse(uv, w).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let w0 = g.constant(Tensor::zeros(&[1, c]));
        let out = g.spatial_collapse(uv, w0).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_identity_path_yields_channel_average() {
        let cfg = linear_cfg(1, 1, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let params = BackboneParams::init(&mut store, &cfg, 3, &mut rng).unwrap();
        set(&mut store, params.spatial, vec![1.0 / 3.0; 3]);
        set(&mut store, params.kernels[0], vec![1.0]);
        let x = Tensor::new(&[1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        let z = run(&store, &params, &cfg, x);
        assert_eq!(z.shape(), &[1, 4]);
        for (t, &v) in z.data().iter().enumerate() {
            let avg = (t as f64 + (t + 4) as f64 + (t + 8) as f64) / 3.0;
            assert!((v - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_features() {
        for preset in [Preset::Compact, Preset::Deep] {
            let cfg = BackboneConfig::preset(preset);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::new();
            let params = BackboneParams::init(&mut store, &cfg, 4, &mut rng).unwrap();
            let z = run(&store, &params, &cfg, Tensor::zeros(&[2, 4, 60]));
            assert!(z.data().iter().all(|&v| v == 0.0), "{preset}");
        }
    }

    #[test]
    fn competition_geometry_output_dim() {
        let cfg = BackboneConfig::preset(Preset::Compact);
        assert_eq!(cfg.temporal_filters, 8);
        assert_eq!(cfg.pool_stride, 15);
        assert_eq!(cfg.output_dim(750), 400);
        cfg.validate(22, 750, 16).unwrap();
        assert!(cfg.validate(22, 750, 401).is_err());
    }

    #[test]
    fn invalid_configs_fail_before_arithmetic() {
        let mut cfg = linear_cfg(4, 2, 1);
        assert!(matches!(cfg.validate(2, 10, 1), Err(Error::Config(_))));
        cfg.temporal_kernel = 11;
        assert!(cfg.validate(2, 10, 1).is_err());
        cfg.temporal_kernel = 3;
        cfg.pool_stride = 11;
        assert!(cfg.validate(2, 10, 1).is_err());
    }

    #[test]
    fn translation_covariant_before_pooling() {
        let cfg = BackboneConfig {
            activation: Activation::Elu,
            ..linear_cfg(5, 3, 1)
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let params = BackboneParams::init(&mut store, &cfg, 2, &mut rng).unwrap();
        let t = 40;
        let shift = 3;
        let base: Vec<f64> = (0..2 * t)
            .map(|i| ((i * 37 % 17) as f64 - 8.0) / 4.0)
            .collect();
        let mut shifted = vec![0.0; 2 * t];
        for c in 0..2 {
            for i in shift..t {
                shifted[c * t + i] = base[c * t + i - shift];
            }
        }
        let feats = |x: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(&[1, 2, t], x).unwrap());
            let u = backbone_features(&mut g, &store, &params, &cfg, xv).unwrap();
            g.value(u).clone()
        };
        let (a, b) = (feats(base), feats(shifted));
        let half = cfg.temporal_kernel / 2;
        for f in 0..3 {
            for i in (half + shift)..(t - half) {
                let va = a.data()[f * t + i - shift];
                let vb = b.data()[f * t + i];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    /// Output extents computed by walking the stages one at a time.
    fn shape_oracle(cfg: &BackboneConfig, c: usize, t: usize) -> (usize, usize) {
        // spatial stage: C electrode rows become F filter rows
        let maps = if c > 0 { cfg.temporal_filters } else { 0 };
        // temporal blocks are same-padded, so only pooling changes length
        let mut pooled = 0;
        while (pooled + 1) * cfg.pool_stride <= t {
            pooled += 1;
        }
        (1, maps * pooled)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_shape_matches_oracle(
            half_kernel in 0usize..4,
            filters in 1usize..4,
            stride in 1usize..6,
            depth in 1usize..3,
            channels in 1usize..4,
            samples in 8usize..40,
            act in 0usize..3,
        ) {
            let cfg = BackboneConfig {
                temporal_kernel: 2 * half_kernel + 1,
                temporal_filters: filters,
                pool_stride: stride,
                activation: [Activation::Elu, Activation::SquareLog, Activation::Linear][act],
                depth,
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let params = BackboneParams::init(&mut store, &cfg, channels, &mut rng).unwrap();
            let x = Tensor::full(&[1, channels, samples], 0.5);
            let z = run(&store, &params, &cfg, x);
            let (rows, cols) = shape_oracle(&cfg, channels, samples);
            prop_assert_eq!(z.shape(), &[rows, cols][..]);
            prop_assert_eq!(cols, cfg.output_dim(samples));
        }
    }
}
