//! Run configuration: a `key = value` text file with `#` comments.
//!
//! Every key can be overridden from the environment through `CYC_` plus the
//! key upper-cased with dots replaced by underscores, e.g.
//! `CYC_MHSP_MAX_CYCLES=2`. Environment values take precedence over the
//! file. The `backbone` preset is applied before any `backbone.*` key, so
//! individual fields can refine a preset regardless of line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, Preset};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::iue::{IueConfig, MctsConfig};
use crate::mhsp::MhspConfig;
use crate::model::{Geometry, ModelConfig, Variant};
use crate::report::StdKind;
use crate::train::{AdamConfig, IueLossForm, LossWeights, TrainConfig};

pub const ENV_PREFIX: &str = "CYC_";

/// Every accepted key with its description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "master seed for initialisation, shuffling, search and splits",
    ),
    ("dataset", "path of the trial file"),
    ("out_dir", "directory receiving checkpoints and results"),
    ("variant", "baseline | mhsp | mhsp_iue"),
    ("backbone", "backbone preset: shallow | compact | deep"),
    ("backbone.filters", "temporal filters per block"),
    ("backbone.kernel", "temporal kernel length (odd)"),
    ("backbone.pool", "mean-pool stride"),
    ("backbone.activation", "elu | square-log | linear"),
    ("backbone.depth", "number of convolution blocks"),
    ("mhsp.windows", "comma-separated patch window sizes"),
    ("mhsp.stride", "patch stride, 0 for half the window"),
    ("mhsp.patch_dim", "pooled patch dimension"),
    ("mhsp.hidden_dim", "hidden size of both recurrent encoders"),
    ("mhsp.max_cycles", "cycle budget"),
    ("mhsp.eps", "RMS normalisation epsilon"),
    (
        "iue.tau_ens",
        "softmax temperature over cycle reliabilities",
    ),
    (
        "iue.tau_stop",
        "batch-mean reliability that halts from cycle 2",
    ),
    (
        "iue.reward_head",
        "train a separate head on search targets (true | false)",
    ),
    ("mcts.simulations", "search simulations per training batch"),
    ("mcts.ucb_c", "UCB1 exploration constant"),
    ("loss.lambda_halt", "weight of the halting regularizer"),
    ("loss.lambda_iue", "weight of the reliability supervision"),
    ("loss.iue_form", "reliability supervision loss: bce | mse"),
    ("optim.lr", "Adam learning rate"),
    ("optim.beta1", "Adam first-moment decay"),
    ("optim.beta2", "Adam second-moment decay"),
    ("optim.eps", "Adam denominator epsilon"),
    ("train.epochs", "epochs per fold"),
    ("train.batch_size", "training batch size"),
    ("report.std", "std convention: population | sample"),
    ("synth.subjects", "synthetic subjects"),
    (
        "synth.trials_per_class",
        "synthetic trials per class and subject",
    ),
    ("synth.channels", "synthetic electrodes"),
    ("synth.samples", "synthetic samples per trial"),
    ("synth.sample_rate", "synthetic sampling rate, Hz"),
    ("synth.freqs", "comma-separated class frequencies, Hz"),
    ("synth.gain_jitter", "std of the per-subject signal gain"),
    ("synth.noise_std", "std of the additive white noise"),
    ("synth.seed", "seed of the synthetic generator"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub backbone_preset: Preset,
    pub backbone: BackboneConfig,
    pub mhsp: MhspConfig,
    pub iue: IueConfig,
    pub mcts_simulations: usize,
    pub mcts_ucb_c: f64,
    pub lambda_halt: f64,
    pub lambda_iue: f64,
    pub iue_form: IueLossForm,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub std: StdKind,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossWeights::default();
        let mcts = MctsConfig::default();
        Self {
            seed: 0,
            dataset: PathBuf::from("data/synth.mitr"),
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::MhspIue,
            backbone_preset: Preset::Compact,
            backbone: BackboneConfig::preset(Preset::Compact),
            mhsp: MhspConfig::default(),
            iue: IueConfig::default(),
            mcts_simulations: mcts.n_simulations,
            mcts_ucb_c: mcts.ucb_c,
            lambda_halt: loss.lambda_halt,
            lambda_iue: loss.lambda_iue,
            iue_form: loss.iue_form,
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 16,
            std: StdKind::Population,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Environment variable that overrides `key`.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "variant" => self.variant = v.parse()?,
            "backbone" => {
                self.backbone_preset = v.parse()?;
                self.backbone = BackboneConfig::preset(self.backbone_preset);
            }
            "backbone.filters" => self.backbone.temporal_filters = parse(key, v)?,
            "backbone.kernel" => self.backbone.temporal_kernel = parse(key, v)?,
            "backbone.pool" => self.backbone.pool_stride = parse(key, v)?,
            "backbone.activation" => self.backbone.activation = v.parse()?,
            "backbone.depth" => self.backbone.depth = parse(key, v)?,
            "mhsp.windows" => self.mhsp.windows = parse_list(key, v)?,
            "mhsp.stride" => self.mhsp.stride = parse(key, v)?,
            "mhsp.patch_dim" => self.mhsp.patch_dim = parse(key, v)?,
            "mhsp.hidden_dim" => self.mhsp.hidden_dim = parse(key, v)?,
            "mhsp.max_cycles" => self.mhsp.max_cycles = parse(key, v)?,
            "mhsp.eps" => self.mhsp.eps = parse(key, v)?,
            "iue.tau_ens" => self.iue.tau_ens = parse(key, v)?,
            "iue.tau_stop" => self.iue.tau_stop = parse(key, v)?,
            "iue.reward_head" => self.iue.reward_head = parse(key, v)?,
            "mcts.simulations" => self.mcts_simulations = parse(key, v)?,
            "mcts.ucb_c" => self.mcts_ucb_c = parse(key, v)?,
            "loss.lambda_halt" => self.lambda_halt = parse(key, v)?,
            "loss.lambda_iue" => self.lambda_iue = parse(key, v)?,
            "loss.iue_form" => self.iue_form = v.parse()?,
            "optim.lr" => self.adam.lr = parse(key, v)?,
            "optim.beta1" => self.adam.beta1 = parse(key, v)?,
            "optim.beta2" => self.adam.beta2 = parse(key, v)?,
            "optim.eps" => self.adam.eps = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "report.std" => self.std = v.parse()?,
            "synth.subjects" => self.synth.n_subjects = parse(key, v)?,
            "synth.trials_per_class" => self.synth.trials_per_class = parse(key, v)?,
            "synth.channels" => self.synth.channels = parse(key, v)?,
            "synth.samples" => self.synth.samples = parse(key, v)?,
            "synth.sample_rate" => self.synth.sample_rate = parse(key, v)?,
            "synth.freqs" => self.synth.class_freqs = parse_list(key, v)?,
            "synth.gain_jitter" => self.synth.subject_gain_jitter = parse(key, v)?,
            "synth.noise_std" => self.synth.noise_std = parse(key, v)?,
            "synth.seed" => self.synth.rng_seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Textual value of `key`, such that `set(key, get(key))` is a no-op.
    pub fn get(&self, key: &str) -> Result<String> {
        let b = &self.backbone;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "variant" => self.variant.to_string(),
            "backbone" => self.backbone_preset.to_string(),
            "backbone.filters" => b.temporal_filters.to_string(),
            "backbone.kernel" => b.temporal_kernel.to_string(),
            "backbone.pool" => b.pool_stride.to_string(),
            "backbone.activation" => b.activation.to_string(),
            "backbone.depth" => b.depth.to_string(),
            "mhsp.windows" => join(&self.mhsp.windows),
            "mhsp.stride" => self.mhsp.stride.to_string(),
            "mhsp.patch_dim" => self.mhsp.patch_dim.to_string(),
            "mhsp.hidden_dim" => self.mhsp.hidden_dim.to_string(),
            "mhsp.max_cycles" => self.mhsp.max_cycles.to_string(),
            "mhsp.eps" => self.mhsp.eps.to_string(),
            "iue.tau_ens" => self.iue.tau_ens.to_string(),
            "iue.tau_stop" => self.iue.tau_stop.to_string(),
            "iue.reward_head" => self.iue.reward_head.to_string(),
            "mcts.simulations" => self.mcts_simulations.to_string(),
            "mcts.ucb_c" => self.mcts_ucb_c.to_string(),
            "loss.lambda_halt" => self.lambda_halt.to_string(),
            "loss.lambda_iue" => self.lambda_iue.to_string(),
            "loss.iue_form" => self.iue_form.to_string(),
            "optim.lr" => self.adam.lr.to_string(),
            "optim.beta1" => self.adam.beta1.to_string(),
            "optim.beta2" => self.adam.beta2.to_string(),
            "optim.eps" => self.adam.eps.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "report.std" => self.std.to_string(),
            "synth.subjects" => self.synth.n_subjects.to_string(),
            "synth.trials_per_class" => self.synth.trials_per_class.to_string(),
            "synth.channels" => self.synth.channels.to_string(),
            "synth.samples" => self.synth.samples.to_string(),
            "synth.sample_rate" => self.synth.sample_rate.to_string(),
            "synth.freqs" => join(&self.synth.class_freqs),
            "synth.gain_jitter" => self.synth.subject_gain_jitter.to_string(),
            "synth.noise_std" => self.synth.noise_std.to_string(),
            "synth.seed" => self.synth.rng_seed.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Parses config text, then applies overrides looked up through `env`.
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let known = KEYS
                .iter()
                .find(|(k, _)| *k == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key {key:?}", n + 1)))?
                .0;
            if pairs.insert(known, value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
        }
        for &(key, _) in KEYS {
            if let Some(v) = env(&env_name(key)) {
                pairs.insert(key, v);
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(preset) = pairs.get("backbone") {
            cfg.set("backbone", preset)?;
        }
        for &(key, _) in KEYS.iter().filter(|(k, _)| *k != "backbone") {
            if let Some(v) = pairs.get(key) {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text with overrides from the process environment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |k| std::env::var(k).ok())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its description as a comment.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &(key, doc) in KEYS {
            writeln!(out, "# {doc}").unwrap();
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    /// Checks the settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.mhsp.validate()?;
        self.synth.validate()?;
        self.loss_weights().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.mcts_simulations == 0 {
            return Err(Error::Config("mcts.simulations must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::Config(
                "optimizer needs lr > 0 and betas in [0, 1)".into(),
            ));
        }
        if !(self.iue.tau_ens >= 0.0) {
            return Err(Error::Config("iue.tau_ens must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, geometry: Geometry) -> ModelConfig {
        ModelConfig {
            geometry,
            variant: self.variant,
            backbone: self.backbone,
            mhsp: self.mhsp.clone(),
            iue: self.iue.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_halt: self.lambda_halt,
            lambda_iue: self.lambda_iue,
            iue_enabled: self.variant.uses_iue(),
            iue_form: self.iue_form,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            loss: self.loss_weights(),
            mcts: MctsConfig {
                n_simulations: self.mcts_simulations,
                ucb_c: self.mcts_ucb_c,
                rng_seed: self.seed,
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("mhsp.windows", "8, 16").unwrap();
        cfg.set("synth.freqs", "7.5,11,19,23").unwrap();
        cfg.set("optim.lr", "0.003").unwrap();
        cfg.set("backbone.depth", "1").unwrap();
        let back = RunConfig::parse_with_env(&cfg.to_text(), no_env).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_documented() {
        let cfg = RunConfig::default();
        for &(key, doc) in KEYS {
            assert!(!doc.is_empty());
            let mut c = cfg.clone();
            c.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_duplicate_and_malformed_lines() {
        assert!(matches!(
            RunConfig::parse_with_env("bogus = 1", no_env),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse_with_env("seed = 1\nseed = 2", no_env).is_err());
        assert!(RunConfig::parse_with_env("seed 1", no_env).is_err());
        assert!(RunConfig::parse_with_env("seed = x", no_env).is_err());
        let ok = RunConfig::parse_with_env("# comment\n\nseed = 9 # trailing\n", no_env).unwrap();
        assert_eq!(ok.seed, 9);
    }

    #[test]
    fn preset_applies_before_fields() {
        let cfg =
            RunConfig::parse_with_env("backbone.filters = 3\nbackbone = deep\n", no_env).unwrap();
        assert_eq!(cfg.backbone_preset, Preset::Deep);
        assert_eq!(cfg.backbone.temporal_filters, 3);
        assert_eq!(
            cfg.backbone.temporal_kernel,
            BackboneConfig::preset(Preset::Deep).temporal_kernel
        );
    }

    #[test]
    fn environment_overrides_file() {
        let env = |k: &str| match k {
            "CYC_MHSP_MAX_CYCLES" => Some("2".to_string()),
            "CYC_SEED" => Some("77".to_string()),
            _ => None,
        };
        let cfg = RunConfig::parse_with_env("seed = 5\n", env).unwrap();
        assert_eq!((cfg.seed, cfg.mhsp.max_cycles), (77, 2));
        assert_eq!(env_name("loss.lambda_iue"), "CYC_LOSS_LAMBDA_IUE");
        let bad = |k: &str| (k == "CYC_VARIANT").then(|| "nope".to_string());
        assert!(RunConfig::parse_with_env("", bad).is_err());
    }

    #[test]
    fn loss_weights_follow_variant() {
        let mut cfg = RunConfig::default();
        assert!(cfg.loss_weights().iue_enabled);
        cfg.variant = Variant::Mhsp;
        assert!(!cfg.train_config().loss.iue_enabled);
    }
}
