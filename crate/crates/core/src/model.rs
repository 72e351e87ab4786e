//! Model assembly: backbone plus either a plain linear readout or the
//! hierarchical cycle stack with its reliability head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::iue::{aggregate_vars, IueConfig, IueHalter, ReliabilityHead};
use crate::mhsp::{run_cycles, CycleVars, MhspConfig, MhspParams};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform initialisation in `[-bound, bound]`.
pub fn init_uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Glorot-style bound for a `[fan_out × fan_in]` weight.
pub fn glorot(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Backbone and a linear readout, no cycles.
    Baseline,
    /// Cycle stack, trained on the last cycle's logits.
    Mhsp,
    /// Cycle stack with reliability scoring, aggregation and halting.
    MhspIue,
}

impl Variant {
    pub fn uses_cycles(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_iue(self) -> bool {
        self == Variant::MhspIue
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mhsp" => Ok(Variant::Mhsp),
            "mhsp_iue" => Ok(Variant::MhspIue),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected baseline|mhsp|mhsp_iue)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Mhsp => "mhsp",
            Variant::MhspIue => "mhsp_iue",
        })
    }
}

/// Trial geometry a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub mhsp: MhspConfig,
    pub iue: IueConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let geo = self.geometry;
        if geo.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                geo.classes
            )));
        }
        let max_window = if self.variant.uses_cycles() {
            self.mhsp.validate()?;
            self.mhsp.windows.iter().copied().max().unwrap_or(1)
        } else {
            1
        };
        self.backbone
            .validate(geo.channels, geo.samples, max_window)?;
        if self.variant.uses_cycles() {
            self.mhsp
                .validate_input(self.backbone.output_dim(geo.samples))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Readout {
    Linear {
        w: ParamId,
        b: ParamId,
    },
    Cycles {
        mhsp: MhspParams,
        iue: Option<(ReliabilityHead, Option<ReliabilityHead>)>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: BackboneParams,
    readout: Readout,
}

/// How a forward pass may stop before the cycle budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Halting {
    /// Always run the full budget.
    Off,
    /// Stop once batch-mean reliability exceeds the configured threshold.
    Reliability,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub cycles: Vec<CycleVars>,
    /// Pre-sigmoid reliability scores per cycle, `[B]` each.
    pub scores: Vec<Var>,
    /// Reliabilities `sigmoid(scores)` per cycle, `[B]` each.
    pub reliabilities: Vec<Var>,
    /// Scores of the separate reward head, when enabled.
    pub reward_scores: Vec<Var>,
    pub halted_early: bool,
    /// Aggregation weights `[B×L']` (reliability variant only).
    pub alpha: Option<Var>,
    /// The logits used for the loss and for prediction.
    pub logits: Var,
}

impl Forward {
    pub fn realized_cycles(&self) -> usize {
        self.cycles.len().max(1)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let geo = config.geometry;
        let backbone = BackboneParams::init(&mut store, &config.backbone, geo.channels, &mut rng)?;
        let readout = if config.variant.uses_cycles() {
            let mhsp = MhspParams::init(&mut store, &config.mhsp, geo.classes, &mut rng)?;
            let iue = if config.variant.uses_iue() {
                let head = ReliabilityHead::init(
                    &mut store,
                    "iue",
                    config.mhsp.hidden_dim,
                    geo.classes,
                    &mut rng,
                )?;
                let reward = if config.iue.reward_head {
                    Some(ReliabilityHead::init(
                        &mut store,
                        "reward",
                        config.mhsp.hidden_dim,
                        geo.classes,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                Some((head, reward))
            } else {
                None
            };
            Readout::Cycles { mhsp, iue }
        } else {
            let t_out = config.backbone.output_dim(geo.samples);
            let w = store.add(
                "readout.w",
                init_uniform(&[geo.classes, t_out], glorot(geo.classes, t_out), &mut rng),
            )?;
            let b = store.add("readout.b", Tensor::zeros(&[geo.classes]))?;
            Readout::Linear { w, b }
        };
        Ok(Self {
            config,
            store,
            backbone,
            readout,
        })
    }

    /// Runs the model on `x[B×C×T]`, recording on `g`.
    pub fn forward(&self, g: &mut Graph, x: Var, halting: Halting) -> Result<Forward> {
        let shape = g.value(x).shape().to_vec();
        let geo = self.config.geometry;
        if shape.len() != 3 || shape[1] != geo.channels || shape[2] != geo.samples {
            return Err(Error::Compatibility(format!(
                "model expects trials of {}x{} but input has shape {shape:?}",
                geo.channels, geo.samples
            )));
        }
        let z = backbone_forward(g, &self.store, &self.backbone, &self.config.backbone, x)?;
        match &self.readout {
            Readout::Linear { w, b } => {
                let wv = g.param(&self.store, *w);
                let bv = g.param(&self.store, *b);
                let logits = g.linear(z, wv, bv)?;
                Ok(Forward {
                    cycles: Vec::new(),
                    scores: Vec::new(),
                    reliabilities: Vec::new(),
                    reward_scores: Vec::new(),
                    halted_early: false,
                    alpha: None,
                    logits,
                })
            }
            Readout::Cycles { mhsp, iue: None } => {
                let run = run_cycles(
                    g,
                    &self.store,
                    mhsp,
                    &self.config.mhsp,
                    z,
                    self.config.mhsp.max_cycles,
                    None,
                )?;
                let logits = run.cycles.last().expect("at least one cycle").logits;
                Ok(Forward {
                    cycles: run.cycles,
                    scores: Vec::new(),
                    reliabilities: Vec::new(),
                    reward_scores: Vec::new(),
                    halted_early: false,
                    alpha: None,
                    logits,
                })
            }
            Readout::Cycles {
                mhsp,
                iue: Some((head, reward)),
            } => {
                let tau_stop = match halting {
                    Halting::Off => None,
                    Halting::Reliability => Some(self.config.iue.tau_stop),
                };
                let mut halter = IueHalter::new(g, &self.store, head, reward.as_ref(), tau_stop);
                let run = run_cycles(
                    g,
                    &self.store,
                    mhsp,
                    &self.config.mhsp,
                    z,
                    self.config.mhsp.max_cycles,
                    Some(&mut halter),
                )?;
                let logits: Vec<Var> = run.cycles.iter().map(|c| c.logits).collect();
                let (final_logits, alpha) =
                    aggregate_vars(g, &logits, &halter.reliabilities, self.config.iue.tau_ens)?;
                Ok(Forward {
                    cycles: run.cycles,
                    scores: halter.scores,
                    reliabilities: halter.reliabilities,
                    reward_scores: halter.reward_scores,
                    halted_early: run.halted_early,
                    alpha: Some(alpha),
                    logits: final_logits,
                })
            }
        }
    }

    /// Forward pass without gradient bookkeeping beyond the throwaway tape;
    /// returns predicted classes and the realized cycle count.
    pub fn predict(&self, x: &Tensor, halting: Halting) -> Result<(Vec<usize>, usize)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = self.forward(&mut g, xv, halting)?;
        let logits = g.value(fwd.logits);
        Ok((argmax_rows(logits), fwd.realized_cycles()))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
