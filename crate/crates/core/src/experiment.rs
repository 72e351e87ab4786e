//! Leave-one-subject-out experiment: one model per fold, trained with
//! best-validation selection and scored on the held-out subject.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{loso_splits, TrialSet};
use crate::error::{Error, Result};
use crate::model::{Geometry, Model};
use crate::report::{results_csv, results_text, FoldResult};
use crate::train::{evaluate, fit, Checkpoint};

pub fn geometry_of(data: &TrialSet) -> Geometry {
    Geometry {
        channels: data.channels(),
        samples: data.samples(),
        classes: data.classes,
    }
}

/// File name of the checkpoint for the fold holding out `subject`.
pub fn checkpoint_name(subject: usize) -> String {
    format!("fold_s{subject}.ckpt")
}

/// Runs every fold. With `out_dir` set, each fold's best checkpoint is
/// written there as soon as it is selected.
pub fn run_loso(
    cfg: &RunConfig,
    data: &TrialSet,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&FoldResult),
) -> Result<Vec<FoldResult>> {
    let geometry = geometry_of(data);
    let model_cfg = cfg.model_config(geometry);
    model_cfg.validate()?;
    let train_cfg = cfg.train_config();
    let plan = loso_splits(data, cfg.seed)?;
    let mut results = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
        let outcome = fit(&mut model, data, &fold.train, &fold.val, &train_cfg)?;
        let test = evaluate(&model, data, &fold.test)?;
        let name = checkpoint_name(fold.test_subject);
        if let Some(dir) = out_dir {
            let ckpt = Checkpoint {
                config: cfg.to_text(),
                ..outcome.best.clone()
            };
            ckpt.save(dir.join(&name))?;
        }
        let result = FoldResult {
            subject: fold.test_subject,
            test_accuracy: test.accuracy,
            mean_cycles: test.mean_cycles,
            best_epoch: outcome.best.epoch,
            val_accuracy: outcome.best.val_accuracy,
            checkpoint: name,
        };
        progress(&result);
        results.push(result);
    }
    Ok(results)
}

/// Paths written by [`write_results`].
#[derive(Clone, Debug)]
pub struct ResultFiles {
    pub text: PathBuf,
    pub csv: PathBuf,
}

pub fn write_results(cfg: &RunConfig, folds: &[FoldResult], dir: &Path) -> Result<ResultFiles> {
    let text = dir.join("results.txt");
    let csv = dir.join("results.csv");
    std::fs::write(
        &text,
        results_text(&cfg.variant.to_string(), folds, cfg.std)?,
    )?;
    std::fs::write(&csv, results_csv(folds))?;
    Ok(ResultFiles { text, csv })
}

/// Rebuilds a model from a checkpoint and its embedded configuration.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::parse_with_env(&ckpt.config, |_| None)?;
    let mut model = Model::new(cfg.model_config(ckpt.geometry), cfg.seed)?;
    model.store.restore(&ckpt.tensors)?;
    Ok((cfg, model))
}

/// Fails unless `data` has the trial geometry the checkpoint was built for.
pub fn check_compatible(ckpt: &Checkpoint, data: &TrialSet) -> Result<()> {
    let want = ckpt.geometry;
    let have = geometry_of(data);
    if want != have {
        return Err(Error::Compatibility(format!(
            "checkpoint expects {} channels x {} samples, {} classes; dataset has {} x {}, {} classes",
            want.channels, want.samples, want.classes, have.channels, have.samples, have.classes
        )));
    }
    Ok(())
}

/// Finite-difference check of the full reliability-variant objective on a
/// random toy instance (`B = 2`, `d_h = 6`, three cycles, frozen targets).
pub fn composite_gradcheck(seed: u64) -> Result<crate::numcore::GradCheckReport> {
    use crate::backbone::{Activation, BackboneConfig};
    use crate::iue::IueConfig;
    use crate::mhsp::MhspConfig;
    use crate::model::{init_uniform, Halting, ModelConfig, Variant};
    use crate::numcore::{grad_check, GradCheckOptions, Tensor};
    use crate::train::{total_loss, LossWeights};
    use rand::{Rng, SeedableRng};

    let cfg = ModelConfig {
        geometry: Geometry {
            channels: 2,
            samples: 18,
            classes: 3,
        },
        variant: Variant::MhspIue,
        backbone: BackboneConfig {
            temporal_kernel: 3,
            temporal_filters: 2,
            pool_stride: 2,
            activation: Activation::Elu,
            depth: 1,
        },
        mhsp: MhspConfig {
            windows: vec![4, 6],
            stride: 2,
            patch_dim: 3,
            hidden_dim: 6,
            max_cycles: 3,
            eps: 1e-5,
        },
        iue: IueConfig {
            tau_ens: 2.0,
            ..IueConfig::default()
        },
    };
    let mut model = Model::new(cfg, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = init_uniform(&[2, 2, 18], 1.5, &mut rng);
    let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let targets = Tensor::vector(&[rng.random(), rng.random(), rng.random()]);
    let lw = LossWeights {
        lambda_halt: 0.5,
        lambda_iue: 0.8,
        ..LossWeights::default()
    };
    let template = model.clone();
    grad_check(
        &mut model.store,
        |store, g| {
            let mut m = template.clone();
            m.store = store.clone();
            let xv = g.constant(x.clone());
            let fwd = m.forward(g, xv, Halting::Off)?;
            total_loss(g, &fwd, &labels, Some(&targets), &lw)
        },
        GradCheckOptions::default(),
    )
}
