use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cycdec::config::RunConfig;
use cycdec::data::{load_trialset, synth_generate};
use cycdec::experiment::{
    check_compatible, composite_gradcheck, model_from_checkpoint, run_loso, write_results,
};
use cycdec::report::{accuracy_table, parse_results_csv, summarize_accuracy, StdKind};
use cycdec::train::{evaluate, load_checkpoint};

#[derive(Parser)]
#[command(
    name = "cycdec",
    version,
    about = "Hierarchical recurrent motor-imagery decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic trial set described by the synth.* keys.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output trial file (defaults to the config's dataset path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per leave-one-subject-out fold.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint at batch size 1 with halting active.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict evaluation to one subject id.
        #[arg(long)]
        subject: Option<usize>,
        /// Print one line per trial.
        #[arg(long)]
        trials: bool,
    },
    /// Finite-difference check of the full objective on random toy models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        runs: u64,
    },
    /// Per-subject accuracy table with mean and std.
    Report {
        /// results.csv files, one column each.
        files: Vec<PathBuf>,
        /// Comma-separated accuracies, summarized directly.
        #[arg(long, conflicts_with = "files")]
        values: Option<String>,
        #[arg(long, default_value = "population")]
        std: String,
    },
    /// Print the default configuration with every key documented.
    Config,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), out),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            dataset,
            subject,
            trials,
        } => cmd_eval(&checkpoint, &dataset, subject, trials),
        Command::Gradcheck { seed, runs } => cmd_gradcheck(seed, runs),
        Command::Report { files, values, std } => cmd_report(&files, values.as_deref(), &std),
        Command::Config => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    })
}

fn cmd_synth(config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.dataset.clone());
    let set = synth_generate(&cfg.synth)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    set.save(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} trials ({} subjects, {} channels, {} samples, {} classes) to {}",
        set.len(),
        set.subject_ids().len(),
        set.channels(),
        set.samples(),
        set.classes,
        out.display()
    );
    for (s, counts) in set.label_histogram() {
        println!("subject {s}: {counts:?}");
    }
    Ok(())
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = load_trialset(&cfg.dataset)
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    cfg.model_config(cycdec::experiment::geometry_of(&data))
        .validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let folds = run_loso(&cfg, &data, Some(&cfg.out_dir), |f| {
        println!(
            "subject {}: test accuracy {:.4}, mean cycles {:.2}, best epoch {} (val {:.4})",
            f.subject, f.test_accuracy, f.mean_cycles, f.best_epoch, f.val_accuracy
        );
    })?;
    let files = write_results(&cfg, &folds, &cfg.out_dir)?;
    let column = folds.iter().map(|f| (f.subject, f.test_accuracy)).collect();
    print!(
        "{}",
        accuracy_table(&[(cfg.variant.to_string(), column)], cfg.std)?
    );
    println!(
        "results: {} and {}",
        files.text.display(),
        files.csv.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    subject: Option<usize>,
    per_trial: bool,
) -> Result<()> {
    let ckpt =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_trialset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    check_compatible(&ckpt, &data)?;
    let (_, model) = model_from_checkpoint(&ckpt)?;
    let indices: Vec<usize> = (0..data.len())
        .filter(|&i| subject.is_none_or(|s| data.subjects[i] == s))
        .collect();
    if indices.is_empty() {
        bail!("no trials for subject {}", subject.unwrap_or_default());
    }
    let eval = evaluate(&model, &data, &indices)?;
    if per_trial {
        println!("trial,subject,label,prediction");
        for (k, &i) in indices.iter().enumerate() {
            println!(
                "{i},{},{},{}",
                data.subjects[i], eval.labels[k], eval.predictions[k]
            );
        }
    }
    println!("trials = {}", indices.len());
    println!("accuracy = {:.6}", eval.accuracy);
    println!("mean_cycles = {:.6}", eval.mean_cycles);
    Ok(())
}

fn cmd_gradcheck(seed: u64, runs: u64) -> Result<()> {
    let mut failed = 0;
    for s in seed..seed + runs {
        let report = composite_gradcheck(s)?;
        println!(
            "seed {s}: {} ({} tensors, worst abs error {:.3e}, worst rel error above floor {:.3e})",
            if report.passed() { "PASS" } else { "FAIL" },
            report.params.len(),
            report.worst_abs_error(),
            report.worst_rel_error()
        );
        if !report.passed() {
            print!("{report}");
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {runs} gradient checks failed");
    }
    Ok(())
}

fn cmd_report(files: &[PathBuf], values: Option<&str>, std: &str) -> Result<()> {
    let kind: StdKind = std.parse()?;
    if let Some(values) = values {
        let accs: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad accuracy {v:?}"))
            })
            .collect::<Result<_>>()?;
        let (mean, sd) = summarize_accuracy(&accs, kind)?;
        println!("mean = {mean:.3}");
        println!("std = {sd:.3}");
        return Ok(());
    }
    if files.is_empty() {
        bail!("give results.csv files or --values");
    }
    let mut columns = Vec::with_capacity(files.len());
    for f in files {
        let text =
            std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let name = f
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        columns.push((name, parse_results_csv(&text)?));
    }
    print!("{}", accuracy_table(&columns, kind)?);
    Ok(())
}
