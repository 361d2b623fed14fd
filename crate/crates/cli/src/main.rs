mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pcqa_core::metrics::{plcc, srocc, ScorePairs};
use pcqa_core::model::{load_weights, predict_preprocessed, save_weights, ModelConfig, ModelParams};
use pcqa_core::pc_io::{load_manifest, load_ply, DatasetManifest};
use pcqa_core::preprocess::{encode_patch_cache, preprocess, PartitionCount, PreprocessConfig};
use pcqa_core::training::{
    check_patch_size, folds_from_manifest, gradient_check, kfold_split, load_samples,
    loss_trace_csv, train_samples, Fold, TrainConfig,
};

use report::{FoldResult, RunReport, StimulusResult};

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "pcqa", version, about = "No-reference point cloud quality assessment")]
struct Cli {
    /// Worker threads; falls back to PCQA_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut clouds into partitions and patches and write patch caches.
    Preprocess(PreprocessArgs),
    /// Train one model, or one per fold.
    Train(TrainArgs),
    /// Print the quality score of one cloud.
    Predict(PredictArgs),
    /// Score a manifest and report PLCC/SROCC.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// A .ply file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    patch_size: usize,
    /// `auto` or a positive count.
    #[arg(long, default_value = "auto")]
    partitions: PartitionCount,
    /// Echoed in output; preprocessing itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    Default,
    Small,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Weights file, or output directory when training folds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fold count, or `none` to train one model on everything. A `fold`
    /// column in the manifest takes precedence over a count.
    #[arg(long, default_value = "6")]
    folds: String,
    #[arg(long, value_enum, default_value_t = ModelPreset::Default)]
    model: ModelPreset,
    /// Overrides the preset's patch size.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, default_value = "auto")]
    partitions: PartitionCount,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Write a checkpoint every N optimizer steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// A weights file, or a directory written by `train --folds`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PCQA_THREADS") {
            Ok(v) => Some(v.trim().parse().context("PCQA_THREADS must be an integer")?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn ply_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .ply files in {}", input.display());
        }
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        bail!("input {} does not exist", input.display())
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Outcome {
    let cfg = PreprocessConfig {
        patch_size: a.patch_size,
        partitions: a.partitions,
        ..PreprocessConfig::default()
    };
    cfg.validate().map_err(|e| anyhow!(e))?;
    let files = ply_inputs(&a.input)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut failed = 0;
    for path in &files {
        let result = load_ply(path)
            .map_err(anyhow::Error::from)
            .and_then(|pc| Ok((preprocess(&pc, &cfg)?, pc)));
        match result {
            Ok((cloud, pc)) => {
                let out = a.out.join(format!("{}.patches", pc.name()));
                fs::write(&out, encode_patch_cache(&cloud, &cfg))
                    .with_context(|| format!("writing {}", out.display()))?;
                println!(
                    "{}\tpoints={}\tpartitions={}\tpatches={}",
                    path.display(),
                    pc.len(),
                    cloud.partitions.len(),
                    cloud.patch_count()
                );
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", path.display());
                failed += 1;
            }
        }
    }
    eprintln!("preprocessed {} of {} clouds (seed {})", files.len() - failed, files.len(), a.seed);
    if failed > 0 {
        return Err(Failure::Input(anyhow!("{failed} clouds failed to parse")));
    }
    Ok(())
}

fn read_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_manifest(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read_weights(path: &Path) -> anyhow::Result<(ModelParams, PreprocessConfig)> {
    let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    let w = load_weights(&bytes).with_context(|| format!("loading weights {}", path.display()))?;
    Ok((w.params, w.preprocess))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// PLCC and SROCC, with undefined correlations reported as `None`.
fn correlations(predictions: &[f64], targets: &[f64]) -> (Option<f64>, Option<f64>) {
    match ScorePairs::new(predictions.to_vec(), targets.to_vec()) {
        Ok(pairs) => (plcc(&pairs).ok(), srocc(&pairs).ok()),
        Err(_) => (None, None),
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let start = Instant::now();
    let manifest = read_manifest(&a.manifest)?;
    let mut model_cfg = match a.model {
        ModelPreset::Default => ModelConfig::default(),
        ModelPreset::Small => ModelConfig::small(),
    };
    model_cfg.seed = a.seed;
    if let Some(p) = a.patch_size {
        model_cfg.patch_size = p;
    }
    let pre_cfg = PreprocessConfig {
        patch_size: model_cfg.patch_size,
        partitions: a.partitions,
        ..PreprocessConfig::default()
    };
    check_patch_size(&pre_cfg, &model_cfg).map_err(|e| anyhow!(e))?;
    let folds: Option<Vec<Fold>> = match a.folds.as_str() {
        "none" => None,
        n => {
            let k: usize = n.parse().context("--folds takes an integer or `none`")?;
            Some(if manifest.has_folds() {
                folds_from_manifest(&manifest).map_err(|e| anyhow!(e))?
            } else {
                kfold_split(&manifest, k, a.seed).map_err(|e| anyhow!(e))?
            })
        }
    };
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        fold_count: folds.as_ref().map_or(1, Vec::len),
        max_steps: a.max_steps,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    train_cfg.validate().map_err(|e| anyhow!(e))?;
    model_cfg.validate().map_err(|e| anyhow!(e))?;
    let samples = load_samples(&manifest, &base_dir(&a.manifest), &pre_cfg).map_err(|e| anyhow!(e))?;
    let config = serde_json::json!({
        "model": model_cfg,
        "preprocess": pre_cfg,
        "train": train_cfg,
    });

    let run = |subset: &[usize], weights_path: &Path| -> anyhow::Result<ModelParams> {
        let train_set: Vec<_> = subset.iter().map(|&i| samples[i].clone()).collect();
        let mut checkpoint = |step: usize, params: &ModelParams| -> Result<(), String> {
            let p = with_suffix(weights_path, &format!(".step{step}"));
            write_file(&p, save_weights(params, &pre_cfg)).map_err(|e| format!("{e:#}"))
        };
        let outcome = train_samples(&train_set, &model_cfg, &train_cfg, Some(&mut checkpoint))?;
        write_file(weights_path, save_weights(&outcome.params, &pre_cfg))?;
        write_file(&with_suffix(weights_path, ".loss.csv"), loss_trace_csv(&outcome.trace))?;
        if let Some(last) = outcome.trace.last() {
            eprintln!(
                "{}: {} steps, final loss {:.6}",
                weights_path.display(),
                outcome.trace.len(),
                last.loss
            );
        }
        Ok(outcome.params)
    };

    let Some(folds) = folds else {
        let all: Vec<usize> = (0..samples.len()).collect();
        run(&all, &a.out)?;
        return Ok(());
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let index_of = |path: &str| manifest.entries.iter().position(|e| e.path == path).unwrap();
    let mut stimuli = Vec::new();
    let mut fold_results = Vec::new();
    for fold in &folds {
        let train_idx: Vec<usize> = fold.train.entries.iter().map(|e| index_of(&e.path)).collect();
        let test_idx: Vec<usize> = fold.test.entries.iter().map(|e| index_of(&e.path)).collect();
        let params = run(&train_idx, &a.out.join(format!("fold_{}.weights", fold.index)))?;
        let mut preds = Vec::new();
        for &i in &test_idx {
            let s = &samples[i];
            let p = predict_preprocessed(&s.cloud, &params).map_err(|e| anyhow!(e))?.score;
            preds.push(p);
            stimuli.push(StimulusResult {
                path: s.name.clone(),
                reference_id: s.reference_id.clone(),
                mos: s.mos,
                predicted: p,
                fold: Some(fold.index),
            });
        }
        let targets: Vec<f64> = test_idx.iter().map(|&i| samples[i].mos).collect();
        let (pl, sr) = correlations(&preds, &targets);
        if pl.is_none() || sr.is_none() {
            eprintln!("warning: fold {}: correlation undefined", fold.index);
        }
        fold_results.push(FoldResult {
            fold: fold.index,
            test_references: fold.test_references.clone(),
            stimuli: test_idx.len(),
            plcc: pl,
            srocc: sr,
        });
    }
    let folds_json: Vec<_> = folds
        .iter()
        .map(|f| {
            serde_json::json!({
                "fold": f.index,
                "weights": format!("fold_{}.weights", f.index),
                "test_references": f.test_references,
            })
        })
        .collect();
    write_file(
        &a.out.join("folds.json"),
        serde_json::to_string_pretty(&folds_json).unwrap(),
    )?;
    let report = RunReport::new(
        "train",
        a.seed,
        config,
        stimuli,
        fold_results,
        start.elapsed().as_secs_f64(),
    );
    let text = serde_json::to_string_pretty(&report).unwrap();
    write_file(&a.out.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Outcome {
    let (params, pre_cfg) = read_weights(&a.weights)?;
    let pc = load_ply(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let cloud = preprocess(&pc, &pre_cfg).map_err(|e| anyhow!(e))?;
    let score = predict_preprocessed(&cloud, &params).map_err(|e| anyhow!(e))?.score;
    println!("{score}");
    Ok(())
}

#[derive(serde::Deserialize)]
struct FoldEntry {
    fold: usize,
    weights: String,
    test_references: Vec<String>,
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let start = Instant::now();
    let manifest = read_manifest(&a.manifest)?;
    // (fold index, weights path, held-out references or None for all)
    let plan: Vec<(usize, PathBuf, Option<Vec<String>>)> = if a.weights.is_dir() {
        let index = a.weights.join("folds.json");
        let text = fs::read_to_string(&index).with_context(|| format!("reading {}", index.display()))?;
        let entries: Vec<FoldEntry> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", index.display()))?;
        entries
            .into_iter()
            .map(|f| (f.fold, a.weights.join(f.weights), Some(f.test_references)))
            .collect()
    } else {
        vec![(0, a.weights.clone(), None)]
    };

    let base = base_dir(&a.manifest);
    let mut stimuli = Vec::new();
    let mut folds = Vec::new();
    let mut config = Vec::new();
    for (fold, weights, refs) in plan {
        let (params, pre_cfg) = read_weights(&weights)?;
        let subset = DatasetManifest {
            entries: manifest
                .entries
                .iter()
                .filter(|e| refs.as_ref().is_none_or(|r| r.contains(&e.reference_id)))
                .cloned()
                .collect(),
        };
        let samples = load_samples(&subset, &base, &pre_cfg).map_err(|e| anyhow!(e))?;
        let mut preds = Vec::with_capacity(samples.len());
        for s in &samples {
            let p = predict_preprocessed(&s.cloud, &params).map_err(|e| anyhow!(e))?.score;
            preds.push(p);
            stimuli.push(StimulusResult {
                path: s.name.clone(),
                reference_id: s.reference_id.clone(),
                mos: s.mos,
                predicted: p,
                fold: Some(fold),
            });
        }
        let targets: Vec<f64> = samples.iter().map(|s| s.mos).collect();
        let pairs = ScorePairs::new(preds, targets)
            .map_err(|e| Failure::Check(anyhow!("fold {fold}: {e}")))?;
        let pl = plcc(&pairs).map_err(|e| Failure::Check(anyhow!("fold {fold}: {e}")))?;
        let sr = srocc(&pairs).map_err(|e| Failure::Check(anyhow!("fold {fold}: {e}")))?;
        folds.push(FoldResult {
            fold,
            test_references: refs.unwrap_or_else(|| {
                subset.reference_ids().into_iter().map(str::to_string).collect()
            }),
            stimuli: samples.len(),
            plcc: Some(pl),
            srocc: Some(sr),
        });
        config.push(serde_json::json!({
            "weights": weights.display().to_string(),
            "model": params.config,
            "preprocess": pre_cfg,
        }));
    }
    let seed = config
        .first()
        .and_then(|c| c["model"]["seed"].as_u64())
        .unwrap_or(0);
    let report = RunReport::new(
        "eval",
        seed,
        serde_json::Value::Array(config),
        stimuli,
        folds,
        start.elapsed().as_secs_f64(),
    );
    let text = serde_json::to_string_pretty(&report).unwrap();
    if let Some(path) = &a.report {
        write_file(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let check = gradient_check(a.seed, a.corrupt_gradient).map_err(|e| anyhow!(e))?;
    println!(
        "max relative error {:.3e} at {}[{}] over {} coordinates ({} redraws)",
        check.report.max_rel_error,
        check.worst_parameter,
        check.report.worst.1,
        check.report.coordinates,
        check.redraws
    );
    if check.report.max_rel_error < GRADCHECK_TOLERANCE {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Check(anyhow!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            check.report.max_rel_error
        )))
    }
}
