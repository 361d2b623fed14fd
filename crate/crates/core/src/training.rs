//! MSE regression to MOS with Adam, k-fold splitting by reference content,
//! and the end-to-end gradient check.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{compare_with_central_differences, AutodiffError, GradCheckReport, Graph};
use crate::layers::{LayerError, MapLeaves};
use crate::model::{
    init_model, partition_forward_graph, predict_preprocessed, ModelConfig, ModelError, ModelParams,
};
use crate::pc_io::{load_ply, DatasetManifest, ManifestEntry};
use crate::preprocess::{
    normalize_patch, preprocess, Partition, PartitionPatches, PreprocessConfig, PreprocessedCloud,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training stimuli")]
    EmptyDataset,
    #[error("failed to load stimulus {path}: {message}")]
    Stimulus { path: PathBuf, message: String },
    #[error("{references} distinct references cannot fill {folds} folds")]
    TooFewReferences { references: usize, folds: usize },
    #[error("fold {0} has an empty training set")]
    EmptyTrainFold(usize),
    #[error("fold {fold} shares reference `{reference}` between train and test")]
    Leakage { fold: usize, reference: String },
    #[error("{params} parameters but {grads} gradients")]
    GradientCount { params: usize, grads: usize },
    #[error("gradient {index} has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("checkpoint failed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    pub seed: u64,
    pub fold_count: usize,
    /// Stops after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Steps between checkpoints.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 120,
            seed: 0,
            fold_count: 6,
            max_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam must be positive");
        }
        if self.fold_count == 0 {
            return bad("fold_count must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive");
        }
        Ok(())
    }
}

/// Adam moments for each parameter tensor, in canonical leaf order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }
}

/// Squared error between the mean partition score and the MOS.
pub fn loss(scores: &[f64], mos: f64) -> f64 {
    assert!(!scores.is_empty(), "loss needs at least one score");
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (mean - mos) * (mean - mos)
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::GradientCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[index].shape() != p.shape() {
            return Err(TrainError::GradientShape {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

fn autodiff_of(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Layer(LayerError::Autodiff(a)) => a,
        _ => AutodiffError::NonFiniteObjective,
    }
}

/// Loss of one cloud and its gradient w.r.t. every parameter (canonical
/// leaf order). Partitions are differentiated in parallel and their
/// gradients summed in partition order.
pub fn loss_and_gradients(
    params: &ModelParams,
    cloud: &PreprocessedCloud,
    mos: f64,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    if cloud.partitions.is_empty() {
        return Err(ModelError::NoPartitions);
    }
    let per_partition = cloud
        .partitions
        .par_iter()
        .map(|part| -> Result<(f64, Vec<Tensor>), ModelError> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let score = partition_forward_graph(&mut g, &part.patches, &bound)?;
            let value = g.value(score).data()[0];
            let mut grads = g.backward(score)?;
            let leaves = bound.leaves();
            Ok((
                value,
                leaves
                    .into_iter()
                    .map(|v| grads.take(v).expect("leaf gradient"))
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let scores: Vec<f64> = per_partition.iter().map(|(s, _)| *s).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let coeff = 2.0 * (mean - mos) / n;
    let mut iter = per_partition.into_iter();
    let (_, mut total) = iter.next().expect("non-empty");
    for (_, grads) in iter {
        for (t, g) in total.iter_mut().zip(&grads) {
            t.add_assign(g);
        }
    }
    for t in &mut total {
        for x in t.data_mut() {
            *x *= coeff;
        }
    }
    Ok(((mean - mos) * (mean - mos), total))
}

/// A stimulus with its patches precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub mos: f64,
    pub reference_id: String,
    pub cloud: PreprocessedCloud,
}

/// Parses and preprocesses every manifest entry (paths relative to
/// `base_dir`), in parallel, preserving manifest order.
pub fn load_samples(
    manifest: &DatasetManifest,
    base_dir: &Path,
    pre_cfg: &PreprocessConfig,
) -> Result<Vec<Sample>, TrainError> {
    pre_cfg
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    manifest
        .entries
        .par_iter()
        .map(|entry| load_sample(entry, base_dir, pre_cfg))
        .collect()
}

fn load_sample(
    entry: &ManifestEntry,
    base_dir: &Path,
    pre_cfg: &PreprocessConfig,
) -> Result<Sample, TrainError> {
    let path = base_dir.join(&entry.path);
    let fail = |message: String| TrainError::Stimulus {
        path: path.clone(),
        message,
    };
    let pc = load_ply(&path).map_err(|e| fail(e.to_string()))?;
    let cloud = preprocess(&pc, pre_cfg).map_err(|e| fail(e.to_string()))?;
    Ok(Sample {
        name: entry.path.clone(),
        mos: entry.mos,
        reference_id: entry.reference_id.clone(),
        cloud,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub stimulus: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<LossRecord>,
}

/// Loss trace as CSV with header `epoch,step,stimulus,loss`.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Called with `(step, params)` every `checkpoint_every` steps.
pub type CheckpointFn<'a> = dyn FnMut(usize, &ModelParams) -> Result<(), String> + 'a;

/// Trains from freshly initialized weights on precomputed samples.
pub fn train_samples(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = init_model(model_cfg)?;
    let mut leaves = model.leaves();
    let mut state = OptimizerState::new(&leaves);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::new();
    let mut checkpoint = checkpoint;
    let mut step = 0;
    'epochs: for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            if train_cfg.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            let sample = &samples[i];
            let (l, grads) = loss_and_gradients(&model, &sample.cloud, sample.mos)?;
            adam_step(&mut leaves, &grads, &mut state, train_cfg)?;
            model = model.with_leaves(leaves.clone());
            step += 1;
            trace.push(LossRecord {
                epoch,
                step,
                stimulus: sample.name.clone(),
                loss: l,
            });
            if let (Some(every), Some(cb)) = (train_cfg.checkpoint_every, checkpoint.as_mut()) {
                if step % every == 0 {
                    cb(step, &model).map_err(TrainError::Checkpoint)?;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: model,
        trace,
    })
}

/// Loads the manifest's stimuli and trains one model on all of them.
pub fn train(
    manifest: &DatasetManifest,
    base_dir: &Path,
    pre_cfg: &PreprocessConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_patch_size(pre_cfg, model_cfg)?;
    let samples = load_samples(manifest, base_dir, pre_cfg)?;
    train_samples(&samples, model_cfg, train_cfg, None)
}

pub fn check_patch_size(pre_cfg: &PreprocessConfig, model_cfg: &ModelConfig) -> Result<(), TrainError> {
    if pre_cfg.patch_size != model_cfg.patch_size {
        return Err(ModelError::PatchSizeMismatch {
            preprocess: pre_cfg.patch_size,
            model: model_cfg.patch_size,
        }
        .into());
    }
    Ok(())
}

/// Predicted score for each sample, in order.
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>, ModelError> {
    samples
        .iter()
        .map(|s| predict_preprocessed(&s.cloud, params).map(|p| p.score))
        .collect()
}

/// Trains on one dataset and predicts another.
pub fn cross_dataset(
    train_set: &[Sample],
    test_set: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainOutcome, Vec<f64>), TrainError> {
    let outcome = train_samples(train_set, model_cfg, train_cfg, None)?;
    let predictions = evaluate(&outcome.params, test_set)?;
    Ok((outcome, predictions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub test_references: Vec<String>,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

fn build_folds(
    manifest: &DatasetManifest,
    assignment: &[Vec<String>],
) -> Result<Vec<Fold>, TrainError> {
    let mut folds = Vec::with_capacity(assignment.len());
    for (index, refs) in assignment.iter().enumerate() {
        let held: HashSet<&str> = refs.iter().map(String::as_str).collect();
        let (test, train): (Vec<ManifestEntry>, Vec<ManifestEntry>) = manifest
            .entries
            .iter()
            .cloned()
            .partition(|e| held.contains(e.reference_id.as_str()));
        if train.is_empty() {
            return Err(TrainError::EmptyTrainFold(index));
        }
        if let Some(e) = train.iter().find(|e| held.contains(e.reference_id.as_str())) {
            return Err(TrainError::Leakage {
                fold: index,
                reference: e.reference_id.clone(),
            });
        }
        folds.push(Fold {
            index,
            test_references: refs.clone(),
            train: DatasetManifest { entries: train },
            test: DatasetManifest { entries: test },
        });
    }
    Ok(folds)
}

/// Splits by reference content: every reference is held out in exactly one
/// fold, all of its stimuli together.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    let mut refs: Vec<String> = manifest
        .reference_ids()
        .into_iter()
        .map(str::to_string)
        .collect();
    if k == 0 || refs.len() < k {
        return Err(TrainError::TooFewReferences {
            references: refs.len(),
            folds: k,
        });
    }
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![Vec::new(); k];
    for (i, r) in refs.into_iter().enumerate() {
        assignment[i % k].push(r);
    }
    build_folds(manifest, &assignment)
}

/// Folds taken from the manifest's `fold` column: an entry's fold is the
/// one it is tested in.
pub fn folds_from_manifest(manifest: &DatasetManifest) -> Result<Vec<Fold>, TrainError> {
    let k = manifest
        .entries
        .iter()
        .filter_map(|e| e.fold)
        .max()
        .map_or(0, |m| m + 1);
    let mut assignment: Vec<Vec<String>> = vec![Vec::new(); k];
    for e in &manifest.entries {
        if let Some(f) = e.fold {
            if !assignment[f].contains(&e.reference_id) {
                assignment[f].push(e.reference_id.clone());
            }
        }
    }
    build_folds(manifest, &assignment)
}

/// Result of the end-to-end gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub report: GradCheckReport,
    /// Name of the parameter holding the worst coordinate.
    pub worst_parameter: String,
    /// Draws rejected for sitting too close to a relu or max-pool kink.
    pub redraws: usize,
}

const KINK_MARGIN: f64 = 1e-5;
const GRADCHECK_STEP: f64 = 1e-7;
const MAX_DRAWS: u64 = 256;

fn gradcheck_draw(seed: u64, attempt: u64) -> Result<(ModelParams, PreprocessedCloud, f64), ModelError> {
    let cfg = ModelConfig {
        seed: seed ^ (attempt << 40),
        ..ModelConfig::micro()
    };
    let params = init_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let mut patches = Vec::new();
    for _ in 0..2 {
        let raw: Vec<[f64; 3]> = (0..cfg.patch_size)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let colors: Vec<[f64; 3]> = (0..cfg.patch_size)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        patches.push(normalize_patch(&raw, &colors));
    }
    let mos = rng.gen_range(1.0..5.0);
    let cloud = PreprocessedCloud {
        partitions: vec![PartitionPatches {
            partition: Partition {
                point_indices: Vec::new(),
                slab_range: (0.0, 0.0),
                axis: 0,
            },
            patches,
        }],
    };
    Ok((params, cloud, mos))
}

fn kink_margin(params: &ModelParams, cloud: &PreprocessedCloud) -> Result<f64, ModelError> {
    let mut margin = f64::INFINITY;
    for part in &cloud.partitions {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        partition_forward_graph(&mut g, &part.patches, &bound)?;
        margin = margin.min(g.kink_margin());
    }
    Ok(margin)
}

/// Finite-difference check of the training gradient on the micro config:
/// one partition of two 6-point patches with seeded inputs, weights and
/// MOS. Draws whose forward pass lies near a relu or max-pool kink are
/// replaced by the next draw from the same seed. `corrupt` perturbs one
/// analytic gradient entry so the check must fail.
pub fn gradient_check(seed: u64, corrupt: bool) -> Result<GradientCheck, ModelError> {
    let mut redraws = 0;
    let (params, cloud, mos) = loop {
        let draw = gradcheck_draw(seed, redraws as u64)?;
        if kink_margin(&draw.0, &draw.1)? > KINK_MARGIN || redraws as u64 + 1 >= MAX_DRAWS {
            break draw;
        }
        redraws += 1;
    };

    let (_, mut analytic) = loss_and_gradients(&params, &cloud, mos)?;
    if corrupt {
        analytic[0].data_mut()[0] += 1.0;
    }
    let values = params.leaves();
    let eval = |ps: &[Tensor]| {
        let p = params.with_leaves(ps.to_vec());
        let pred = predict_preprocessed(&cloud, &p).map_err(autodiff_of)?;
        Ok(loss(&pred.partition_scores, mos))
    };
    let report = compare_with_central_differences(&analytic, &values, GRADCHECK_STEP, eval)?;
    let mut names = Vec::new();
    params.map_leaves("", &mut |name, _| names.push(name.to_string()));
    Ok(GradientCheck {
        worst_parameter: names[report.worst.0].clone(),
        report,
        redraws,
    })
}
