//! The two-stream network: three (embedding, self-attention, GraphNorm,
//! cross-attention) blocks per patch, point and patch aggregation, and a
//! small MLP head producing one score per partition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::layers::{
    feature_embedding, graph_norm, linear, multi_head_cross_attention, multi_head_self_attention,
    patch_aggregation, point_aggregation, AttentionParams, EmbeddingParams, GraphNormParams,
    LayerError, LinearParams, MapLeaves,
};
use crate::pc_io::PointCloud;
use crate::preprocess::{preprocess, Patch, PreprocessConfig, PreprocessError, PreprocessedCloud};
use crate::tensor::Tensor;

pub mod weights;

pub use weights::{load_weights, save_weights, LoadedWeights, WeightsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("patch {index} has shape {geometry:?}/{color:?}, expected {expected}x3")]
    PatchShape {
        index: usize,
        expected: usize,
        geometry: Vec<usize>,
        color: Vec<usize>,
    },
    #[error("partition has no patches")]
    EmptyPartition,
    #[error("cloud produced no partitions")]
    NoPartitions,
    #[error("preprocessing patch size {preprocess} does not match model patch size {model}")]
    PatchSizeMismatch { preprocess: usize, model: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

impl From<crate::autodiff::AutodiffError> for ModelError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        ModelError::Layer(LayerError::Autodiff(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub block_widths: [usize; 3],
    pub heads: usize,
    pub patch_size: usize,
    /// Hidden widths of the quality head; the final layer maps to 1.
    pub head_hidden: Vec<usize>,
    pub seed: u64,
    pub graph_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_widths: [64, 128, 256],
            heads: 4,
            patch_size: 512,
            head_hidden: vec![128, 32],
            seed: 0,
            graph_norm_eps: 1e-9,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network matching [`PreprocessConfig::small`].
    pub fn small() -> Self {
        Self {
            block_widths: [16, 32, 32],
            heads: 2,
            patch_size: 32,
            head_hidden: vec![32, 16],
            ..Self::default()
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn micro() -> Self {
        Self {
            block_widths: [4, 4, 4],
            heads: 2,
            patch_size: 6,
            head_hidden: vec![4],
            ..Self::default()
        }
    }

    pub fn aggregation_dim(&self) -> usize {
        2 * self.block_widths[2]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for w in self.block_widths.iter().copied().chain([self.aggregation_dim()]) {
            if w == 0 || w % self.heads != 0 {
                return bad(format!("{} heads do not divide width {w}", self.heads));
            }
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.head_hidden.contains(&0) {
            return bad("head widths must be positive".into());
        }
        if !(self.graph_norm_eps > 0.0) {
            return bad("graph_norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub geo_embed: EmbeddingParams<T>,
    pub color_embed: EmbeddingParams<T>,
    pub self_attention: AttentionParams<T>,
    pub geo_norm: GraphNormParams<T>,
    pub color_norm: GraphNormParams<T>,
    pub cross_attention: AttentionParams<T>,
}

impl<T> MapLeaves<T> for BlockParams<T> {
    type Output<U> = BlockParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            geo_embed: self.geo_embed.map_leaves(&format!("{prefix}.geo_embed"), f),
            color_embed: self
                .color_embed
                .map_leaves(&format!("{prefix}.color_embed"), f),
            self_attention: self
                .self_attention
                .map_leaves(&format!("{prefix}.self_attn"), f),
            geo_norm: self.geo_norm.map_leaves(&format!("{prefix}.geo_norm"), f),
            color_norm: self
                .color_norm
                .map_leaves(&format!("{prefix}.color_norm"), f),
            cross_attention: self
                .cross_attention
                .map_leaves(&format!("{prefix}.cross_attn"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.geo_embed.for_each_leaf_mut(f);
        self.color_embed.for_each_leaf_mut(f);
        self.self_attention.for_each_leaf_mut(f);
        self.geo_norm.for_each_leaf_mut(f);
        self.color_norm.for_each_leaf_mut(f);
        self.cross_attention.for_each_leaf_mut(f);
    }
}

/// Every learnable tensor of the network, plus the config that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams<T>>,
    pub patch_attention: AttentionParams<T>,
    pub head: Vec<LinearParams<T>>,
}

impl<T> MapLeaves<T> for ModelParams<T> {
    type Output<U> = ModelParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        let join = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        ModelParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_leaves(&join(&format!("block{i}")), f))
                .collect(),
            patch_attention: self.patch_attention.map_leaves(&join("patch_attn"), f),
            head: self
                .head
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_leaves(&join(&format!("head{i}")), f))
                .collect(),
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for b in &mut self.blocks {
            b.for_each_leaf_mut(f);
        }
        self.patch_attention.for_each_leaf_mut(f);
        for l in &mut self.head {
            l.for_each_leaf_mut(f);
        }
    }
}

impl<T: Clone> ModelParams<T> {
    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.map_leaves("", &mut |_, t| out.push(t.clone()));
        out
    }

    /// Rebuilds the same layout from leaves in canonical order.
    pub fn with_leaves<U>(&self, leaves: Vec<U>) -> ModelParams<U> {
        let mut it = leaves.into_iter();
        let out = self.map_leaves("", &mut |name, _| {
            it.next()
                .unwrap_or_else(|| panic!("too few leaves, missing {name}"))
        });
        assert!(it.next().is_none(), "too many leaves");
        out
    }
}

impl ModelParams<Tensor> {
    /// Canonical `(name, tensor)` pairs, the order used on disk.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut names = Vec::new();
        self.map_leaves("", &mut |name, _| names.push(name.to_string()));
        names.into_iter().zip(self.tensor_refs()).collect()
    }

    fn tensor_refs(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for b in &self.blocks {
            for e in [&b.geo_embed, &b.color_embed] {
                out.extend([&e.w1, &e.b1, &e.w2, &e.b2]);
            }
            let a = &b.self_attention;
            out.extend([&a.w_q, &a.w_k, &a.w_v, &a.w_o]);
            for n in [&b.geo_norm, &b.color_norm] {
                out.extend([&n.alpha, &n.gamma, &n.beta]);
            }
            let a = &b.cross_attention;
            out.extend([&a.w_q, &a.w_k, &a.w_v, &a.w_o]);
        }
        let a = &self.patch_attention;
        out.extend([&a.w_q, &a.w_k, &a.w_v, &a.w_o]);
        for l in &self.head {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.map_leaves("", &mut |_, t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Zero-valued tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let eps = cfg.graph_norm_eps;
        let embed = |fin: usize, fout: usize| EmbeddingParams {
            w1: Tensor::zeros(fin, fout),
            b1: Tensor::zeros(1, fout),
            w2: Tensor::zeros(fout, fout),
            b2: Tensor::zeros(1, fout),
        };
        let attn = |c: usize| AttentionParams {
            w_q: Tensor::zeros(c, c),
            w_k: Tensor::zeros(c, c),
            w_v: Tensor::zeros(c, c),
            w_o: Tensor::zeros(c, c),
            heads: cfg.heads,
        };
        let norm = |c: usize| GraphNormParams {
            alpha: Tensor::zeros(1, c),
            gamma: Tensor::zeros(1, c),
            beta: Tensor::zeros(1, c),
            eps,
        };
        let mut blocks = Vec::with_capacity(3);
        let mut fin = 3;
        for &w in &cfg.block_widths {
            blocks.push(BlockParams {
                geo_embed: embed(fin, w),
                color_embed: embed(fin, w),
                self_attention: attn(w),
                geo_norm: norm(w),
                color_norm: norm(w),
                cross_attention: attn(w),
            });
            fin = w;
        }
        let d = cfg.aggregation_dim();
        let mut head = Vec::new();
        let mut hin = d;
        for &h in cfg.head_hidden.iter().chain([&1]) {
            head.push(LinearParams {
                weight: Tensor::zeros(hin, h),
                bias: Tensor::zeros(1, h),
            });
            hin = h;
        }
        Ok(Self {
            config: cfg.clone(),
            blocks,
            patch_attention: attn(d),
            head,
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform `[0, 1)` value addressed by `(seed, stream, counter)`, independent
/// of evaluation order.
pub fn counter_uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    let mut x = splitmix64(seed);
    x = splitmix64(x ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    x = splitmix64(x ^ counter.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Glorot-uniform weights, zero biases and shifts, unit GraphNorm scale and
/// shift fraction.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    let template = ModelParams::zeros(cfg)?;
    let mut stream = 0u64;
    Ok(template.map_leaves("", &mut |name, t| {
        stream += 1;
        let field = name.rsplit('.').next().unwrap_or(name);
        match field {
            "b1" | "b2" | "bias" | "beta" => t.clone(),
            "alpha" | "gamma" => t.map(|_| 1.0),
            _ => {
                let (fan_in, fan_out) = (t.rows(), t.cols());
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..t.len() as u64)
                    .map(|i| (2.0 * counter_uniform(cfg.seed, stream, i) - 1.0) * bound)
                    .collect();
                Tensor::from_vec(fan_in, fan_out, data)
            }
        }
    }))
}

fn check_patches(patches: &[Patch], cfg: &ModelConfig) -> Result<(), ModelError> {
    if patches.is_empty() {
        return Err(ModelError::EmptyPartition);
    }
    for (index, p) in patches.iter().enumerate() {
        let ok = |t: &Tensor| t.shape() == [cfg.patch_size, 3];
        if !ok(&p.geometry) || !ok(&p.color) {
            return Err(ModelError::PatchShape {
                index,
                expected: cfg.patch_size,
                geometry: p.geometry.shape().to_vec(),
                color: p.color.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Two-stream encoding of one patch into its `1×2F′` descriptor.
pub fn encode_patch(g: &mut Graph, patch: &Patch, params: &ModelParams<Var>) -> Result<Var, ModelError> {
    let mut xyz = g.constant(patch.geometry.clone());
    let mut rgb = g.constant(patch.color.clone());
    for block in &params.blocks {
        let geo = feature_embedding(g, xyz, &block.geo_embed)?;
        let geo = multi_head_self_attention(g, geo, &block.self_attention)?;
        let geo = graph_norm(g, geo, &block.geo_norm)?;

        let color = feature_embedding(g, rgb, &block.color_embed)?;
        let color = graph_norm(g, color, &block.color_norm)?;

        xyz = multi_head_cross_attention(g, color, geo, &block.cross_attention)?;
        rgb = color;
    }
    Ok(point_aggregation(g, xyz)?)
}

/// Score of one partition as a `1×1` node.
pub fn partition_forward_graph(
    g: &mut Graph,
    patches: &[Patch],
    params: &ModelParams<Var>,
) -> Result<Var, ModelError> {
    check_patches(patches, &params.config)?;
    let descriptors = patches
        .iter()
        .map(|p| encode_patch(g, p, params))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = if descriptors.len() == 1 {
        descriptors[0]
    } else {
        g.concat_rows(&descriptors)?
    };
    let mut h = patch_aggregation(g, stacked, &params.patch_attention)?;
    let last = params.head.len() - 1;
    for (i, layer) in params.head.iter().enumerate() {
        h = linear(g, h, layer)?;
        if i < last {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Score of one partition.
pub fn partition_forward(patches: &[Patch], params: &ModelParams) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = partition_forward_graph(&mut g, patches, &bound)?;
    Ok(g.value(out).data()[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub score: f64,
    /// In partition order along the slicing axis.
    pub partition_scores: Vec<f64>,
}

/// Scores every partition (in parallel) and averages them in partition
/// order.
pub fn predict_preprocessed(
    cloud: &PreprocessedCloud,
    params: &ModelParams,
) -> Result<Prediction, ModelError> {
    if cloud.partitions.is_empty() {
        return Err(ModelError::NoPartitions);
    }
    let partition_scores = cloud
        .partitions
        .par_iter()
        .map(|p| partition_forward(&p.patches, params))
        .collect::<Result<Vec<_>, _>>()?;
    let score = partition_scores.iter().sum::<f64>() / partition_scores.len() as f64;
    Ok(Prediction {
        score,
        partition_scores,
    })
}

/// Quality score of a whole cloud on the training MOS scale.
pub fn predict(
    pc: &PointCloud,
    params: &ModelParams,
    pre_cfg: &PreprocessConfig,
) -> Result<f64, ModelError> {
    if pre_cfg.patch_size != params.config.patch_size {
        return Err(ModelError::PatchSizeMismatch {
            preprocess: pre_cfg.patch_size,
            model: params.config.patch_size,
        });
    }
    let cloud = preprocess(pc, pre_cfg)?;
    Ok(predict_preprocessed(&cloud, params)?.score)
}
