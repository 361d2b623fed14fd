//! Network building blocks expressed on an autodiff [`Graph`].
//!
//! Parameter structs are generic over their leaf type so the same layout
//! describes stored weights (`Tensor`) and weights bound into a graph
//! (`Var`).

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("{layer}: expected {expected} input columns, got {got}")]
    Width {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: {heads} heads do not divide width {width}")]
    Heads {
        layer: &'static str,
        heads: usize,
        width: usize,
    },
    #[error("{layer}: streams have different shapes {lhs:?} and {rhs:?}")]
    StreamShape {
        layer: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Applies `f` to each named leaf, building the same layout over `U`.
pub trait MapLeaves<T> {
    type Output<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Output<U>;

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T));
}

/// Pointwise two-layer map shared by every point: `relu(relu(x·W1 + b1)·W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> MapLeaves<T> for EmbeddingParams<T> {
    type Output<U> = EmbeddingParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// Query/key/value projections (`C×C`, split column-wise into `heads`
/// blocks of `C/heads`) and the output projection `W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub heads: usize,
}

impl<T> MapLeaves<T> for AttentionParams<T> {
    type Output<U> = AttentionParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
            heads: self.heads,
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
    }
}

/// Per-channel shift fraction `alpha` and affine `gamma`, `beta`, each `1×F`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNormParams<T = Tensor> {
    pub alpha: T,
    pub gamma: T,
    pub beta: T,
    pub eps: f64,
}

impl<T> MapLeaves<T> for GraphNormParams<T> {
    type Output<U> = GraphNormParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GraphNormParams<U> {
        GraphNormParams {
            alpha: f(&format!("{prefix}.alpha"), &self.alpha),
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
            eps: self.eps,
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.alpha);
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> MapLeaves<T> for LinearParams<T> {
    type Output<U> = LinearParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn for_each_leaf_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn cols(g: &Graph, v: Var) -> usize {
    g.value(v).cols()
}

pub fn linear(g: &mut Graph, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let xw = g.matmul(x, p.weight)?;
    Ok(g.add(xw, p.bias)?)
}

pub fn feature_embedding(g: &mut Graph, x: Var, p: &EmbeddingParams<Var>) -> Result<Var> {
    let expected = g.value(p.w1).rows();
    if cols(g, x) != expected {
        return Err(LayerError::Width {
            layer: "feature_embedding",
            expected,
            got: cols(g, x),
        });
    }
    let h = g.matmul(x, p.w1)?;
    let h = g.add(h, p.b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p.w2)?;
    let h = g.add(h, p.b2)?;
    Ok(g.relu(h)?)
}

/// Output of an attention layer together with the per-head attention
/// matrices, each `N_query×N_key` and row-stochastic.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with queries projected from `queries` and
/// keys/values from `context`.
pub fn attention(
    g: &mut Graph,
    queries: Var,
    context: Var,
    p: &AttentionParams<Var>,
) -> Result<AttentionOutput> {
    let layer = "attention";
    let width = g.value(p.w_q).rows();
    for x in [queries, context] {
        if cols(g, x) != width {
            return Err(LayerError::Width {
                layer,
                expected: width,
                got: cols(g, x),
            });
        }
    }
    if p.heads == 0 || !width.is_multiple_of(p.heads) {
        return Err(LayerError::Heads {
            layer,
            heads: p.heads,
            width,
        });
    }
    let head_dim = width / p.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = g.matmul(queries, p.w_q)?;
    let k = g.matmul(context, p.w_k)?;
    let v = g.matmul(context, p.w_v)?;

    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_columns(q, lo, hi)?;
        let kh = g.slice_columns(k, lo, hi)?;
        let vh = g.slice_columns(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax_rows(logits)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_columns(&heads)?
    };
    let output = g.matmul(merged, p.w_o)?;
    Ok(AttentionOutput { output, weights })
}

pub fn multi_head_self_attention(g: &mut Graph, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    Ok(attention(g, x, x, p)?.output)
}

/// Queries from the colour stream, keys and values from the geometry
/// stream. The result replaces the geometry representation.
pub fn multi_head_cross_attention(
    g: &mut Graph,
    x_rgb: Var,
    x_xyz: Var,
    p: &AttentionParams<Var>,
) -> Result<Var> {
    let (a, b) = (g.value(x_rgb), g.value(x_xyz));
    if a.shape() != b.shape() {
        return Err(LayerError::StreamShape {
            layer: "multi_head_cross_attention",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(attention(g, x_rgb, x_xyz, p)?.output)
}

/// Per-channel normalization over the rows of `x` with a learnable fraction
/// `alpha` of the mean removed before scaling. The scale is the root mean
/// square of the shifted values, which equals the standard deviation when
/// `alpha = 1`.
pub fn graph_norm(g: &mut Graph, x: Var, p: &GraphNormParams<Var>) -> Result<Var> {
    let width = g.value(p.alpha).cols();
    if cols(g, x) != width {
        return Err(LayerError::Width {
            layer: "graph_norm",
            expected: width,
            got: cols(g, x),
        });
    }
    let mean = g.reduce_mean_rows(x)?;
    let shift = g.mul(mean, p.alpha)?;
    let shifted = g.sub(x, shift)?;
    let sq = g.mul(shifted, shifted)?;
    let var = g.reduce_mean_rows(sq)?;
    let inv_std = g.reciprocal_sqrt_shifted(var, p.eps)?;
    let normed = g.mul(shifted, inv_std)?;
    let scaled = g.mul(normed, p.gamma)?;
    Ok(g.add(scaled, p.beta)?)
}

/// `[column max ‖ column mean]` of a point set, `1×2F`.
pub fn point_aggregation(g: &mut Graph, x: Var) -> Result<Var> {
    let max = g.reduce_max_rows(x)?;
    let mean = g.reduce_mean_rows(x)?;
    Ok(g.concat_columns(&[max, mean])?)
}

/// Self-attention across the patch vectors of a partition followed by a
/// column max, `M×D → 1×D`.
pub fn patch_aggregation(g: &mut Graph, v: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let attended = multi_head_self_attention(g, v, p)?;
    Ok(g.reduce_max_rows(attended)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind_attention(g: &mut Graph, p: &AttentionParams) -> AttentionParams<Var> {
        p.map_leaves("attn", &mut |_, t| g.constant(t.clone()))
    }

    fn scalar_attention() -> AttentionParams {
        AttentionParams {
            w_q: Tensor::scalar(1.0),
            w_k: Tensor::scalar(1.0),
            w_v: Tensor::scalar(1.0),
            w_o: Tensor::scalar(1.0),
            heads: 1,
        }
    }

    #[test]
    fn hand_evaluated_single_head_attention() {
        let mut g = Graph::new();
        let p = bind_attention(&mut g, &scalar_attention());
        let x = g.constant(Tensor::from_rows(&[[1.0], [0.0]]));
        let out = attention(&mut g, x, x, &p).unwrap();
        // logits [[1,0],[0,0]] → rows softmax([1,0]) and softmax([0,0])
        let e = std::f64::consts::E;
        let a00 = e / (e + 1.0);
        let a = g.value(out.weights[0]);
        assert!((a.get(0, 0) - a00).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((a.get(0, 1) - 0.2689).abs() < 1e-4);
        assert_eq!(a.row(1), &[0.5, 0.5]);
        let y = g.value(out.output);
        assert!((y.get(0, 0) - a00).abs() < 1e-15);
        assert_eq!(y.get(1, 0), 0.5);
    }

    #[test]
    fn zero_embedding_gives_zero_output() {
        let mut g = Graph::new();
        let p = EmbeddingParams {
            w1: Tensor::zeros(3, 4),
            b1: Tensor::zeros(1, 4),
            w2: Tensor::zeros(4, 4),
            b2: Tensor::zeros(1, 4),
        }
        .map_leaves("e", &mut |_, t| g.constant(t.clone()));
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]));
        let y = feature_embedding(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(2, 4));
    }

    #[test]
    fn identity_embedding_keeps_nonnegative_input() {
        let eye = |n: usize| {
            let mut t = Tensor::zeros(n, n);
            for i in 0..n {
                t.set(i, i, 1.0);
            }
            t
        };
        let mut g = Graph::new();
        let p = EmbeddingParams {
            w1: eye(3),
            b1: Tensor::zeros(1, 3),
            w2: eye(3),
            b2: Tensor::zeros(1, 3),
        }
        .map_leaves("e", &mut |_, t| g.constant(t.clone()));
        let xs = Tensor::from_rows(&[[0.0, 2.0, 3.0], [0.5, 0.25, 7.0]]);
        let x = g.constant(xs.clone());
        let y = feature_embedding(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y), &xs);
    }

    #[test]
    fn graph_norm_constant_column_yields_beta() {
        let mut g = Graph::new();
        let p = GraphNormParams {
            alpha: Tensor::ones(1, 1),
            gamma: Tensor::scalar(2.0),
            beta: Tensor::scalar(0.25),
            eps: 1e-5,
        }
        .map_leaves("gn", &mut |_, t| g.constant(t.clone()));
        let x = g.constant(Tensor::from_rows(&[[4.0], [4.0], [4.0]]));
        let y = graph_norm(&mut g, x, &p).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn graph_norm_unit_variance_column() {
        let mut g = Graph::new();
        let p = GraphNormParams {
            alpha: Tensor::ones(1, 1),
            gamma: Tensor::ones(1, 1),
            beta: Tensor::zeros(1, 1),
            eps: 1e-5,
        }
        .map_leaves("gn", &mut |_, t| g.constant(t.clone()));
        let x = g.constant(Tensor::from_rows(&[[1.0], [-1.0]]));
        let y = graph_norm(&mut g, x, &p).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).get(0, 0) - expected).abs() < 1e-15);
        assert!((g.value(y).get(0, 0) - 0.999995).abs() < 1e-6);
        assert!((g.value(y).get(1, 0) + expected).abs() < 1e-15);
    }

    #[test]
    fn graph_norm_scale_is_rms_of_shifted_values() {
        let mut g = Graph::new();
        let p = GraphNormParams {
            alpha: Tensor::zeros(1, 1),
            gamma: Tensor::ones(1, 1),
            beta: Tensor::zeros(1, 1),
            eps: 1e-5,
        }
        .map_leaves("gn", &mut |_, t| g.constant(t.clone()));
        let x = g.constant(Tensor::from_rows(&[[1.0], [3.0]]));
        let y = graph_norm(&mut g, x, &p).unwrap();
        // nothing removed: scale is sqrt((1 + 9) / 2 + eps)
        let s = (5.0f64 + 1e-5).sqrt();
        assert!((g.value(y).get(0, 0) - 1.0 / s).abs() < 1e-15);
        assert!((g.value(y).get(1, 0) - 3.0 / s).abs() < 1e-15);
    }

    #[test]
    fn point_aggregation_concatenates_max_and_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 0.0]]));
        let y = point_aggregation(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0, 2.0, 1.0]);

        let single = g.constant(Tensor::from_rows(&[[5.0, -1.0]]));
        let y = point_aggregation(&mut g, single).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -1.0, 5.0, -1.0]);
    }

    #[test]
    fn patch_aggregation_of_single_row() {
        let mut g = Graph::new();
        let mut p = scalar_attention();
        p.w_v = Tensor::scalar(3.0);
        p.w_o = Tensor::scalar(-0.5);
        let p = bind_attention(&mut g, &p);
        let v = g.constant(Tensor::from_rows(&[[2.0]]));
        let y = patch_aggregation(&mut g, v, &p).unwrap();
        assert_eq!(g.value(y).data(), &[-3.0]);
    }

    #[test]
    fn zero_queries_give_uniform_cross_attention() {
        let mut g = Graph::new();
        let mut p = AttentionParams {
            w_q: Tensor::zeros(2, 2),
            w_k: Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0]]),
            w_v: Tensor::from_rows(&[[0.3, 0.1], [-0.2, 0.4]]),
            w_o: Tensor::from_rows(&[[1.0, 0.5], [0.0, 2.0]]),
            heads: 2,
        };
        let bound = bind_attention(&mut g, &p);
        let rgb = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]]));
        let xyz_t = Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.0], [1.0, 1.0]]);
        let xyz = g.constant(xyz_t.clone());
        let y = multi_head_cross_attention(&mut g, rgb, xyz, &bound).unwrap();
        let mean_v = xyz_t.matmul(&p.w_v).sum_rows().scale(1.0 / 3.0);
        let expected = mean_v.matmul(&p.w_o);
        for r in 0..3 {
            for c in 0..2 {
                assert!((g.value(y).get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
        p.heads = 3;
        let bad = bind_attention(&mut g, &p);
        assert!(matches!(
            multi_head_cross_attention(&mut g, rgb, xyz, &bad),
            Err(LayerError::Heads { .. })
        ));
    }

    #[test]
    fn cross_attention_rejects_mismatched_streams() {
        let mut g = Graph::new();
        let p = bind_attention(&mut g, &scalar_attention());
        let a = g.constant(Tensor::zeros(2, 1));
        let b = g.constant(Tensor::zeros(3, 1));
        assert!(matches!(
            multi_head_cross_attention(&mut g, a, b, &p),
            Err(LayerError::StreamShape { .. })
        ));
    }
}
