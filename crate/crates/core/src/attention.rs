//! Transformer building blocks over token layouts.
//!
//! Tokens are rows of `[n, dim]` tensors; multi-head layers work on
//! `[heads, n, d_head]` after a reshape/transpose pair. The residual blocks
//! zero-initialize their output projections, so a freshly initialized block
//! is the identity map and depth costs nothing until training moves the
//! output weights off zero.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamSet};
use crate::scalar::Scalar;

/// Layer-norm variance guard shared by every norm in the network.
pub const LN_EPS: f64 = 1e-5;

/// Widening factor of the feed-forward hidden layer.
pub const FFN_RATIO: usize = 2;

/// softmax(q kᵀ / sqrt(d)) v for q `[h, n, d]`, k and v `[h, m, d]`.
///
/// Returns the attended values `[h, n, d]` and the attention weights
/// `[h, n, m]` (rows sum to one).
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || g.shape(v) != ks || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
    }
    let d = qs[2];
    let kt = g.transpose(k, 1, 2)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Splits `[n, heads*d]` tokens into `[heads, n, d]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: NodeId, heads: usize) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let n = xs[0];
    let d = xs[1] / heads;
    let r = g.reshape(x, &[n, heads, d])?;
    g.transpose(r, 0, 1)
}

/// Inverse of [`split_heads`]: `[heads, n, d]` back to `[n, heads*d]`.
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let (heads, n, d) = (xs[0], xs[1], xs[2]);
    let t = g.transpose(x, 0, 1)?;
    g.reshape(t, &[n, heads * d])
}

/// Multi-head self-attention with a zero-initialized output projection.
#[derive(Clone, Debug)]
pub struct Mhsa {
    prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(set: &mut ParamSet, prefix: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let fan = Init::FanInUniform { fan_in: dim };
        for stem in ["wq", "wk", "wv"] {
            set.declare(&format!("{prefix}.{stem}"), &[dim, dim], fan);
        }
        for stem in ["bq", "bk", "bv", "bo"] {
            set.declare(&format!("{prefix}.{stem}"), &[dim], Init::Zeros);
        }
        set.declare(&format!("{prefix}.wo"), &[dim, dim], Init::Zeros);
        Mhsa { prefix: prefix.to_string(), dim, heads }
    }

    fn p(&self, stem: &str) -> String {
        format!("{}.{stem}", self.prefix)
    }

    /// x `[n, dim]` -> (out `[n, dim]`, attention weights `[heads, n, n]`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let q = g.linear(x, p.id(&self.p("wq")), p.id(&self.p("bq")))?;
        let k = g.linear(x, p.id(&self.p("wk")), p.id(&self.p("bk")))?;
        let v = g.linear(x, p.id(&self.p("wv")), p.id(&self.p("bv")))?;
        let qh = split_heads(g, q, self.heads)?;
        let kh = split_heads(g, k, self.heads)?;
        let vh = split_heads(g, v, self.heads)?;
        let (attended, weights) = scaled_dot_attention(g, qh, kh, vh)?;
        let merged = merge_heads(g, attended)?;
        let out = g.linear(merged, p.id(&self.p("wo")), p.id(&self.p("bo")))?;
        Ok((out, weights))
    }
}

/// Two-layer feed-forward with gelu; second layer zero-initialized.
#[derive(Clone, Debug)]
pub struct Ffn {
    prefix: String,
    pub dim: usize,
    pub hidden: usize,
}

impl Ffn {
    pub fn new(set: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        let hidden = dim * FFN_RATIO;
        set.declare(&format!("{prefix}.w1"), &[dim, hidden], Init::FanInUniform { fan_in: dim });
        set.declare(&format!("{prefix}.b1"), &[hidden], Init::Zeros);
        set.declare(&format!("{prefix}.w2"), &[hidden, dim], Init::Zeros);
        set.declare(&format!("{prefix}.b2"), &[dim], Init::Zeros);
        Ffn { prefix: prefix.to_string(), dim, hidden }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, p.id(&format!("{}.w1", self.prefix)), p.id(&format!("{}.b1", self.prefix)))?;
        let a = g.gelu(h);
        g.linear(a, p.id(&format!("{}.w2", self.prefix)), p.id(&format!("{}.b2", self.prefix)))
    }
}

/// Pre-norm transformer block: `y = x + attn(ln(x)); out = y + ffn(ln(y))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    prefix: String,
    pub attn: Mhsa,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new(set: &mut ParamSet, prefix: &str, dim: usize, heads: usize) -> Self {
        for ln in ["ln1", "ln2"] {
            set.declare(&format!("{prefix}.{ln}.g"), &[dim], Init::Ones);
            set.declare(&format!("{prefix}.{ln}.b"), &[dim], Init::Zeros);
        }
        let attn = Mhsa::new(set, &format!("{prefix}.attn"), dim, heads);
        let ffn = Ffn::new(set, &format!("{prefix}.ffn"), dim);
        TransformerBlock { prefix: prefix.to_string(), attn, ffn }
    }

    /// x `[n, dim]` -> (out `[n, dim]`, attention weights `[heads, n, n]`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let n1 = g.layer_norm(
            x,
            p.id(&format!("{}.ln1.g", self.prefix)),
            p.id(&format!("{}.ln1.b", self.prefix)),
            LN_EPS,
        )?;
        let (a, weights) = self.attn.forward(g, p, n1)?;
        let y = g.add(x, a)?;
        let n2 = g.layer_norm(
            y,
            p.id(&format!("{}.ln2.g", self.prefix)),
            p.id(&format!("{}.ln2.b", self.prefix)),
            LN_EPS,
        )?;
        let f = self.ffn.forward(g, p, n2)?;
        g.add(y, f)
            .map(|out| (out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckOpts};
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    #[test]
    fn attention_matches_hand_computed_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[1, 2, 2], &[2.0, 0.0, 0.0, 2.0]).unwrap());
        let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();

        let wv = g.value(w).data();
        assert!((wv[0] - 0.6698).abs() < 1e-4);
        assert!((wv[1] - 0.3302).abs() < 1e-4);

        let ov = g.value(out).data();
        assert!((ov[0] - 1.3396).abs() < 1e-4);
        assert!((ov[1] - 0.6604).abs() < 1e-4);
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::uniform(&[3, 4, 8], -2.0, 2.0, &mut rng));
        let k = g.constant(Tensor::uniform(&[3, 6, 8], -2.0, 2.0, &mut rng));
        let v = g.constant(Tensor::uniform(&[3, 6, 8], -2.0, 2.0, &mut rng));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for row in g.value(w).data().chunks_exact(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_key_value_permutation_leaves_output_unchanged() {
        let mut rng = Rng::new(17);
        let q = Tensor::<f64>::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[2, 5, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[2, 5, 4], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];

        let permute = |t: &Tensor<f64>| {
            let (h, m, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = Tensor::zeros(&[h, m, d]);
            for hi in 0..h {
                for (dst, &src) in perm.iter().enumerate() {
                    let from = (hi * m + src) * d;
                    let to = (hi * m + dst) * d;
                    out.data_mut()[to..to + d].copy_from_slice(&t.data()[from..from + d]);
                }
            }
            out
        };

        let run = |kk: Tensor<f64>, vv: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let qi = g.constant(q.clone());
            let ki = g.constant(kk);
            let vi = g.constant(vv);
            let (out, _) = scaled_dot_attention(&mut g, qi, ki, vi).unwrap();
            g.value(out).clone()
        };

        let base = run(k.clone(), v.clone());
        let permuted = run(permute(&k), permute(&v));
        assert!(base.max_abs_diff(&permuted).unwrap() < 1e-12);
    }

    #[test]
    fn head_split_round_trips() {
        let mut rng = Rng::new(8);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::uniform(&[5, 12], -1.0, 1.0, &mut rng));
        let h = split_heads(&mut g, x, 3).unwrap();
        assert_eq!(g.shape(h), &[3, 5, 4]);
        let back = merge_heads(&mut g, h).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn fresh_block_is_the_identity() {
        let mut set = ParamSet::new();
        let block = TransformerBlock::new(&mut set, "blk", 8, 2);
        let store: ParamStore<f32> = set.init_store(123);

        let mut rng = Rng::new(9);
        let x = Tensor::<f32>::uniform(&[6, 8], -3.0, 3.0, &mut rng);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let xid = g.constant(x.clone());
        let (out, _) = block.forward(&mut g, &p, xid).unwrap();
        assert_eq!(g.value(out).data(), x.data());
    }

    #[test]
    fn block_gradients_match_numeric() {
        let mut set = ParamSet::new();
        let block = TransformerBlock::new(&mut set, "b", 4, 2);
        let mut store: ParamStore<f64> = set.init_store(21);
        // move the zero-initialized projections off zero so every path is live
        let mut rng = Rng::new(22);
        for name in ["b.attn.wo", "b.ffn.w2"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::uniform(&shape, -0.3, 0.3, &mut rng)).unwrap();
        }

        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs = vec![Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng)];
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }

        let report = grad_check(&inputs, &CheckOpts::default(), |g, ids| {
            let mut map = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                map.insert(n.clone(), ids[i + 1]);
            }
            let p = Bound::new(map);
            let (out, _) = block.forward(g, &p, ids[0])?;
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.pass(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }
}
