//! Cross-view and cross-scale attention over folded feature maps.
//!
//! Convolutional stages produce channel-first maps `[C, spatial...]`;
//! attention wants token rows `[N, C]`. [`TokenMap`] performs that fold /
//! unfold bit-exactly, with tokens ordered row-major over the spatial axes
//! (last axis fastest). There is no positional encoding anywhere: position
//! information survives through the convolutional residual streams, and the
//! attention layers are free to stay permutation-structured.
//!
//! [`DifaLevel`] lets each view's tokens query the *other* views' tokens: the
//! target view supplies queries from its own projection, while keys and
//! values are the concatenation of every non-target view's projections, in
//! ascending view order. The attended result folds back into the target
//! stream through a zero-initialized projection, so fusion starts as a no-op
//! and only grows as training finds cross-view signal worth mixing in.
//!
//! [`MsaView`] concatenates one view's tokens across resolution levels
//! (shallow levels projected up to the deepest level's width), runs a single
//! transformer block over the joint sequence, and splits the result back.
//! Levels already at the joint width pass through unprojected, which makes
//! the single-level instance literally a plain transformer block.

use crate::attention::{merge_heads, scaled_dot_attention, split_heads, TransformerBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamSet};
use crate::scalar::Scalar;

/// Fold/unfold geometry of one feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub channels: usize,
    pub spatial: Vec<usize>,
}

impl TokenMap {
    pub fn new(channels: usize, spatial: &[usize]) -> Self {
        assert!(!spatial.is_empty() && spatial.iter().all(|&e| e > 0));
        TokenMap { channels, spatial: spatial.to_vec() }
    }

    pub fn tokens(&self) -> usize {
        self.spatial.iter().product()
    }

    fn map_shape(&self) -> Vec<usize> {
        let mut s = vec![self.channels];
        s.extend_from_slice(&self.spatial);
        s
    }

    /// `[C, spatial...]` map to `[N, C]` tokens.
    pub fn unfold<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        if g.shape(x) != self.map_shape() {
            return Err(Error::ShapeMismatch {
                op: "unfold",
                lhs: g.shape(x).to_vec(),
                rhs: self.map_shape(),
            });
        }
        let flat = g.reshape(x, &[self.channels, self.tokens()])?;
        g.transpose(flat, 0, 1)
    }

    /// `[N, C]` tokens back to the `[C, spatial...]` map.
    pub fn fold<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        if g.shape(x) != [self.tokens(), self.channels] {
            return Err(Error::ShapeMismatch {
                op: "fold",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.tokens(), self.channels],
            });
        }
        let t = g.transpose(x, 0, 1)?;
        g.reshape(t, &self.map_shape())
    }
}

/// Sink for attention-weight node handles, used by the inspection tooling.
/// A disabled capture records nothing and costs nothing.
#[derive(Debug, Default)]
pub struct Capture {
    enabled: bool,
    pub entries: Vec<(String, NodeId)>,
}

impl Capture {
    pub fn off() -> Self {
        Capture { enabled: false, entries: Vec::new() }
    }

    pub fn on() -> Self {
        Capture { enabled: true, entries: Vec::new() }
    }

    pub fn push(&mut self, name: String, id: NodeId) {
        if self.enabled {
            self.entries.push((name, id));
        }
    }
}

/// Cross-view fusion attention at one resolution level.
#[derive(Clone, Debug)]
pub struct DifaLevel {
    prefix: String,
    views: Vec<String>,
    pub dim: usize,
    pub heads: usize,
}

impl DifaLevel {
    pub fn new(set: &mut ParamSet, prefix: &str, views: &[String], dim: usize, heads: usize) -> Self {
        assert!(views.len() >= 2, "cross-view attention needs at least two views");
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let fan = Init::FanInUniform { fan_in: dim };
        for view in views {
            for stem in ["wq", "wk", "wv"] {
                set.declare(&format!("{prefix}.{view}.{stem}"), &[dim, dim], fan);
            }
            for stem in ["bq", "bk", "bv", "bo"] {
                set.declare(&format!("{prefix}.{view}.{stem}"), &[dim], Init::Zeros);
            }
            set.declare(&format!("{prefix}.{view}.wo"), &[dim, dim], Init::Zeros);
        }
        DifaLevel {
            prefix: prefix.to_string(),
            views: views.to_vec(),
            dim,
            heads,
        }
    }

    fn p(&self, view: &str, stem: &str) -> String {
        format!("{}.{view}.{stem}", self.prefix)
    }

    /// One token tensor `[N_v, dim]` per view, in view order; returns the
    /// fused tokens in the same order and shapes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &[NodeId],
        capture: &mut Capture,
    ) -> Result<Vec<NodeId>> {
        if feats.len() != self.views.len() {
            return Err(Error::config(format!(
                "fusion level {:?} has {} views but got {} feature sets",
                self.prefix,
                self.views.len(),
                feats.len()
            )));
        }
        let mut keys = Vec::with_capacity(feats.len());
        let mut values = Vec::with_capacity(feats.len());
        for (i, view) in self.views.iter().enumerate() {
            let k = g.linear(feats[i], p.id(&self.p(view, "wk")), p.id(&self.p(view, "bk")))?;
            keys.push(split_heads(g, k, self.heads)?);
            let v = g.linear(feats[i], p.id(&self.p(view, "wv")), p.id(&self.p(view, "bv")))?;
            values.push(split_heads(g, v, self.heads)?);
        }

        let mut outs = Vec::with_capacity(feats.len());
        for (m, view) in self.views.iter().enumerate() {
            let q = g.linear(feats[m], p.id(&self.p(view, "wq")), p.id(&self.p(view, "bq")))?;
            let qh = split_heads(g, q, self.heads)?;

            let other_k: Vec<NodeId> =
                (0..feats.len()).filter(|&v| v != m).map(|v| keys[v]).collect();
            let other_v: Vec<NodeId> =
                (0..feats.len()).filter(|&v| v != m).map(|v| values[v]).collect();
            let joint_k = if other_k.len() == 1 { other_k[0] } else { g.concat(1, &other_k)? };
            let joint_v = if other_v.len() == 1 { other_v[0] } else { g.concat(1, &other_v)? };

            let (attended, weights) = scaled_dot_attention(g, qh, joint_k, joint_v)?;
            capture.push(format!("{}.{view}", self.prefix), weights);

            let merged = merge_heads(g, attended)?;
            let delta = g.linear(merged, p.id(&self.p(view, "wo")), p.id(&self.p(view, "bo")))?;
            outs.push(g.add(feats[m], delta)?);
        }
        Ok(outs)
    }
}

/// One fused resolution level inside [`MsaView`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaLevel {
    pub level: usize,
    pub channels: usize,
}

/// Cross-scale attention over one view's token pyramid.
#[derive(Clone, Debug)]
pub struct MsaView {
    prefix: String,
    pub levels: Vec<MsaLevel>,
    /// Joint token width: the channel count of the deepest fused level.
    pub dim: usize,
    pub block: TransformerBlock,
}

impl MsaView {
    pub fn new(set: &mut ParamSet, prefix: &str, levels: &[MsaLevel], heads: usize) -> Self {
        assert!(!levels.is_empty());
        assert!(
            levels.windows(2).all(|w| w[0].level < w[1].level),
            "levels must ascend"
        );
        let dim = levels.last().unwrap().channels;
        for lv in levels {
            if lv.channels == dim {
                continue;
            }
            let base = format!("{prefix}.l{}", lv.level);
            set.declare(&format!("{base}.win"), &[lv.channels, dim], Init::FanInUniform {
                fan_in: lv.channels,
            });
            set.declare(&format!("{base}.bin"), &[dim], Init::Zeros);
            set.declare(&format!("{base}.wout"), &[dim, lv.channels], Init::Zeros);
            set.declare(&format!("{base}.bout"), &[lv.channels], Init::Zeros);
        }
        let block = TransformerBlock::new(set, &format!("{prefix}.block"), dim, heads);
        MsaView {
            prefix: prefix.to_string(),
            levels: levels.to_vec(),
            dim,
            block,
        }
    }

    /// One token tensor `[N_l, C_l]` per fused level, ascending level order;
    /// returns refined tokens with the original shapes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &[NodeId],
        capture: &mut Capture,
    ) -> Result<Vec<NodeId>> {
        if feats.len() != self.levels.len() {
            return Err(Error::config(format!(
                "scale attention {:?} has {} levels but got {} feature sets",
                self.prefix,
                self.levels.len(),
                feats.len()
            )));
        }
        let mut projected = Vec::with_capacity(feats.len());
        for (i, lv) in self.levels.iter().enumerate() {
            if lv.channels == self.dim {
                projected.push(feats[i]);
            } else {
                let base = format!("{}.l{}", self.prefix, lv.level);
                projected.push(g.linear(
                    feats[i],
                    p.id(&format!("{base}.win")),
                    p.id(&format!("{base}.bin")),
                )?);
            }
        }
        let joint = if projected.len() == 1 {
            projected[0]
        } else {
            g.concat(0, &projected)?
        };
        let (refined, weights) = self.block.forward(g, p, joint)?;
        capture.push(format!("{}.block", self.prefix), weights);

        let sizes: Vec<usize> = feats.iter().map(|&f| g.shape(f)[0]).collect();
        let chunks = if feats.len() == 1 {
            vec![refined]
        } else {
            g.split(refined, 0, &sizes)?
        };

        let mut outs = Vec::with_capacity(feats.len());
        for (i, lv) in self.levels.iter().enumerate() {
            if lv.channels == self.dim {
                outs.push(chunks[i]);
            } else {
                let base = format!("{}.l{}", self.prefix, lv.level);
                let delta = g.linear(
                    chunks[i],
                    p.id(&format!("{base}.wout")),
                    p.id(&format!("{base}.bout")),
                )?;
                outs.push(g.add(feats[i], delta)?);
            }
        }
        Ok(outs)
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

    fn identity_projections(store: &mut ParamStore<f64>, prefix: &str, views: &[&str], dim: usize) {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        for view in views {
            for stem in ["wq", "wk", "wv", "wo"] {
                store.set(&format!("{prefix}.{view}.{stem}"), eye.clone()).unwrap();
            }
        }
    }

    #[test]
    fn unfold_orders_tokens_row_major_and_folds_back() {
        let map = TokenMap::new(3, &[2, 2, 4]);
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::uniform(&[3, 2, 2, 4], -1.0, 1.0, &mut rng);

        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let tokens = map.unfold(&mut g, xid).unwrap();
        let tv = g.value(tokens);
        assert_eq!(tv.shape(), &[16, 3]);
        let (h, w) = (2usize, 4usize);
        for c in 0..3 {
            for d in 0..2 {
                for hh in 0..h {
                    for ww in 0..w {
                        let token = (d * h + hh) * w + ww;
                        let orig = x.data()[((c * 2 + d) * h + hh) * w + ww];
                        assert_eq!(tv.data()[token * 3 + c], orig);
                    }
                }
            }
        }

        let back = map.fold(&mut g, tokens).unwrap();
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn fold_rejects_wrong_shapes() {
        let map = TokenMap::new(2, &[3, 3]);
        let mut g = Graph::<f64>::new();
        let bad = g.constant(Tensor::zeros(&[8, 2]));
        assert!(map.fold(&mut g, bad).is_err());
        let bad2 = g.constant(Tensor::zeros(&[2, 3, 4]));
        assert!(map.unfold(&mut g, bad2).is_err());
    }

    #[test]
    fn fusion_matches_hand_computed_values() {
        let mut set = ParamSet::new();
        let views = ["a".to_string(), "b".to_string()];
        let difa = DifaLevel::new(&mut set, "fuse", &views, 2, 1);
        let mut store: ParamStore<f64> = set.init_store(0);
        identity_projections(&mut store, "fuse", &["a", "b"], 2);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let f0 = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let f1 = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 1.0]).unwrap());
        let outs = difa.forward(&mut g, &p, &[f0, f1], &mut Capture::off()).unwrap();

        // view a: q=[1,0] against keys [[0,1],[1,1]] -> weights
        // [0.3302, 0.6698] -> attended [0.6698, 1.0], plus the residual.
        let oa = g.value(outs[0]).data();
        assert!((oa[0] - 1.6698).abs() < 1e-4);
        assert!((oa[1] - 1.0).abs() < 1e-4);

        // view b: single key [1,0] gets weight 1 for both query tokens.
        let ob = g.value(outs[1]).data();
        let want = [1.0, 1.0, 2.0, 1.0];
        for (got, expect) in ob.iter().zip(want) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_fusion_is_the_identity() {
        let mut set = ParamSet::new();
        let views = ["a".to_string(), "b".to_string()];
        let difa = DifaLevel::new(&mut set, "fuse", &views, 8, 2);
        let store: ParamStore<f32> = set.init_store(31);

        let mut rng = Rng::new(32);
        let fa = Tensor::<f32>::uniform(&[5, 8], -2.0, 2.0, &mut rng);
        let fb = Tensor::<f32>::uniform(&[3, 8], -2.0, 2.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let ida = g.constant(fa.clone());
        let idb = g.constant(fb.clone());
        let outs = difa.forward(&mut g, &p, &[ida, idb], &mut Capture::off()).unwrap();
        assert_eq!(g.value(outs[0]).data(), fa.data());
        assert_eq!(g.value(outs[1]).data(), fb.data());
    }

    #[test]
    fn target_view_never_attends_to_itself() {
        // All non-target features are zero, so if keys/values really exclude
        // the target the attended vector is exactly zero and the output is
        // the input; a leak of the target's own (nonzero) tokens would show.
        let mut set = ParamSet::new();
        let views = ["a".to_string(), "b".to_string()];
        let difa = DifaLevel::new(&mut set, "fuse", &views, 2, 1);
        let mut store: ParamStore<f64> = set.init_store(0);
        identity_projections(&mut store, "fuse", &["a", "b"], 2);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let fa = g.constant(Tensor::from_f64(&[2, 2], &[3.0, -1.0, 0.5, 2.0]).unwrap());
        let fb = g.constant(Tensor::zeros(&[4, 2]));
        let outs = difa.forward(&mut g, &p, &[fa, fb], &mut Capture::off()).unwrap();
        assert_eq!(g.value(outs[0]).data(), g.value(fa).data());
    }

    #[test]
    fn keys_concatenate_in_ascending_view_order() {
        let mut set = ParamSet::new();
        let views: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let difa = DifaLevel::new(&mut set, "fuse", &views, 2, 1);
        let mut store: ParamStore<f64> = set.init_store(0);
        identity_projections(&mut store, "fuse", &["a", "b", "c"], 2);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        // target b sees keys [a; c]; make the query match a's key direction.
        let fa = g.constant(Tensor::from_f64(&[1, 2], &[8.0, 0.0]).unwrap());
        let fb = g.constant(Tensor::from_f64(&[1, 2], &[4.0, 0.0]).unwrap());
        let fc = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 8.0]).unwrap());
        let mut capture = Capture::on();
        let outs = difa.forward(&mut g, &p, &[fa, fb, fc], &mut capture).unwrap();

        let (name, wid) = &capture.entries[1];
        assert_eq!(name, "fuse.b");
        assert_eq!(g.shape(*wid), &[1, 1, 2]);
        let w = g.value(*wid).data();
        assert!(w[0] > 0.999, "first key slot should be view a, got weights {w:?}");

        // attended vector is then essentially a's value [8, 0]
        let ob = g.value(outs[1]).data();
        assert!((ob[0] - 12.0).abs() < 1e-2);
        assert!(ob[1].abs() < 1e-2);
    }

    #[test]
    fn single_level_scale_attention_is_a_plain_block() {
        let mut set = ParamSet::new();
        let msa = MsaView::new(&mut set, "msa.x", &[MsaLevel { level: 5, channels: 8 }], 2);
        let store: ParamStore<f64> = set.init_store(77);

        let mut rng = Rng::new(78);
        let x = Tensor::<f64>::uniform(&[6, 8], -1.0, 1.0, &mut rng);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xid = g.constant(x.clone());
        let via_msa = msa.forward(&mut g, &p, &[xid], &mut Capture::off()).unwrap();
        let (via_block, _) = msa.block.forward(&mut g, &p, xid).unwrap();
        assert_eq!(g.value(via_msa[0]).data(), g.value(via_block).data());
    }

    #[test]
    fn fresh_scale_attention_is_the_identity() {
        let mut set = ParamSet::new();
        let levels = [
            MsaLevel { level: 3, channels: 4 },
            MsaLevel { level: 4, channels: 8 },
            MsaLevel { level: 5, channels: 8 },
        ];
        let msa = MsaView::new(&mut set, "msa.x", &levels, 2);
        let store: ParamStore<f32> = set.init_store(55);

        let mut rng = Rng::new(56);
        let f3 = Tensor::<f32>::uniform(&[9, 4], -2.0, 2.0, &mut rng);
        let f4 = Tensor::<f32>::uniform(&[4, 8], -2.0, 2.0, &mut rng);
        let f5 = Tensor::<f32>::uniform(&[2, 8], -2.0, 2.0, &mut rng);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let ids = [g.constant(f3.clone()), g.constant(f4.clone()), g.constant(f5.clone())];
        let outs = msa.forward(&mut g, &p, &ids, &mut Capture::off()).unwrap();
        assert_eq!(g.value(outs[0]).data(), f3.data());
        assert_eq!(g.value(outs[1]).data(), f4.data());
        assert_eq!(g.value(outs[2]).data(), f5.data());
    }

    fn check_layer_gradients<F>(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &Bound, &[NodeId]) -> Result<NodeId>,
    {
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs = extra;
        let n_extra = inputs.len();
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }
        let report = grad_check(&inputs, &CheckOpts::default(), |g, ids| {
            let mut map = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                map.insert(n.clone(), ids[n_extra + i]);
            }
            let p = Bound::new(map);
            build(g, &p, &ids[..n_extra])
        })
        .unwrap();
        assert!(report.pass(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn fusion_gradients_match_numeric() {
        let mut set = ParamSet::new();
        let views = ["a".to_string(), "b".to_string()];
        let difa = DifaLevel::new(&mut set, "f", &views, 4, 2);
        let mut store: ParamStore<f64> = set.init_store(61);
        let mut rng = Rng::new(62);
        for view in ["a", "b"] {
            let name = format!("f.{view}.wo");
            store.set(&name, Tensor::uniform(&[4, 4], -0.4, 0.4, &mut rng)).unwrap();
        }

        let fa = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let fb = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        check_layer_gradients(&store, vec![fa, fb], |g, p, xs| {
            let outs = difa.forward(g, p, xs, &mut Capture::off())?;
            let joined = g.concat(0, &outs)?;
            let sq = g.mul(joined, joined)?;
            Ok(g.sum_all(sq))
        });
    }

    #[test]
    fn scale_attention_gradients_match_numeric() {
        let mut set = ParamSet::new();
        let levels = [MsaLevel { level: 4, channels: 2 }, MsaLevel { level: 5, channels: 4 }];
        let msa = MsaView::new(&mut set, "m", &levels, 2);
        let mut store: ParamStore<f64> = set.init_store(71);
        let mut rng = Rng::new(72);
        for name in ["m.l4.wout", "m.block.attn.wo", "m.block.ffn.w2"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::uniform(&shape, -0.3, 0.3, &mut rng)).unwrap();
        }

        let f4 = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let f5 = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        check_layer_gradients(&store, vec![f4, f5], |g, p, xs| {
            let outs = msa.forward(g, p, xs, &mut Capture::off())?;
            let mut total = None;
            for &o in &outs {
                let sq = g.mul(o, o)?;
                let s = g.sum_all(sq);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        });
    }
}
