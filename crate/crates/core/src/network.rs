//! The multi-view U-shaped segmentation network.
//!
//! Each view runs its own convolutional encoder/decoder; attention does all
//! the long-range and cross-view mixing. Volumetric views convolve with
//! in-plane `(1,3,3)` kernels only, so anisotropic voxels are never smeared
//! along the slice axis by convolution; slices talk to each other exclusively
//! through the token attention stages.
//!
//! Resolution levels are numbered from full resolution: the two stem stages
//! produce level 2 at quarter in-plane resolution, and each encoder stage
//! `3..=levels` halves the plane again. Channel widths follow
//! `min(base * 2^(level-1), max)`. Slice-axis extents are halved only while
//! they exceed 8.
//!
//! Cross-view fusion ([`fusion::DifaLevel`]) and cross-scale refinement
//! ([`fusion::MsaView`]) run between encoding and decoding on the token form
//! of the chosen levels. The decoder consumes the refined tokens as skip
//! connections at fused levels and the raw encoder maps elsewhere. Both
//! fusion paths start as exact identities (zero-initialized output
//! projections), so enabling them never disturbs a fresh model's output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::TransformerBlock;
use crate::error::{Error, Result};
use crate::fusion::{Capture, DifaLevel, MsaLevel, MsaView, TokenMap};
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, Init, ParamSet};
use crate::scalar::Scalar;

pub const MODEL_SCHEMA: u32 = 1;

/// Slice-axis extents at or below this are never downsampled.
pub const MIN_THROUGH_PLANE: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub name: String,
    /// Spatial extents: `[D, H, W]` for a volume, `[H, W]` for a plane.
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// Cross-view attention per level, then cross-scale attention per view.
    #[default]
    CrossViewFirst,
    CrossScaleFirst,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: u32,
    pub views: Vec<ViewConfig>,
    pub classes: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub levels: usize,
    pub heads: usize,
    #[serde(default)]
    pub difa_levels: Vec<usize>,
    #[serde(default)]
    pub msa_levels: Vec<usize>,
    #[serde(default)]
    pub fusion_order: FusionOrder,
}

impl ModelConfig {
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << (level - 1)).min(self.max_channels)
    }

    fn check_level_list(&self, what: &str, list: &[usize]) -> Result<()> {
        if !list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(format!("{what} must be strictly ascending, got {list:?}")));
        }
        for &l in list {
            if l < 3 || l > self.levels {
                return Err(Error::config(format!(
                    "{what} level {l} outside the encoder range 3..={}",
                    self.levels
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::config(format!(
                "model schema {} unsupported, this build reads {MODEL_SCHEMA}",
                self.schema
            )));
        }
        if self.views.is_empty() {
            return Err(Error::config("at least one view is required"));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::config(format!("view name {:?} must be [A-Za-z0-9_]+", v.name)));
            }
            if self.views[..i].iter().any(|o| o.name == v.name) {
                return Err(Error::config(format!("duplicate view name {:?}", v.name)));
            }
            if !(2..=3).contains(&v.shape.len()) || v.shape.iter().any(|&e| e == 0) {
                return Err(Error::config(format!(
                    "view {:?} shape {:?} must be [D,H,W] or [H,W] with positive extents",
                    v.name, v.shape
                )));
            }
            let plane = 1usize << self.levels;
            let (h, w) = (v.shape[v.shape.len() - 2], v.shape[v.shape.len() - 1]);
            if h % plane != 0 || w % plane != 0 {
                return Err(Error::config(format!(
                    "view {:?} in-plane extents {h}x{w} must be multiples of {plane} for {} levels",
                    v.name, self.levels
                )));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.levels < 3 {
            return Err(Error::config("need at least three levels (two stem stages plus one encoder stage)"));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("channel schedule needs 0 < base <= max"));
        }
        if self.heads == 0 {
            return Err(Error::config("need at least one attention head"));
        }
        for l in 3..=self.levels {
            if self.channels(l) % self.heads != 0 {
                return Err(Error::config(format!(
                    "level {l} width {} not divisible by {} heads",
                    self.channels(l),
                    self.heads
                )));
            }
        }
        self.check_level_list("difa_levels", &self.difa_levels)?;
        self.check_level_list("msa_levels", &self.msa_levels)?;
        if let Some(&l) = self.difa_levels.iter().find(|l| !self.msa_levels.contains(l)) {
            return Err(Error::config(format!(
                "difa level {l} is not in msa_levels; cross-view fusion only runs on scale-refined levels"
            )));
        }
        if self.views.len() < 2 && !self.difa_levels.is_empty() {
            return Err(Error::config(
                "cross-view fusion configured but the model has a single view",
            ));
        }
        Ok(())
    }

    /// The same backbone restricted to one view, with fusion off. Shared
    /// parameter names initialize identically, so at matching weights the
    /// restricted model reproduces the view's output bit for bit.
    pub fn single_view(&self, index: usize) -> ModelConfig {
        ModelConfig {
            views: vec![self.views[index].clone()],
            difa_levels: Vec::new(),
            msa_levels: Vec::new(),
            ..self.clone()
        }
    }

    /// Fusion disabled at every level, views unchanged.
    pub fn without_fusion(&self) -> ModelConfig {
        ModelConfig {
            difa_levels: Vec::new(),
            msa_levels: Vec::new(),
            ..self.clone()
        }
    }

    /// Fusion restricted to the given levels (applied to both paths).
    pub fn with_fused_levels(&self, levels: &[usize]) -> ModelConfig {
        ModelConfig {
            difa_levels: levels.to_vec(),
            msa_levels: levels.to_vec(),
            ..self.clone()
        }
    }

    /// Cross-view attention restricted to the given levels; the in-view
    /// multi-scale path keeps its configured levels.
    pub fn with_cross_view_levels(&self, levels: &[usize]) -> ModelConfig {
        ModelConfig {
            difa_levels: levels.to_vec(),
            ..self.clone()
        }
    }

    /// Spatial extents of one view's token grid at the given pyramid level.
    pub fn token_grid(&self, view: usize, level: usize) -> Vec<usize> {
        let mut spatial = self.views[view].shape.clone();
        for _ in 1..=level {
            let (stride, _) = stage_stride(&spatial);
            spatial = halve(&spatial, &stride);
        }
        spatial
    }
}

/// conv + channel norm + gelu; the head variant skips the norm.
///
/// The whole convolutional pathway activates with gelu: a smooth activation
/// keeps every weight's loss surface differentiable, so gradient checks of
/// the full network cannot land on a kink.
#[derive(Clone, Debug)]
struct ConvStage {
    prefix: String,
    stride: Vec<usize>,
    pad: Vec<usize>,
    normed: bool,
}

impl ConvStage {
    fn new(
        set: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        spatial_rank: usize,
        stride: Vec<usize>,
        normed: bool,
    ) -> Self {
        let kernel: Vec<usize> = if spatial_rank == 3 { vec![1, 3, 3] } else { vec![3, 3] };
        let pad: Vec<usize> = if spatial_rank == 3 { vec![0, 1, 1] } else { vec![1, 1] };
        let mut wshape = vec![c_out, c_in];
        wshape.extend(&kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        set.declare(&format!("{prefix}.conv.w"), &wshape, Init::FanInUniform { fan_in });
        set.declare(&format!("{prefix}.conv.b"), &[c_out], Init::Zeros);
        if normed {
            set.declare(&format!("{prefix}.norm.g"), &[c_out], Init::Ones);
            set.declare(&format!("{prefix}.norm.b"), &[c_out], Init::Zeros);
        }
        ConvStage { prefix: prefix.to_string(), stride, pad, normed }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let c = g.conv(
            x,
            p.id(&format!("{}.conv.w", self.prefix)),
            p.id(&format!("{}.conv.b", self.prefix)),
            &self.stride,
            &self.pad,
        )?;
        let pre = if self.normed {
            g.channel_norm(
                c,
                p.id(&format!("{}.norm.g", self.prefix)),
                p.id(&format!("{}.norm.b", self.prefix)),
                crate::attention::LN_EPS,
            )?
        } else {
            c
        };
        Ok(g.gelu(pre))
    }
}

/// Pre-activation residual block; 1x1 shortcut only on channel change.
#[derive(Clone, Debug)]
struct ResidualBlock {
    prefix: String,
    c_in: usize,
    c_out: usize,
    pad: Vec<usize>,
    unit: Vec<usize>,
}

impl ResidualBlock {
    fn new(set: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, spatial_rank: usize) -> Self {
        let kernel: Vec<usize> = if spatial_rank == 3 { vec![1, 3, 3] } else { vec![3, 3] };
        let pad: Vec<usize> = if spatial_rank == 3 { vec![0, 1, 1] } else { vec![1, 1] };
        let unit = vec![1; spatial_rank];
        let fan_in = c_in * kernel.iter().product::<usize>();
        let fan_mid = c_out * kernel.iter().product::<usize>();

        set.declare(&format!("{prefix}.norm1.g"), &[c_in], Init::Ones);
        set.declare(&format!("{prefix}.norm1.b"), &[c_in], Init::Zeros);
        let mut w1 = vec![c_out, c_in];
        w1.extend(&kernel);
        set.declare(&format!("{prefix}.conv1.w"), &w1, Init::FanInUniform { fan_in });
        set.declare(&format!("{prefix}.conv1.b"), &[c_out], Init::Zeros);

        set.declare(&format!("{prefix}.norm2.g"), &[c_out], Init::Ones);
        set.declare(&format!("{prefix}.norm2.b"), &[c_out], Init::Zeros);
        let mut w2 = vec![c_out, c_out];
        w2.extend(&kernel);
        set.declare(&format!("{prefix}.conv2.w"), &w2, Init::FanInUniform { fan_in: fan_mid });
        set.declare(&format!("{prefix}.conv2.b"), &[c_out], Init::Zeros);

        if c_in != c_out {
            let mut ws = vec![c_out, c_in];
            ws.extend(&unit);
            set.declare(&format!("{prefix}.short.w"), &ws, Init::FanInUniform { fan_in: c_in });
            set.declare(&format!("{prefix}.short.b"), &[c_out], Init::Zeros);
        }
        ResidualBlock { prefix: prefix.to_string(), c_in, c_out, pad, unit }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let ones = vec![1; self.unit.len()];
        let zeros = vec![0; self.unit.len()];
        let n1 = g.channel_norm(
            x,
            p.id(&format!("{}.norm1.g", self.prefix)),
            p.id(&format!("{}.norm1.b", self.prefix)),
            crate::attention::LN_EPS,
        )?;
        let a1 = g.gelu(n1);
        let c1 = g.conv(
            a1,
            p.id(&format!("{}.conv1.w", self.prefix)),
            p.id(&format!("{}.conv1.b", self.prefix)),
            &ones,
            &self.pad,
        )?;
        let n2 = g.channel_norm(
            c1,
            p.id(&format!("{}.norm2.g", self.prefix)),
            p.id(&format!("{}.norm2.b", self.prefix)),
            crate::attention::LN_EPS,
        )?;
        let a2 = g.gelu(n2);
        let c2 = g.conv(
            a2,
            p.id(&format!("{}.conv2.w", self.prefix)),
            p.id(&format!("{}.conv2.b", self.prefix)),
            &ones,
            &self.pad,
        )?;
        let short = if self.c_in == self.c_out {
            x
        } else {
            g.conv(
                x,
                p.id(&format!("{}.short.w", self.prefix)),
                p.id(&format!("{}.short.b", self.prefix)),
                &ones,
                &zeros,
            )?
        };
        g.add(short, c2)
    }
}

#[derive(Clone, Debug)]
struct EncStage {
    level: usize,
    down: ConvStage,
    res: ResidualBlock,
    trans: TransformerBlock,
    map: TokenMap,
}

#[derive(Clone, Debug)]
struct DecStage {
    level: usize,
    up_axes: Vec<usize>,
    conv: ConvStage,
    res: ResidualBlock,
}

#[derive(Clone, Debug)]
struct Head {
    up1_axes: Vec<usize>,
    conv1: ConvStage,
    up2_axes: Vec<usize>,
    conv2: ConvStage,
    out_prefix: String,
    unit: Vec<usize>,
}

/// One view's encoder/decoder stream.
#[derive(Clone, Debug)]
struct ViewNet {
    input_shape: Vec<usize>,
    stem: Vec<ConvStage>,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    head: Head,
}

/// Maps and tokens produced by one view's encoder.
pub struct EncodeState {
    /// Folded feature map per level, 2..=levels.
    maps: BTreeMap<usize, NodeId>,
    /// Token form per encoder level, 3..=levels.
    tokens: BTreeMap<usize, NodeId>,
}

impl EncodeState {
    pub fn tokens_at(&self, level: usize) -> NodeId {
        self.tokens[&level]
    }
}

/// Downsample plan for one stage: stride per spatial axis plus which tensor
/// axes of the `[C, spatial...]` map were halved.
fn stage_stride(spatial: &[usize]) -> (Vec<usize>, Vec<usize>) {
    if spatial.len() == 3 {
        if spatial[0] > MIN_THROUGH_PLANE {
            (vec![2, 2, 2], vec![1, 2, 3])
        } else {
            (vec![1, 2, 2], vec![2, 3])
        }
    } else {
        (vec![2, 2], vec![1, 2])
    }
}

fn halve(spatial: &[usize], stride: &[usize]) -> Vec<usize> {
    spatial.iter().zip(stride).map(|(&e, &s)| e / s).collect()
}

impl ViewNet {
    fn new(set: &mut ParamSet, cfg: &ModelConfig, view: &ViewConfig) -> Self {
        let name = &view.name;
        let rank = view.shape.len();
        let mut spatial = view.shape.clone();

        let mut stem = Vec::new();
        let mut stem_axes = Vec::new();
        let mut c_prev = 1;
        for stage in 1..=2 {
            let (stride, axes) = stage_stride(&spatial);
            let c_out = cfg.channels(stage);
            stem.push(ConvStage::new(
                set,
                &format!("{name}.stem.s{stage}"),
                c_prev,
                c_out,
                rank,
                stride.clone(),
                true,
            ));
            stem_axes.push(axes);
            spatial = halve(&spatial, &stride);
            c_prev = c_out;
        }

        let mut enc = Vec::new();
        for level in 3..=cfg.levels {
            let (stride, _) = stage_stride(&spatial);
            let c_out = cfg.channels(level);
            let down = ConvStage::new(
                set,
                &format!("{name}.enc{level}.down"),
                c_prev,
                c_out,
                rank,
                stride.clone(),
                true,
            );
            spatial = halve(&spatial, &stride);
            let res = ResidualBlock::new(set, &format!("{name}.enc{level}.res"), c_out, c_out, rank);
            let trans =
                TransformerBlock::new(set, &format!("{name}.enc{level}.trans"), c_out, cfg.heads);
            enc.push(EncStage {
                level,
                down,
                res,
                trans,
                map: TokenMap::new(c_out, &spatial),
            });
            c_prev = c_out;
        }

        let mut dec = Vec::new();
        for level in (2..cfg.levels).rev() {
            // mirror of the encoder stage that produced level+1
            let producing = &enc[level + 1 - 3];
            let up_axes: Vec<usize> = producing
                .down
                .stride
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == 2)
                .map(|(i, _)| i + 1)
                .collect();
            let c_here = cfg.channels(level);
            let c_below = cfg.channels(level + 1);
            let conv = ConvStage::new(
                set,
                &format!("{name}.dec{level}.conv"),
                c_below,
                c_here,
                rank,
                vec![1; rank],
                true,
            );
            let res = ResidualBlock::new(set, &format!("{name}.dec{level}.res"), c_here, c_here, rank);
            dec.push(DecStage { level, up_axes, conv, res });
        }

        let c2 = cfg.channels(2);
        let c1 = cfg.channels(1);
        let c_half = (cfg.base_channels / 2).max(1);
        let up1_axes: Vec<usize> = stem_axes[1].clone();
        let up2_axes: Vec<usize> = stem_axes[0].clone();
        let conv1 = ConvStage::new(set, &format!("{name}.head.up1"), c2, c1, rank, vec![1; rank], false);
        let conv2 = ConvStage::new(set, &format!("{name}.head.up2"), c1, c_half, rank, vec![1; rank], false);
        let unit = vec![1; rank];
        let mut wshape = vec![cfg.classes, c_half];
        wshape.extend(&unit);
        set.declare(
            &format!("{name}.head.out.w"),
            &wshape,
            Init::FanInUniform { fan_in: c_half },
        );
        set.declare(&format!("{name}.head.out.b"), &[cfg.classes], Init::Zeros);

        ViewNet {
            input_shape: view.shape.clone(),
            stem,
            enc,
            dec,
            head: Head {
                up1_axes,
                conv1,
                up2_axes,
                conv2,
                out_prefix: format!("{name}.head.out"),
                unit,
            },
        }
    }

    fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: NodeId) -> Result<EncodeState> {
        let mut want = vec![1];
        want.extend(&self.input_shape);
        if g.shape(image) != want {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: g.shape(image).to_vec(),
                rhs: want,
            });
        }
        let mut x = image;
        for stage in &self.stem {
            x = stage.forward(g, p, x)?;
        }
        let mut maps = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        maps.insert(2, x);
        for stage in &self.enc {
            let down = stage.down.forward(g, p, x)?;
            let res = stage.res.forward(g, p, down)?;
            let toks = stage.map.unfold(g, res)?;
            let (refined, _) = stage.trans.forward(g, p, toks)?;
            x = stage.map.fold(g, refined)?;
            tokens.insert(stage.level, refined);
            maps.insert(stage.level, x);
        }
        Ok(EncodeState { maps, tokens })
    }

    /// `refined` overrides the skip tokens at fused levels.
    fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &EncodeState,
        refined: &BTreeMap<usize, NodeId>,
    ) -> Result<NodeId> {
        let deepest = self.enc.last().expect("at least one encoder stage");
        let mut x = match refined.get(&deepest.level) {
            Some(&toks) => deepest.map.fold(g, toks)?,
            None => state.maps[&deepest.level],
        };
        for stage in &self.dec {
            let up = g.upsample2x(x, &stage.up_axes)?;
            let conv = stage.conv.forward(g, p, up)?;
            let skip = if stage.level == 2 {
                state.maps[&2]
            } else {
                let enc_stage = &self.enc[stage.level - 3];
                match refined.get(&stage.level) {
                    Some(&toks) => enc_stage.map.fold(g, toks)?,
                    None => state.maps[&stage.level],
                }
            };
            let sum = g.add(conv, skip)?;
            x = stage.res.forward(g, p, sum)?;
        }
        let u1 = g.upsample2x(x, &self.head.up1_axes)?;
        let h1 = self.head.conv1.forward(g, p, u1)?;
        let u2 = g.upsample2x(h1, &self.head.up2_axes)?;
        let h2 = self.head.conv2.forward(g, p, u2)?;
        g.conv(
            h2,
            p.id(&format!("{}.w", self.head.out_prefix)),
            p.id(&format!("{}.b", self.head.out_prefix)),
            &self.head.unit,
            &vec![0; self.head.unit.len()],
        )
    }
}

/// The full multi-view model: per-view streams plus the fusion stages.
pub struct TransFusionModel {
    pub config: ModelConfig,
    views: Vec<ViewNet>,
    difa: Vec<DifaLevel>,
    msa: Vec<MsaView>,
    param_set: ParamSet,
}

impl TransFusionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new();
        let views: Vec<ViewNet> =
            config.views.iter().map(|v| ViewNet::new(&mut set, &config, v)).collect();

        let view_names: Vec<String> = config.views.iter().map(|v| v.name.clone()).collect();
        let difa = config
            .difa_levels
            .iter()
            .map(|&l| {
                DifaLevel::new(&mut set, &format!("difa{l}"), &view_names, config.channels(l), config.heads)
            })
            .collect();

        let msa = if config.msa_levels.is_empty() {
            Vec::new()
        } else {
            let levels: Vec<MsaLevel> = config
                .msa_levels
                .iter()
                .map(|&l| MsaLevel { level: l, channels: config.channels(l) })
                .collect();
            view_names
                .iter()
                .map(|name| MsaView::new(&mut set, &format!("msa.{name}"), &levels, config.heads))
                .collect()
        };

        Ok(TransFusionModel { config, views, difa, msa, param_set: set })
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.param_set
    }

    pub fn init_store<T: Scalar>(&self, seed: u64) -> crate::params::ParamStore<T> {
        self.param_set.init_store(seed)
    }

    /// Per-view logits `[classes, spatial...]` from per-view images
    /// `[1, spatial...]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: &[NodeId],
        capture: &mut Capture,
    ) -> Result<Vec<NodeId>> {
        if images.len() != self.views.len() {
            return Err(Error::config(format!(
                "model has {} views but got {} images",
                self.views.len(),
                images.len()
            )));
        }
        let states: Vec<EncodeState> = self
            .views
            .iter()
            .zip(images)
            .map(|(v, &img)| v.encode(g, p, img))
            .collect::<Result<_>>()?;

        let mut refined: Vec<BTreeMap<usize, NodeId>> = states
            .iter()
            .map(|s| {
                self.config
                    .msa_levels
                    .iter()
                    .map(|&l| (l, s.tokens_at(l)))
                    .collect()
            })
            .collect();

        match self.config.fusion_order {
            FusionOrder::CrossViewFirst => {
                self.run_difa(g, p, &mut refined, capture)?;
                self.run_msa(g, p, &mut refined, capture)?;
            }
            FusionOrder::CrossScaleFirst => {
                self.run_msa(g, p, &mut refined, capture)?;
                self.run_difa(g, p, &mut refined, capture)?;
            }
        }

        self.views
            .iter()
            .zip(&states)
            .zip(&refined)
            .map(|((v, s), r)| v.decode(g, p, s, r))
            .collect()
    }

    fn run_difa<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        refined: &mut [BTreeMap<usize, NodeId>],
        capture: &mut Capture,
    ) -> Result<()> {
        for (difa, &level) in self.difa.iter().zip(&self.config.difa_levels) {
            let feats: Vec<NodeId> = refined.iter().map(|r| r[&level]).collect();
            let fused = difa.forward(g, p, &feats, capture)?;
            for (r, f) in refined.iter_mut().zip(fused) {
                r.insert(level, f);
            }
        }
        Ok(())
    }

    fn run_msa<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        refined: &mut [BTreeMap<usize, NodeId>],
        capture: &mut Capture,
    ) -> Result<()> {
        for (msa, r) in self.msa.iter().zip(refined.iter_mut()) {
            let feats: Vec<NodeId> = self.config.msa_levels.iter().map(|l| r[l]).collect();
            let out = msa.forward(g, p, &feats, capture)?;
            for (&l, o) in self.config.msa_levels.iter().zip(out) {
                r.insert(l, o);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckOpts};
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            schema: MODEL_SCHEMA,
            views: vec![
                ViewConfig { name: "vol".into(), shape: vec![4, 8, 8] },
                ViewConfig { name: "plane".into(), shape: vec![8, 8] },
            ],
            classes: 3,
            base_channels: 2,
            max_channels: 8,
            levels: 3,
            heads: 2,
            difa_levels: vec![3],
            msa_levels: vec![3],
            fusion_order: FusionOrder::default(),
        }
    }

    fn images(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = Rng::new(seed);
        cfg.views
            .iter()
            .map(|v| {
                let mut shape = vec![1];
                shape.extend(&v.shape);
                Tensor::uniform(&shape, 0.0, 1.0, &mut rng)
            })
            .collect()
    }

    fn run_forward(cfg: &ModelConfig, seed: u64, imgs: &[Tensor<f32>]) -> Vec<Tensor<f32>> {
        let model = TransFusionModel::new(cfg.clone()).unwrap();
        let store: ParamStore<f32> = model.init_store(seed);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let ids: Vec<NodeId> = imgs.iter().map(|t| g.constant(t.clone())).collect();
        let outs = model.forward(&mut g, &p, &ids, &mut Capture::off()).unwrap();
        outs.into_iter().map(|o| g.value(o).clone()).collect()
    }

    #[test]
    fn logits_cover_the_input_grid() {
        let cfg = tiny_config();
        let imgs = images(&cfg, 1);
        let outs = run_forward(&cfg, 7, &imgs);
        assert_eq!(outs[0].shape(), &[3, 4, 8, 8]);
        assert_eq!(outs[1].shape(), &[3, 8, 8]);
        for o in &outs {
            assert!(o.all_finite());
        }
    }

    #[test]
    fn fresh_fusion_does_not_change_the_output() {
        let cfg = tiny_config();
        let imgs = images(&cfg, 2);
        let with_fusion = run_forward(&cfg, 11, &imgs);
        let without = run_forward(&cfg.without_fusion(), 11, &imgs);
        for (a, b) in with_fusion.iter().zip(&without) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fusion_off_equals_the_single_view_models() {
        let cfg = tiny_config().without_fusion();
        let imgs = images(&cfg, 3);
        let joint = run_forward(&cfg, 19, &imgs);
        for (i, img) in imgs.iter().enumerate() {
            let solo = run_forward(&cfg.single_view(i), 19, std::slice::from_ref(img));
            assert_eq!(joint[i].data(), solo[0].data());
        }
    }

    #[test]
    fn trained_fusion_feeds_back_into_every_view() {
        // nudge one fusion output projection off zero; both decoders shift
        let cfg = tiny_config();
        let model = TransFusionModel::new(cfg.clone()).unwrap();
        let mut store: ParamStore<f32> = model.init_store(5);
        let mut rng = Rng::new(6);
        let shape = store.get("difa3.vol.wo").unwrap().shape().to_vec();
        store.set("difa3.vol.wo", Tensor::uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();
        store.set("difa3.plane.wo", Tensor::uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();

        let imgs = images(&cfg, 7);
        let run = |s: &ParamStore<f32>| {
            let mut g = Graph::new();
            let p = s.bind(&mut g, false);
            let ids: Vec<NodeId> = imgs.iter().map(|t| g.constant(t.clone())).collect();
            let outs = model.forward(&mut g, &p, &ids, &mut Capture::off()).unwrap();
            outs.into_iter().map(|o| g.value(o).clone()).collect::<Vec<_>>()
        };
        let shifted = run(&store);
        let baseline = run(&model.init_store(5));
        for (a, b) in shifted.iter().zip(&baseline) {
            assert!(a.max_abs_diff(b).unwrap() > 0.0);
        }
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let base = tiny_config();

        let mut c = base.clone();
        c.schema = 99;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.views.truncate(1);
        assert!(c.validate().is_err(), "single view with cross-view fusion must fail");
        c.difa_levels.clear();
        assert!(c.validate().is_ok(), "single view without cross-view fusion is fine");

        let mut c = base.clone();
        c.difa_levels = vec![3];
        c.msa_levels = vec![];
        assert!(c.validate().is_err(), "difa outside msa levels must fail");

        let mut c = base.clone();
        c.heads = 3;
        assert!(c.validate().is_err(), "heads must divide level widths");

        let mut c = base.clone();
        c.views[0].shape = vec![4, 12, 8];
        assert!(c.validate().is_err(), "in-plane extent must support the level count");

        let mut c = base.clone();
        c.msa_levels = vec![3, 7];
        assert!(c.validate().is_err(), "fused level outside encoder range must fail");

        let mut c = base.clone();
        c.views[1].name = "vol".into();
        assert!(c.validate().is_err(), "duplicate view names must fail");
    }

    #[test]
    fn whole_model_gradients_match_numeric() {
        let cfg = tiny_config();
        let model = TransFusionModel::new(cfg.clone()).unwrap();
        let mut store: ParamStore<f64> = model.init_store(41);
        // push every zero-initialized projection off zero so all paths carry
        let mut rng = Rng::new(42);
        let zero_inits: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".wo") || n.ends_with(".w2") || n.ends_with(".wout"))
            .map(String::from)
            .collect();
        for name in zero_inits {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::uniform(&shape, -0.2, 0.2, &mut rng)).unwrap();
        }

        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs = Vec::new();
        for v in &cfg.views {
            let mut shape = vec![1];
            shape.extend(&v.shape);
            inputs.push(Tensor::uniform(&shape, 0.1, 0.9, &mut rng));
        }
        let n_imgs = inputs.len();
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }

        let opts = CheckOpts { sample: Some((2, 977)), tolerance: 1e-4, ..CheckOpts::default() };
        let report = grad_check(&inputs, &opts, |g, ids| {
            let mut map = std::collections::BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                map.insert(n.clone(), ids[n_imgs + i]);
            }
            let p = Bound::new(map);
            let outs = model.forward(g, &p, &ids[..n_imgs], &mut Capture::off())?;
            let mut total = None;
            for o in outs {
                let sq = g.mul(o, o)?;
                let s = g.sum_all(sq);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(report.pass(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }
}
