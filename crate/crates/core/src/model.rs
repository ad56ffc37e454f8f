//! Toy dual-branch segmentation transformer.
//!
//! A hierarchical encoder (non-overlapping patch embedding, then 2×2 patch
//! merging between stages) runs on the colour image, the replicated
//! disparity image, or both with one shared parameter set. Positional
//! encodings are added before every transformer block. In dual mode every
//! attention layer is a cross-input attention, and stage outputs are fused
//! by sum or Attention-Mix before a lightweight all-MLP decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, CiaConfig, SwapMode};
use crate::config::{parse_list, parse_value, render_list, KeyValues};
use crate::error::{Error, Result};
use crate::fusion::{self, AmParams, FusionMode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::posenc::{self, PeMode, PeScales, TokenCoords};
use crate::tape::{Resize, Tape, Var};
use crate::tensor::{Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Branches {
    #[default]
    RgbOnly,
    DepthOnly,
    Dual,
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_only" => Ok(Self::RgbOnly),
            "depth_only" => Ok(Self::DepthOnly),
            "dual" => Ok(Self::Dual),
            _ => Err(Error::Config(format!(
                "branches {s:?}, expected rgb_only|depth_only|dual"
            ))),
        }
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RgbOnly => "rgb_only",
            Self::DepthOnly => "depth_only",
            Self::Dual => "dual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub num_classes: usize,
    pub pe_mode: PeMode,
    pub swap_mode: SwapMode,
    pub fusion: FusionMode,
    pub branches: Branches,
    pub decoder_width: usize,
    pub mlp_ratio: usize,
    /// Disparity normaliser `I_d`: `d = disparity / max_disparity`.
    pub max_disparity: f64,
    /// Frequency scale of the disparity encoding; `None` reuses `max_disparity`.
    pub depth_pe_scale: Option<f64>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_size: 4,
            channels: vec![32, 64],
            blocks: vec![2, 2],
            heads: vec![1, 2],
            num_classes: 4,
            pe_mode: PeMode::TwoD,
            swap_mode: SwapMode::None,
            fusion: FusionMode::Sum,
            branches: Branches::RgbOnly,
            decoder_width: 64,
            mlp_ratio: 4,
            max_disparity: 128.0,
            depth_pe_scale: None,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    /// Pixels per token at stage `s`.
    pub fn stride(&self, stage: usize) -> usize {
        self.patch_size << stage
    }

    pub fn depth_scale(&self) -> f64 {
        self.depth_pe_scale.unwrap_or(self.max_disparity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.channels.len();
        if s == 0 || self.blocks.len() != s || self.heads.len() != s {
            return bad(format!(
                "channels/blocks/heads lengths {}/{}/{} must match and be non-zero",
                s,
                self.blocks.len(),
                self.heads.len()
            ));
        }
        for ((&c, &h), &b) in self.channels.iter().zip(&self.heads).zip(&self.blocks) {
            if c == 0 || c % 2 != 0 {
                return bad(format!("channel count {c} must be even and positive"));
            }
            if h == 0 || c % h != 0 {
                return bad(format!("channel count {c} not divisible by {h} heads"));
            }
            if b == 0 {
                return bad("every stage needs at least one block".into());
            }
        }
        if !self.image_side.is_power_of_two() {
            return bad(format!("image side {} must be a power of two", self.image_side));
        }
        if self.patch_size == 0 || self.image_side % self.stride(s - 1) != 0 {
            return bad(format!(
                "image side {} not divisible by patch {} x 2^{}",
                self.image_side,
                self.patch_size,
                s - 1
            ));
        }
        if self.image_side < 2 {
            return bad("image side must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.decoder_width == 0 || self.mlp_ratio == 0 {
            return bad("decoder width and mlp ratio must be positive".into());
        }
        if !(self.max_disparity > 0.0) {
            return bad("max_disparity must be positive".into());
        }
        if !(self.depth_scale() > 1.0) {
            return bad(format!("depth encoding scale {} must exceed 1", self.depth_scale()));
        }
        if self.branches != Branches::Dual {
            if self.swap_mode != SwapMode::None {
                return bad(format!("swap_mode {} requires dual branches", self.swap_mode));
            }
            if self.fusion != FusionMode::Sum {
                return bad(format!("fusion {} requires dual branches", self.fusion));
            }
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be non-negative".into());
        }
        Ok(())
    }
}

impl KeyValues for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_side" => self.image_side = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "blocks" => self.blocks = parse_list(key, value)?,
            "heads" => self.heads = parse_list(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "pe_mode" => self.pe_mode = value.parse()?,
            "swap_mode" => self.swap_mode = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "branches" => self.branches = value.parse()?,
            "decoder_width" => self.decoder_width = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "max_disparity" => self.max_disparity = parse_value(key, value)?,
            "depth_pe_scale" => {
                self.depth_pe_scale = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "init_std" => self.init_std = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("image_side", self.image_side.to_string()),
            kv("patch_size", self.patch_size.to_string()),
            kv("channels", render_list(&self.channels)),
            kv("blocks", render_list(&self.blocks)),
            kv("heads", render_list(&self.heads)),
            kv("num_classes", self.num_classes.to_string()),
            kv("pe_mode", self.pe_mode.to_string()),
            kv("swap_mode", self.swap_mode.to_string()),
            kv("fusion", self.fusion.to_string()),
            kv("branches", self.branches.to_string()),
            kv("decoder_width", self.decoder_width.to_string()),
            kv("mlp_ratio", self.mlp_ratio.to_string()),
            kv("max_disparity", format!("{:?}", self.max_disparity)),
            kv(
                "depth_pe_scale",
                self.depth_pe_scale
                    .map_or_else(|| "auto".to_string(), |v| format!("{v:?}")),
            ),
            kv("init_std", format!("{:?}", self.init_std)),
        ]
    }
}

/// The nine configurations of the ablation table, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TableRow {
    RgbBaseline,
    DepthBaseline,
    Rgbd,
    Pe3d,
    CrossV,
    CrossQ,
    CrossK,
    AttnMix,
    Total,
}

impl TableRow {
    pub const ALL: [TableRow; 9] = [
        TableRow::RgbBaseline,
        TableRow::DepthBaseline,
        TableRow::Rgbd,
        TableRow::Pe3d,
        TableRow::CrossV,
        TableRow::CrossQ,
        TableRow::CrossK,
        TableRow::AttnMix,
        TableRow::Total,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::RgbBaseline => "RGB Baseline",
            Self::DepthBaseline => "Depth Baseline",
            Self::Rgbd => "RGBD",
            Self::Pe3d => "3D PE",
            Self::CrossV => "cross-V",
            Self::CrossQ => "cross-Q",
            Self::CrossK => "cross-K",
            Self::AttnMix => "attn-mix",
            Self::Total => "Total",
        }
    }

    /// Short identifier used in file names and CSV columns.
    pub fn key(self) -> &'static str {
        match self {
            Self::RgbBaseline => "rgb_baseline",
            Self::DepthBaseline => "depth_baseline",
            Self::Rgbd => "rgbd",
            Self::Pe3d => "pe3d",
            Self::CrossV => "cross_v",
            Self::CrossQ => "cross_q",
            Self::CrossK => "cross_k",
            Self::AttnMix => "attn_mix",
            Self::Total => "total",
        }
    }

    fn settings(self) -> (Branches, PeMode, SwapMode, FusionMode) {
        use Branches::*;
        match self {
            Self::RgbBaseline => (RgbOnly, PeMode::TwoD, SwapMode::None, FusionMode::Sum),
            Self::DepthBaseline => (DepthOnly, PeMode::TwoD, SwapMode::None, FusionMode::Sum),
            Self::Rgbd => (Dual, PeMode::TwoD, SwapMode::None, FusionMode::Sum),
            Self::Pe3d => (RgbOnly, PeMode::ThreeD, SwapMode::None, FusionMode::Sum),
            Self::CrossV => (Dual, PeMode::TwoD, SwapMode::CrossV, FusionMode::Sum),
            Self::CrossQ => (Dual, PeMode::TwoD, SwapMode::CrossQ, FusionMode::Sum),
            Self::CrossK => (Dual, PeMode::TwoD, SwapMode::CrossK, FusionMode::Sum),
            Self::AttnMix => (Dual, PeMode::TwoD, SwapMode::None, FusionMode::AttentionMix),
            Self::Total => (Dual, PeMode::ThreeD, SwapMode::CrossK, FusionMode::AttentionMix),
        }
    }

    /// `base` with this row's branch/encoding/attention/fusion settings.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (branches, pe_mode, swap_mode, fusion) = self.settings();
        ModelConfig {
            branches,
            pe_mode,
            swap_mode,
            fusion,
            ..base.clone()
        }
    }

    pub fn from_config(config: &ModelConfig) -> Option<TableRow> {
        let key = (config.branches, config.pe_mode, config.swap_mode, config.fusion);
        Self::ALL.into_iter().find(|r| r.settings() == key)
    }
}

impl FromStr for TableRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.key() == s || r.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown table row {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    ln1: Norm,
    attn: AttentionParams,
    ln2: Norm,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Stage {
    embed: Linear,
    blocks: Vec<Block>,
    out_norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Decoder {
    proj: Vec<Linear>,
    fuse: Linear,
    classify: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stages: Vec<Stage>,
    am: Option<AmParams>,
    decoder: Decoder,
}

/// Network inputs after disparity cleaning and encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// `[H, W, 3]` colour image in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H, W, 3]` replicated normalised disparity.
    pub depth: Tensor,
    /// Per stage `[n_s, C_s]` positional encodings (zeros for `none`).
    pub pe: Vec<Tensor>,
}

/// Per-stage outputs of the encoder, `[h_s, w_s, C_s]` each.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub color: Option<Vec<Var>>,
    pub depth: Option<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn linear_init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        w: store.add(format!("{name}.weight"), Tensor::randn(&[cin, cout], std, rng)),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
    }
}

fn norm_init(store: &mut ParamStore, name: &str, c: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
    }
}

/// `[H, W, 1]` or `[H, W]` disparity replicated to `[H, W, 3]`.
pub fn build_depth_input(disparity: &Tensor) -> Result<Tensor> {
    let (h, w) = match *disparity.shape() {
        [h, w] | [h, w, 1] => (h, w),
        ref s => {
            return Err(TensorError::Shape {
                op: "build_depth_input",
                detail: format!("expected [H, W, 1], got {s:?}"),
            }
            .into())
        }
    };
    let data = disparity
        .data()
        .iter()
        .flat_map(|&d| [d, d, d])
        .collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

impl SegModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = config.init_std;
        let mut stages = Vec::with_capacity(config.num_stages());
        for s in 0..config.num_stages() {
            let c = config.channels[s];
            let cin = if s == 0 {
                config.patch_size * config.patch_size * 3
            } else {
                4 * config.channels[s - 1]
            };
            // No norm after the projection: a flat depth patch is d·w, and
            // normalising it would erase d. Fan-in scaling keeps the content
            // on the same footing as the unit-amplitude encoding added to it.
            let embed_std = 1.0 / (cin as f64).sqrt();
            let embed = linear_init(&mut store, &format!("stage{s}.embed"), cin, c, embed_std, &mut rng);
            let mut blocks = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let p = format!("stage{s}.block{b}");
                let hidden = c * config.mlp_ratio;
                blocks.push(Block {
                    ln1: norm_init(&mut store, &format!("{p}.ln1"), c),
                    attn: AttentionParams::init(&mut store, &format!("{p}.attn"), c, config.heads[s], std, &mut rng)?,
                    ln2: norm_init(&mut store, &format!("{p}.ln2"), c),
                    mlp_in: linear_init(&mut store, &format!("{p}.mlp_in"), c, hidden, std, &mut rng),
                    mlp_out: linear_init(&mut store, &format!("{p}.mlp_out"), hidden, c, std, &mut rng),
                });
            }
            let out_norm = norm_init(&mut store, &format!("stage{s}.out_norm"), c);
            stages.push(Stage {
                embed,
                blocks,
                out_norm,
            });
        }
        let am = (config.fusion == FusionMode::AttentionMix)
            .then(|| AmParams::init(&mut store, "am", &config.channels, std, &mut rng));
        let d = config.decoder_width;
        let proj = config
            .channels
            .iter()
            .enumerate()
            .map(|(s, &c)| linear_init(&mut store, &format!("decoder.proj{s}"), c, d, std, &mut rng))
            .collect();
        let fuse = linear_init(&mut store, "decoder.fuse", d * config.num_stages(), d, std, &mut rng);
        // zero classifier: uniform logits at initialisation
        let classify = linear_init(&mut store, "decoder.classify", d, config.num_classes, 0.0, &mut rng);
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                stages,
                am,
                decoder: Decoder {
                    proj,
                    fuse,
                    classify,
                },
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter ids used by the (shared) encoder.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with("stage"))
            .collect()
    }

    /// Cleans and normalises disparity, builds the depth image and the
    /// per-stage positional encodings. `rgb` is `[H, W, 3]`, `disparity`
    /// raw `[H, W, 1]` with 0 marking invalid pixels.
    pub fn prepare(&self, rgb: &Tensor, disparity: &Tensor) -> Result<PreparedInput> {
        let side = self.config.image_side;
        if rgb.shape() != [side, side, 3] {
            return Err(Error::Domain(format!(
                "rgb shape {:?}, model expects [{side}, {side}, 3]",
                rgb.shape()
            )));
        }
        if disparity.numel() != side * side || disparity.shape()[..2] != [side, side] {
            return Err(Error::Domain(format!(
                "disparity shape {:?}, model expects [{side}, {side}, 1]",
                disparity.shape()
            )));
        }
        let norm = posenc::normalize_disparity(disparity.data(), side, side, self.config.max_disparity)?;
        let norm_t = Tensor::new(vec![side, side, 1], norm)?;
        let depth = build_depth_input(&norm_t)?;
        let pe = (0..self.config.num_stages())
            .map(|s| {
                let coords = TokenCoords::for_stage(side, side, self.config.stride(s), side as f64, norm_t.data())?;
                let scales = PeScales::new(self.config.channels[s], side as f64, self.config.depth_scale())?;
                Ok(posenc::encode_tokens(&coords, &scales, self.config.pe_mode))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedInput {
            rgb: rgb.clone(),
            depth,
            pe,
        })
    }

    fn block(&self, tape: &mut Tape, bound: &Bound, block: &Block, xs: &[Var]) -> Result<Vec<Var>> {
        let ln1 = xs
            .iter()
            .map(|&x| tape.layer_norm(x, bound[block.ln1.gamma], bound[block.ln1.beta], LN_EPS))
            .collect::<Result<Vec<_>, _>>()?;
        let attended = match ln1[..] {
            [x] => vec![attention::self_attention(tape, bound, &block.attn, x)?],
            [c, d] => {
                let config = CiaConfig {
                    swap_mode: self.config.swap_mode,
                };
                let (oc, od) = attention::cia(tape, bound, &block.attn, c, d, config)?;
                vec![oc, od]
            }
            _ => unreachable!("one or two branches"),
        };
        let mut out = Vec::with_capacity(xs.len());
        for (&x, a) in xs.iter().zip(attended) {
            let x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bound[block.ln2.gamma], bound[block.ln2.beta], LN_EPS)?;
            let h = tape.linear(h, bound[block.mlp_in.w], bound[block.mlp_in.b])?;
            let h = tape.gelu(h)?;
            let h = tape.linear(h, bound[block.mlp_out.w], bound[block.mlp_out.b])?;
            out.push(tape.add(x, h)?);
        }
        Ok(out)
    }

    /// Runs the shared encoder over one or two `[H, W, 3]` branch images in
    /// lock-step; returns per-branch, per-stage outputs `[h_s, w_s, C_s]`.
    pub fn encode_images(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: &[Var],
        pe: &[Tensor],
    ) -> Result<Vec<Vec<Var>>> {
        let cfg = &self.config;
        if images.is_empty() || images.len() > 2 {
            return Err(Error::Config(format!("{} branch inputs", images.len())));
        }
        if pe.len() != cfg.num_stages() {
            return Err(Error::Domain(format!("{} encodings for {} stages", pe.len(), cfg.num_stages())));
        }
        let side = cfg.image_side;
        let mut grids: Vec<Var> = images.to_vec();
        let mut outputs = vec![Vec::with_capacity(cfg.num_stages()); images.len()];
        for (s, stage) in self.layout.stages.iter().enumerate() {
            let merge = if s == 0 { cfg.patch_size } else { 2 };
            let g = side / cfg.stride(s);
            let c = cfg.channels[s];
            if pe[s].shape() != [g * g, c] {
                return Err(Error::Domain(format!(
                    "stage {s} encoding shape {:?}, expected [{}, {c}]",
                    pe[s].shape(),
                    g * g
                )));
            }
            let pe_var = (cfg.pe_mode != PeMode::None).then(|| tape.constant(pe[s].clone()));
            let mut xs = Vec::with_capacity(grids.len());
            for &grid in &grids {
                let patches = tape.patchify(grid, merge)?;
                let x = tape.linear(patches, bound[stage.embed.w], bound[stage.embed.b])?;
                xs.push(x);
            }
            for block in &stage.blocks {
                if let Some(p) = pe_var {
                    xs = xs.iter().map(|&x| tape.add(x, p)).collect::<Result<_, _>>()?;
                }
                xs = self.block(tape, bound, block, &xs)?;
            }
            grids.clear();
            for (b, &x) in xs.iter().enumerate() {
                let y = tape.layer_norm(x, bound[stage.out_norm.gamma], bound[stage.out_norm.beta], LN_EPS)?;
                let y = tape.reshape(y, &[g, g, c])?;
                outputs[b].push(y);
                grids.push(y);
            }
        }
        Ok(outputs)
    }

    /// Encoder plus fusion: one `[h_s, w_s, C_s]` feature map per stage.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, input: &PreparedInput) -> Result<Vec<Var>> {
        match self.config.branches {
            Branches::RgbOnly | Branches::DepthOnly => {
                let img = if self.config.branches == Branches::RgbOnly {
                    &input.rgb
                } else {
                    &input.depth
                };
                let img = tape.constant(img.clone());
                Ok(self.encode_images(tape, bound, &[img], &input.pe)?.remove(0))
            }
            Branches::Dual => {
                let c = tape.constant(input.rgb.clone());
                let d = tape.constant(input.depth.clone());
                let mut outs = self.encode_images(tape, bound, &[c, d], &input.pe)?;
                let depth = outs.pop().expect("two branches");
                let color = outs.pop().expect("two branches");
                self.fuse(tape, bound, &color, &depth)
            }
        }
    }

    /// Merges per-stage colour and depth outputs per the fusion mode.
    pub fn fuse(&self, tape: &mut Tape, bound: &Bound, color: &[Var], depth: &[Var]) -> Result<Vec<Var>> {
        color
            .iter()
            .zip(depth)
            .enumerate()
            .map(|(s, (&oc, &od))| match &self.layout.am {
                Some(am) => fusion::attention_mix(tape, bound, &am.stages[s], oc, od),
                None => Ok(tape.add(oc, od)?),
            })
            .collect()
    }

    /// All-MLP decoder: per-pixel logits `[H, W, K]` from stage features.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, feats: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let dec = &self.layout.decoder;
        let g0 = cfg.image_side / cfg.stride(0);
        let d = cfg.decoder_width;
        let mut maps = Vec::with_capacity(feats.len());
        for (s, (&f, proj)) in feats.iter().zip(&dec.proj).enumerate() {
            let g = cfg.image_side / cfg.stride(s);
            let x = tape.reshape(f, &[g * g, cfg.channels[s]])?;
            let x = tape.linear(x, bound[proj.w], bound[proj.b])?;
            let x = tape.reshape(x, &[g, g, d])?;
            maps.push(if s == 0 {
                x
            } else {
                tape.upsample(x, g0, g0, Resize::Bilinear)?
            });
        }
        let x = tape.concat(&maps, 2)?;
        let x = tape.reshape(x, &[g0 * g0, d * feats.len()])?;
        let x = tape.linear(x, bound[dec.fuse.w], bound[dec.fuse.b])?;
        let x = tape.gelu(x)?;
        let x = tape.linear(x, bound[dec.classify.w], bound[dec.classify.b])?;
        let x = tape.reshape(x, &[g0, g0, cfg.num_classes])?;
        let side = cfg.image_side;
        Ok(tape.upsample(x, side, side, Resize::Bilinear)?)
    }

    pub fn forward_prepared(&self, tape: &mut Tape, bound: &Bound, input: &PreparedInput) -> Result<Var> {
        let feats = self.encode(tape, bound, input)?;
        self.decode(tape, bound, &feats)
    }

    /// Per-pixel class logits `[H, W, num_classes]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, rgb: &Tensor, disparity: &Tensor) -> Result<Var> {
        check_finite_input(rgb)?;
        check_finite_input(disparity)?;
        let input = self.prepare(rgb, disparity)?;
        self.forward_prepared(tape, bound, &input)
    }

    /// Inference without gradient tracking.
    pub fn predict_logits(&self, input: &PreparedInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let y = self.forward_prepared(&mut tape, &bound, input)?;
        Ok(tape.value(y).clone())
    }
}

fn check_finite_input(t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: "forward" }.into())
    }
}

/// Arg-max class per pixel of `[H, W, K]` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
