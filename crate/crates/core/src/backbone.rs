//! The SE-ResNet U-Net noise predictor ε_θ(x_t, t, y).

use std::collections::BTreeMap;
use std::path::Path;

use confaug_nn::{Checkpoint, Conv2d, Embedding, Graph, GroupNorm, ParamBuilder, ParamStore, Scalar, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    downsample, LinearAttention, MultiHeadAttention, ResBlockSpec, SeResBlock, TimeEmbedding, Upsample,
};
use crate::model::{flatten_config, unflatten_config, ModelError, Result};

pub const LINEAR_ATTENTION_VARIANT: &str = "efficient-softmax-qk";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub embedding_dim: usize,
    pub se_reduction: usize,
    pub attention_heads: usize,
    pub class_count: usize,
    pub dropout: f64,
    pub norm_groups: usize,
    /// Levels (0 = full resolution) that get linear attention after each
    /// residual block.
    pub linear_attention_levels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_level: 2,
            embedding_dim: 256,
            se_reduction: 16,
            attention_heads: 4,
            class_count: 5,
            dropout: 0.1,
            norm_groups: 8,
            linear_attention_levels: vec![1, 2],
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.levels() == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        if self.image_size == 0 || self.image_size % (1 << (self.levels() - 1)) != 0 {
            return bad(format!("image size {} not divisible by 2^{}", self.image_size, self.levels() - 1));
        }
        if self.embedding_dim < 2 || self.embedding_dim % 2 != 0 {
            return Err(ModelError::OddDimension(self.embedding_dim));
        }
        if self.se_reduction == 0 || self.base_channels % self.se_reduction != 0 {
            return bad(format!("se_reduction {} must divide base_channels {}", self.se_reduction, self.base_channels));
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be at least 1".into());
        }
        if self.class_count == 0 {
            return bad("class_count must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return bad(format!("{c} channels not divisible by {} groups", self.norm_groups));
            }
            if self.attention_heads == 0 || c % self.attention_heads != 0 {
                return bad(format!("{c} channels not divisible by {} heads", self.attention_heads));
            }
        }
        if let Some(l) = self.linear_attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("linear attention level {l} does not exist"));
        }
        Ok(())
    }

    pub(crate) fn block_spec(&self, cin: usize, cout: usize, cond: bool) -> ResBlockSpec {
        ResBlockSpec {
            in_channels: cin,
            out_channels: cout,
            cond_dim: cond.then_some(self.embedding_dim),
            groups: self.norm_groups,
            se_reduction: self.se_reduction,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Stage {
    pub block: SeResBlock,
    pub attn: Option<LinearAttention>,
}

impl Stage {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let h = self.block.forward(g, ps, x, cond, rng)?;
        match &self.attn {
            Some(a) => a.forward(g, ps, h),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DownLevel {
    pub stages: Vec<Stage>,
    pub down: Option<Conv2d>,
}

/// Encoder half shared with the guidance classifier. Returns the stage
/// builder outputs along with each skip's channel count.
pub(crate) fn build_encoder<T: Scalar, R: rand::Rng + ?Sized>(
    vb: &mut ParamBuilder<'_, T, R>,
    cfg: &BackboneConfig,
    cond: bool,
) -> Result<(Conv2d, Vec<DownLevel>, Vec<usize>)> {
    let conv_in = Conv2d::new(&mut vb.pp("conv_in"), 1, cfg.base_channels, 3, 1)?;
    let mut skips = vec![cfg.base_channels];
    let mut ch = cfg.base_channels;
    let mut levels = Vec::new();
    for l in 0..cfg.levels() {
        let out = cfg.level_channels(l);
        let mut stages = Vec::new();
        for b in 0..cfg.blocks_per_level {
            let mut sb = vb.pp(format!("down.{l}.{b}"));
            let block = SeResBlock::new(&mut sb.pp("block"), &cfg.block_spec(ch, out, cond))?;
            let attn = if cfg.linear_attention_levels.contains(&l) {
                Some(LinearAttention::new(&mut sb.pp("attn"), out, cfg.attention_heads, cfg.norm_groups)?)
            } else {
                None
            };
            stages.push(Stage { block, attn });
            ch = out;
            skips.push(ch);
        }
        let down = if l + 1 < cfg.levels() {
            skips.push(ch);
            Some(downsample(&mut vb.pp(format!("down.{l}.downsample")), ch)?)
        } else {
            None
        };
        levels.push(DownLevel { stages, down });
    }
    Ok((conv_in, levels, skips))
}

pub(crate) fn run_encoder<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    conv_in: &Conv2d,
    levels: &[DownLevel],
    x: Var,
    cond: Option<Var>,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<Var>)> {
    let mut h = conv_in.forward(g, ps, x)?;
    let mut hs = vec![h];
    for level in levels {
        for stage in &level.stages {
            h = stage.forward(g, ps, h, cond, rng)?;
            hs.push(h);
        }
        if let Some(d) = &level.down {
            h = d.forward(g, ps, h)?;
            hs.push(h);
        }
    }
    Ok((h, hs))
}

#[derive(Clone, Debug)]
struct UpLevel {
    stages: Vec<Stage>,
    up: Option<Upsample>,
}

#[derive(Clone, Debug)]
struct UNet {
    time: TimeEmbedding,
    class_emb: Embedding,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid1: SeResBlock,
    mid_attn: MultiHeadAttention,
    mid2: SeResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Denoiser network plus its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Scalar> {
    pub config: BackboneConfig,
    /// Number of diffusion timesteps the network accepts.
    pub timesteps: usize,
    pub params: ParamStore<T>,
    net: UNet,
}

/// Intermediate values exposed for inspection.
pub struct DenoiserTrace {
    pub output: Var,
    /// Bottleneck attention weights `[n·heads, positions, positions]`.
    pub bottleneck_attention: Var,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: BackboneConfig, timesteps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if timesteps == 0 {
            return Err(ModelError::InvalidConfig("timesteps must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut vb = ParamBuilder::new(&mut params, &mut rng);
            let cfg = &config;
            let time = TimeEmbedding::new(&mut vb.pp("time"), cfg.embedding_dim)?;
            let class_emb = Embedding::new(&mut vb.pp("class_emb"), cfg.class_count, cfg.embedding_dim)?;
            let (conv_in, down, mut skips) = build_encoder(&mut vb, cfg, true)?;
            let mid_ch = cfg.level_channels(cfg.levels() - 1);
            let mid1 = SeResBlock::new(&mut vb.pp("mid.block1"), &cfg.block_spec(mid_ch, mid_ch, true))?;
            let mid_attn = MultiHeadAttention::new(&mut vb.pp("mid.attn"), mid_ch, cfg.attention_heads, cfg.norm_groups)?;
            let mid2 = SeResBlock::new(&mut vb.pp("mid.block2"), &cfg.block_spec(mid_ch, mid_ch, true))?;
            let mut ch = mid_ch;
            let mut up = Vec::new();
            for l in (0..cfg.levels()).rev() {
                let out = cfg.level_channels(l);
                let mut stages = Vec::new();
                for b in 0..=cfg.blocks_per_level {
                    let skip = skips.pop().expect("one skip per decoder stage");
                    let mut sb = vb.pp(format!("up.{l}.{b}"));
                    let block = SeResBlock::new(&mut sb.pp("block"), &cfg.block_spec(ch + skip, out, true))?;
                    let attn = if cfg.linear_attention_levels.contains(&l) {
                        Some(LinearAttention::new(&mut sb.pp("attn"), out, cfg.attention_heads, cfg.norm_groups)?)
                    } else {
                        None
                    };
                    stages.push(Stage { block, attn });
                    ch = out;
                }
                let upsample =
                    if l > 0 { Some(Upsample::new(&mut vb.pp(format!("up.{l}.upsample")), ch)?) } else { None };
                up.push(UpLevel { stages, up: upsample });
            }
            debug_assert!(skips.is_empty());
            let norm_out = GroupNorm::new(&mut vb.pp("norm_out"), cfg.norm_groups, ch)?;
            let conv_out = Conv2d::zeroed(&mut vb.pp("conv_out"), ch, 1, 3)?;
            UNet { time, class_emb, conv_in, down, mid1, mid_attn, mid2, up, norm_out, conv_out }
        };
        Ok(Self { config, timesteps, params, net })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, shape: &[usize], ts: &[usize], ys: &[Option<usize>]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(ModelError::ShapeMismatch(format!("denoiser input {shape:?}, expected [n, 1, {s}, {s}]")));
        }
        if ts.len() != shape[0] || ys.len() != shape[0] {
            return Err(ModelError::ShapeMismatch(format!(
                "batch of {} with {} timesteps and {} labels",
                shape[0],
                ts.len(),
                ys.len()
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.timesteps) {
            return Err(ModelError::TimestepOutOfRange { t, len: self.timesteps });
        }
        if let Some(&c) = ys.iter().flatten().find(|&&c| c >= self.config.class_count) {
            return Err(ModelError::ClassOutOfRange { class: c, count: self.config.class_count });
        }
        Ok(())
    }

    /// Conditioning vector: projected time embedding plus the class
    /// embedding (zero for unconditional rows).
    fn conditioning(&self, g: &mut Graph<T>, ts: &[usize], ys: &[Option<usize>]) -> Result<Var> {
        let temb = self.net.time.forward(g, &self.params, ts)?;
        if ys.iter().all(Option::is_none) {
            return Ok(temb);
        }
        let ids: Vec<usize> = ys.iter().map(|y| y.unwrap_or(0)).collect();
        let mut cemb = self.net.class_emb.forward(g, &self.params, &ids)?;
        if ys.iter().any(Option::is_none) {
            let d = self.config.embedding_dim;
            let mask: Vec<T> =
                ys.iter().flat_map(|y| std::iter::repeat_n(if y.is_some() { T::one() } else { T::zero() }, d)).collect();
            let mask = g.input(Tensor::new(&[ys.len(), d], mask)?);
            cemb = g.mul(cemb, mask)?;
        }
        Ok(g.add(temb, cemb)?)
    }

    /// Full forward pass on graph `g`, also returning the bottleneck
    /// attention weights. Dropout is active only on training graphs.
    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ts: &[usize],
        ys: &[Option<usize>],
        rng: &mut dyn RngCore,
    ) -> Result<DenoiserTrace> {
        self.check_inputs(g.shape(x), ts, ys)?;
        let ps = &self.params;
        let n = &self.net;
        let emb = self.conditioning(g, ts, ys)?;
        let cond = Some(g.silu(emb)?);
        let (mut h, mut hs) = run_encoder(g, ps, &n.conv_in, &n.down, x, cond, rng)?;
        h = n.mid1.forward(g, ps, h, cond, rng)?;
        let (a, weights) = n.mid_attn.forward_with_weights(g, ps, h)?;
        h = n.mid2.forward(g, ps, a, cond, rng)?;
        for level in &n.up {
            for stage in &level.stages {
                let skip = hs.pop().expect("skip stack matches decoder");
                let cat = g.concat(&[h, skip], 1)?;
                h = stage.forward(g, ps, cat, cond, rng)?;
            }
            if let Some(u) = &level.up {
                h = u.forward(g, ps, h)?;
            }
        }
        let h = n.norm_out.forward(g, ps, h)?;
        let h = g.silu(h)?;
        let output = n.conv_out.forward(g, ps, h)?;
        Ok(DenoiserTrace { output, bottleneck_attention: weights })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ts: &[usize],
        ys: &[Option<usize>],
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, x, ts, ys, rng)?.output)
    }

    /// Evaluation-mode noise prediction for a `[n, 1, S, S]` batch.
    pub fn predict(&self, x: &Tensor<T>, ts: &[usize], ys: &[Option<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, ts, ys, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.take_value(out))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut cfg = BTreeMap::new();
        cfg.insert("model.kind".to_string(), "denoiser".to_string());
        cfg.insert("model.timesteps".to_string(), self.timesteps.to_string());
        cfg.insert("model.linear_attention_variant".to_string(), LINEAR_ATTENTION_VARIANT.to_string());
        cfg.extend(flatten_config("backbone", &self.config));
        Checkpoint::from_store(cfg, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.config.get("model.kind").map(String::as_str) != Some("denoiser") {
            return Err(ModelError::Checkpoint("not a denoiser checkpoint".into()));
        }
        let config: BackboneConfig = unflatten_config("backbone", &ck.config)?;
        let timesteps = ck
            .config_value("model.timesteps")?
            .parse()
            .map_err(|_| ModelError::Checkpoint("bad model.timesteps".into()))?;
        let mut m = Self::new(config, timesteps, 0)?;
        m.params.load_named(ck.tensors.iter().cloned())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            embedding_dim: 16,
            se_reduction: 4,
            attention_heads: 2,
            class_count: 3,
            dropout: 0.0,
            norm_groups: 4,
            linear_attention_levels: vec![1],
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let odd = BackboneConfig { embedding_dim: 15, ..tiny() };
        assert!(matches!(odd.validate(), Err(ModelError::OddDimension(15))));
        let indivisible = BackboneConfig { image_size: 6, channel_multipliers: vec![1, 2, 4], ..tiny() };
        assert!(indivisible.validate().is_err());
        let se = BackboneConfig { se_reduction: 3, ..tiny() };
        assert!(se.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = Denoiser::<f32>::new(tiny(), 20, 3).unwrap();
        let mut bytes = Vec::new();
        d.to_checkpoint().write_to(&mut bytes).unwrap();
        let back = Denoiser::<f32>::from_checkpoint(&Checkpoint::read_from(&bytes[..]).unwrap()).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
        let a = d.predict(&x, &[3, 7], &[Some(0), None]).unwrap();
        let b = back.predict(&x, &[3, 7], &[Some(0), None]).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.config, d.config);
    }

    #[test]
    fn input_validation() {
        let d = Denoiser::<f32>::new(tiny(), 20, 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(d.predict(&x, &[20], &[None]), Err(ModelError::TimestepOutOfRange { t: 20, len: 20 })));
        assert!(matches!(d.predict(&x, &[0], &[Some(3)]), Err(ModelError::ClassOutOfRange { class: 3, count: 3 })));
        assert!(matches!(d.predict(&Tensor::zeros(&[1, 1, 4, 4]), &[0], &[None]), Err(ModelError::ShapeMismatch(_))));
    }
}
