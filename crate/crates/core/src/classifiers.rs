//! The noisy-image guidance classifier and the four downstream recognition
//! families.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use confaug_nn::{
    Checkpoint, Conv2d, Embedding, Graph, GroupNorm, LayerNorm, Linear, ParamBuilder, ParamStore, Scalar, Tensor,
    Var,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_encoder, run_encoder, BackboneConfig, DownLevel};
use crate::blocks::TimeEmbedding;
use crate::model::{flatten_config, groups_for, unflatten_config, ModelError, Result};

fn no_dropout_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Softmax outcome for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub predicted_class: usize,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn prediction_from_logits(logits: &[f64]) -> Prediction {
    let probabilities = softmax(logits);
    let predicted_class = argmax(&probabilities);
    Prediction { predicted_class, confidence: probabilities[predicted_class], probabilities }
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let w = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(w).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Time-conditioned classifier on noisy images. Its encoder mirrors the
/// denoiser's downsampling path; the head is GN, SiLU, global pooling and a
/// zero-initialized linear layer.
#[derive(Clone, Debug)]
pub struct GuidanceClassifier<T: Scalar> {
    pub config: BackboneConfig,
    pub timesteps: usize,
    pub params: ParamStore<T>,
    time: TimeEmbedding,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    norm_out: GroupNorm,
    pub head: Linear,
}

impl<T: Scalar> GuidanceClassifier<T> {
    /// `config.class_count` is the number of logits.
    pub fn new(config: BackboneConfig, timesteps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if timesteps == 0 {
            return Err(ModelError::InvalidConfig("timesteps must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vb = ParamBuilder::new(&mut params, &mut rng);
        let time = TimeEmbedding::new(&mut vb.pp("time"), config.embedding_dim)?;
        let (conv_in, down, _) = build_encoder(&mut vb, &config, true)?;
        let ch = config.level_channels(config.levels() - 1);
        let norm_out = GroupNorm::new(&mut vb.pp("norm_out"), config.norm_groups, ch)?;
        let head = Linear::zeroed(&mut vb.pp("head"), ch, config.class_count)?;
        Ok(Self { config, timesteps, params, time, conv_in, down, norm_out, head })
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn check(&self, shape: &[usize], ts: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || ts.len() != shape[0] {
            return Err(ModelError::ShapeMismatch(format!(
                "guidance input {shape:?} with {} timesteps, expected [n, 1, {s}, {s}]",
                ts.len()
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.timesteps) {
            return Err(ModelError::TimestepOutOfRange { t, len: self.timesteps });
        }
        Ok(())
    }

    /// Logits `[n, K]` on graph `g`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ts: &[usize], rng: &mut dyn RngCore) -> Result<Var> {
        self.check(g.shape(x), ts)?;
        let ps = &self.params;
        let temb = self.time.forward(g, ps, ts)?;
        let cond = Some(g.silu(temb)?);
        let (h, _) = run_encoder(g, ps, &self.conv_in, &self.down, x, cond, rng)?;
        let h = self.norm_out.forward(g, ps, h)?;
        let h = g.silu(h)?;
        let h = g.global_avg_pool(h)?;
        Ok(self.head.forward(g, ps, h)?)
    }

    pub fn logits(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, ts, &mut no_dropout_rng())?;
        Ok(g.take_value(out))
    }

    /// ∇ₓ log softmax(f(x, t))[y] for every batch row, by reverse-mode
    /// differentiation.
    pub fn log_prob_grad(&self, x: &Tensor<T>, ts: &[usize], ys: &[usize]) -> Result<Tensor<T>> {
        if ys.len() != ts.len() {
            return Err(ModelError::ShapeMismatch(format!("{} labels for {} timesteps", ys.len(), ts.len())));
        }
        if let Some(&c) = ys.iter().find(|&&c| c >= self.class_count()) {
            return Err(ModelError::ClassOutOfRange { class: c, count: self.class_count() });
        }
        let mut g = Graph::inference();
        let xv = g.input_grad(x.clone());
        let logits = self.forward(&mut g, xv, ts, &mut no_dropout_rng())?;
        let lp = g.log_prob_sum(logits, ys)?;
        let mut grads = g.backward(lp)?;
        Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut cfg = BTreeMap::new();
        cfg.insert("model.kind".to_string(), "guidance".to_string());
        cfg.insert("model.timesteps".to_string(), self.timesteps.to_string());
        cfg.extend(flatten_config("backbone", &self.config));
        Checkpoint::from_store(cfg, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.config.get("model.kind").map(String::as_str) != Some("guidance") {
            return Err(ModelError::Checkpoint("not a guidance classifier checkpoint".into()));
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Residual,
    Dense,
    Plainconv,
    PatchTransformer,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Residual, Family::Dense, Family::Plainconv, Family::PatchTransformer];

    /// Name of the full-scale architecture the family stands in for.
    pub fn reference_architecture(self) -> &'static str {
        match self {
            Family::Residual => "ResNet50",
            Family::Dense => "DenseNet121",
            Family::Plainconv => "VGG16",
            Family::PatchTransformer => "ViT",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Residual => "residual",
            Family::Dense => "dense",
            Family::Plainconv => "plainconv",
            Family::PatchTransformer => "patch_transformer",
        })
    }
}

impl FromStr for Family {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthPreset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamModelSpec {
    pub family: Family,
    pub depth_preset: DepthPreset,
    pub class_count: usize,
    pub input_size: usize,
}

impl DownstreamModelSpec {
    pub fn desk(family: Family, class_count: usize) -> Self {
        Self { family, depth_preset: DepthPreset::Desk, class_count, input_size: 32 }
    }

    /// Stable identifier, e.g. `residual-desk`.
    pub fn id(&self) -> String {
        let p = match self.depth_preset {
            DepthPreset::Desk => "desk",
            DepthPreset::Paper => "paper",
        };
        format!("{}-{p}", self.family)
    }
}

#[derive(Clone, Debug)]
struct ConvGn {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvGn {
    fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut vb.pp("conv"), cin, cout, k, stride)?,
            norm: GroupNorm::new(&mut vb.pp("norm"), groups_for(cout, 8), cout)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, relu: bool) -> Result<Var> {
        let h = self.conv.forward(g, ps, x)?;
        let h = self.norm.forward(g, ps, h)?;
        Ok(if relu { g.relu(h)? } else { h })
    }
}

#[derive(Clone, Debug)]
enum ResUnit {
    Basic { c1: ConvGn, c2: ConvGn, short: Option<ConvGn> },
    Bottleneck { c1: ConvGn, c2: ConvGn, c3: ConvGn, short: Option<ConvGn> },
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: ConvGn,
    units: Vec<ResUnit>,
    width: usize,
}

impl ResNet {
    fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, preset: DepthPreset) -> Result<Self> {
        let (stem_w, widths, counts, bottleneck): (usize, &[usize], &[usize], bool) = match preset {
            DepthPreset::Desk => (16, &[16, 32, 64], &[1, 1, 1], false),
            DepthPreset::Paper => (64, &[64, 128, 256, 512], &[3, 4, 6, 3], true),
        };
        let stem = ConvGn::new(&mut vb.pp("stem"), 1, stem_w, 3, 1)?;
        let mut cin = stem_w;
        let mut units = Vec::new();
        for (s, (&w, &n)) in widths.iter().zip(counts).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let mut ub = vb.pp(format!("stage{s}.{b}"));
                let cout = if bottleneck { 4 * w } else { w };
                let short = if stride != 1 || cin != cout {
                    Some(ConvGn::new(&mut ub.pp("short"), cin, cout, 1, stride)?)
                } else {
                    None
                };
                units.push(if bottleneck {
                    ResUnit::Bottleneck {
                        c1: ConvGn::new(&mut ub.pp("c1"), cin, w, 1, 1)?,
                        c2: ConvGn::new(&mut ub.pp("c2"), w, w, 3, stride)?,
                        c3: ConvGn::new(&mut ub.pp("c3"), w, cout, 1, 1)?,
                        short,
                    }
                } else {
                    ResUnit::Basic {
                        c1: ConvGn::new(&mut ub.pp("c1"), cin, w, 3, stride)?,
                        c2: ConvGn::new(&mut ub.pp("c2"), w, w, 3, 1)?,
                        short,
                    }
                });
                cin = cout;
            }
        }
        Ok(Self { stem, units, width: cin })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, ps, x, true)?;
        for u in &self.units {
            let (body, short) = match u {
                ResUnit::Basic { c1, c2, short } => {
                    let b = c1.forward(g, ps, h, true)?;
                    (c2.forward(g, ps, b, false)?, short)
                }
                ResUnit::Bottleneck { c1, c2, c3, short } => {
                    let b = c1.forward(g, ps, h, true)?;
                    let b = c2.forward(g, ps, b, true)?;
                    (c3.forward(g, ps, b, false)?, short)
                }
            };
            let s = match short {
                Some(c) => c.forward(g, ps, h, false)?,
                None => h,
            };
            let sum = g.add(body, s)?;
            h = g.relu(sum)?;
        }
        Ok(g.global_avg_pool(h)?)
    }
}

#[derive(Clone, Debug)]
struct NormConv {
    norm: GroupNorm,
    conv: Conv2d,
}

impl NormConv {
    fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut vb.pp("norm"), groups_for(cin, 8), cin)?,
            conv: Conv2d::new(&mut vb.pp("conv"), cin, cout, k, 1)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, ps, x)?;
        let h = g.relu(h)?;
        Ok(self.conv.forward(g, ps, h)?)
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bottleneck: Option<NormConv>,
    conv: NormConv,
}

#[derive(Clone, Debug)]
struct DenseNet {
    stem: Conv2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<NormConv>,
    final_norm: GroupNorm,
    width: usize,
}

impl DenseNet {
    fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, preset: DepthPreset) -> Result<Self> {
        let (growth, counts, bottleneck): (usize, &[usize], bool) = match preset {
            DepthPreset::Desk => (8, &[3, 3, 3], false),
            DepthPreset::Paper => (32, &[6, 12, 24, 16], true),
        };
        let mut ch = 2 * growth;
        let stem = Conv2d::new(&mut vb.pp("stem"), 1, ch, 3, 1)?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in counts.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..n {
                let mut lb = vb.pp(format!("block{bi}.{li}"));
                let (bneck, cin) = if bottleneck {
                    (Some(NormConv::new(&mut lb.pp("bottleneck"), ch, 4 * growth, 1)?), 4 * growth)
                } else {
                    (None, ch)
                };
                layers.push(DenseLayer { bottleneck: bneck, conv: NormConv::new(&mut lb.pp("conv"), cin, growth, 3)? });
                ch += growth;
            }
            blocks.push(layers);
            if bi + 1 < counts.len() {
                let out = ch / 2;
                transitions.push(NormConv::new(&mut vb.pp(format!("transition{bi}")), ch, out, 1)?);
                ch = out;
            }
        }
        let final_norm = GroupNorm::new(&mut vb.pp("final_norm"), groups_for(ch, 8), ch)?;
        Ok(Self { stem, blocks, transitions, final_norm, width: ch })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, ps, x)?;
        for (bi, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                let mut y = h;
                if let Some(b) = &l.bottleneck {
                    y = b.forward(g, ps, y)?;
                }
                let y = l.conv.forward(g, ps, y)?;
                h = g.concat(&[h, y], 1)?;
            }
            if let Some(t) = self.transitions.get(bi) {
                let y = t.forward(g, ps, h)?;
                h = g.avg_pool2x(y)?;
            }
        }
        let h = self.final_norm.forward(g, ps, h)?;
        let h = g.relu(h)?;
        Ok(g.global_avg_pool(h)?)
    }
}

#[derive(Clone, Debug)]
enum VggItem {
    Conv(ConvGn),
    Pool,
}

#[derive(Clone, Debug)]
struct Vgg {
    items: Vec<VggItem>,
    fcs: Vec<Linear>,
    dropout: f64,
    width: usize,
}

impl Vgg {
    fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        preset: DepthPreset,
        input: usize,
    ) -> Result<Self> {
        // 0 marks a 2×2 max-pool
        let (layout, hidden, dropout): (&[usize], usize, f64) = match preset {
            DepthPreset::Desk => (&[16, 16, 0, 32, 32, 0, 64, 64, 0], 128, 0.2),
            DepthPreset::Paper => (
                &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0],
                4096,
                0.5,
            ),
        };
        let mut items = Vec::new();
        let mut cin = 1;
        let mut side = input;
        for (i, &c) in layout.iter().enumerate() {
            if c == 0 {
                items.push(VggItem::Pool);
                side /= 2;
            } else {
                items.push(VggItem::Conv(ConvGn::new(&mut vb.pp(format!("features.{i}")), cin, c, 3, 1)?));
                cin = c;
            }
        }
        if side == 0 {
            return Err(ModelError::InvalidConfig(format!("input size {input} too small for the plainconv preset")));
        }
        let flat = cin * side * side;
        let fcs = vec![
            Linear::new(&mut vb.pp("fc0"), flat, hidden, true)?,
            Linear::new(&mut vb.pp("fc1"), hidden, hidden, true)?,
        ];
        Ok(Self { items, fcs, dropout, width: hidden })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let mut h = x;
        for it in &self.items {
            h = match it {
                VggItem::Conv(c) => c.forward(g, ps, h, true)?,
                VggItem::Pool => g.max_pool2x(h)?,
            };
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).numel() / n.max(1);
        h = g.reshape(h, &[n, flat])?;
        for fc in &self.fcs {
            h = fc.forward(g, ps, h)?;
            h = g.relu(h)?;
            h = g.dropout(h, self.dropout, rng)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Vit {
    dim: usize,
    heads: usize,
    patch_embed: Conv2d,
    cls: Embedding,
    pos: confaug_nn::ParamId,
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
    tokens: usize,
}

impl Vit {
    fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        preset: DepthPreset,
        input: usize,
    ) -> Result<Self> {
        let (dim, depth, heads, mlp) = match preset {
            DepthPreset::Desk => (64, 4, 4, 128),
            DepthPreset::Paper => (768, 12, 12, 3072),
        };
        let patch = 4;
        if input % patch != 0 {
            return Err(ModelError::InvalidConfig(format!("input size {input} not divisible by patch {patch}")));
        }
        let tokens = (input / patch) * (input / patch) + 1;
        let patch_embed = Conv2d::with_padding(&mut vb.pp("patch_embed"), 1, dim, patch, patch, 0)?;
        let cls = Embedding::new(&mut vb.pp("cls_token"), 1, dim)?;
        let pos = vb.add("pos_embed", &[tokens, dim], confaug_nn::Init::Normal(0.02))?;
        let mut layers = Vec::new();
        for i in 0..depth {
            let mut lb = vb.pp(format!("layer{i}"));
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut lb.pp("ln1"), dim)?,
                qkv: Linear::new(&mut lb.pp("qkv"), dim, 3 * dim, true)?,
                proj: Linear::new(&mut lb.pp("proj"), dim, dim, true)?,
                ln2: LayerNorm::new(&mut lb.pp("ln2"), dim)?,
                fc1: Linear::new(&mut lb.pp("fc1"), dim, mlp, true)?,
                fc2: Linear::new(&mut lb.pp("fc2"), mlp, dim, true)?,
            });
        }
        let ln = LayerNorm::new(&mut vb.pp("ln"), dim)?;
        Ok(Self { dim, heads, patch_embed, cls, pos, layers, ln, tokens })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, qkv: Var, which: usize, n: usize) -> Result<Var> {
        let (l, d, h) = (self.tokens, self.dim, self.heads);
        let part = g.narrow(qkv, 2, which * d, d)?;
        let part = g.reshape(part, &[n, l, h, d / h])?;
        let part = g.permute(part, &[0, 2, 1, 3])?;
        Ok(g.reshape(part, &[n * h, l, d / h])?)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let (l, d, h) = (self.tokens, self.dim, self.heads);
        let p = self.patch_embed.forward(g, ps, x)?;
        let p = g.reshape(p, &[n, d, l - 1])?;
        let p = g.permute(p, &[0, 2, 1])?;
        let cls = self.cls.forward(g, ps, &vec![0; n])?;
        let cls = g.reshape(cls, &[n, 1, d])?;
        let tok = g.concat(&[cls, p], 1)?;
        let pos = g.param(ps, self.pos);
        let mut z = g.add_broadcast(tok, pos)?;
        let scale = T::of(1.0 / ((d / h) as f64).sqrt());
        for layer in &self.layers {
            let a = layer.ln1.forward(g, ps, z)?;
            let qkv = layer.qkv.forward(g, ps, a)?;
            let q = self.split_heads(g, qkv, 0, n)?;
            let k = self.split_heads(g, qkv, 1, n)?;
            let v = self.split_heads(g, qkv, 2, n)?;
            let s = g.bmm(q, k, false, true)?;
            let s = g.scale(s, scale)?;
            let w = g.softmax(s, 2)?;
            let o = g.bmm(w, v, false, false)?;
            let o = g.reshape(o, &[n, h, l, d / h])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[n, l, d])?;
            let o = layer.proj.forward(g, ps, o)?;
            z = g.add(z, o)?;
            let m = layer.ln2.forward(g, ps, z)?;
            let m = layer.fc1.forward(g, ps, m)?;
            let m = g.gelu(m)?;
            let m = layer.fc2.forward(g, ps, m)?;
            z = g.add(z, m)?;
        }
        let c = g.narrow(z, 1, 0, 1)?;
        let c = g.reshape(c, &[n, d])?;
        Ok(self.ln.forward(g, ps, c)?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Residual(ResNet),
    Dense(DenseNet),
    Plain(Vgg),
    Vit(Vit),
}

/// Layers whose activations can be read out.
pub const FEATURE_LAYERS: [&str; 2] = ["penultimate", "logits"];

/// A downstream recognition classifier.
#[derive(Clone, Debug)]
pub struct DownstreamModel<T: Scalar> {
    pub spec: DownstreamModelSpec,
    pub params: ParamStore<T>,
    body: Body,
    pub head: Linear,
}

impl<T: Scalar> DownstreamModel<T> {
    pub fn new(spec: DownstreamModelSpec, seed: u64) -> Result<Self> {
        if spec.class_count < 2 {
            return Err(ModelError::InvalidConfig("a classifier needs at least 2 classes".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vb = ParamBuilder::new(&mut params, &mut rng);
        let p = spec.depth_preset;
        let (body, width) = match spec.family {
            Family::Residual => {
                let b = ResNet::new(&mut vb.pp("body"), p)?;
                let w = b.width;
                (Body::Residual(b), w)
            }
            Family::Dense => {
                let b = DenseNet::new(&mut vb.pp("body"), p)?;
                let w = b.width;
                (Body::Dense(b), w)
            }
            Family::Plainconv => {
                let b = Vgg::new(&mut vb.pp("body"), p, spec.input_size)?;
                let w = b.width;
                (Body::Plain(b), w)
            }
            Family::PatchTransformer => {
                let b = Vit::new(&mut vb.pp("body"), p, spec.input_size)?;
                let w = b.dim;
                (Body::Vit(b), w)
            }
        };
        let head = Linear::new(&mut vb.pp("head"), width, spec.class_count, true)?;
        Ok(Self { spec, params, body, head })
    }

    pub fn id(&self) -> String {
        self.spec.id()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Token count of the patch transformer (patches plus class token).
    pub fn token_count(&self) -> Option<usize> {
        match &self.body {
            Body::Vit(v) => Some(v.tokens),
            _ => None,
        }
    }

    /// Width of a named feature layer.
    pub fn layer_width(&self, layer: &str) -> Result<usize> {
        match layer {
            "penultimate" => Ok(self.head.fan_in),
            "logits" => Ok(self.spec.class_count),
            other => Err(ModelError::UnknownLayer(other.to_string())),
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(ModelError::ShapeMismatch(format!("classifier input {shape:?}, expected [n, 1, {s}, {s}]")));
        }
        Ok(())
    }

    /// (penultimate features, logits) on graph `g`.
    pub fn forward_features(&self, g: &mut Graph<T>, x: Var, rng: &mut dyn RngCore) -> Result<(Var, Var)> {
        self.check(g.shape(x))?;
        let ps = &self.params;
        let feat = match &self.body {
            Body::Residual(b) => b.forward(g, ps, x)?,
            Body::Dense(b) => b.forward(g, ps, x)?,
            Body::Plain(b) => b.forward(g, ps, x, rng)?,
            Body::Vit(b) => b.forward(g, ps, x)?,
        };
        let logits = self.head.forward(g, ps, feat)?;
        Ok((feat, logits))
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        Ok(self.forward_features(g, x, rng)?.1)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.features(x, "logits")
    }

    /// Evaluation-mode activations of a named layer, `[n, width]`.
    pub fn features(&self, x: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        self.layer_width(layer)?;
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let (f, l) = self.forward_features(&mut g, xv, &mut no_dropout_rng())?;
        Ok(g.take_value(if layer == "penultimate" { f } else { l }))
    }

    /// Softmax predictions for a `[n, 1, S, S]` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<Prediction>> {
        Ok(rows_f64(&self.logits(x)?).iter().map(|r| prediction_from_logits(r)).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut cfg = BTreeMap::new();
        cfg.insert("model.kind".to_string(), "downstream".to_string());
        cfg.extend(flatten_config("spec", &self.spec));
        Checkpoint::from_store(cfg, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.config.get("model.kind").map(String::as_str) != Some("downstream") {
            return Err(ModelError::Checkpoint("not a downstream classifier checkpoint".into()));
        }
        let spec: DownstreamModelSpec = unflatten_config("spec", &ck.config)?;
        let mut m = Self::new(spec, 0)?;
        m.params.load_named(ck.tensors.iter().cloned())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Sets the output layer to zero, making every prediction uniform.
    pub fn zero_head(&mut self) {
        for id in [Some(self.head.w), self.head.b].into_iter().flatten() {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Model card text recorded next to a classifier checkpoint.
pub fn model_card(spec: &DownstreamModelSpec, seed: u64, manifest_sha256: &str, params: usize) -> String {
    format!(
        "family: {}\nstands_in_for: {}\npreset: {}\nclasses: {}\ninput_size: {}\nseed: {}\nparameters: {}\ntraining_manifest_sha256: {}\n",
        spec.family,
        spec.family.reference_architecture(),
        spec.id(),
        spec.class_count,
        spec.input_size,
        seed,
        params,
        manifest_sha256
    )
}
