//! Convolutional building blocks shared by the denoiser and the guidance
//! classifier.

use confaug_nn::{Conv2d, Graph, GroupNorm, Linear, ParamBuilder, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, RngCore};

use crate::model::{ModelError, Result};

/// `[sin(t·ω_0), …, sin(t·ω_{d/2-1}), cos(t·ω_0), …]` with
/// `ω_i = 10000^(-2i/d)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(ModelError::OddDimension(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = t as f64 * w;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

/// `[n, dim]` embedding rows for a batch of timesteps.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embedding(t, dim)?.into_iter().map(T::of));
    }
    Ok(Tensor::new(&[ts.len(), dim], data)?)
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self { fc1: Linear::new(&mut vb.pp("fc1"), channels, hidden, true)?, fc2: Linear::new(&mut vb.pp("fc2"), hidden, channels, true)? })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.fan_out
    }

    /// Per-channel gate values `[n, c]`, each in (0, 1).
    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.global_avg_pool(x)?;
        let s = self.fc1.forward(g, ps, s)?;
        let s = g.relu(s)?;
        let s = self.fc2.forward(g, ps, s)?;
        Ok(g.sigmoid(s)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.gate(g, ps, x)?;
        Ok(g.mul_nc(x, s)?)
    }
}

/// Residual block: GN-SiLU-conv, conditioning added per channel, GN-SiLU-
/// dropout-conv, SE gate, then the (projected) skip.
#[derive(Clone, Debug)]
pub struct SeResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub cond_proj: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub se: SeGate,
    pub skip: Option<Conv2d>,
    pub dropout: f64,
    pub out_channels: usize,
}

pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cond_dim: Option<usize>,
    pub groups: usize,
    pub se_reduction: usize,
    pub dropout: f64,
}

impl SeResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, spec: &ResBlockSpec) -> Result<Self> {
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        for c in [cin, cout] {
            if c % spec.groups != 0 {
                return Err(ModelError::InvalidConfig(format!("{c} channels not divisible by {} groups", spec.groups)));
            }
        }
        Ok(Self {
            norm1: GroupNorm::new(&mut vb.pp("norm1"), spec.groups, cin)?,
            conv1: Conv2d::new(&mut vb.pp("conv1"), cin, cout, 3, 1)?,
            cond_proj: spec.cond_dim.map(|d| Linear::new(&mut vb.pp("cond_proj"), d, cout, true)).transpose()?,
            norm2: GroupNorm::new(&mut vb.pp("norm2"), spec.groups, cout)?,
            conv2: Conv2d::new(&mut vb.pp("conv2"), cout, cout, 3, 1)?,
            se: SeGate::new(&mut vb.pp("se"), cout, spec.se_reduction)?,
            skip: if cin != cout { Some(Conv2d::new(&mut vb.pp("skip"), cin, cout, 1, 1)?) } else { None },
            dropout: spec.dropout,
            out_channels: cout,
        })
    }

    /// `cond` is the already activated conditioning vector `[n, cond_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, ps, h)?;
        match (&self.cond_proj, cond) {
            (Some(p), Some(c)) => {
                let c = p.forward(g, ps, c)?;
                h = g.add_nc(h, c)?;
            }
            (Some(_), None) => return Err(ModelError::ShapeMismatch("block expects a conditioning vector".into())),
            _ => {}
        }
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h)?;
        let h = g.dropout(h, self.dropout, rng)?;
        let h = self.conv2.forward(g, ps, h)?;
        let h = self.se.forward(g, ps, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

fn head_split<T: Scalar>(g: &mut Graph<T>, qkv: Var, which: usize, heads: usize) -> Result<Var> {
    let s = g.shape(qkv).to_vec();
    let (n, c3, hw) = (s[0], s[1], s[2] * s[3]);
    let c = c3 / 3;
    let part = g.narrow(qkv, 1, which * c, c)?;
    Ok(g.reshape(part, &[n * heads, c / heads, hw])?)
}

/// Efficient attention: keys softmax-normalized over positions, queries over
/// features, output `q·(kᵀv)` per head. Cost is linear in the number of
/// positions.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub out: Conv2d,
    pub heads: usize,
}

impl LinearAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        channels: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(&mut vb.pp("norm"), groups, channels)?,
            qkv: Conv2d::new(&mut vb.pp("qkv"), channels, 3 * channels, 1, 1)?,
            out: Conv2d::new(&mut vb.pp("out"), channels, channels, 1, 1)?,
            heads,
        })
    }

    /// Attention output before the output projection, `[n, c, h, w]`.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let h = self.norm.forward(g, ps, x)?;
        let qkv = self.qkv.forward(g, ps, h)?;
        let q = head_split(g, qkv, 0, self.heads)?;
        let k = head_split(g, qkv, 1, self.heads)?;
        let v = head_split(g, qkv, 2, self.heads)?;
        let d = shape[1] / self.heads;
        let q = g.softmax(q, 1)?;
        let q = g.scale(q, T::of(1.0 / (d as f64).sqrt()))?;
        let k = g.softmax(k, 2)?;
        // context[b, dk, dv] = Σ_p k[b, dk, p] v[b, dv, p]
        let ctx = g.bmm(k, v, false, true)?;
        // out[b, dv, p] = Σ_dk ctx[b, dk, dv] q[b, dk, p]
        let o = g.bmm(ctx, q, true, false)?;
        Ok(g.reshape(o, &shape)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attend(g, ps, x)?;
        let o = self.out.forward(g, ps, a)?;
        Ok(g.add(x, o)?)
    }
}

/// Full softmax self-attention over flattened positions.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub out: Conv2d,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        channels: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(&mut vb.pp("norm"), groups, channels)?,
            qkv: Conv2d::new(&mut vb.pp("qkv"), channels, 3 * channels, 1, 1)?,
            out: Conv2d::new(&mut vb.pp("out"), channels, channels, 1, 1)?,
            heads,
        })
    }

    /// Returns the residual output and the attention weights
    /// `[n·heads, positions, positions]` (rows sum to 1).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let h = self.norm.forward(g, ps, x)?;
        let qkv = self.qkv.forward(g, ps, h)?;
        let q = head_split(g, qkv, 0, self.heads)?;
        let k = head_split(g, qkv, 1, self.heads)?;
        let v = head_split(g, qkv, 2, self.heads)?;
        let d = shape[1] / self.heads;
        // scores[b, i, j] = Σ_d q[b, d, i] k[b, d, j]
        let scores = g.bmm(q, k, true, false)?;
        let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
        let w = g.softmax(scores, 2)?;
        // out[b, d, i] = Σ_j v[b, d, j] w[b, i, j]
        let o = g.bmm(v, w, false, true)?;
        let o = g.reshape(o, &shape)?;
        let o = self.out.forward(g, ps, o)?;
        Ok((g.add(x, o)?, w))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, ps, x)?.0)
    }
}

/// Nearest-neighbour 2× upsampling followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(vb, channels, channels, 3, 1)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let u = g.upsample2x(x)?;
        Ok(self.conv.forward(g, ps, u)?)
    }
}

/// Stride-2 3×3 convolution.
pub fn downsample<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, channels: usize) -> Result<Conv2d> {
    Ok(Conv2d::new(vb, channels, channels, 3, 2)?)
}

/// Two-layer MLP on the sinusoidal timestep features.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(ModelError::OddDimension(dim));
        }
        Ok(Self { fc1: Linear::new(&mut vb.pp("fc1"), dim, dim, true)?, fc2: Linear::new(&mut vb.pp("fc2"), dim, dim, true)?, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ts: &[usize]) -> Result<Var> {
        let f = g.input(timestep_features(ts, self.dim)?);
        let h = self.fc1.forward(g, ps, f)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, ps, h).map_err(Into::into)
    }
}
