//! Parameterized building blocks. Each layer only stores parameter ids and
//! static configuration; values live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(vb, fan_in, fan_out, bias, Init::Uniform(bound))
    }

    /// Weights and bias start at zero, so the layer initially outputs zeros.
    pub fn zeroed<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Self::with_init(vb, fan_in, fan_out, true, Init::Zeros)
    }

    fn with_init<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = vb.add("weight", &[fan_out, fan_in], init)?;
        let b = if bias {
            let binit = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::Uniform(1.0 / (fan_in as f64).sqrt()),
            };
            Some(vb.add("bias", &[fan_out], binit)?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding for odd sizes at stride 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::build(vb, cin, cout, kernel, stride, kernel / 2, false)
    }

    pub fn with_padding<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::build(vb, cin, cout, kernel, stride, pad, false)
    }

    pub fn zeroed<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::build(vb, cin, cout, kernel, 1, kernel / 2, true)
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let init = if zero { Init::Zeros } else { Init::Uniform(bound) };
        let w = vb.add("weight", &[cout, cin, kernel, kernel], init)?;
        let b = vb.add("bias", &[cout], init)?;
        Ok(Self { w, b: Some(b), cin, cout, kernel, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        groups: usize,
        channels: usize,
    ) -> Result<Self> {
        let gamma = vb.add("weight", &[channels], Init::Ones)?;
        let beta = vb.add("bias", &[channels], Init::Zeros)?;
        Ok(Self { gamma, beta, groups })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vb: &mut ParamBuilder<'_, T, R>, width: usize) -> Result<Self> {
        let gamma = vb.add("weight", &[width], Init::Ones)?;
        let beta = vb.add("bias", &[width], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vb: &mut ParamBuilder<'_, T, R>,
        count: usize,
        width: usize,
    ) -> Result<Self> {
        let table = vb.add("weight", &[count, width], Init::Normal(1.0))?;
        Ok(Self { table, count, width })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(ps, self.table);
        g.embedding(table, ids)
    }
}
