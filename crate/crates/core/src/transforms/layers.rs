//! Reusable layers. Structs hold parameter ids; values live in a
//! [`ParamStore`](crate::tensor::ParamStore).

use crate::error::Result;
use crate::tensor::{BnStats, Builder, Init, PadMode, Scalar, Tape, Var};

/// Negative slope of every leaky ReLU in the networks.
pub const LRELU_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: crate::tensor::ParamId,
    pub bias: crate::tensor::ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(b, name, cin, cout, kernel, stride, 1.0, 0.0)
    }

    /// `gain` scales the uniform weight bound; `bias` is the constant bias.
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        b: &mut Builder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f32,
        bias: f32,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let init = if gain == 0.0 {
            Init::Zeros
        } else {
            Init::Uniform {
                fan_in: cin * kernel * kernel,
                gain,
            }
        };
        let weight = s.param("weight", &[cout, cin, kernel, kernel], init)?;
        let bias = s.param("bias", &[cout], Init::Const(bias))?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            pad_mode: PadMode::Replicate,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.weight)?;
        let b = t.param(self.bias)?;
        t.conv2d(x, w, Some(b), self.stride, self.kernel / 2, self.pad_mode)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: crate::tensor::ParamId,
    pub bias: crate::tensor::ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.param("weight", &[cout, cin], Init::Uniform { fan_in: cin, gain: 1.0 })?;
        let bias = s.param("bias", &[cout], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.weight)?;
        let b = t.param(self.bias)?;
        t.linear(x, w, Some(b))
    }
}

/// Affine-free batch norm with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub stats: BnStats,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let mean = s.buffer("running_mean", &[channels], 0.0)?;
        let var = s.buffer("running_var", &[channels], 1.0)?;
        Ok(Self {
            stats: BnStats { mean, var },
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        t.batch_norm(x, Some(self.stats), BN_EPS)
    }
}

/// 3×3 conv followed by leaky ReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv: Conv2d,
}

impl BasicBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::with_init(b, name, cin, cout, 3, 1, 2f32.sqrt(), 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(t, x)?;
        t.leaky_relu(y, LRELU_SLOPE)
    }
}

/// conv → leaky ReLU → conv, plus identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            conv1: Conv2d::with_init(&mut s, "conv1", channels, channels, 3, 1, 2f32.sqrt(), 0.0)?,
            conv2: Conv2d::with_init(&mut s, "conv2", channels, channels, 3, 1, 0.5, 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(t, x)?;
        let h = t.leaky_relu(h, LRELU_SLOPE)?;
        let h = self.conv2.forward(t, h)?;
        t.add(x, h)
    }
}
