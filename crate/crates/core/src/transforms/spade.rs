//! Spatially-adaptive denormalisation.
//!
//! `f_out = γ ⊗ BN(f_in) + β`, where `γ` and `β` are convolutions over a
//! shared basic block applied to `[BN(f_in), f_sem]`.

use super::layers::{BasicBlock, BatchNorm, Conv2d, LRELU_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Builder, Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct SpadeBlock {
    pub bn: BatchNorm,
    pub basic: BasicBlock,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl SpadeBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, sem_channels: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            bn: BatchNorm::new(&mut s, "bn", channels)?,
            basic: BasicBlock::new(&mut s, "basic", channels + sem_channels, hidden)?,
            // γ starts near one so the block is close to plain normalisation.
            gamma: Conv2d::with_init(&mut s, "gamma", hidden, channels, 3, 1, 0.1, 1.0)?,
            beta: Conv2d::with_init(&mut s, "beta", hidden, channels, 3, 1, 0.1, 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, f_in: Var, f_sem: Var) -> Result<Var> {
        let a = t.shape(f_in);
        let s = t.shape(f_sem);
        if a.len() != 4 || s.len() != 4 || a[0] != s[0] || a[2..] != s[2..] {
            return Err(Error::shape(
                "spade_block",
                format!("feature {a:?} vs semantic {s:?}"),
            ));
        }
        let f_bn = self.bn.forward(t, f_in)?;
        let merged = t.concat(&[f_bn, f_sem], 1)?;
        let h = self.basic.forward(t, merged)?;
        let gamma = self.gamma.forward(t, h)?;
        let beta = self.beta.forward(t, h)?;
        let scaled = t.mul(gamma, f_bn)?;
        t.add(scaled, beta)
    }
}

/// Two SPADE blocks, each followed by leaky ReLU and a 3×3 conv, with an
/// identity skip.
#[derive(Clone, Debug)]
pub struct SpadeResBlock {
    pub spade1: SpadeBlock,
    pub conv1: Conv2d,
    pub spade2: SpadeBlock,
    pub conv2: Conv2d,
}

impl SpadeResBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, sem_channels: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            spade1: SpadeBlock::new(&mut s, "spade1", channels, sem_channels, hidden)?,
            conv1: Conv2d::with_init(&mut s, "conv1", channels, channels, 3, 1, 2f32.sqrt(), 0.0)?,
            spade2: SpadeBlock::new(&mut s, "spade2", channels, sem_channels, hidden)?,
            conv2: Conv2d::with_init(&mut s, "conv2", channels, channels, 3, 1, 0.5, 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var, f_sem: Var) -> Result<Var> {
        let h = self.spade1.forward(t, x, f_sem)?;
        let h = t.leaky_relu(h, LRELU_SLOPE)?;
        let h = self.conv1.forward(t, h)?;
        let h = self.spade2.forward(t, h, f_sem)?;
        let h = t.leaky_relu(h, LRELU_SLOPE)?;
        let h = self.conv2.forward(t, h)?;
        t.add(x, h)
    }
}
