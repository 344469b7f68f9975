use super::layers::{Conv2d, LRELU_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Builder, Scalar, Tape, Var};

/// Maps a one-hot class raster to a feature map at a coarser resolution:
/// block-average the one-hot planes, then two 3×3 conv + leaky ReLU layers.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub classes: usize,
    pub channels: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl SemanticEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, classes: usize, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            classes,
            channels,
            conv1: Conv2d::with_init(&mut s, "conv1", classes, channels, 3, 1, 2f32.sqrt(), 0.0)?,
            conv2: Conv2d::with_init(&mut s, "conv2", channels, channels, 3, 1, 2f32.sqrt(), 0.0)?,
        })
    }

    /// `one_hot` is `N × classes × H × W`; output is
    /// `N × channels × target_h × target_w`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, one_hot: Var, target_hw: (usize, usize)) -> Result<Var> {
        let (_, c, h, w) = t.value(one_hot).dims4()?;
        if c != self.classes {
            return Err(Error::shape(
                "semantic_encode",
                format!("{c} class planes, encoder expects {}", self.classes),
            ));
        }
        let (th, tw) = target_hw;
        if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 || h / th != w / tw {
            return Err(Error::shape(
                "semantic_encode",
                format!("map {h}x{w} is not a uniform integer multiple of {th}x{tw}"),
            ));
        }
        let x = t.avg_downsample(one_hot, h / th)?;
        let x = self.conv1.forward(t, x)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        let x = self.conv2.forward(t, x)?;
        t.leaky_relu(x, LRELU_SLOPE)
    }
}
