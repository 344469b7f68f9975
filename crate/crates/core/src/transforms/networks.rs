use super::layers::{Conv2d, ResBlock, LRELU_SLOPE};
use super::spade::SpadeResBlock;
use crate::error::{Error, Result};
use crate::tensor::{Builder, Scalar, Tape, Var};

/// Channel widths and depth of the latent transforms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformConfig {
    /// Intermediate feature channels.
    pub n: usize,
    /// Channels of the compact representation `y`.
    pub m: usize,
    pub latent_channels: usize,
    /// Number of ×2 down/up steps in the analysis/synthesis pair.
    pub scales: usize,
    pub map_classes: usize,
    /// Width of the semantic features and SPADE hidden convs.
    pub spade_hidden: usize,
    /// `false` replaces every SPADE residual block with a plain one and
    /// drops the semantic encoder.
    pub use_map: bool,
}

impl TransformConfig {
    pub fn full() -> Self {
        Self {
            n: 128,
            m: 64,
            latent_channels: 4,
            scales: 2,
            map_classes: 4,
            spade_hidden: 128,
            use_map: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            n: 32,
            m: 16,
            latent_channels: 4,
            scales: 2,
            map_classes: 4,
            spade_hidden: 16,
            use_map: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.latent_channels == 0 || self.scales == 0 {
            return Err(Error::Config("N, M, latent_channels and scales must be >= 1".into()));
        }
        if self.m > self.n {
            return Err(Error::Config(format!("M ({}) must not exceed N ({})", self.m, self.n)));
        }
        if self.m < 2 {
            return Err(Error::Config("M must be at least 2 for the hyperprior".into()));
        }
        if self.use_map && (self.map_classes == 0 || self.spade_hidden == 0) {
            return Err(Error::Config("map-conditioned transforms need classes and hidden width".into()));
        }
        Ok(())
    }

    /// Channels of the hyper latent `h`.
    pub fn hyper_channels(&self) -> usize {
        self.m / 2
    }

    /// Total spatial reduction from `z` to `y`.
    pub fn reduction(&self) -> usize {
        1 << self.scales
    }
}

/// Residual block at one scale; plain when the map is not used.
#[derive(Clone, Debug)]
pub enum TransformBlock {
    Spade(SpadeResBlock),
    Plain(ResBlock),
}

impl TransformBlock {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &TransformConfig) -> Result<Self> {
        Ok(if cfg.use_map {
            Self::Spade(SpadeResBlock::new(b, name, cfg.n, cfg.spade_hidden, cfg.spade_hidden)?)
        } else {
            Self::Plain(ResBlock::new(b, name, cfg.n)?)
        })
    }

    fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var, sem: Option<Var>) -> Result<Var> {
        match (self, sem) {
            (Self::Spade(block), Some(sem)) => block.forward(t, x, sem),
            (Self::Spade(_), None) => Err(Error::Config("SPADE block requires semantic features".into())),
            (Self::Plain(block), _) => block.forward(t, x),
        }
    }
}

/// Semantic features pooled to the resolution of `x`.
fn sem_at<T: Scalar>(t: &mut Tape<'_, T>, sem: Option<Var>, x: Var) -> Result<Option<Var>> {
    let Some(sem) = sem else { return Ok(None) };
    let full = t.shape(sem)[2];
    let here = t.shape(x)[2];
    if here == 0 || full % here != 0 {
        return Err(Error::shape("semantic pooling", format!("{full} -> {here}")));
    }
    Ok(Some(t.avg_downsample(sem, full / here)?))
}

fn check_divisible<T: Scalar>(t: &Tape<'_, T>, x: Var, op: &'static str, channels: usize, factor: usize) -> Result<()> {
    let (_, c, h, w) = t.value(x).dims4()?;
    if c != channels {
        return Err(Error::shape(op, format!("expected {channels} channels, got {c}")));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(op, format!("{h}x{w} not divisible by {factor}")));
    }
    Ok(())
}

/// `z → y`: input conv, then per scale a residual block and a 5×5 stride-2
/// conv.
#[derive(Clone, Debug)]
pub struct Analysis {
    cfg: TransformConfig,
    conv_in: Conv2d,
    blocks: Vec<TransformBlock>,
    downs: Vec<Conv2d>,
}

impl Analysis {
    pub fn new(b: &mut Builder<'_>, cfg: &TransformConfig) -> Result<Self> {
        let conv_in = Conv2d::new(b, "conv_in", cfg.latent_channels, cfg.n, 3, 1)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for s in 0..cfg.scales {
            blocks.push(TransformBlock::new(b, &format!("block{s}"), cfg)?);
            let out = if s + 1 == cfg.scales { cfg.m } else { cfg.n };
            downs.push(Conv2d::new(b, &format!("down{s}"), cfg.n, out, 5, 2)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            blocks,
            downs,
        })
    }

    /// `sem` holds semantic features at `z`'s resolution.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, z: Var, sem: Option<Var>) -> Result<Var> {
        check_divisible(t, z, "analysis", self.cfg.latent_channels, self.cfg.reduction())?;
        let mut x = self.conv_in.forward(t, z)?;
        for (block, down) in self.blocks.iter().zip(&self.downs) {
            let s = sem_at(t, sem, x)?;
            x = block.forward(t, x, s)?;
            x = down.forward(t, x)?;
        }
        Ok(x)
    }
}

/// `ŷ → ẑ`: per scale a 3×3 conv to `4N` plus pixel shuffle, then a residual
/// block; a final 3×3 conv back to the latent channels.
#[derive(Clone, Debug)]
pub struct Synthesis {
    cfg: TransformConfig,
    ups: Vec<Conv2d>,
    blocks: Vec<TransformBlock>,
    conv_out: Conv2d,
}

impl Synthesis {
    pub fn new(b: &mut Builder<'_>, cfg: &TransformConfig) -> Result<Self> {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..cfg.scales {
            let cin = if s == 0 { cfg.m } else { cfg.n };
            ups.push(Conv2d::new(b, &format!("up{s}"), cin, cfg.n * 4, 3, 1)?);
            blocks.push(TransformBlock::new(b, &format!("block{s}"), cfg)?);
        }
        let conv_out = Conv2d::new(b, "conv_out", cfg.n, cfg.latent_channels, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            ups,
            blocks,
            conv_out,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, y_hat: Var, sem: Option<Var>) -> Result<Var> {
        check_divisible(t, y_hat, "synthesis", self.cfg.m, 1)?;
        let mut x = y_hat;
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            x = up.forward(t, x)?;
            x = t.pixel_shuffle(x, 2)?;
            let s = sem_at(t, sem, x)?;
            x = block.forward(t, x, s)?;
        }
        self.conv_out.forward(t, x)
    }
}

/// `y → h`, two stride-2 reductions.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    m: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl HyperAnalysis {
    pub fn new(b: &mut Builder<'_>, cfg: &TransformConfig) -> Result<Self> {
        Ok(Self {
            m: cfg.m,
            conv1: Conv2d::with_init(b, "conv1", cfg.m, cfg.n, 3, 1, 2f32.sqrt(), 0.0)?,
            conv2: Conv2d::with_init(b, "conv2", cfg.n, cfg.n, 5, 2, 2f32.sqrt(), 0.0)?,
            conv3: Conv2d::new(b, "conv3", cfg.n, cfg.hyper_channels(), 5, 2)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        check_divisible(t, y, "hyper_analysis", self.m, 4)?;
        let x = self.conv1.forward(t, y)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        let x = self.conv2.forward(t, x)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        self.conv3.forward(t, x)
    }
}

/// `ĥ → gc` with `2M` channels at `y`'s resolution.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    hc: usize,
    up1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

impl HyperSynthesis {
    pub fn new(b: &mut Builder<'_>, cfg: &TransformConfig) -> Result<Self> {
        Ok(Self {
            hc: cfg.hyper_channels(),
            up1: Conv2d::with_init(b, "up1", cfg.hyper_channels(), cfg.n * 4, 3, 1, 2f32.sqrt(), 0.0)?,
            up2: Conv2d::with_init(b, "up2", cfg.n, cfg.n * 4, 3, 1, 2f32.sqrt(), 0.0)?,
            conv_out: Conv2d::new(b, "conv_out", cfg.n, cfg.m * 2, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, h_hat: Var) -> Result<Var> {
        check_divisible(t, h_hat, "hyper_synthesis", self.hc, 1)?;
        let x = self.up1.forward(t, h_hat)?;
        let x = t.pixel_shuffle(x, 2)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        let x = self.up2.forward(t, x)?;
        let x = t.pixel_shuffle(x, 2)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        self.conv_out.forward(t, x)
    }
}
