//! Conditional ε-prediction U-Net and the semantic adapter.

use crate::error::{Error, Result};
use crate::tensor::{Builder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transforms::{Conv2d, Linear, ResBlock, SemanticEncoder, LRELU_SLOPE};

pub const SCALES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Channels at the finest scale.
    pub base: usize,
    pub mults: [usize; SCALES],
    pub latent_channels: usize,
    /// Channels of the concatenated `ẑ`.
    pub guidance_channels: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    pub map_classes: usize,
    pub sem_hidden: usize,
    /// Build the adapter branch.
    pub use_map: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            base: 32,
            mults: [1, 2, 2, 2],
            latent_channels: 4,
            guidance_channels: 4,
            time_dim: 32,
            map_classes: crate::data::PALETTE.len(),
            sem_hidden: 16,
            use_map: true,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.guidance_channels
    }

    pub fn widths(&self) -> [usize; SCALES] {
        self.mults.map(|m| m * self.base)
    }

    /// Spatial factor between the finest and coarsest scale.
    pub fn reduction(&self) -> usize {
        1 << (SCALES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base == 0 || self.mults.contains(&0) || self.latent_channels == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and at least 2".into()));
        }
        if self.use_map && (self.map_classes == 0 || self.sem_hidden == 0) {
            return Err(Error::Config("map branch needs classes and hidden width".into()));
        }
        Ok(())
    }

    pub(crate) fn to_meta(&self) -> Vec<f32> {
        let mut v = vec![
            self.base as f32,
            self.latent_channels as f32,
            self.guidance_channels as f32,
            self.time_dim as f32,
            self.map_classes as f32,
            self.sem_hidden as f32,
            if self.use_map { 1.0 } else { 0.0 },
        ];
        v.extend(self.mults.iter().map(|&m| m as f32));
        v
    }

    pub(crate) fn from_meta(v: &[f32]) -> Result<Self> {
        if v.len() != 7 + SCALES || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Format("malformed denoiser meta tensor".into()));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            base: u(0),
            latent_channels: u(1),
            guidance_channels: u(2),
            time_dim: u(3),
            map_classes: u(4),
            sem_hidden: u(5),
            use_map: v[6] != 0.0,
            mults: [u(7), u(8), u(9), u(10)],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal features of integer timesteps, `N × dim`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |k| {
        let (n, j) = (k / dim, k % dim);
        let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let a = ts[n] as f64 * freq;
        T::from_f64(if j < half { a.sin() } else { a.cos() })
    })
}

/// Residual block with a per-channel timestep bias after the first conv.
#[derive(Clone, Debug)]
pub struct TimeResBlock {
    pub conv1: Conv2d,
    pub time: Linear,
    pub conv2: Conv2d,
}

impl TimeResBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, temb: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            conv1: Conv2d::with_init(&mut s, "conv1", channels, channels, 3, 1, 2f32.sqrt(), 0.0)?,
            time: Linear::new(&mut s, "time", temb, channels)?,
            conv2: Conv2d::with_init(&mut s, "conv2", channels, channels, 3, 1, 0.5, 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let (n, _, h, w) = t.value(x).dims4()?;
        let a = t.leaky_relu(x, LRELU_SLOPE)?;
        let a = self.conv1.forward(t, a)?;
        let bias = self.time.forward(t, temb)?;
        let bias = t.channel_broadcast(bias, n, h, w)?;
        let a = t.add(a, bias)?;
        let a = t.leaky_relu(a, LRELU_SLOPE)?;
        let a = self.conv2.forward(t, a)?;
        t.add(x, a)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    merge: Conv2d,
    block: TimeResBlock,
    up: Option<Conv2d>,
}

/// Four-scale U-Net predicting `ε` from `concat(z_t, ẑ)`.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: DenoiserConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<Option<Conv2d>>,
    enc: Vec<TimeResBlock>,
    mid: TimeResBlock,
    dec: Vec<DecoderStage>,
    conv_out: Conv2d,
}

impl UNet {
    /// Registers `unet.*`. The input-conv weights reading the `ẑ` channels
    /// start at zero.
    pub fn new(b: &mut Builder<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope("unet");
        let w = cfg.widths();
        let temb = 4 * cfg.base;
        let conv_in = Conv2d::new(&mut s, "conv_in", cfg.input_channels(), w[0], 3, 1)?;
        let time1 = Linear::new(&mut s, "time1", cfg.time_dim, temb)?;
        let time2 = Linear::new(&mut s, "time2", temb, temb)?;
        let mut down = Vec::with_capacity(SCALES);
        let mut enc = Vec::with_capacity(SCALES);
        for i in 0..SCALES {
            down.push(if i == 0 {
                None
            } else {
                Some(Conv2d::new(&mut s, &format!("down{i}"), w[i - 1], w[i], 3, 2)?)
            });
            enc.push(TimeResBlock::new(&mut s, &format!("enc{i}"), w[i], temb)?);
        }
        let mid = TimeResBlock::new(&mut s, "mid", w[SCALES - 1], temb)?;
        let mut dec = Vec::with_capacity(SCALES);
        for i in (0..SCALES).rev() {
            dec.push(DecoderStage {
                merge: Conv2d::new(&mut s, &format!("dec{i}.merge"), 2 * w[i], w[i], 3, 1)?,
                block: TimeResBlock::new(&mut s, &format!("dec{i}.block"), w[i], temb)?,
                up: if i == 0 {
                    None
                } else {
                    Some(Conv2d::new(&mut s, &format!("dec{i}.up"), w[i], w[i - 1], 3, 1)?)
                },
            });
        }
        let conv_out = Conv2d::with_init(&mut s, "conv_out", w[0], cfg.latent_channels, 3, 1, 0.0, 0.0)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            time1,
            time2,
            down,
            enc,
            mid,
            dec,
            conv_out,
        })
    }

    /// Zeroes the input-conv weights that read the guidance channels.
    pub fn zero_guidance_weights(&self, store: &mut ParamStore<f32>) {
        let (lc, ic) = (self.cfg.latent_channels, self.cfg.input_channels());
        let w = store.get_mut(self.conv_in.weight);
        let k2 = self.conv_in.kernel * self.conv_in.kernel;
        for (i, chunk) in w.data_mut().chunks_mut(k2).enumerate() {
            if i % ic >= lc {
                chunk.fill(0.0);
            }
        }
    }

    /// Encoder feature shapes `(channels, h, w)` for a latent of `h × w`.
    pub fn pyramid(&self, h: usize, w: usize) -> Result<[(usize, usize, usize); SCALES]> {
        let r = self.cfg.reduction();
        if h % r != 0 || w % r != 0 || h == 0 || w == 0 {
            return Err(Error::shape("unet", format!("latent {h}x{w} not divisible by {r}")));
        }
        let widths = self.cfg.widths();
        Ok(std::array::from_fn(|i| (widths[i], h >> i, w >> i)))
    }

    /// `z_t`, `z_hat`: `N × C × h × w`; `ts`: one timestep per batch item;
    /// `f_ms`: optional adapter features added to the encoder features.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<'_, T>,
        z_t: Var,
        z_hat: Var,
        ts: &[usize],
        f_ms: Option<&[Var; SCALES]>,
    ) -> Result<Var> {
        let (n, c, h, w) = t.value(z_t).dims4()?;
        if c != self.cfg.latent_channels || t.shape(z_hat) != [n, self.cfg.guidance_channels, h, w] || ts.len() != n {
            return Err(Error::shape(
                "unet",
                format!("z_t {:?}, z_hat {:?}, {} timesteps", t.shape(z_t), t.shape(z_hat), ts.len()),
            ));
        }
        let pyramid = self.pyramid(h, w)?;
        if let Some(f) = f_ms {
            for (i, (&v, &(fc, fh, fw))) in f.iter().zip(&pyramid).enumerate() {
                if t.shape(v) != [n, fc, fh, fw] {
                    return Err(Error::shape("unet", format!("adapter feature {i} is {:?}", t.shape(v))));
                }
            }
        }
        let feats = t.constant(timestep_features(ts, self.cfg.time_dim))?;
        let temb = self.time1.forward(t, feats)?;
        let temb = t.leaky_relu(temb, LRELU_SLOPE)?;
        let temb = self.time2.forward(t, temb)?;

        let x = t.concat(&[z_t, z_hat], 1)?;
        let mut hcur = self.conv_in.forward(t, x)?;
        let mut skips = Vec::with_capacity(SCALES);
        for i in 0..SCALES {
            if let Some(d) = &self.down[i] {
                hcur = d.forward(t, hcur)?;
            }
            hcur = self.enc[i].forward(t, hcur, temb)?;
            if let Some(f) = f_ms {
                hcur = t.add(hcur, f[i])?;
            }
            skips.push(hcur);
        }
        hcur = self.mid.forward(t, hcur, temb)?;
        for stage in &self.dec {
            let skip = skips.pop().expect("one skip per scale");
            let x = t.concat(&[hcur, skip], 1)?;
            let x = stage.merge.forward(t, x)?;
            let x = t.leaky_relu(x, LRELU_SLOPE)?;
            hcur = stage.block.forward(t, x, temb)?;
            if let Some(up) = &stage.up {
                let x = t.upsample_nearest(hcur, 2)?;
                hcur = up.forward(t, x)?;
            }
        }
        let x = t.leaky_relu(hcur, LRELU_SLOPE)?;
        self.conv_out.forward(t, x)
    }
}

/// Semantic adapter: map features plus `z_t` into one feature map per
/// U-Net encoder scale. Output convs start at zero.
#[derive(Clone, Debug)]
pub struct Sam {
    pub se: SemanticEncoder,
    conv_in: Conv2d,
    first: ResBlock,
    down: Vec<Conv2d>,
    blocks: Vec<[ResBlock; 2]>,
    outs: Vec<Conv2d>,
}

impl Sam {
    /// Registers `sam.*`.
    pub fn new(b: &mut Builder<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope("sam");
        let w = cfg.widths();
        let se = SemanticEncoder::new(&mut s, "se", cfg.map_classes, cfg.sem_hidden)?;
        let conv_in = Conv2d::new(&mut s, "conv_in", cfg.sem_hidden + cfg.latent_channels, w[0], 3, 1)?;
        let first = ResBlock::new(&mut s, "block0", w[0])?;
        let mut down = Vec::new();
        let mut blocks = Vec::new();
        for i in 1..SCALES {
            down.push(Conv2d::new(&mut s, &format!("down{i}"), w[i - 1], w[i], 3, 2)?);
            blocks.push([
                ResBlock::new(&mut s, &format!("block{i}a"), w[i])?,
                ResBlock::new(&mut s, &format!("block{i}b"), w[i])?,
            ]);
        }
        let outs = (0..SCALES)
            .map(|i| Conv2d::with_init(&mut s, &format!("out{i}"), w[i], w[i], 1, 1, 0.0, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            se,
            conv_in,
            first,
            down,
            blocks,
            outs,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, one_hot: Var, z_t: Var) -> Result<[Var; SCALES]> {
        let (n, _, h, w) = t.value(z_t).dims4()?;
        if t.shape(one_hot).first() != Some(&n) {
            return Err(Error::shape("sam", format!("map batch {:?} vs latent batch {n}", t.shape(one_hot))));
        }
        let sem = self.se.forward(t, one_hot, (h, w))?;
        let x = t.concat(&[sem, z_t], 1)?;
        let x = self.conv_in.forward(t, x)?;
        let mut trunk = self.first.forward(t, x)?;
        let mut out = Vec::with_capacity(SCALES);
        out.push(self.outs[0].forward(t, trunk)?);
        for i in 1..SCALES {
            trunk = self.down[i - 1].forward(t, trunk)?;
            trunk = t.leaky_relu(trunk, LRELU_SLOPE)?;
            for b in &self.blocks[i - 1] {
                trunk = b.forward(t, trunk)?;
            }
            out.push(self.outs[i].forward(t, trunk)?);
        }
        Ok(out.try_into().expect("one feature per scale"))
    }
}
