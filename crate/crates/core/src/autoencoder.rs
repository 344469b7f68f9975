//! Deterministic pixel autoencoder mapping images to 4-channel latents.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, AdamW, Builder, Mode, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transforms::{Conv2d, ResBlock, LRELU_SLOPE};

pub const META_NAME: &str = "meta.vae";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    /// Spatial reduction; a power of two.
    pub factor: usize,
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            latent_channels: 4,
            width: 32,
        }
    }
}

impl AutoencoderConfig {
    pub fn desk() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!("autoencoder factor {} is not a power of two >= 2", self.factor)));
        }
        if self.latent_channels == 0 || self.width == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

#[derive(Clone, Debug)]
pub struct PixelAutoencoder {
    pub cfg: AutoencoderConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_res: ResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: ResBlock,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    /// Divides raw encoder output so latents have roughly unit variance.
    latent_scale: crate::tensor::ParamId,
}

impl PixelAutoencoder {
    /// Registers `vae.enc.*` and `vae.dec.*` parameters.
    pub fn new(b: &mut Builder<'_>, cfg: &AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut v = b.scope("vae");
        let mut e = v.scope("enc");
        // The first halving is a space-to-depth rearrangement, so no conv
        // runs at full resolution.
        let enc_in = Conv2d::with_init(&mut e, "conv_in", 12, w, 3, 1, 2f32.sqrt(), 0.0)?;
        let enc_down = (1..cfg.steps())
            .map(|i| Conv2d::with_init(&mut e, &format!("down{i}"), w, w, 5, 2, 2f32.sqrt(), 0.0))
            .collect::<Result<Vec<_>>>()?;
        let enc_res = ResBlock::new(&mut e, "res", w)?;
        let enc_out = Conv2d::new(&mut e, "conv_out", w, cfg.latent_channels, 3, 1)?;
        let latent_scale = e.buffer("latent_scale", &[1], 1.0)?;
        drop(e);
        let mut d = v.scope("dec");
        let dec_in = Conv2d::with_init(&mut d, "conv_in", cfg.latent_channels, w, 3, 1, 2f32.sqrt(), 0.0)?;
        let dec_res = ResBlock::new(&mut d, "res", w)?;
        let dec_up = (1..cfg.steps())
            .map(|i| Conv2d::with_init(&mut d, &format!("up{i}"), w, 4 * w, 3, 1, 2f32.sqrt(), 0.0))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::with_init(&mut d, "conv_out", w, 12, 3, 1, 1.0, 0.5)?;
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            enc_down,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
            latent_scale,
        })
    }

    /// Builds a fresh model and its parameter store. The store carries the
    /// config under [`META_NAME`].
    pub fn init(cfg: &AutoencoderConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let ae = Self::new(&mut b, cfg)?;
        let meta = b.buffer(META_NAME, &[3], 0.0)?;
        store
            .get_mut(meta)
            .data_mut()
            .copy_from_slice(&[cfg.factor as f32, cfg.latent_channels as f32, cfg.width as f32]);
        Ok((ae, store))
    }

    /// Rebuilds the model described by a checkpoint store.
    pub fn from_store(loaded: &ParamStore<f32>) -> Result<(Self, ParamStore<f32>)> {
        let meta = loaded
            .by_name(META_NAME)
            .ok_or_else(|| Error::MissingParameter(META_NAME.into()))?
            .data();
        if meta.len() != 3 || meta.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
            return Err(Error::Format(format!("bad autoencoder metadata {meta:?}")));
        }
        let cfg = AutoencoderConfig {
            factor: meta[0] as usize,
            latent_channels: meta[1] as usize,
            width: meta[2] as usize,
        };
        let (ae, mut store) = Self::init(&cfg, 0)?;
        store.restore_from(loaded)?;
        Ok((ae, store))
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>)> {
        Self::from_store(&load_checkpoint(path)?)
    }

    pub fn latent_scale<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.latent_scale).data()[0].as_f64()
    }

    fn check_image<T: Scalar>(&self, t: &Tape<'_, T>, x: Var) -> Result<()> {
        let (_, c, h, w) = t.value(x).dims4()?;
        if c != 3 || h % self.cfg.factor != 0 || w % self.cfg.factor != 0 {
            return Err(Error::shape(
                "encode_image",
                format!("{c}x{h}x{w} image for factor {}", self.cfg.factor),
            ));
        }
        Ok(())
    }

    /// `N × 3 × H × W → N × C × H/f × W/f`, already divided by the latent scale.
    pub fn encode<T: Scalar>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.check_image(t, x)?;
        let x = t.pixel_unshuffle(x, 2)?;
        let mut h = self.enc_in.forward(t, x)?;
        h = t.leaky_relu(h, LRELU_SLOPE)?;
        for down in &self.enc_down {
            h = down.forward(t, h)?;
            h = t.leaky_relu(h, LRELU_SLOPE)?;
        }
        h = self.enc_res.forward(t, h)?;
        let z = self.enc_out.forward(t, h)?;
        let scale = t.store().get(self.latent_scale).data()[0].as_f64();
        t.scale(z, 1.0 / scale)
    }

    /// Raw (unclamped) reconstruction.
    pub fn decode<T: Scalar>(&self, t: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let (_, c, _, _) = t.value(z).dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape(
                "decode_latent",
                format!("{c} channels, expected {}", self.cfg.latent_channels),
            ));
        }
        let scale = t.store().get(self.latent_scale).data()[0].as_f64();
        let z = t.scale(z, scale)?;
        let mut h = self.dec_in.forward(t, z)?;
        h = t.leaky_relu(h, LRELU_SLOPE)?;
        h = self.dec_res.forward(t, h)?;
        for up in &self.dec_up {
            h = up.forward(t, h)?;
            h = t.pixel_shuffle(h, 2)?;
            h = t.leaky_relu(h, LRELU_SLOPE)?;
        }
        let h = self.dec_out.forward(t, h)?;
        t.pixel_shuffle(h, 2)
    }

    pub fn encode_image(&self, store: &ParamStore<f32>, x: &ImageBuffer) -> Result<Tensor<f32>> {
        let mut t = Tape::new(store, Mode::Eval);
        let xv = t.constant(x.to_tensor())?;
        let z = self.encode(&mut t, xv)?;
        Ok(t.value(z).clone())
    }

    pub fn decode_latent(&self, store: &ParamStore<f32>, z: &Tensor<f32>) -> Result<ImageBuffer> {
        let mut t = Tape::new(store, Mode::Eval);
        let zv = t.constant(z.clone())?;
        let x = self.decode(&mut t, zv)?;
        ImageBuffer::from_tensor(t.value(x))
    }

    /// Sets the latent scale to the RMS of raw latents over `images`.
    pub fn calibrate_scale(&self, store: &mut ParamStore<f32>, images: &[ImageBuffer]) -> Result<f64> {
        store.get_mut(self.latent_scale).data_mut()[0] = 1.0;
        let mut acc = 0.0;
        let mut n = 0usize;
        for img in images {
            let z = self.encode_image(store, img)?;
            acc += z.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            n += z.len();
        }
        let rms = if n == 0 { 1.0 } else { (acc / n as f64).sqrt().max(1e-3) };
        store.get_mut(self.latent_scale).data_mut()[0] = rms as f32;
        Ok(rms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Stacks the selected images into one `N × 3 × H × W` tensor.
pub fn image_batch(images: &[ImageBuffer], idx: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = idx.iter().map(|&i| images[i].to_tensor()).collect();
    Tensor::stack_batch(&items)
}

/// MSE training; returns the per-step loss trace. The latent scale is
/// calibrated on the training images at the end.
pub fn train_autoencoder(
    ae: &PixelAutoencoder,
    store: &mut ParamStore<f32>,
    images: &[ImageBuffer],
    cfg: &AeTrainConfig,
) -> Result<Vec<f32>> {
    if images.len() < 2 {
        return Err(Error::Config("autoencoder training needs at least two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let batch = cfg.batch.min(images.len()).max(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, images.len(), batch).into_vec();
        let x = image_batch(images, &idx)?;
        // Cosine decay to a tenth of the base rate.
        let progress = step as f64 / cfg.steps.max(1) as f64;
        opt.lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let loss = {
            let mut t = Tape::new(store, Mode::Train);
            let xv = t.constant(x)?;
            let z = ae.encode(&mut t, xv)?;
            let xr = ae.decode(&mut t, z)?;
            let loss = t.mse(xr, xv)?;
            let lv = t.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss diverged at step {step}: {trace:?}")));
            }
            let g = t.backward(loss)?;
            g.accumulate_into(store);
            lv
        };
        opt.step(store)?;
        trace.push(loss);
    }
    ae.calibrate_scale(store, images)?;
    Ok(trace)
}
