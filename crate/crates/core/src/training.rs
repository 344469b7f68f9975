//! Stage-1 rate–distortion training of the latent compression model.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{AutoencoderConfig, PixelAutoencoder};
use crate::codec::{compress, LcmConfig, LcmModel};
use crate::config::KvConfig;
use crate::data::{ImageBuffer, MapRaster};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Mode, ParamStore, Tape, Tensor};

/// The rate–distortion weights used for the model ladder.
pub const LAMBDA_GRID: [f64; 3] = [0.1, 0.39, 1.25];
/// Running-statistics blend factor for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (full|desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Desk => "desk",
        })
    }
}

impl Preset {
    pub fn lcm(self) -> LcmConfig {
        match self {
            Self::Full => LcmConfig::full(),
            Self::Desk => LcmConfig::desk(),
        }
    }

    pub fn autoencoder(self) -> AutoencoderConfig {
        match self {
            Self::Full => AutoencoderConfig::default(),
            Self::Desk => AutoencoderConfig::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda_index: u8,
    pub lr: f64,
    pub warmup: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub preset: Preset,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            lambda: LAMBDA_GRID[0],
            lambda_index: 0,
            lr: 5e-5,
            warmup: 10_000,
            batch: 16,
            steps: 250_000,
            seed: 0,
            preset: Preset::Full,
        }
    }

    pub fn desk() -> Self {
        Self {
            lambda: LAMBDA_GRID[0],
            lambda_index: 0,
            lr: 1e-3,
            warmup: 500,
            batch: 8,
            steps: 3000,
            seed: 0,
            preset: Preset::Desk,
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be positive".into()));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds total steps {}", self.warmup, self.steps)));
        }
        Ok(())
    }

    /// Reads the training keys from `kv`, starting from the preset defaults.
    /// Other keys are left in place.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let preset = kv.take::<Preset>("preset")?.unwrap_or(Preset::Desk);
        let mut c = Self::for_preset(preset);
        // An index alone selects the matching grid value.
        if let Some(v) = kv.take::<u8>("lambda_index")? {
            c.lambda_index = v;
            if let Some(&l) = LAMBDA_GRID.get(v as usize) {
                c.lambda = l;
            }
        }
        if let Some(v) = kv.take("lambda")? {
            c.lambda = v;
        }
        if let Some(v) = kv.take("lr")? {
            c.lr = v;
        }
        if let Some(v) = kv.take("warmup")? {
            c.warmup = v;
        }
        if let Some(v) = kv.take("batch")? {
            c.batch = v;
        }
        if let Some(v) = kv.take("steps")? {
            c.steps = v;
        }
        if let Some(v) = kv.take("seed")? {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "preset = {}\nlambda = {}\nlambda_index = {}\nlr = {}\nwarmup = {}\nbatch = {}\nsteps = {}\nseed = {}\n",
            self.preset, self.lambda, self.lambda_index, self.lr, self.warmup, self.batch, self.steps, self.seed
        )
    }

    /// Linear warmup: `lr · min(1, step / warmup)` with `step` counted from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Loss terms of one step. `rate` is bits per latent element; `ld` is the
/// mean squared latent error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLossBreakdown {
    pub rate: f64,
    pub ld: f64,
    pub lambda: f64,
    pub total: f64,
}

impl RdLossBreakdown {
    pub fn new(rate: f64, ld: f64, lambda: f64) -> Self {
        Self {
            rate,
            ld,
            lambda,
            total: rate + lambda * ld,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rate.is_finite() && self.ld.is_finite() && self.total.is_finite()
    }
}

/// One latent with its map.
#[derive(Clone, Debug)]
pub struct LatentSample {
    /// `1 × C × h × w`.
    pub z: Tensor<f32>,
    pub map: MapRaster,
}

/// Encodes images with a frozen autoencoder.
pub fn encode_latents(ae: &PixelAutoencoder, store: &ParamStore<f32>, pairs: &[(ImageBuffer, MapRaster)]) -> Result<Vec<LatentSample>> {
    pairs
        .iter()
        .map(|(img, map)| {
            Ok(LatentSample {
                z: ae.encode_image(store, img)?,
                map: map.clone(),
            })
        })
        .collect()
}

/// Optimizer state for stage-1 training.
pub struct Stage1Trainer {
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Stage1Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: AdamW::new(cfg.lr, 0.0),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            cfg,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws a batch of distinct indices.
    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        sample(&mut self.rng, n, self.cfg.batch.min(n)).into_vec()
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, model: &mut LcmModel, batch: &[&LatentSample]) -> Result<RdLossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let net = &model.net;
        let z = Tensor::stack_batch(&batch.iter().map(|s| s.z.clone()).collect::<Vec<_>>())?;
        let one_hot = if net.cfg.transform.use_map {
            Some(Tensor::stack_batch(&batch.iter().map(|s| s.map.one_hot()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let elements = z.len() as f64;
        let lambda = self.cfg.lambda;
        let (breakdown, grads, bn) = {
            let mut t = Tape::new(&model.store, Mode::Train);
            let zv = t.constant(z)?;
            let oh = match one_hot {
                Some(o) => Some(t.constant(o)?),
                None => None,
            };
            let f = net.forward_train(&mut t, zv, oh, &mut self.rng)?;
            let bits = t.add(f.rate_y, f.rate_h)?;
            let rate = t.scale(bits, 1.0 / elements)?;
            let ld = t.mse(f.z_hat, zv)?;
            let weighted = t.scale(ld, lambda)?;
            let loss = t.add(rate, weighted)?;
            let b = RdLossBreakdown::new(
                t.value(rate).data()[0] as f64,
                t.value(ld).data()[0] as f64,
                lambda,
            );
            if !b.is_finite() {
                return Err(Error::Numeric(format!("stage-1 loss diverged at step {}: {b:?}", self.step + 1)));
            }
            let g = t.backward(loss)?;
            (b, g, t.take_bn_updates())
        };
        grads.accumulate_into(&mut model.store);
        self.step += 1;
        self.opt.lr = self.cfg.lr_at(self.step);
        self.opt.step(&mut model.store)?;
        for u in &bn {
            u.apply(&mut model.store, BN_MOMENTUM);
        }
        Ok(breakdown)
    }
}

pub const LOG_HEADER: &str = "step,L_rate,L_ld,total,lr";

/// Trains `model` for `cfg.steps` steps. Each step is written to `log` as
/// CSV when given. Returns the per-step breakdowns.
pub fn train_lcm(
    model: &mut LcmModel,
    data: &[LatentSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<RdLossBreakdown>> {
    if data.is_empty() {
        return Err(Error::Config("no training latents".into()));
    }
    let mut trainer = Stage1Trainer::new(cfg.clone())?;
    model.net.set_lambda(&mut model.store, cfg.lambda_index, cfg.lambda as f32);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = trainer.draw(data.len());
        let batch: Vec<&LatentSample> = idx.iter().map(|&i| &data[i]).collect();
        let b = trainer.step(model, &batch)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "{},{},{},{},{}",
                trainer.steps_done(),
                b.rate,
                b.ld,
                b.total,
                cfg.lr_at(trainer.steps_done())
            )?;
        }
        trace.push(b);
    }
    model.rehash()?;
    Ok(trace)
}

/// Held-out measurements of a trained model through the real coder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub bpp: f64,
    /// Mean squared error between `ẑ` and `z`.
    pub latent_mse: f64,
}

pub fn evaluate_heldout(model: &LcmModel, data: &[LatentSample], image_w: usize, image_h: usize) -> Result<HeldOut> {
    if data.is_empty() {
        return Err(Error::Config("no held-out latents".into()));
    }
    let (mut bpp, mut mse) = (0.0, 0.0);
    for s in data {
        let c = compress(model, &s.z, Some(&s.map), image_w, image_h)?;
        bpp += c.report.bpp;
        mse += c
            .z_hat
            .data()
            .iter()
            .zip(s.z.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / s.z.len() as f64;
    }
    let n = data.len() as f64;
    Ok(HeldOut {
        bpp: bpp / n,
        latent_mse: mse / n,
    })
}

#[derive(Clone, Debug)]
pub struct GridEntry {
    pub lambda: f64,
    pub model: LcmModel,
    pub trace: Vec<RdLossBreakdown>,
    pub heldout: HeldOut,
}

/// Trains one model per λ from the same initialization seed.
pub fn train_rd_grid(
    lcm_cfg: &LcmConfig,
    lambdas: &[f64],
    base: &TrainConfig,
    train: &[LatentSample],
    heldout: &[LatentSample],
    image_wh: (usize, usize),
) -> Result<Vec<GridEntry>> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a rate-distortion grid needs at least two lambdas".into()));
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for (i, &lambda) in lambdas.iter().enumerate() {
        let cfg = TrainConfig {
            lambda,
            lambda_index: u8::try_from(i).map_err(|_| Error::Config("too many lambdas".into()))?,
            ..base.clone()
        };
        let mut model = LcmModel::init(lcm_cfg, base.seed)?;
        let trace = train_lcm(&mut model, train, &cfg, None)?;
        let h = evaluate_heldout(&model, heldout, image_wh.0, image_wh.1)?;
        log::info!("lambda {lambda}: bpp {:.4}, latent mse {:.5}", h.bpp, h.latent_mse);
        out.push(GridEntry {
            lambda,
            model,
            trace,
            heldout: h,
        });
    }
    Ok(out)
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
