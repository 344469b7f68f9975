//! Conditional latent diffusion: schedule, denoiser, sampler and training.

mod schedule;
mod unet;

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use schedule::NoiseSchedule;
pub use unet::{timestep_features, DenoiserConfig, Sam, TimeResBlock, UNet, SCALES};

use crate::data::MapRaster;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamW, Builder, Mode, ParamStore, Scalar, Tape, Tensor};

pub const META_NAME: &str = "meta.denoiser";

/// U-Net plus optional semantic adapter, with weights.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub unet: UNet,
    pub sam: Option<Sam>,
    pub store: ParamStore<f32>,
}

impl Denoiser {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let unet = UNet::new(&mut b, cfg)?;
        let sam = if cfg.use_map { Some(Sam::new(&mut b, cfg)?) } else { None };
        let meta = cfg.to_meta();
        b.buffer(META_NAME, &[meta.len()], 0.0)?;
        store
            .by_name_mut(META_NAME)
            .expect("registered above")
            .data_mut()
            .copy_from_slice(&meta);
        unet.zero_guidance_weights(&mut store);
        Ok(Self { unet, sam, store })
    }

    pub fn from_store(loaded: &ParamStore<f32>) -> Result<Self> {
        let meta = loaded
            .by_name(META_NAME)
            .ok_or_else(|| Error::MissingParameter(META_NAME.into()))?;
        let cfg = DenoiserConfig::from_meta(meta.data())?;
        let mut d = Self::init(&cfg, 0)?;
        d.store.restore_from(loaded)?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn cfg(&self) -> &DenoiserConfig {
        &self.unet.cfg
    }

    /// `ε̂` for a batch. `one_hot` is required when the adapter exists.
    pub fn predict_on_tape<T: Scalar>(
        &self,
        t: &mut Tape<'_, T>,
        z_t: crate::tensor::Var,
        z_hat: crate::tensor::Var,
        one_hot: Option<crate::tensor::Var>,
        ts: &[usize],
    ) -> Result<crate::tensor::Var> {
        let f_ms = match (&self.sam, one_hot) {
            (Some(sam), Some(oh)) => Some(sam.forward(t, oh, z_t)?),
            (Some(_), None) => return Err(Error::Config("denoiser has a map adapter; a map is required".into())),
            (None, _) => None,
        };
        self.unet.forward(t, z_t, z_hat, ts, f_ms.as_ref())
    }
}

/// Anything that predicts the noise in `z_t` at timestep `t`.
pub trait EpsPredictor<T: Scalar = f32> {
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// A denoiser bound to one image's guidance.
pub struct Guided<'a> {
    pub model: &'a Denoiser,
    pub z_hat: &'a Tensor<f32>,
    pub one_hot: Option<Tensor<f32>>,
}

impl<'a> Guided<'a> {
    pub fn new(model: &'a Denoiser, z_hat: &'a Tensor<f32>, map: Option<&MapRaster>) -> Result<Self> {
        let one_hot = match (model.cfg().use_map, map) {
            (true, Some(m)) => Some(m.one_hot()),
            (true, None) => return Err(Error::Config("denoiser has a map adapter; a map is required".into())),
            (false, _) => None,
        };
        Ok(Self { model, z_hat, one_hot })
    }
}

impl EpsPredictor for Guided<'_> {
    fn predict_eps(&self, z_t: &Tensor<f32>, ts: usize) -> Result<Tensor<f32>> {
        let mut t = Tape::new(&self.model.store, Mode::Eval);
        let zv = t.constant(z_t.clone())?;
        let gv = t.constant(self.z_hat.clone())?;
        let oh = match &self.one_hot {
            Some(o) => Some(t.constant(o.clone())?),
            None => None,
        };
        let n = z_t.shape()[0];
        let eps = self.model.predict_on_tape(&mut t, zv, gv, oh, &vec![ts; n])?;
        Ok(t.value(eps).clone())
    }
}

fn gaussian<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
}

/// Ancestral sampling from `z_start` at timestep `t_start` down to a clean
/// latent over `steps` evenly spaced steps. The last step lands on the
/// predicted `z0` with no added noise.
pub fn sample_from<T: Scalar, P: EpsPredictor<T>, R: Rng>(
    p: &P,
    sched: &NoiseSchedule,
    z_start: &Tensor<T>,
    t_start: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let ts = sched.sampling_timesteps(steps, t_start)?;
    let mut z = z_start.clone();
    for (k, &t) in ts.iter().enumerate() {
        let a_t = sched.alpha_bar(t);
        let a_prev = ts.get(k + 1).map_or(1.0, |&tp| sched.alpha_bar(tp));
        let eps = p.predict_eps(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::shape("ddpm_sample", format!("eps {:?} for z {:?}", eps.shape(), z.shape())));
        }
        let beta = 1.0 - a_t / a_prev;
        let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
        let var = (1.0 - a_prev) / (1.0 - a_t) * beta;
        let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let noise: Option<Tensor<T>> = if var > 0.0 { Some(gaussian(rng, z.shape())) } else { None };
        let data: Vec<T> = z
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&zt, &e))| {
                let (zt, e) = (zt.as_f64(), e.as_f64());
                let x0 = (zt - sb * e) / sa;
                let mean = if a_prev == 1.0 { x0 } else { c0 * x0 + ct * zt };
                let n = noise.as_ref().map_or(0.0, |n| n.data()[i].as_f64());
                T::from_f64(mean + var.sqrt() * n)
            })
            .collect();
        z = Tensor::new(z.shape(), data)?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!("sampling produced non-finite values at step {k} (t = {t})")));
        }
    }
    Ok(z)
}

/// Seeded DDPM sampling from pure noise at `t = T`.
pub fn ddpm_sample<T: Scalar, P: EpsPredictor<T>>(
    p: &P,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = gaussian(&mut rng, shape);
    sample_from(p, sched, &z_t, sched.t_max(), steps, &mut rng)
}

/// Stage-2 training example: clean latent, decoded latent and map.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub z0: Tensor<f32>,
    pub z_hat: Tensor<f32>,
    pub map: MapRaster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            lr: 3e-4,
            warmup: 100,
            seed: 0,
            max_grad_norm: 1.0,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || self.warmup > self.steps {
            return Err(Error::Config(format!("invalid diffusion training config {self:?}")));
        }
        Ok(())
    }
}

/// ε-prediction training; returns the per-step loss.
pub fn train_denoiser(
    model: &mut Denoiser,
    data: &[DiffusionSample],
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no diffusion training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    opt.max_grad_norm = Some(cfg.max_grad_norm);
    let mut trace = Vec::with_capacity(cfg.steps);
    let use_map = model.cfg().use_map;
    for step in 1..=cfg.steps {
        let idx = sample(&mut rng, data.len(), cfg.batch.min(data.len())).into_vec();
        let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(0..=sched.t_max())).collect();
        let z0 = Tensor::stack_batch(&idx.iter().map(|&i| data[i].z0.clone()).collect::<Vec<_>>())?;
        let eps: Tensor<f32> = gaussian(&mut rng, z0.shape());
        let per = z0.len() / idx.len();
        let mut zt = Vec::with_capacity(z0.len());
        for (b, &t) in ts.iter().enumerate() {
            let r = b * per..(b + 1) * per;
            let a = Tensor::new(&[per], z0.data()[r.clone()].to_vec())?;
            let e = Tensor::new(&[per], eps.data()[r].to_vec())?;
            zt.extend(sched.forward_diffuse(&a, t, &e)?.into_data());
        }
        let zt = Tensor::new(z0.shape(), zt)?;
        let zh = Tensor::stack_batch(&idx.iter().map(|&i| data[i].z_hat.clone()).collect::<Vec<_>>())?;
        let oh = if use_map {
            Some(Tensor::stack_batch(&idx.iter().map(|&i| data[i].map.one_hot()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let (loss, grads) = {
            let mut t = Tape::new(&model.store, Mode::Train);
            let zv = t.constant(zt)?;
            let hv = t.constant(zh)?;
            let ov = match oh {
                Some(o) => Some(t.constant(o)?),
                None => None,
            };
            let ev = t.constant(eps)?;
            let pred = model.predict_on_tape(&mut t, zv, hv, ov, &ts)?;
            let loss = t.mse(pred, ev)?;
            let lv = t.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("denoiser loss diverged at step {step}")));
            }
            (lv, t.backward(loss)?)
        };
        grads.accumulate_into(&mut model.store);
        opt.lr = cfg.lr * if cfg.warmup == 0 { 1.0 } else { (step as f64 / cfg.warmup as f64).min(1.0) };
        opt.step(&mut model.store)?;
        trace.push(loss);
    }
    Ok(trace)
}
