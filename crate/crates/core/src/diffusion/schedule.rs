//! Variance schedule and the closed-form forward process.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear `β` schedule indexed `t = 0..=T`, with `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs T ≥ 1".into()));
        }
        let betas: Vec<f64> = (0..=t_max)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / t_max as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// `T`; valid timesteps are `0..=T`.
    pub fn t_max(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Config(format!("timestep {t} outside [0, {}]", self.t_max())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
    pub fn forward_diffuse<T: Scalar>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        forward_with(z0, self.alpha_bar(t), eps)
    }

    /// Recovers `z0` from `z_t` and the noise that produced it.
    pub fn invert<T: Scalar>(&self, z_t: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        invert_with(z_t, self.alpha_bar(t), eps)
    }

    /// `steps` timesteps spread evenly over `[0, start]`, descending and
    /// starting at `start`. Asking for more steps than exist visits every
    /// timestep down to 0.
    pub fn sampling_timesteps(&self, steps: usize, start: usize) -> Result<Vec<usize>> {
        self.check_t(start)?;
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if steps > start {
            return Ok((0..=start).rev().collect());
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| ((start as f64) * (steps - i) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

pub(crate) fn forward_with<T: Scalar>(z0: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Tensor::new(
        z0.shape(),
        z0.data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| T::from_f64(a * z.as_f64() + s * e.as_f64()))
            .collect(),
    )
}

pub(crate) fn invert_with<T: Scalar>(z_t: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z_t.shape() != eps.shape() {
        return Err(Error::shape("invert", format!("z_t {:?} vs eps {:?}", z_t.shape(), eps.shape())));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Tensor::new(
        z_t.shape(),
        z_t.data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| T::from_f64((z.as_f64() - s * e.as_f64()) / a))
            .collect(),
    )
}
