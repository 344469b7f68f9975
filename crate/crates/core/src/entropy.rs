//! Conditional probability models for the quantized representations.
//!
//! `ŷ` is modelled per element by a Gaussian convolved with a unit uniform,
//! its parameters predicted from the hyperprior features `gc` and the slices
//! already decoded. `ĥ` uses a per-channel Gaussian.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Builder, Init, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transforms::{Conv2d, LRELU_SLOPE};

/// Lower bound on every predicted scale.
pub const SIGMA_FLOOR: f64 = 0.01;

/// Per-element Gaussian parameters in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    mu: Tensor<f64>,
    sigma: Tensor<f64>,
}

impl GaussianField {
    /// Scales within single-precision rounding of the floor are lifted to it.
    pub fn new(mu: Tensor<f64>, sigma: Tensor<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape(
                "gaussian_field",
                format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            ));
        }
        let lowest = SIGMA_FLOOR as f32 as f64;
        if let Some(s) = sigma.data().iter().find(|&&s| s < lowest) {
            return Err(Error::Numeric(format!("sigma {s} below floor {SIGMA_FLOOR}")));
        }
        let mut sigma = sigma;
        sigma.data_mut().iter_mut().for_each(|s| *s = s.max(SIGMA_FLOOR));
        Ok(Self { mu, sigma })
    }

    /// Reads the values of two tape nodes.
    pub fn from_tape<T: Scalar>(t: &Tape<'_, T>, mu: Var, sigma: Var) -> Result<Self> {
        Self::new(t.value(mu).cast(), t.value(sigma).cast())
    }

    pub fn mu(&self) -> &Tensor<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor<f64> {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Bin probability of each integer symbol.
    pub fn probabilities(&self, symbols: &[f64]) -> Result<Vec<f64>> {
        self.check_len(symbols.len())?;
        Ok(symbols
            .iter()
            .zip(self.mu.data().iter().zip(self.sigma.data()))
            .map(|(&s, (&m, &sg))| math::gaussian_bin_probability(s, m, sg))
            .collect())
    }

    /// Discrete-mode rate of `symbols` (rounded first).
    pub fn rate(&self, symbols: &[f64]) -> Result<RateEstimate> {
        self.check_len(symbols.len())?;
        Ok(discrete_bits(symbols, self.mu.data(), self.sigma.data()))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::shape("gaussian_field", format!("{n} symbols for {} parameters", self.len())));
        }
        Ok(())
    }
}

/// Bits plus how many bins hit the probability floor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateEstimate {
    pub bits: f64,
    pub clamped: usize,
}

impl std::ops::Add for RateEstimate {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            bits: self.bits + o.bits,
            clamped: self.clamped + o.clamped,
        }
    }
}

/// `Σ −log₂ p(round(s))` with `p` floored at [`math::P_MIN`].
pub fn discrete_bits(symbols: &[f64], mu: &[f64], sigma: &[f64]) -> RateEstimate {
    let mut est = RateEstimate::default();
    for ((&s, &m), &sg) in symbols.iter().zip(mu).zip(sigma) {
        let p = math::gaussian_bin_probability(s.round(), m, sg);
        if p < math::P_MIN {
            est.clamped += 1;
        }
        est.bits += math::bits_of(p);
    }
    est
}

/// How the rate term treats quantization during optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMode {
    /// Additive `U(−½, ½)` noise; differentiable.
    Noise,
    /// Hard rounding; the estimate the coder has to approach.
    Discrete,
}

/// Total bits of `y` under `(mu, sigma)` as a scalar tape node.
pub fn estimate_rate<T: Scalar, R: Rng>(
    t: &mut Tape<'_, T>,
    y: Var,
    mu: Var,
    sigma: Var,
    mode: RateMode,
    rng: &mut R,
) -> Result<Var> {
    let v = t.value(y);
    let shape = v.shape().to_vec();
    let q = match mode {
        RateMode::Noise => {
            let noise: Vec<T> = (0..v.len())
                .map(|_| T::from_f64(rng.random_range(-0.5..0.5)))
                .collect();
            let noise = t.constant(Tensor::new(&shape, noise)?)?;
            t.add(y, noise)?
        }
        RateMode::Discrete => {
            let r: Vec<T> = v.data().iter().map(|a| a.round()).collect();
            t.constant(Tensor::new(&shape, r)?)?
        }
    };
    let bits = t.gaussian_bits(q, mu, sigma)?;
    t.sum(bits)
}

/// Rounds half away from zero; identity gradient.
pub fn ste_quantize<T: Scalar>(t: &mut Tape<'_, T>, y: Var) -> Result<Var> {
    t.round_ste(y)
}

/// Contiguous channel ranges of the `K` slices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    ranges: Vec<Range<usize>>,
}

impl SliceLayout {
    /// Splits `m` channels into `k` slices; earlier slices take the remainder.
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if k == 0 || k > m {
            return Err(Error::Config(format!("cannot split {m} channels into {k} slices")));
        }
        let base = m / k;
        let extra = m % k;
        let mut start = 0;
        let ranges = (0..k)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(Self { ranges })
    }

    pub fn k(&self) -> usize {
        self.ranges.len()
    }

    pub fn channels(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.ranges[i].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

/// Per-channel Gaussian for the hyper latent.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

impl FactorizedPrior {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            channels,
            mu: s.param("mu", &[channels], Init::Zeros)?,
            log_sigma: s.param("log_sigma", &[channels], Init::Zeros)?,
        })
    }

    /// `(mu, sigma)` broadcast over an `N × C × H × W` grid.
    pub fn field<T: Scalar>(&self, t: &mut Tape<'_, T>, n: usize, h: usize, w: usize) -> Result<(Var, Var)> {
        let mu = t.param(self.mu)?;
        let ls = t.param(self.log_sigma)?;
        let sigma = t.exp(ls)?;
        let sigma = t.clamp_min(sigma, SIGMA_FLOOR)?;
        Ok((t.channel_broadcast(mu, n, h, w)?, t.channel_broadcast(sigma, n, h, w)?))
    }

    /// Per-channel `(mu, sigma)` read from a store in 64-bit.
    pub fn channel_params<T: Scalar>(&self, store: &ParamStore<T>) -> (Vec<f64>, Vec<f64>) {
        let mu = store.get(self.mu).data().iter().map(|v| v.as_f64()).collect();
        let sigma = store
            .get(self.log_sigma)
            .data()
            .iter()
            .map(|v| v.as_f64().exp().max(SIGMA_FLOOR))
            .collect();
        (mu, sigma)
    }

    /// The prior expanded to a field over a `C × H × W` symbol grid.
    pub fn gaussian_field<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> Result<GaussianField> {
        let (mu_c, sigma_c) = self.channel_params(store);
        let expand = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat_n(x, h * w)).collect::<Vec<_>>();
        let shape = [1, self.channels, h, w];
        GaussianField::new(Tensor::new(&shape, expand(&mu_c))?, Tensor::new(&shape, expand(&sigma_c))?)
    }

    /// Bin probability of each element of a `C × H × W` (or batched) grid.
    pub fn probabilities<T: Scalar>(&self, store: &ParamStore<T>, h_hat: &Tensor<f64>) -> Result<Vec<f64>> {
        let (_, c, h, w) = h_hat.dims4()?;
        if c != self.channels {
            return Err(Error::shape("factorized_prior", format!("{c} channels, prior has {}", self.channels)));
        }
        let (mu, sigma) = self.channel_params(store);
        Ok(h_hat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let ch = (i / (h * w)) % c;
                math::gaussian_bin_probability(s, mu[ch], sigma[ch])
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
struct SliceHead {
    conv1: Conv2d,
    conv2: Conv2d,
    mu: Conv2d,
    sigma: Conv2d,
}

/// Channel-wise autoregressive predictor: slice `i` sees `gc` and the
/// decoded slices `0..i` only.
#[derive(Clone, Debug)]
pub struct ContextModel {
    layout: SliceLayout,
    gc_channels: usize,
    heads: Vec<SliceHead>,
}

/// `softplus(0.55) ≈ 1`, so untrained scales start near one.
const SIGMA_BIAS: f32 = 0.55;

impl ContextModel {
    pub fn new(b: &mut Builder<'_>, layout: SliceLayout, gc_channels: usize, hidden: usize) -> Result<Self> {
        let mut heads = Vec::with_capacity(layout.k());
        for (i, r) in layout.ranges().iter().enumerate() {
            let mut s = b.scope(&format!("slice{i}"));
            let cin = gc_channels + layout.range(i).start;
            let out = r.len();
            heads.push(SliceHead {
                conv1: Conv2d::with_init(&mut s, "conv1", cin, hidden, 3, 1, 2f32.sqrt(), 0.0)?,
                conv2: Conv2d::with_init(&mut s, "conv2", hidden, hidden, 3, 1, 2f32.sqrt(), 0.0)?,
                mu: Conv2d::with_init(&mut s, "mu", hidden, out, 3, 1, 0.1, 0.0)?,
                sigma: Conv2d::with_init(&mut s, "sigma", hidden, out, 3, 1, 0.1, SIGMA_BIAS)?,
            });
        }
        Ok(Self {
            layout,
            gc_channels,
            heads,
        })
    }

    pub fn layout(&self) -> &SliceLayout {
        &self.layout
    }

    /// `(mu, sigma)` for slice `i` from `gc` and exactly the slices before it.
    pub fn predict<T: Scalar>(&self, t: &mut Tape<'_, T>, gc: Var, decoded: &[Var], i: usize) -> Result<(Var, Var)> {
        if i >= self.layout.k() {
            return Err(Error::Config(format!("slice index {i} out of {} slices", self.layout.k())));
        }
        if decoded.len() != i {
            return Err(Error::Config(format!(
                "slice {i} needs {i} decoded slices, got {}",
                decoded.len()
            )));
        }
        if t.shape(gc).get(1) != Some(&self.gc_channels) {
            return Err(Error::shape(
                "context_predict",
                format!("gc {:?}, expected {} channels", t.shape(gc), self.gc_channels),
            ));
        }
        for (j, &d) in decoded.iter().enumerate() {
            if t.shape(d).get(1) != Some(&self.layout.range(j).len()) {
                return Err(Error::shape("context_predict", format!("decoded slice {j} is {:?}", t.shape(d))));
            }
        }
        let head = &self.heads[i];
        let mut parts = vec![gc];
        parts.extend_from_slice(decoded);
        let x = if parts.len() == 1 { gc } else { t.concat(&parts, 1)? };
        let x = head.conv1.forward(t, x)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        let x = head.conv2.forward(t, x)?;
        let x = t.leaky_relu(x, LRELU_SLOPE)?;
        let mu = head.mu.forward(t, x)?;
        let raw = head.sigma.forward(t, x)?;
        let sigma = t.softplus(raw)?;
        let sigma = t.clamp_min(sigma, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }
}
