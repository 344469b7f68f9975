//! The latent compression model: transforms plus entropy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MapRaster;
use crate::entropy::{estimate_rate, ste_quantize, ContextModel, FactorizedPrior, RateMode, SliceLayout};
use crate::error::{Error, Result};
use crate::range_coder::DEFAULT_RADIUS;
use crate::tensor::{write_checkpoint, Builder, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transforms::{Analysis, HyperAnalysis, HyperSynthesis, SemanticEncoder, Synthesis, TransformConfig};

/// Name of the tensor carrying the configuration inside checkpoints.
pub const META_NAME: &str = "meta.lcm";
const META_LEN: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct LcmConfig {
    pub transform: TransformConfig,
    /// Number of channel slices.
    pub k: usize,
    pub context_hidden: usize,
    pub radius: i32,
    pub lambda_index: u8,
    pub lambda: f32,
}

impl LcmConfig {
    pub fn desk() -> Self {
        Self {
            transform: TransformConfig::desk(),
            k: 2,
            context_hidden: 32,
            radius: DEFAULT_RADIUS,
            lambda_index: 0,
            lambda: 0.1,
        }
    }

    pub fn full() -> Self {
        Self {
            transform: TransformConfig::full(),
            k: 4,
            context_hidden: 128,
            radius: DEFAULT_RADIUS,
            lambda_index: 0,
            lambda: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        SliceLayout::new(self.transform.m, self.k)?;
        if self.context_hidden == 0 || self.radius < 1 {
            return Err(Error::Config("context width and coder radius must be positive".into()));
        }
        if self.transform.n > u16::MAX as usize || self.transform.m > u16::MAX as usize || self.k > u8::MAX as usize {
            return Err(Error::Config("N, M or K too large for the container header".into()));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f32> {
        let t = &self.transform;
        vec![
            t.n as f32,
            t.m as f32,
            t.latent_channels as f32,
            t.scales as f32,
            t.map_classes as f32,
            t.spade_hidden as f32,
            if t.use_map { 1.0 } else { 0.0 },
            self.k as f32,
            self.context_hidden as f32,
            self.radius as f32,
            self.lambda_index as f32,
        ]
    }

    fn from_meta(v: &[f32], lambda: f32) -> Result<Self> {
        if v.len() != META_LEN || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Format(format!("malformed {META_NAME} tensor")));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            transform: TransformConfig {
                n: u(0),
                m: u(1),
                latent_channels: u(2),
                scales: u(3),
                map_classes: u(4),
                spade_hidden: u(5),
                use_map: v[6] != 0.0,
            },
            k: u(7),
            context_hidden: u(8),
            radius: v[9] as i32,
            lambda_index: v[10] as u8,
            lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the configuration stored alongside the weights.
    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let meta = store
            .by_name(META_NAME)
            .ok_or_else(|| Error::MissingParameter(META_NAME.into()))?;
        let lambda = store.by_name("meta.lambda").map_or(0.0, |t| t.data()[0]);
        Self::from_meta(meta.data(), lambda)
    }
}

/// Values produced by one training-mode pass.
#[derive(Clone, Copy, Debug)]
pub struct LcmForward {
    /// Total bits for `ŷ` (noise relaxation).
    pub rate_y: Var,
    pub rate_h: Var,
    pub y: Var,
    pub z_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Lcm {
    pub cfg: LcmConfig,
    pub se: Option<SemanticEncoder>,
    pub ga: Analysis,
    pub gs: Synthesis,
    pub ha: HyperAnalysis,
    pub hs: HyperSynthesis,
    pub cm: ContextModel,
    pub fp: FactorizedPrior,
}

impl Lcm {
    /// Registers `se.*`, `ga.*`, `gs.*`, `ha.*`, `hs.*`, `cm.*`, `fp.*` and
    /// the `meta.*` configuration tensors.
    pub fn new(b: &mut Builder<'_>, cfg: &LcmConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.transform;
        let se = if t.use_map {
            Some(SemanticEncoder::new(b, "se", t.map_classes, t.spade_hidden)?)
        } else {
            None
        };
        let ga = Analysis::new(&mut b.scope("ga"), t)?;
        let gs = Synthesis::new(&mut b.scope("gs"), t)?;
        let ha = HyperAnalysis::new(&mut b.scope("ha"), t)?;
        let hs = HyperSynthesis::new(&mut b.scope("hs"), t)?;
        let layout = SliceLayout::new(t.m, cfg.k)?;
        let cm = ContextModel::new(&mut b.scope("cm"), layout, 2 * t.m, cfg.context_hidden)?;
        let fp = FactorizedPrior::new(b, "fp", t.hyper_channels())?;
        let mut meta = b.scope("meta");
        meta.buffer("lcm", &[META_LEN], 0.0)?;
        meta.buffer("lambda", &[1], cfg.lambda)?;
        Ok(Self {
            cfg: cfg.clone(),
            se,
            ga,
            gs,
            ha,
            hs,
            cm,
            fp,
        })
    }

    pub fn init(cfg: &LcmConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lcm = Self::new(&mut Builder::new(&mut store, &mut rng, ""), cfg)?;
        store
            .by_name_mut(META_NAME)
            .expect("registered above")
            .data_mut()
            .copy_from_slice(&cfg.to_meta());
        Ok((lcm, store))
    }

    /// Rebuilds a model from checkpoint contents, configuration included.
    pub fn from_store(loaded: &ParamStore<f32>) -> Result<(Self, ParamStore<f32>)> {
        let cfg = LcmConfig::from_store(loaded)?;
        let (lcm, mut store) = Self::init(&cfg, 0)?;
        store.restore_from(loaded)?;
        Ok((lcm, store))
    }

    /// Records the rate-distortion weight the model was trained for.
    pub fn set_lambda(&mut self, store: &mut ParamStore<f32>, index: u8, lambda: f32) {
        self.cfg.lambda_index = index;
        self.cfg.lambda = lambda;
        if let Some(t) = store.by_name_mut(META_NAME) {
            t.data_mut().copy_from_slice(&self.cfg.to_meta());
        }
        if let Some(t) = store.by_name_mut("meta.lambda") {
            t.data_mut()[0] = lambda;
        }
    }

    /// Latent-resolution semantic features from a batch of one-hot maps.
    pub fn semantic<T: Scalar>(&self, t: &mut Tape<'_, T>, one_hot: Option<Var>, latent_hw: (usize, usize)) -> Result<Option<Var>> {
        match (&self.se, one_hot) {
            (Some(se), Some(oh)) => Ok(Some(se.forward(t, oh, latent_hw)?)),
            (Some(_), None) => Err(Error::Config("this model is map-conditioned; a map is required".into())),
            (None, _) => Ok(None),
        }
    }

    /// Checks a map against the model and image geometry.
    pub fn check_map(&self, map: Option<&MapRaster>, width: usize, height: usize) -> Result<()> {
        if !self.cfg.transform.use_map {
            return Ok(());
        }
        let map = map.ok_or_else(|| Error::Config("this model is map-conditioned; a map is required".into()))?;
        if map.width() != width || map.height() != height {
            return Err(Error::shape(
                "map",
                format!("map {}x{} for image {width}x{height}", map.width(), map.height()),
            ));
        }
        if map.num_classes() != self.cfg.transform.map_classes {
            return Err(Error::shape(
                "map",
                format!("{} classes, model expects {}", map.num_classes(), self.cfg.transform.map_classes),
            ));
        }
        Ok(())
    }

    /// Training pass: noise-relaxed rates and an STE reconstruction path.
    pub fn forward_train<T: Scalar, R: Rng>(
        &self,
        t: &mut Tape<'_, T>,
        z: Var,
        one_hot: Option<Var>,
        rng: &mut R,
    ) -> Result<LcmForward> {
        let (n, _, h, w) = t.value(z).dims4()?;
        let sem = self.semantic(t, one_hot, (h, w))?;
        let y = self.ga.forward(t, z, sem)?;
        let hy = self.ha.forward(t, y)?;
        let (_, _, hh, hw) = t.value(hy).dims4()?;
        let (mu_h, sigma_h) = self.fp.field(t, n, hh, hw)?;
        let rate_h = estimate_rate(t, hy, mu_h, sigma_h, RateMode::Noise, rng)?;
        let h_hat = ste_quantize(t, hy)?;
        let gc = self.hs.forward(t, h_hat)?;
        let layout = self.cm.layout().clone();
        let mut decoded = Vec::with_capacity(layout.k());
        let mut rate_y = None;
        for i in 0..layout.k() {
            let r = layout.range(i);
            let yi = t.narrow(y, 1, r.start, r.len())?;
            let (mu, sigma) = self.cm.predict(t, gc, &decoded, i)?;
            let bits = estimate_rate(t, yi, mu, sigma, RateMode::Noise, rng)?;
            rate_y = Some(match rate_y {
                Some(acc) => t.add(acc, bits)?,
                None => bits,
            });
            decoded.push(ste_quantize(t, yi)?);
        }
        let y_hat = if decoded.len() == 1 { decoded[0] } else { t.concat(&decoded, 1)? };
        let z_hat = self.gs.forward(t, y_hat, sem)?;
        Ok(LcmForward {
            rate_y: rate_y.expect("at least one slice"),
            rate_h,
            y,
            z_hat,
        })
    }
}

/// Serialized checkpoint bytes; the model hash is computed over these.
pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    Ok(buf)
}

/// FNV-1a over the serialized checkpoint.
pub fn model_hash(store: &ParamStore<f32>) -> Result<u64> {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(&checkpoint_bytes(store)?);
    Ok(h.finish())
}

/// `1 × classes × H × W` one-hot planes, or `None` for map-free models.
pub fn one_hot_input<T: Scalar>(lcm: &Lcm, map: Option<&MapRaster>) -> Option<Tensor<T>> {
    if lcm.cfg.transform.use_map {
        map.map(|m| m.one_hot())
    } else {
        None
    }
}
