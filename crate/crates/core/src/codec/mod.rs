//! Latent compression: `z → y → bitstream → ŷ → ẑ`.

mod container;
mod model;

use std::path::Path;

pub use container::{BitstreamContainer, Header, SectionSizes, FLAG_MAP, HEADER_LEN, MAGIC, VERSION};
pub use model::{checkpoint_bytes, model_hash, Lcm, LcmConfig, LcmForward, META_NAME};

use crate::data::MapRaster;
use crate::entropy::{discrete_bits, GaussianField};
use crate::error::{Error, Result, StageExt};
use crate::range_coder::{decode_field, encode_field, to_symbols};
use crate::tensor::{load_checkpoint, save_checkpoint, Mode, ParamStore, Tape, Tensor, Var};

/// A compression model with its weights and their hash.
#[derive(Clone, Debug)]
pub struct LcmModel {
    pub net: Lcm,
    pub store: ParamStore<f32>,
    hash: u64,
}

impl LcmModel {
    pub fn new(net: Lcm, store: ParamStore<f32>) -> Result<Self> {
        let hash = model_hash(&store)?;
        Ok(Self { net, store, hash })
    }

    pub fn init(cfg: &LcmConfig, seed: u64) -> Result<Self> {
        let (net, store) = Lcm::init(cfg, seed)?;
        Self::new(net, store)
    }

    pub fn from_store(loaded: &ParamStore<f32>) -> Result<Self> {
        let (net, store) = Lcm::from_store(loaded)?;
        Self::new(net, store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn cfg(&self) -> &LcmConfig {
        &self.net.cfg
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    /// Recomputes the hash after the weights were modified in place.
    pub fn rehash(&mut self) -> Result<()> {
        self.hash = model_hash(&self.store)?;
        Ok(())
    }
}

/// Size and rate accounting for one compressed latent.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressReport {
    /// `8 · file bytes / (W · H)`.
    pub bpp: f64,
    pub file_bytes: usize,
    pub sections: SectionSizes,
    /// Model estimate `Σ −log₂ p` for `ĥ` and each slice of `ŷ`.
    pub estimated_hyper_bits: f64,
    pub estimated_slice_bits: Vec<f64>,
    /// Symbols whose probability hit the floor.
    pub clamped: usize,
}

impl CompressReport {
    pub fn estimated_bits(&self) -> f64 {
        self.estimated_hyper_bits + self.estimated_slice_bits.iter().sum::<f64>()
    }

    /// Coded payload bits (hyper plus slice sections, no framing).
    pub fn actual_bits(&self) -> f64 {
        8.0 * (self.sections.hyper + self.sections.slices.iter().sum::<usize>()) as f64
    }

    pub fn header_bits(&self) -> f64 {
        8.0 * self.sections.framing as f64
    }
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub container: BitstreamContainer,
    pub bytes: Vec<u8>,
    /// Encoder-side reconstruction; equal to what the decoder produces.
    pub z_hat: Tensor<f32>,
    pub symbols: Symbols,
    pub report: CompressReport,
}

/// Integer symbols of `ĥ` and of each slice of `ŷ`, in NCHW order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Symbols {
    pub hyper: Vec<i32>,
    pub slices: Vec<Vec<i32>>,
}

#[derive(Clone, Debug)]
pub struct Decompressed {
    pub header: Header,
    pub z_hat: Tensor<f32>,
    pub symbols: Symbols,
}

/// Symbols recovered before a decode failure, for damaged streams.
#[derive(Debug)]
pub struct PartialDecode {
    pub symbols: Symbols,
    pub error: Option<Error>,
}

fn slice_dims(t: &Tape<'_, f32>, v: Var) -> Result<Vec<usize>> {
    Ok(t.shape(v).to_vec())
}

fn symbols_tensor(shape: &[usize], s: &[i32]) -> Result<Tensor<f32>> {
    Tensor::new(shape, s.iter().map(|&v| v as f32).collect())
}

/// Runs the slice schedule shared by encoder and decoder. `code(i, field)`
/// returns slice `i`'s symbols; identical inputs give identical fields on
/// both sides.
fn slice_schedule<F>(t: &mut Tape<'_, f32>, net: &Lcm, gc: Var, shapes: &[Vec<usize>], mut code: F) -> Result<Vec<Var>>
where
    F: FnMut(usize, &GaussianField) -> Result<Vec<i32>>,
{
    let mut decoded = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let (mu, sigma) = net.cm.predict(t, gc, &decoded, i)?;
        let field = GaussianField::from_tape(t, mu, sigma)?;
        let syms = code(i, &field)?;
        decoded.push(t.constant(symbols_tensor(shape, &syms)?)?);
    }
    Ok(decoded)
}

/// Channels `start..start + len` of a `1 × C × H × W` tensor, in f64.
fn channel_range(x: &Tensor<f32>, start: usize, len: usize) -> Vec<f64> {
    let plane = x.shape()[2] * x.shape()[3];
    x.data()[start * plane..(start + len) * plane].iter().map(|&v| v as f64).collect()
}

fn slice_shapes(cfg: &LcmConfig, h: usize, w: usize) -> Vec<Vec<usize>> {
    let layout = crate::entropy::SliceLayout::new(cfg.transform.m, cfg.k).expect("validated config");
    layout.ranges().iter().map(|r| vec![1, r.len(), h, w]).collect()
}

fn latent_geometry(cfg: &LcmConfig, z: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = z.dims4()?;
    let red = cfg.transform.reduction();
    if n != 1 || c != cfg.transform.latent_channels || h % (4 * red) != 0 || w % (4 * red) != 0 {
        return Err(Error::shape(
            "compress",
            format!(
                "latent {:?}; need 1×{}×H×W with H, W multiples of {}",
                z.shape(),
                cfg.transform.latent_channels,
                4 * red
            ),
        ));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize {
        return Err(Error::shape("compress", "latent too large for the container header"));
    }
    Ok((c, h, w))
}

fn one_hot_var(t: &mut Tape<'_, f32>, model: &LcmModel, map: Option<&MapRaster>) -> Result<Option<Var>> {
    match model::one_hot_input::<f32>(&model.net, map) {
        Some(oh) => Ok(Some(t.constant(oh)?)),
        None => Ok(None),
    }
}

/// Compresses a `1 × C × h × w` latent of a `width × height` image.
pub fn compress(model: &LcmModel, z0: &Tensor<f32>, map: Option<&MapRaster>, width: usize, height: usize) -> Result<Compressed> {
    let cfg = model.cfg();
    let (c, h, w) = latent_geometry(cfg, z0).stage("compress")?;
    model.net.check_map(map, width, height).stage("compress")?;
    if width > u32::MAX as usize || height > u32::MAX as usize {
        return Err(Error::shape("compress", "image too large for the container header"));
    }
    let net = &model.net;
    let mut t = Tape::new(&model.store, Mode::Eval);
    let z = t.constant(z0.clone())?;
    let oh = one_hot_var(&mut t, model, map)?;
    let sem = net.semantic(&mut t, oh, (h, w)).stage("semantic")?;
    let y = net.ga.forward(&mut t, z, sem).stage("analysis")?;
    let hy = net.ha.forward(&mut t, y).stage("hyper_analysis")?;
    let (_, _, hh, hw) = t.value(hy).dims4()?;
    let hyper_syms = to_symbols(&t.value(hy).cast::<f64>().into_data()).stage("hyper")?;
    let prior = net.fp.gaussian_field(&model.store, hh, hw)?;
    let hyper_bytes = encode_field(&hyper_syms, &prior, cfg.radius).stage("hyper")?;
    let hyper_f64: Vec<f64> = hyper_syms.iter().map(|&s| s as f64).collect();
    let hyper_est = discrete_bits(&hyper_f64, prior.mu().data(), prior.sigma().data());
    let h_shape = slice_dims(&t, hy)?;
    let h_hat = t.constant(symbols_tensor(&h_shape, &hyper_syms)?)?;
    let gc = net.hs.forward(&mut t, h_hat).stage("hyper_synthesis")?;

    let shapes = slice_shapes(cfg, h / net.cfg.transform.reduction(), w / net.cfg.transform.reduction());
    let layout = net.cm.layout().clone();
    let y_val = t.value(y).clone();
    let mut slice_bytes = Vec::with_capacity(layout.k());
    let mut slice_syms = Vec::with_capacity(layout.k());
    let mut slice_est = Vec::with_capacity(layout.k());
    let mut clamped = hyper_est.clamped;
    let decoded = slice_schedule(&mut t, net, gc, &shapes, |i, field| {
        let r = layout.range(i);
        let syms = to_symbols(&channel_range(&y_val, r.start, r.len()))?;
        slice_bytes.push(encode_field(&syms, field, cfg.radius)?);
        let sf: Vec<f64> = syms.iter().map(|&s| s as f64).collect();
        let est = discrete_bits(&sf, field.mu().data(), field.sigma().data());
        slice_est.push(est.bits);
        clamped += est.clamped;
        slice_syms.push(syms.clone());
        Ok(syms)
    })
    .stage("slices")?;
    let y_hat = if decoded.len() == 1 { decoded[0] } else { t.concat(&decoded, 1)? };
    let z_hat = net.gs.forward(&mut t, y_hat, sem).stage("synthesis")?;
    let z_hat = t.value(z_hat).clone();

    let t_cfg = &cfg.transform;
    let container = BitstreamContainer {
        header: Header {
            flags: if t_cfg.use_map { FLAG_MAP } else { 0 },
            width: width as u32,
            height: height as u32,
            latent_c: c as u8,
            latent_h: h as u16,
            latent_w: w as u16,
            n: t_cfg.n as u16,
            m: t_cfg.m as u16,
            k: cfg.k as u8,
            lambda_index: cfg.lambda_index,
            model_hash: model.hash(),
        },
        hyper: hyper_bytes,
        slices: slice_bytes,
    };
    let bytes = container.to_bytes()?;
    let report = CompressReport {
        bpp: 8.0 * bytes.len() as f64 / (width * height) as f64,
        file_bytes: bytes.len(),
        sections: container.sizes(),
        estimated_hyper_bits: hyper_est.bits,
        estimated_slice_bits: slice_est,
        clamped,
    };
    Ok(Compressed {
        container,
        bytes,
        z_hat,
        symbols: Symbols {
            hyper: hyper_syms,
            slices: slice_syms,
        },
        report,
    })
}

fn check_header(model: &LcmModel, hd: &Header, map: Option<&MapRaster>) -> Result<()> {
    let cfg = model.cfg();
    if hd.model_hash != model.hash() {
        return Err(Error::ModelMismatch(format!(
            "stream was coded with model {:016x}, loaded weights are {:016x}",
            hd.model_hash,
            model.hash()
        )));
    }
    let t = &cfg.transform;
    let expected = (t.use_map, t.n, t.m, cfg.k, t.latent_channels);
    let got = (hd.map_conditioned(), hd.n as usize, hd.m as usize, hd.k as usize, hd.latent_c as usize);
    if expected != got {
        return Err(Error::ModelMismatch(format!(
            "header (map, N, M, K, C) = {got:?}, model has {expected:?}"
        )));
    }
    let red = 4 * t.reduction();
    let (lh, lw) = (hd.latent_h as usize, hd.latent_w as usize);
    if lh == 0 || lw == 0 || lh % red != 0 || lw % red != 0 {
        return Err(Error::Format(format!("latent {lh}x{lw} is not a multiple of {red}")));
    }
    model.net.check_map(map, hd.width as usize, hd.height as usize)
}

/// Decodes symbols and stops at the first failing section, keeping what
/// was recovered before it. The checksum is not consulted.
pub fn decode_partial(model: &LcmModel, c: &BitstreamContainer, map: Option<&MapRaster>) -> Result<(PartialDecode, Option<Tensor<f32>>)> {
    let hd = &c.header;
    check_header(model, hd, map)?;
    let net = &model.net;
    let cfg = model.cfg();
    let (lh, lw) = (hd.latent_h as usize, hd.latent_w as usize);
    let red = cfg.transform.reduction();
    let (yh, yw) = (lh / red, lw / red);
    let (hh, hw) = (yh / 4, yw / 4);
    let mut t = Tape::new(&model.store, Mode::Eval);
    let oh = one_hot_var(&mut t, model, map)?;
    let sem = net.semantic(&mut t, oh, (lh, lw))?;
    let prior = net.fp.gaussian_field(&model.store, hh, hw)?;
    let mut symbols = Symbols::default();
    match decode_field(&c.hyper, &prior, cfg.radius).stage("hyper") {
        Ok(s) => symbols.hyper = s,
        Err(e) => return Ok((PartialDecode { symbols, error: Some(e) }, None)),
    }
    let h_hat = t.constant(symbols_tensor(&[1, cfg.transform.hyper_channels(), hh, hw], &symbols.hyper)?)?;
    let gc = net.hs.forward(&mut t, h_hat)?;
    let shapes = slice_shapes(cfg, yh, yw);
    let mut error = None;
    let decoded = slice_schedule(&mut t, net, gc, &shapes, |i, field| {
        let s = decode_field(&c.slices[i], field, cfg.radius)?;
        symbols.slices.push(s.clone());
        Ok(s)
    });
    let decoded = match decoded.stage("slices") {
        Ok(d) => d,
        Err(e) => {
            error = Some(e);
            Vec::new()
        }
    };
    if error.is_some() {
        return Ok((PartialDecode { symbols, error }, None));
    }
    let y_hat = if decoded.len() == 1 { decoded[0] } else { t.concat(&decoded, 1)? };
    let z_hat = net.gs.forward(&mut t, y_hat, sem).stage("synthesis")?;
    let z_hat = t.value(z_hat).clone();
    Ok((PartialDecode { symbols, error: None }, Some(z_hat)))
}

pub fn decompress(model: &LcmModel, c: &BitstreamContainer, map: Option<&MapRaster>) -> Result<Decompressed> {
    let (partial, z_hat) = decode_partial(model, c, map).stage("decompress")?;
    if let Some(e) = partial.error {
        return Err(e);
    }
    Ok(Decompressed {
        header: c.header.clone(),
        z_hat: z_hat.expect("no error implies a reconstruction"),
        symbols: partial.symbols,
    })
}

/// Parses (with checksum) and decodes a `.magc` byte stream.
pub fn decompress_bytes(model: &LcmModel, bytes: &[u8], map: Option<&MapRaster>) -> Result<Decompressed> {
    let c = BitstreamContainer::parse(bytes).stage("container")?;
    decompress(model, &c, map)
}

#[cfg(test)]
mod tests;
