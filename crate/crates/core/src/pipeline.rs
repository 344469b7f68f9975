//! Image-level compression: pixel autoencoder around the latent codec, with
//! a choice of reconstruction backend.

use std::fmt;
use std::str::FromStr;

use crate::autoencoder::PixelAutoencoder;
use crate::codec::{compress, decompress_bytes, Compressed, LcmModel};
use crate::data::{ImageBuffer, MapRaster};
use crate::diffusion::{ddpm_sample, Denoiser, DiffusionSample, Guided, NoiseSchedule};
use crate::error::{Error, Result, StageExt};
use crate::exec::map_slice;
use crate::tensor::{ParamStore, Tensor};

/// How the decoded latent `ẑ` becomes pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// `x̂ = D(ẑ)` directly.
    PixelDecoder,
    /// `x̂ = D(z̃0)` with `z̃0` sampled by the conditional denoiser.
    Diffusion { steps: usize, seed: u64 },
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::PixelDecoder => f.write_str("pixel-decoder"),
            Backend::Diffusion { steps, .. } => write!(f, "diffusion-{steps}"),
        }
    }
}

/// Parses the backend name only; steps and seed come from separate flags.
impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel-decoder" => Ok(Backend::PixelDecoder),
            "diffusion" => Ok(Backend::Diffusion { steps: 50, seed: 0 }),
            _ => Err(Error::Config(format!("unknown backend `{s}` (pixel-decoder | diffusion)"))),
        }
    }
}

/// Borrowed models for one end-to-end configuration.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub ae: &'a PixelAutoencoder,
    pub ae_store: &'a ParamStore<f32>,
    pub lcm: &'a LcmModel,
    pub denoiser: Option<&'a Denoiser>,
}

impl Pipeline<'_> {
    fn map_for<'m>(&self, map: Option<&'m MapRaster>) -> Option<&'m MapRaster> {
        map.filter(|_| self.lcm.cfg().transform.use_map)
    }

    pub fn compress(&self, image: &ImageBuffer, map: Option<&MapRaster>) -> Result<Compressed> {
        let z = self.ae.encode_image(self.ae_store, image).stage("encode")?;
        compress(self.lcm, &z, self.map_for(map), image.width(), image.height())
    }

    /// Decodes a stream to the latent `ẑ` and the image size from its header.
    pub fn decode_latent(&self, bytes: &[u8], map: Option<&MapRaster>) -> Result<(Tensor<f32>, usize, usize)> {
        let d = decompress_bytes(self.lcm, bytes, self.map_for(map))?;
        Ok((d.z_hat, d.header.width as usize, d.header.height as usize))
    }

    pub fn reconstruct(&self, z_hat: &Tensor<f32>, map: Option<&MapRaster>, backend: Backend) -> Result<ImageBuffer> {
        let z = match backend {
            Backend::PixelDecoder => z_hat.clone(),
            Backend::Diffusion { steps, seed } => {
                let den = self
                    .denoiser
                    .ok_or_else(|| Error::Config("the diffusion backend needs a denoiser checkpoint".into()))?;
                let map = if den.cfg().use_map { map } else { None };
                let g = Guided::new(den, z_hat, map)?;
                ddpm_sample(&g, &NoiseSchedule::default(), z_hat.shape(), steps, seed).stage("diffusion")?
            }
        };
        self.ae.decode_latent(self.ae_store, &z).stage("decode")
    }

    pub fn decompress(&self, bytes: &[u8], map: Option<&MapRaster>, backend: Backend) -> Result<ImageBuffer> {
        let (z_hat, w, h) = self.decode_latent(bytes, map)?;
        let img = self.reconstruct(&z_hat, map, backend)?;
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Format(format!(
                "decoded {}x{} but the stream declares {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }

    /// Stage-2 training data: each clean latent with the `ẑ` the frozen
    /// codec produces for it.
    pub fn diffusion_samples(&self, pairs: &[(ImageBuffer, MapRaster)]) -> Result<Vec<DiffusionSample>> {
        map_slice(pairs, |(img, map)| {
            let z0 = self.ae.encode_image(self.ae_store, img)?;
            let c = compress(self.lcm, &z0, self.map_for(Some(map)), img.width(), img.height())?;
            Ok(DiffusionSample {
                z0,
                z_hat: c.z_hat,
                map: map.clone(),
            })
        })
        .into_iter()
        .collect()
    }
}
