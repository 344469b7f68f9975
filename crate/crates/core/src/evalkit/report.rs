//! Per-image, per-λ evaluation and its CSV outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{miou, palette_segment, psnr, RDCurve};
use crate::autoencoder::PixelAutoencoder;
use crate::codec::LcmModel;
use crate::data::{ImageBuffer, MapRaster};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::pipeline::{Backend, Pipeline};
use crate::tensor::ParamStore;

/// Column names of `report.csv`.
pub const REPORT_HEADER: &str = "image,lambda_index,lambda,backend,bpp,psnr,miou";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub backend: Backend,
    /// Segment reconstructions with the palette segmenter and score them
    /// against the maps.
    pub segment: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            backend: Backend::PixelDecoder,
            segment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: usize,
    pub lambda_index: u8,
    pub lambda: f32,
    /// From the container length, as reported by the codec.
    pub bpp: f64,
    pub psnr: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub backend: Backend,
    /// Image-major within each λ.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let miou = r.miou.map_or(String::new(), |m| format!("{m:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.4},{}",
                r.image, r.lambda_index, r.lambda, self.backend, r.bpp, r.psnr, miou
            );
        }
        s
    }

    /// Mean bpp, PSNR and mIoU per λ index, in λ-index order.
    pub fn per_lambda(&self) -> Vec<(u8, f32, f64, f64, Option<f64>)> {
        let mut keys: Vec<(u8, f32)> = self.rows.iter().map(|r| (r.lambda_index, r.lambda)).collect();
        keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        keys.dedup();
        keys.into_iter()
            .map(|(li, l)| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.lambda_index == li && r.lambda == l).collect();
                let n = rows.len() as f64;
                let miou = rows.iter().map(|r| r.miou).sum::<Option<f64>>().map(|m| m / n);
                (
                    li,
                    l,
                    rows.iter().map(|r| r.bpp).sum::<f64>() / n,
                    rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                    miou,
                )
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("lambda_index,lambda,bpp,psnr,miou\n");
        for (li, l, bpp, p, m) in self.per_lambda() {
            let m = m.map_or(String::new(), |m| format!("{m:.6}"));
            let _ = writeln!(s, "{li},{l},{bpp:.6},{p:.4},{m}");
        }
        s
    }

    /// Mean (bpp, PSNR) per λ, when those rates are distinct.
    pub fn rd_curve(&self) -> Result<RDCurve> {
        let mut pts: Vec<(f64, f64)> = self.per_lambda().into_iter().map(|p| (p.2, p.3)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        RDCurve::new(format!("psnr-{}", self.backend), pts)
    }

    /// Writes `report.csv`, `summary.csv` and, when defined, `rd_psnr.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = vec![dir.join("report.csv"), dir.join("summary.csv")];
        std::fs::write(&out[0], self.to_csv())?;
        std::fs::write(&out[1], self.summary_csv())?;
        match self.rd_curve() {
            Ok(c) => {
                let p = dir.join("rd_psnr.csv");
                c.save(&p)?;
                out.push(p);
            }
            Err(e) => log::warn!("no RD curve written: {e}"),
        }
        Ok(out)
    }
}

/// Compresses and reconstructs every pair under every codec model. With
/// the diffusion backend, image `i` samples with seed `seed + i`.
pub fn eval_run(
    ae: &PixelAutoencoder,
    ae_store: &ParamStore<f32>,
    models: &[LcmModel],
    denoiser: Option<&Denoiser>,
    pairs: &[(ImageBuffer, MapRaster)],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if models.is_empty() || pairs.is_empty() {
        return Err(Error::Config("evaluation needs at least one model and one image".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * pairs.len());
    for lcm in models {
        let p = Pipeline {
            ae,
            ae_store,
            lcm,
            denoiser,
        };
        let per_image = map_indexed(pairs.len(), |i| -> Result<EvalRow> {
            let (img, map) = &pairs[i];
            let c = p.compress(img, Some(map))?;
            let backend = match opts.backend {
                Backend::Diffusion { steps, seed } => Backend::Diffusion {
                    steps,
                    seed: seed.wrapping_add(i as u64),
                },
                b => b,
            };
            let rec = p.decompress(&c.bytes, Some(map), backend)?;
            Ok(EvalRow {
                image: i,
                lambda_index: c.container.header.lambda_index,
                lambda: lcm.cfg().lambda,
                bpp: c.report.bpp,
                psnr: psnr(img, &rec)?,
                miou: if opts.segment {
                    Some(miou(&palette_segment(&rec), map)?)
                } else {
                    None
                },
            })
        });
        for r in per_image {
            rows.push(r?);
        }
    }
    Ok(EvalReport {
        backend: opts.backend,
        rows,
    })
}
