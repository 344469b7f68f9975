//! Metrics: PSNR, FID patch geometry, mIoU and Bjontegaard deltas.

mod bd;
mod report;

pub use bd::{bd_quality, bd_quality_with, bd_rate, bd_rate_with, BdMethod, RDCurve};
pub use report::{eval_run, EvalOptions, EvalReport, EvalRow, REPORT_HEADER};

use crate::data::{ImageBuffer, MapRaster, PALETTE};
use crate::error::{Error, Result};

/// PSNR in dB for images in `[0, 1]`. Identical inputs give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "psnr",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / a.data().len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Top-left corner of an `f × f` window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatchOrigin {
    pub x: usize,
    pub y: usize,
}

/// Window origins for FID-style patch extraction: the aligned `f` grid,
/// then the same grid shifted by `f/2` in both directions.
pub fn patch_origins(width: usize, height: usize, f: usize) -> Result<Vec<PatchOrigin>> {
    if f < 2 || f > width.min(height) {
        return Err(Error::Config(format!("patch size {f} does not fit a {width}x{height} image")));
    }
    let (nx, ny) = (width / f, height / f);
    let mut out = Vec::with_capacity(nx * ny + (nx - 1) * (ny - 1));
    for j in 0..ny {
        for i in 0..nx {
            out.push(PatchOrigin { x: i * f, y: j * f });
        }
    }
    let h = f / 2;
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            out.push(PatchOrigin { x: i * f + h, y: j * f + h });
        }
    }
    Ok(out)
}

/// `⌊H/f⌋·⌊W/f⌋ + (⌊H/f⌋−1)·(⌊W/f⌋−1)`.
pub fn patch_count(width: usize, height: usize, f: usize) -> Result<usize> {
    Ok(patch_origins(width, height, f)?.len())
}

/// Crops every window from [`patch_origins`].
pub fn extract_patches(image: &ImageBuffer, f: usize) -> Result<Vec<ImageBuffer>> {
    let (w, h) = (image.width(), image.height());
    patch_origins(w, h, f)?
        .into_iter()
        .map(|o| {
            let mut data = Vec::with_capacity(3 * f * f);
            for c in 0..3 {
                let plane = &image.data()[c * w * h..(c + 1) * w * h];
                for y in o.y..o.y + f {
                    data.extend_from_slice(&plane[y * w + o.x..y * w + o.x + f]);
                }
            }
            ImageBuffer::new(f, f, data)
        })
        .collect()
}

/// `C × C` counts, rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &MapRaster, gt: &MapRaster) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::shape(
                "miou",
                format!("{}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
            ));
        }
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Config(format!("class id {} outside {} classes", p.max(g), self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Config("confusion matrices over different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU of class `k`, or `None` when it appears in neither raster.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let tp = self.get(k, k);
        let gt: u64 = (0..self.classes).map(|j| self.get(k, j)).sum();
        let pred: u64 = (0..self.classes).map(|i| self.get(i, k)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over classes present in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes).filter_map(|k| self.iou(k)).collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

pub fn miou(pred: &MapRaster, gt: &MapRaster) -> Result<f64> {
    let classes = pred.num_classes().max(gt.num_classes());
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.miou())
}

/// Labels each pixel with the nearest palette colour. A stand-in
/// segmenter for synthetic scenes.
pub fn palette_segment(image: &ImageBuffer) -> MapRaster {
    let (w, h) = (image.width(), image.height());
    let classes = (0..w * h)
        .map(|i| {
            let px = [image.data()[i], image.data()[w * h + i], image.data()[2 * w * h + i]];
            let dist = |c: &[f32; 3]| c.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
            (0..PALETTE.len())
                .min_by(|&a, &b| dist(&PALETTE[a]).total_cmp(&dist(&PALETTE[b])))
                .unwrap_or(0) as u8
        })
        .collect();
    MapRaster::new(w, h, classes, PALETTE.len()).expect("palette ids fit the palette")
}
