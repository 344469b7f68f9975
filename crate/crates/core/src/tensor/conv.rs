//! im2col convolution kernels.

use super::{matmul_acc, Scalar};
use crate::error::{Error, Result};
use crate::exec;

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    /// Clamp to the nearest edge pixel. Keeps constant fields constant.
    Replicate,
}

/// Source index per output position for one kernel tap along one axis.
#[derive(Clone, Debug)]
struct Tap {
    /// `None` marks a zero-padded position.
    idx: Vec<Option<usize>>,
    /// Outputs `lo..hi` read in-bounds positions `base + (o - lo)·stride`.
    lo: usize,
    hi: usize,
    base: usize,
}

impl Tap {
    fn new(size: usize, out: usize, kk: usize, stride: usize, pad: usize, mode: PadMode) -> Self {
        let raw = |o: usize| (o * stride + kk) as isize - pad as isize;
        let idx = (0..out)
            .map(|o| {
                let p = raw(o);
                if p >= 0 && (p as usize) < size {
                    Some(p as usize)
                } else {
                    match mode {
                        PadMode::Zeros => None,
                        PadMode::Replicate => Some(p.clamp(0, size as isize - 1) as usize),
                    }
                }
            })
            .collect();
        let inside = |o: &usize| {
            let p = raw(*o);
            p >= 0 && (p as usize) < size
        };
        let lo = (0..out).find(inside).unwrap_or(out);
        let hi = (lo..out).find(|o| !inside(o)).unwrap_or(out);
        let base = if lo < hi { raw(lo) as usize } else { 0 };
        Self { idx, lo, hi, base }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    stride: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::shape("conv2d", "stride and kernel must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} with padding {pad} smaller than kernel {k}"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            k,
            ho,
            wo,
            stride,
            rows: (0..k).map(|kk| Tap::new(h, ho, kk, stride, pad, mode)).collect(),
            cols: (0..k).map(|kk| Tap::new(w, wo, kk, stride, pad, mode)).collect(),
        })
    }

    pub fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let l = self.out_len();
        let hw = self.h * self.w;
        let s = self.stride;
        for ci in 0..self.c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut col[row * l..(row + 1) * l];
                    let tap = &self.cols[kw];
                    for (oh, ih) in self.rows[kh].idx.iter().enumerate() {
                        let out = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        let Some(ih) = ih else {
                            out.fill(T::zero());
                            continue;
                        };
                        let src = &plane[ih * self.w..(ih + 1) * self.w];
                        for o in (0..tap.lo).chain(tap.hi..self.wo) {
                            out[o] = tap.idx[o].map_or(T::zero(), |iw| src[iw]);
                        }
                        let n = tap.hi - tap.lo;
                        if s == 1 {
                            out[tap.lo..tap.hi].copy_from_slice(&src[tap.base..tap.base + n]);
                        } else {
                            for (j, o) in out[tap.lo..tap.hi].iter_mut().enumerate() {
                                *o = src[tap.base + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let l = self.out_len();
        let hw = self.h * self.w;
        let s = self.stride;
        for ci in 0..self.c {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &col[row * l..(row + 1) * l];
                    let tap = &self.cols[kw];
                    for (oh, ih) in self.rows[kh].idx.iter().enumerate() {
                        let Some(ih) = ih else { continue };
                        let line = &src[oh * self.wo..(oh + 1) * self.wo];
                        let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                        for o in (0..tap.lo).chain(tap.hi..self.wo) {
                            if let Some(iw) = tap.idx[o] {
                                dst[iw] = dst[iw] + line[o];
                            }
                        }
                        let n = tap.hi - tap.lo;
                        if s == 1 {
                            for (d, g) in dst[tap.base..tap.base + n].iter_mut().zip(&line[tap.lo..tap.hi]) {
                                *d = *d + *g;
                            }
                        } else {
                            for (j, g) in line[tap.lo..tap.hi].iter().enumerate() {
                                let d = &mut dst[tap.base + j * s];
                                *d = *d + *g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over a batch. `x` is `N×C×H×W`, `weight` is `O×C×k×k`.
pub(crate) fn forward<T: Scalar>(
    geom: &ConvGeom,
    n: usize,
    o: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_per = geom.c * geom.h * geom.w;
    let l = geom.out_len();
    let ckk = geom.ckk();
    let parts = exec::map_indexed(n, |b| {
        let mut col = vec![T::zero(); ckk * l];
        geom.im2col(&x[b * in_per..(b + 1) * in_per], &mut col);
        let mut out = vec![T::zero(); o * l];
        if let Some(bias) = bias {
            for (oc, row) in out.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        matmul_acc(o, ckk, l, weight, false, &col, false, &mut out, T::one());
        out
    });
    parts.concat()
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    geom: &ConvGeom,
    n: usize,
    o: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let in_per = geom.c * geom.h * geom.w;
    let l = geom.out_len();
    let ckk = geom.ckk();
    let parts = exec::map_indexed(n, |b| {
        let dy_b = &dy[b * o * l..(b + 1) * o * l];
        let dw = need_dw.then(|| {
            let mut col = vec![T::zero(); ckk * l];
            geom.im2col(&x[b * in_per..(b + 1) * in_per], &mut col);
            let mut dw = vec![T::zero(); o * ckk];
            matmul_acc(o, l, ckk, dy_b, false, &col, true, &mut dw, T::zero());
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcol = vec![T::zero(); ckk * l];
            matmul_acc(ckk, o, l, weight, true, dy_b, false, &mut dcol, T::zero());
            let mut dx = vec![T::zero(); in_per];
            geom.col2im(&dcol, &mut dx);
            dx
        });
        let db = need_db.then(|| {
            dy_b.chunks(l)
                .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                .collect::<Vec<T>>()
        });
        (dx, dw, db)
    });

    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_per));
    let mut dw_all: Option<Vec<T>> = need_dw.then(|| vec![T::zero(); o * ckk]);
    let mut db_all: Option<Vec<T>> = need_db.then(|| vec![T::zero(); o]);
    for (dx, dw, db) in parts {
        if let (Some(all), Some(part)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&part);
        }
        if let (Some(all), Some(part)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&part).for_each(|(a, p)| *a = *a + *p);
        }
        if let (Some(all), Some(part)) = (db_all.as_mut(), db) {
            all.iter_mut().zip(&part).for_each(|(a, p)| *a = *a + *p);
        }
    }
    ConvGrads {
        dx: dx_all,
        dw: dw_all,
        db: db_all,
    }
}
