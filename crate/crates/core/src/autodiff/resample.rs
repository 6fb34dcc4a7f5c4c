//! Separable bilinear interpolation with half-pixel centers.

use crate::tensor::Float;

/// Per-output-index source taps along one axis: `(lo, hi, weight_of_hi)`.
#[derive(Clone, Debug)]
pub(crate) struct Taps<T> {
    pub src_len: usize,
    pub taps: Vec<(usize, usize, T)>,
}

impl<T: Float> Taps<T> {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(src_len - 1);
                let hi = (lo + 1).min(src_len - 1);
                let frac = if hi == lo { 0.0 } else { src - lo as f64 };
                (lo, hi, T::from_f64_lossy(frac))
            })
            .collect();
        Taps { src_len, taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }
}

pub(crate) fn forward<T: Float>(x: &[T], planes: usize, rows: &Taps<T>, cols: &Taps<T>) -> Vec<T> {
    let (h, w) = (rows.src_len, cols.src_len);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows.taps {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &cols.taps {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

pub(crate) fn backward<T: Float>(dy: &[T], planes: usize, rows: &Taps<T>, cols: &Taps<T>) -> Vec<T> {
    let (h, w) = (rows.src_len, cols.src_len);
    let (oh, ow) = (rows.len(), cols.len());
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                let d = g[oy * ow + ox];
                let (top, bottom) = (d * (T::one() - fy), d * fy);
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bottom * (T::one() - fx);
                dst[y1 * w + x1] += bottom * fx;
            }
        }
    }
    dx
}
