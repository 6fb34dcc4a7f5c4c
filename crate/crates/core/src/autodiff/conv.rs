//! Convolution kernels: im2col/col2im lowering onto GEMM.
//!
//! A dilated convolution reads `input[i·stride + k·dilation − pad]` for tap `k`,
//! so dilation only changes which input pixel each column of the lowered
//! matrix gathers; the GEMM itself is the same as for an ordinary convolution.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Zero padding applied to both sides of each spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Explicit padding in pixels.
    Zeros(usize),
    /// `(effective_kernel - 1) / 2`, which preserves size at stride 1 for odd kernels.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(stride: usize, dilation: usize, padding: Padding) -> Self {
        ConvParams {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1, no dilation, size-preserving padding.
    pub fn same() -> Self {
        Self::new(1, 1, Padding::Same)
    }
}

/// Geometry of a lowered convolution from `(cin, h, w)` to `(cout, ho, wo)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn effective_extent(k: usize, dilation: usize) -> usize {
    (k - 1) * dilation + 1
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        params: ConvParams,
    ) -> Result<Self> {
        if params.stride == 0 {
            return Err(Error::invalid(op, "stride must be at least 1"));
        }
        if params.dilation == 0 {
            return Err(Error::invalid(op, "dilation rate must be at least 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(op, "empty kernel"));
        }
        let eff_h = effective_extent(kh, params.dilation);
        let eff_w = effective_extent(kw, params.dilation);
        let (pad_h, pad_w) = match params.padding {
            Padding::Zeros(p) => (p, p),
            Padding::Same => ((eff_h - 1) / 2, (eff_w - 1) / 2),
        };
        if h + 2 * pad_h < eff_h || w + 2 * pad_w < eff_w {
            return Err(Error::invalid(
                op,
                format!(
                    "effective kernel {eff_h}x{eff_w} exceeds padded input {}x{}",
                    h + 2 * pad_h,
                    w + 2 * pad_w
                ),
            ));
        }
        Ok(ConvGeometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: params.stride,
            dilation: params.dilation,
            pad_h,
            pad_w,
            ho: (h + 2 * pad_h - eff_h) / params.stride + 1,
            wo: (w + 2 * pad_w - eff_w) / params.stride + 1,
        })
    }

    /// Rows of the lowered matrix: one per (channel, tap).
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the lowered matrix: one per output pixel.
    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    /// A 1×1, stride-1, unpadded conv reads the input plane as-is.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Input coordinate read by output index `o` at tap `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Gathers one sample `(cin, h, w)` into a `patch_len × out_plane` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_plane();
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    for c in 0..g.cin {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match ConvGeometry::source(oy, ki, g.stride, g.dilation, g.pad_h, g.h) {
                        None => out_row.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match ConvGeometry::source(ox, kj, g.stride, g.dilation, g.pad_w, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a lowered matrix back onto one sample `(cin, h, w)`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.cin {
        let plane = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeometry::source(oy, ki, g.stride, g.dilation, g.pad_h, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = ConvGeometry::source(ox, kj, g.stride, g.dilation, g.pad_w, g.w) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geometry<T: Float>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    params: ConvParams,
) -> Result<(usize, ConvGeometry)> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, kcin, kh, kw] = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::shape(
            op,
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    Ok((n, ConvGeometry::new(op, cin, h, w, cout, kh, kw, params)?))
}

pub(crate) fn check_bias<T: Float>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => Err(Error::shape(
            op,
            format!("bias has {} values for {channels} channels", b.numel()),
        )),
        _ => Ok(()),
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    n: usize,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..n {
        let x = &input.data()[b * g.cin * g.in_plane()..(b + 1) * g.cin * g.in_plane()];
        let lowered: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        let y = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        T::gemm(g.cout, k, p, kernel.data(), false, lowered, false, T::zero(), y);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new([n, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    n: usize,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let in_len = g.cin * g.in_plane();
    let mut d_input = need[0].then(|| vec![T::zero(); n * in_len]);
    let mut d_kernel = need[1].then(|| vec![T::zero(); g.cout * k]);
    let mut d_bias = need[2].then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let dy = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dk) = d_kernel.as_mut() {
            let x = &input.data()[b * in_len..(b + 1) * in_len];
            let lowered: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut cols);
                &cols
            };
            T::gemm(g.cout, p, k, dy, false, lowered, true, T::one(), dk);
        }
        if let Some(db) = d_bias.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, kernel.data(), true, dy, false, T::zero(), dx);
            } else {
                T::gemm(k, g.cout, p, kernel.data(), true, dy, false, T::zero(), &mut cols);
                col2im(&cols, g, dx);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Geometry of a transposed convolution, expressed as the convolution it is
/// the adjoint of: that convolution maps the (larger) output back to the input.
pub(crate) fn conv_transpose_geometry<T: Float>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(usize, ConvGeometry)> {
    let [n, cin, h, w] = input.dims4()?;
    let [kcin, cout, kh, kw] = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::shape(
            op,
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be at least 1"));
    }
    if output_padding >= stride {
        return Err(Error::invalid(op, "output padding must be smaller than stride"));
    }
    if h == 0 || w == 0 {
        return Err(Error::Empty(op));
    }
    let grow = |len: usize, k: usize| -> Result<usize> {
        ((len - 1) * stride + k + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::invalid(op, "padding larger than the output"))
    };
    let (ho, wo) = (grow(h, kh)?, grow(w, kw)?);
    let g = ConvGeometry::new(
        op,
        cout,
        ho,
        wo,
        cin,
        kh,
        kw,
        ConvParams::new(stride, 1, Padding::Zeros(padding)),
    )?;
    debug_assert_eq!((g.ho, g.wo), (h, w));
    Ok((n, g))
}

/// Forward transposed convolution: `g.cout` input channels scattered onto
/// `g.cin` output channels of size `g.h × g.w`.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    n: usize,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let out_len = g.cin * g.in_plane();
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let y = &input.data()[b * g.cout * p..(b + 1) * g.cout * p];
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            T::gemm(k, g.cout, p, kernel.data(), true, y, false, T::zero(), dst);
        } else {
            T::gemm(k, g.cout, p, kernel.data(), true, y, false, T::zero(), &mut cols);
            col2im(&cols, g, dst);
        }
        if let Some(bias) = bias {
            let plane = g.in_plane();
            for (c, &bv) in bias.data().iter().enumerate() {
                dst[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new([n, g.cin, g.h, g.w], out).expect("transposed conv output shape")
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    n: usize,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let out_len = g.cin * g.in_plane();
    let mut d_input = need[0].then(|| vec![T::zero(); n * g.cout * p]);
    let mut d_kernel = need[1].then(|| vec![T::zero(); g.cout * k]);
    let mut d_bias = need[2].then(|| vec![T::zero(); g.cin]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..n {
        let dout = &grad_out[b * out_len..(b + 1) * out_len];
        let lowered: &[T] = if g.is_pointwise() {
            dout
        } else {
            im2col(dout, g, &mut cols);
            &cols
        };
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[b * g.cout * p..(b + 1) * g.cout * p];
            T::gemm(g.cout, k, p, kernel.data(), false, lowered, false, T::zero(), dx);
        }
        if let Some(dk) = d_kernel.as_mut() {
            let y = &input.data()[b * g.cout * p..(b + 1) * g.cout * p];
            T::gemm(g.cout, p, k, y, false, lowered, true, T::one(), dk);
        }
        if let Some(db) = d_bias.as_mut() {
            let plane = g.in_plane();
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dout[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
