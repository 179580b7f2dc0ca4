//! Stride-1 2-D convolution via im2col + matrix multiply, with zero,
//! circular, and valid padding and optional dilation. Forward and backward
//! are pure functions so the graph op and test oracles share nothing but
//! this interface.

use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use super::Real;

/// Boundary handling for convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pad {
    /// No padding; output shrinks by the effective kernel extent.
    Valid,
    /// Zero padding of the given width on all sides.
    Zero(usize),
    /// Periodic (toroidal) padding of the given width on all sides.
    Circular(usize),
}

impl Pad {
    pub fn amount(&self) -> usize {
        match self {
            Pad::Valid => 0,
            Pad::Zero(p) | Pad::Circular(p) => *p,
        }
    }

    /// Padding that preserves spatial dims for kernel size `k`, dilation `d`.
    pub fn same_zero(k: usize, d: usize) -> Pad {
        Pad::Zero(d * (k - 1) / 2)
    }
}

/// Output spatial dims for an `h x w` input, or `None` if the kernel does
/// not fit.
pub fn out_dims(h: usize, w: usize, kh: usize, kw: usize, pad: Pad, dil: usize) -> Option<(usize, usize)> {
    let eh = dil * (kh - 1) + 1;
    let ew = dil * (kw - 1) + 1;
    let p = pad.amount();
    let hh = h + 2 * p;
    let ww = w + 2 * p;
    if hh < eh || ww < ew {
        return None;
    }
    Some((hh - eh + 1, ww - ew + 1))
}

/// Unfold the input into a `[ci*kh*kw, n*ho*wo]` matrix.
fn im2col<T: Real>(
    x: ArrayView4<T>,
    kh: usize,
    kw: usize,
    pad: Pad,
    dil: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (n, ci, h, w) = x.dim();
    let p = pad.amount() as isize;
    let mut cols = Array2::<T>::zeros((ci * kh * kw, n * ho * wo));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    for cidx in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (cidx * kh + ky) * kw + kx;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = oy as isize + (dil * ky) as isize - p;
                        for ox in 0..wo {
                            let ix = ox as isize + (dil * kx) as isize - p;
                            let (sy, sx) = match pad {
                                Pad::Circular(_) => {
                                    (iy.rem_euclid(h as isize) as usize, ix.rem_euclid(w as isize) as usize)
                                }
                                _ => {
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue; // zero padding / valid never lands here OOB
                                    }
                                    (iy as usize, ix as usize)
                                }
                            };
                            let col = (ni * ho + oy) * wo + ox;
                            cols[[row, col]] = xs[((ni * ci + cidx) * h + sy) * w + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[ci*kh*kw, n*ho*wo]` gradient matrix back onto input positions
/// (transpose of [`im2col`]): overlapping taps accumulate.
fn col2im<T: Real>(
    gcols: &Array2<T>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: Pad,
    dil: usize,
    ho: usize,
    wo: usize,
) -> Array4<T> {
    let p = pad.amount() as isize;
    let mut gx = Array4::<T>::zeros((n, ci, h, w));
    for cidx in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (cidx * kh + ky) * kw + kx;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = oy as isize + (dil * ky) as isize - p;
                        for ox in 0..wo {
                            let ix = ox as isize + (dil * kx) as isize - p;
                            let (sy, sx) = match pad {
                                Pad::Circular(_) => {
                                    (iy.rem_euclid(h as isize) as usize, ix.rem_euclid(w as isize) as usize)
                                }
                                _ => {
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    (iy as usize, ix as usize)
                                }
                            };
                            let col = (ni * ho + oy) * wo + ox;
                            gx[[ni, cidx, sy, sx]] = gx[[ni, cidx, sy, sx]] + gcols[[row, col]];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Convolution forward: `x [n,ci,h,w]`, `w [co,ci,kh,kw]` -> `[n,co,ho,wo]`.
pub fn conv2d_forward<T: Real>(x: ArrayView4<T>, wgt: ArrayView4<T>, pad: Pad, dil: usize) -> Array4<T> {
    let (n, ci, h, w) = x.dim();
    let (co, ciw, kh, kw) = wgt.dim();
    assert_eq!(ci, ciw, "input/kernel channel mismatch");
    let (ho, wo) = out_dims(h, w, kh, kw, pad, dil).expect("kernel does not fit input");
    let cols = im2col(x, kh, kw, pad, dil, ho, wo);
    let wmat = wgt
        .to_shape((co, ci * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let omat = wmat.dot(&cols); // [co, n*ho*wo]
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    for c in 0..co {
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[[ni, c, oy, ox]] = omat[[c, (ni * ho + oy) * wo + ox]];
                }
            }
        }
    }
    out
}

/// Convolution backward. Returns `(grad_x, grad_w)` for upstream gradient
/// `gout [n,co,ho,wo]`.
pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    wgt: ArrayView4<T>,
    gout: ArrayView4<T>,
    pad: Pad,
    dil: usize,
) -> (Array4<T>, Array4<T>) {
    let (n, ci, h, w) = x.dim();
    let (co, _, kh, kw) = wgt.dim();
    let (_, _, ho, wo) = gout.dim();
    let mut gmat = Array2::<T>::zeros((co, n * ho * wo));
    for c in 0..co {
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    gmat[[c, (ni * ho + oy) * wo + ox]] = gout[[ni, c, oy, ox]];
                }
            }
        }
    }
    let cols = im2col(x, kh, kw, pad, dil, ho, wo);
    let gw_mat = gmat.dot(&cols.t()); // [co, ci*kh*kw]
    let gw = gw_mat
        .into_shape_with_order((co, ci, kh, kw))
        .expect("kernel gradient reshape");
    let wmat = wgt
        .to_shape((co, ci * kh * kw))
        .expect("kernel reshape")
        .to_owned();
    let gcols = wmat.t().dot(&gmat); // [ci*kh*kw, n*ho*wo]
    let gx = col2im(&gcols, n, ci, h, w, kh, kw, pad, dil, ho, wo);
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    /// Direct (definition-level) convolution used as the oracle: no im2col,
    /// just the quadruple loop over output positions and kernel taps.
    fn conv_naive(x: &Array4<f64>, wgt: &Array4<f64>, pad: Pad, dil: usize) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let (co, _, kh, kw) = wgt.dim();
        let (ho, wo) = out_dims(h, w, kh, kw, pad, dil).unwrap();
        let p = pad.amount() as isize;
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for ni in 0..n {
            for c in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for cc in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + (dil * ky) as isize - p;
                                    let ix = ox as isize + (dil * kx) as isize - p;
                                    let v = match pad {
                                        Pad::Circular(_) => x[[
                                            ni,
                                            cc,
                                            iy.rem_euclid(h as isize) as usize,
                                            ix.rem_euclid(w as isize) as usize,
                                        ]],
                                        _ => {
                                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                                0.0
                                            } else {
                                                x[[ni, cc, iy as usize, ix as usize]]
                                            }
                                        }
                                    };
                                    acc += v * wgt[[c, cc, ky, kx]];
                                }
                            }
                        }
                        out[[ni, c, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn arange4(dims: (usize, usize, usize, usize), scale: f64) -> Array4<f64> {
        let mut i = 0.0;
        Array4::from_shape_simple_fn(dims, || {
            i += 1.0;
            (i * scale).sin()
        })
    }

    #[test]
    fn matches_direct_convolution_all_pads() {
        let x = arange4((2, 3, 6, 5), 0.7);
        let wgt = arange4((4, 3, 3, 3), 1.3);
        for pad in [Pad::Valid, Pad::Zero(1), Pad::Zero(2), Pad::Circular(1)] {
            for dil in [1usize, 2] {
                if out_dims(6, 5, 3, 3, pad, dil).is_none() {
                    continue;
                }
                let got = conv2d_forward(x.view(), wgt.view(), pad, dil);
                let want = conv_naive(&x, &wgt, pad, dil);
                assert_eq!(got.dim(), want.dim(), "{pad:?} dil={dil}");
                for (a, b) in got.iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-10, "{pad:?} dil={dil}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn out_dims_same_padding_preserves_shape() {
        assert_eq!(out_dims(8, 8, 3, 3, Pad::same_zero(3, 1), 1), Some((8, 8)));
        assert_eq!(out_dims(8, 8, 3, 3, Pad::same_zero(3, 2), 2), Some((8, 8)));
        assert_eq!(out_dims(8, 8, 3, 3, Pad::same_zero(3, 4), 4), Some((8, 8)));
        assert_eq!(out_dims(7, 7, 7, 7, Pad::Valid, 1), Some((1, 1)));
        assert_eq!(out_dims(4, 4, 7, 7, Pad::Valid, 1), None);
    }

    #[test]
    fn circular_convolution_is_translation_equivariant() {
        // Rolling the input by (dy, dx) must roll the output identically.
        let x = arange4((1, 2, 6, 6), 0.9);
        let wgt = arange4((3, 2, 3, 3), 0.4);
        let (dy, dx) = (2usize, 3usize);
        let mut xr = x.clone();
        for c in 0..2 {
            for y in 0..6 {
                for xx in 0..6 {
                    xr[[0, c, (y + dy) % 6, (xx + dx) % 6]] = x[[0, c, y, xx]];
                }
            }
        }
        let a = conv2d_forward(x.view(), wgt.view(), Pad::Circular(1), 1);
        let b = conv2d_forward(xr.view(), wgt.view(), Pad::Circular(1), 1);
        for c in 0..3 {
            for y in 0..6 {
                for xx in 0..6 {
                    let va = a[[0, c, y, xx]];
                    let vb = b[[0, c, (y + dy) % 6, (xx + dx) % 6]];
                    assert!((va - vb).abs() < 1e-10, "{va} vs {vb}");
                }
            }
        }
    }
}
