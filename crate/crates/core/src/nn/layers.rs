//! Batch kernels for the supported layer kinds.
//!
//! Activations are `(batch, features)` matrices; image features are stored
//! channel-major (`c * h * w + y * w + x`), so flatten is a no-op.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use super::model::Shape;
use crate::scalar::Scalar;

pub(crate) fn dense_forward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    b: ArrayView1<F>,
) -> Array2<F> {
    let mut z = x.dot(&w.t());
    for mut row in z.rows_mut() {
        row.zip_mut_with(&b, |a, &c| *a = *a + c);
    }
    z
}

/// Lowers every receptive field to one row: `(batch * oh * ow, c * k * k)`.
pub(crate) fn im2col<F: Scalar>(
    x: ArrayView2<F>,
    input: Shape,
    kernel: usize,
    stride: usize,
    output: Shape,
) -> Array2<F> {
    let batch = x.nrows();
    let positions = output.height * output.width;
    let width = input.channels * kernel * kernel;
    let mut cols = Array2::<F>::zeros((batch * positions, width));
    let x = x.as_standard_layout();
    let plane = input.height * input.width;
    {
        let cols_s = cols.as_slice_mut().expect("fresh array is contiguous");
        for s in 0..batch {
            let xs = x.row(s);
            let xs = xs.as_slice().expect("standard layout row");
            for oy in 0..output.height {
                for ox in 0..output.width {
                    let row = (s * positions + oy * output.width + ox) * width;
                    let dst = &mut cols_s[row..row + width];
                    for c in 0..input.channels {
                        for ky in 0..kernel {
                            let src = c * plane + (oy * stride + ky) * input.width + ox * stride;
                            let d = (c * kernel + ky) * kernel;
                            dst[d..d + kernel].copy_from_slice(&xs[src..src + kernel]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    batch: usize,
    input: Shape,
    kernel: usize,
    stride: usize,
    output: Shape,
) -> Array2<F> {
    let positions = output.height * output.width;
    let width = input.channels * kernel * kernel;
    let plane = input.height * input.width;
    let mut dx = Array2::<F>::zeros((batch, input.features()));
    let cols = cols.as_standard_layout();
    let cols_s = cols.as_slice().expect("standard layout");
    for s in 0..batch {
        let mut dxs = dx.row_mut(s);
        let dxs = dxs.as_slice_mut().expect("fresh array is contiguous");
        for oy in 0..output.height {
            for ox in 0..output.width {
                let row = (s * positions + oy * output.width + ox) * width;
                let src = &cols_s[row..row + width];
                for c in 0..input.channels {
                    for ky in 0..kernel {
                        let dst = c * plane + (oy * stride + ky) * input.width + ox * stride;
                        let d = (c * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            dxs[dst + kx] = dxs[dst + kx] + src[d + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(batch * positions, out_channels)` → `(batch, out_channels * positions)` plus bias.
pub(crate) fn conv_output<F: Scalar>(
    zmat: &Array2<F>,
    batch: usize,
    positions: usize,
    bias: ArrayView1<F>,
) -> Array2<F> {
    let channels = bias.len();
    let mut out = Array2::<F>::zeros((batch, channels * positions));
    for s in 0..batch {
        let mut row = out.row_mut(s);
        for q in 0..positions {
            let zr = zmat.row(s * positions + q);
            for o in 0..channels {
                row[o * positions + q] = zr[o] + bias[o];
            }
        }
    }
    out
}

/// Inverse reshape of [`conv_output`] for gradients.
pub(crate) fn conv_delta_matrix<F: Scalar>(
    delta: &Array2<F>,
    channels: usize,
    positions: usize,
) -> Array2<F> {
    let batch = delta.nrows();
    let mut dz = Array2::<F>::zeros((batch * positions, channels));
    for s in 0..batch {
        let row = delta.row(s);
        for q in 0..positions {
            let mut dr = dz.row_mut(s * positions + q);
            for o in 0..channels {
                dr[o] = row[o * positions + q];
            }
        }
    }
    dz
}

/// Max pooling; returns outputs and the winning input feature of every output.
/// Ties resolve to the first element in row-major window order.
pub(crate) fn max_pool_forward<F: Scalar>(
    x: ArrayView2<F>,
    input: Shape,
    kernel: usize,
    stride: usize,
    output: Shape,
) -> (Array2<F>, Vec<u32>) {
    let batch = x.nrows();
    let mut out = Array2::<F>::zeros((batch, output.features()));
    let mut arg = vec![0u32; batch * output.features()];
    let plane_in = input.height * input.width;
    let plane_out = output.height * output.width;
    for s in 0..batch {
        let xs = x.row(s);
        for c in 0..input.channels {
            for oy in 0..output.height {
                for ox in 0..output.width {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = c * plane_in + (oy * stride + ky) * input.width + ox * stride + kx;
                            if xs[i] > best || (ky == 0 && kx == 0) {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = c * plane_out + oy * output.width + ox;
                    out[[s, o]] = best;
                    arg[s * output.features() + o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<F: Scalar>(
    delta: &Array2<F>,
    arg: &[u32],
    input_features: usize,
) -> Array2<F> {
    let batch = delta.nrows();
    let outputs = delta.ncols();
    let mut dx = Array2::<F>::zeros((batch, input_features));
    for s in 0..batch {
        for o in 0..outputs {
            let i = arg[s * outputs + o] as usize;
            dx[[s, i]] = dx[[s, i]] + delta[[s, o]];
        }
    }
    dx
}

pub(crate) fn relu_in_place<F: Scalar>(z: &mut Array2<F>) {
    z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zeroes `delta` wherever the layer output was clamped (`y = 0` ⇔ `z ≤ 0`).
pub(crate) fn relu_backward<F: Scalar>(delta: &mut Array2<F>, output: &Array2<F>) {
    ndarray::Zip::from(delta).and(output).for_each(|d, &y| {
        if y <= F::zero() {
            *d = F::zero();
        }
    });
}

pub(crate) fn column_sums<F: Scalar>(m: &Array2<F>) -> ndarray::Array1<F> {
    m.sum_axis(Axis(0))
}
