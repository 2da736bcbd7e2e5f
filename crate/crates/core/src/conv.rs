//! Same-size 2-D cross-correlation without bias.
//!
//! The optimized path lowers each sample to an im2col matrix and multiplies it
//! with the flattened kernel; [`reference`] holds the direct nested-loop
//! version used as the oracle in tests and benchmarks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MatRef, Scalar, Tensor, TensorError};

/// Number of partial weight-gradient accumulators; fixed so the reduction
/// order never depends on the thread count.
const WEIGHT_GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
    ) -> Result<Self, TensorError> {
        if kernel_size != 1 && kernel_size != 3 {
            return Err(TensorError::KernelSize {
                op: "ConvSpec::new",
                size: kernel_size,
            });
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
        })
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Reads the spec back from a `[O, C, k, k]` weight tensor.
    pub fn from_weights<T: Scalar>(weights: &Tensor<T>) -> Result<Self, TensorError> {
        let (o, c, kh, kw) = weights.dims4()?;
        if kh != kw {
            return Err(TensorError::AxisMismatch {
                op: "ConvSpec::from_weights",
                axis: "kernel width",
                left: kh,
                right: kw,
            });
        }
        ConvSpec::new(c, o, kh)
    }

    fn check_weights<T: Scalar>(&self, op: &'static str, w: &Tensor<T>) -> Result<(), TensorError> {
        let (o, c, kh, kw) = w.dims4()?;
        let expected = self.weight_shape();
        for (axis, got, want) in [
            ("out_channels", o, expected[0]),
            ("in_channels", c, expected[1]),
            ("kernel height", kh, expected[2]),
            ("kernel width", kw, expected[3]),
        ] {
            if got != want {
                return Err(TensorError::AxisMismatch {
                    op,
                    axis,
                    left: got,
                    right: want,
                });
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(
        &self,
        op: &'static str,
        x: &Tensor<T>,
    ) -> Result<(usize, usize, usize), TensorError> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(TensorError::AxisMismatch {
                op,
                axis: "channels",
                left: c,
                right: self.in_channels,
            });
        }
        Ok((n, h, w))
    }
}

/// Writes the `[C·k², H·W]` patch matrix of one sample.
fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one sample's input gradient.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    out.fill(T::zero());
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for x in 0..w {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    spec.check_weights("conv2d_forward", weights)?;
    let (n, h, w) = spec.check_input("conv2d_forward", input)?;
    let (c, o, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let wmat = MatRef::row_major(weights.data(), o, ckk);

    out.data_mut()
        .par_chunks_mut(o * hw)
        .zip(input.data().par_chunks(c * hw))
        .for_each_init(
            || if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] },
            |col, (dst, src)| {
                let cols = if k == 1 {
                    src
                } else {
                    im2col(src, c, h, w, k, col);
                    &col[..]
                };
                gemm(T::one(), wmat, MatRef::row_major(cols, ckk, hw), T::zero(), dst);
            },
        );
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let spec = ConvSpec::from_weights(weights)?;
    let (gi, gw) = conv2d_backward_with(input, weights, grad_output, &spec, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

/// Backward pass; the input gradient is skipped when `need_input` is false.
pub(crate) fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>), TensorError> {
    spec.check_weights("conv2d_backward", weights)?;
    let (n, h, w) = spec.check_input("conv2d_backward", input)?;
    let (c, o, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let (gn, go, gh, gw_) = grad_output.dims4()?;
    for (axis, got, want) in [("batch", gn, n), ("out_channels", go, o), ("height", gh, h), ("width", gw_, w)] {
        if got != want {
            return Err(TensorError::AxisMismatch {
                op: "conv2d_backward",
                axis,
                left: got,
                right: want,
            });
        }
    }
    let hw = h * w;
    let ckk = c * k * k;
    let x = input.data();
    let g = grad_output.data();

    let chunk = n.div_ceil(WEIGHT_GRAD_CHUNKS).max(1);
    let partials: Vec<Vec<T>> = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut acc = vec![T::zero(); o * ckk];
            let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
            for s in start..(start + chunk).min(n) {
                let src = &x[s * c * hw..(s + 1) * c * hw];
                let cols = if k == 1 {
                    src
                } else {
                    im2col(src, c, h, w, k, &mut col);
                    &col[..]
                };
                let gs = MatRef::row_major(&g[s * o * hw..(s + 1) * o * hw], o, hw);
                gemm(T::one(), gs, MatRef::row_major(cols, ckk, hw).t(), T::one(), &mut acc);
            }
            acc
        })
        .collect();
    let mut grad_w = vec![T::zero(); o * ckk];
    for p in &partials {
        for (a, &b) in grad_w.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    let grad_w = Tensor::new(&spec.weight_shape(), grad_w)?;

    if !need_input {
        return Ok((None, grad_w));
    }
    let wt = MatRef::row_major(weights.data(), o, ckk).t();
    let mut grad_in = Tensor::zeros(&[n, c, h, w]);
    grad_in
        .data_mut()
        .par_chunks_mut(c * hw)
        .zip(g.par_chunks(o * hw))
        .for_each_init(
            || vec![T::zero(); if k == 1 { 0 } else { ckk * hw }],
            |col, (dst, gs)| {
                let gs = MatRef::row_major(gs, o, hw);
                if k == 1 {
                    gemm(T::one(), wt, gs, T::zero(), dst);
                } else {
                    gemm(T::one(), wt, gs, T::zero(), col);
                    col2im(col, c, h, w, k, dst);
                }
            },
        );
    Ok((Some(grad_in), grad_w))
}

/// Direct nested-loop convolution, kept independent of the im2col path.
pub mod reference {
    use super::*;

    pub fn conv2d_forward<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>, TensorError> {
        spec.check_weights("reference::conv2d_forward", weights)?;
        let (n, h, w) = spec.check_input("reference::conv2d_forward", input)?;
        let (c, o, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
        let pad = spec.padding() as isize;
        let x = input.data();
        let wt = weights.data();
        let mut out = Tensor::zeros(&[n, o, h, w]);
        let y = out.data_mut();
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = T::zero();
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad;
                                    let ix = ox as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                                    acc = acc + xv * wv;
                                }
                            }
                        }
                        y[((b * o + oc) * h + oy) * w + ox] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn conv2d_backward<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let spec = ConvSpec::from_weights(weights)?;
        let (n, h, w) = spec.check_input("reference::conv2d_backward", input)?;
        let (c, o, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
        if grad_output.shape() != [n, o, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "reference::conv2d_backward",
                left: grad_output.shape().to_vec(),
                right: vec![n, o, h, w],
            });
        }
        let pad = spec.padding() as isize;
        let x = input.data();
        let wt = weights.data();
        let g = grad_output.data();
        let mut gi = Tensor::zeros(input.shape());
        let mut gw = Tensor::zeros(weights.shape());
        {
            let gi = gi.data_mut();
            let gw = gw.data_mut();
            for b in 0..n {
                for oc in 0..o {
                    for oy in 0..h {
                        for ox in 0..w {
                            let gv = g[((b * o + oc) * h + oy) * w + ox];
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = oy as isize + ky as isize - pad;
                                        let ix = ox as isize + kx as isize - pad;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                        let wi = ((oc * c + ic) * k + ky) * k + kx;
                                        gi[xi] = gi[xi] + wt[wi] * gv;
                                        gw[wi] = gw[wi] + x[xi] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((gi, gw))
    }
}
