//! Separable bicubic resampling with the Keys (a = −0.5) kernel.
//!
//! Sampling grids are center aligned: output pixel `i` maps to input
//! coordinate `(i + 0.5) / scale − 0.5`. When shrinking, the kernel is
//! stretched by `1 / scale` so it also low-pass filters, and sample positions
//! outside the image are clamped to the border.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResizeError {
    #[error("resize of {input}px by {factor} leaves an empty output")]
    EmptyOutput { input: usize, factor: String },
    #[error("scale factor must be a positive integer")]
    ZeroScale,
    #[error("expected a tensor with at least two axes, got {0:?}")]
    Rank(Vec<usize>),
}

/// Integer up- or down-scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Up(usize),
    Down(usize),
}

impl Factor {
    fn ratio(self) -> f64 {
        match self {
            Factor::Up(s) => s as f64,
            Factor::Down(s) => 1.0 / s as f64,
        }
    }

    fn output_len(self, input: usize) -> usize {
        match self {
            Factor::Up(s) => input * s,
            Factor::Down(s) => input.div_ceil(s),
        }
    }

    fn describe(self) -> String {
        match self {
            Factor::Up(s) => format!("×{s}"),
            Factor::Down(s) => format!("×1/{s}"),
        }
    }
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax.powi(3) - 2.5 * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        -0.5 * ax.powi(3) + 2.5 * ax.powi(2) - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Input taps and normalized weights for each output position along one axis.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub taps: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

pub fn axis_weights(input: usize, factor: Factor) -> Result<AxisWeights, ResizeError> {
    if matches!(factor, Factor::Up(0) | Factor::Down(0)) {
        return Err(ResizeError::ZeroScale);
    }
    let output = factor.output_len(input);
    if output == 0 || input == 0 {
        return Err(ResizeError::EmptyOutput {
            input,
            factor: factor.describe(),
        });
    }
    let scale = factor.ratio();
    let stretch = scale.min(1.0);
    let half_width = 2.0 / stretch;
    let mut taps = Vec::with_capacity(output);
    let mut weights = Vec::with_capacity(output);
    for i in 0..output {
        let center = (i as f64 + 0.5) / scale - 0.5;
        let first = (center - half_width).ceil() as isize;
        let last = (center + half_width).floor() as isize;
        let mut t = Vec::new();
        let mut w = Vec::new();
        for j in first..=last {
            let k = stretch * keys_kernel(stretch * (center - j as f64));
            if k == 0.0 {
                continue;
            }
            t.push(j.clamp(0, input as isize - 1) as usize);
            w.push(k);
        }
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        taps.push(t);
        weights.push(w);
    }
    Ok(AxisWeights { taps, weights })
}

fn resize_plane(src: &[f64], h: usize, w: usize, rows: &AxisWeights, cols: &AxisWeights) -> Vec<f64> {
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = cols.taps[x].iter().zip(&cols.weights[x]).map(|(&t, &k)| line[t] * k).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (&t, &k) in rows.taps[y].iter().zip(&rows.weights[y]) {
            let line = &tmp[t * ow..(t + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(line) {
                *o += k * v;
            }
        }
    }
    out
}

/// Resizes the last two axes of `img`, plane by plane.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, factor: Factor) -> Result<Tensor<T>, ResizeError> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(ResizeError::Rank(shape.to_vec()));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let rows = axis_weights(h, factor)?;
    let cols = axis_weights(w, factor)?;
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let planes = img.len() / (h * w);
    let mut data = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src: Vec<f64> = img.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        data.extend(resize_plane(&src, h, w, &rows, &cols).into_iter().map(T::from_f64_lossy));
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = oh;
    out_shape[n - 1] = ow;
    Ok(Tensor::new(&out_shape, data).expect("resize output shape"))
}
