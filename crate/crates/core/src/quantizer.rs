//! Symmetric integer quantization for the W4A8 regime: dynamic per-token
//! INT8 activations and per-output-channel INT4 weights, both with zero
//! point 0 and round-half-to-even.

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::rotation::{LocalRotation, RotationError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite input at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Rotation(#[from] RotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// One scale per row (token).
    PerToken,
    /// One scale per column (output channel).
    PerOutputChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bit_width: u8,
    pub axis: GroupAxis,
    pub scales: Vec<f64>,
    /// Row-major integer codes.
    pub data: Vec<i8>,
}

pub const fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

pub const fn qmin(bits: u8) -> i32 {
    -(1 << (bits - 1))
}

/// Quantizes `v` against `scale` onto the signed `bits`-bit grid.
#[inline]
pub fn quantize_value(v: f64, scale: f64, bits: u8) -> i8 {
    (v / scale)
        .round_ties_even()
        .clamp(qmin(bits) as f64, qmax(bits) as f64) as i8
}

/// `max|v| / qmax`, or 1 for an all-zero group.
pub fn symmetric_scale<'a>(values: impl IntoIterator<Item = &'a f64>, bits: u8) -> f64 {
    let peak = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        1.0
    } else {
        peak / qmax(bits) as f64
    }
}

impl QuantizedTensor {
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    pub fn scale_for(&self, row: usize, col: usize) -> f64 {
        match self.axis {
            GroupAxis::PerToken => self.scales[row],
            GroupAxis::PerOutputChannel => self.scales[col],
        }
    }

    pub fn dequantize(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            self.get(r, c) as f64 * self.scale_for(r, c)
        })
    }
}

fn check_finite(x: &Array2<f64>) -> Result<(), QuantError> {
    match x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(QuantError::NonFinite { row, col }),
        None => Ok(()),
    }
}

fn quantize_grouped(x: &Array2<f64>, bits: u8, axis: GroupAxis) -> Result<QuantizedTensor, QuantError> {
    check_finite(x)?;
    let (rows, cols) = x.dim();
    let scales: Vec<f64> = match axis {
        GroupAxis::PerToken => x.rows().into_iter().map(|r| symmetric_scale(r, bits)).collect(),
        GroupAxis::PerOutputChannel => x.columns().into_iter().map(|c| symmetric_scale(c, bits)).collect(),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for ((r, c), &v) in x.indexed_iter() {
        let s = match axis {
            GroupAxis::PerToken => scales[r],
            GroupAxis::PerOutputChannel => scales[c],
        };
        data.push(quantize_value(v, s, bits));
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        bit_width: bits,
        axis,
        scales,
        data,
    })
}

/// Dynamic per-token INT8 quantization of a `tokens × n` activation matrix.
pub fn quantize_act_int8(x: &Array2<f64>) -> Result<QuantizedTensor, QuantError> {
    quantize_grouped(x, 8, GroupAxis::PerToken)
}

/// Per-output-channel INT4 quantization of an `n × d` weight matrix.
pub fn quantize_w4(w: &Array2<f64>) -> Result<QuantizedTensor, QuantError> {
    quantize_grouped(w, 4, GroupAxis::PerOutputChannel)
}

/// Quantize–dequantize with a single scale for the whole tensor. This is the
/// plain scalar baseline that codebook compression is measured against.
pub fn fake_quant_per_tensor(w: &Array2<f64>, bits: u8) -> Result<Array2<f64>, QuantError> {
    check_finite(w)?;
    let s = symmetric_scale(w.iter(), bits);
    Ok(w.mapv(|v| quantize_value(v, s, bits) as f64 * s))
}

/// Relative L2 error of `approx` against `exact`; 0 when both vanish.
pub fn relative_l2(exact: &[f64], approx: &[f64]) -> f64 {
    let num: f64 = exact.iter().zip(approx).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|a| a * a).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatmulErrorReport {
    pub rotated: bool,
    pub relative_l2: f64,
    pub exact_norm: f64,
    pub activation_scale: f64,
}

fn row_times(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    w.columns()
        .into_iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Relative L2 error of the W4A8 GEMM `x·W` against the exact product,
/// optionally rotating `x` and folding the rotation into `W` first.
pub fn w4a8_matmul_error(
    x: &[f64],
    w: &Array2<f64>,
    rotation: Option<&LocalRotation>,
) -> Result<MatmulErrorReport, QuantError> {
    if x.len() != w.nrows() {
        return Err(QuantError::Shape(format!(
            "activation length {} vs weight rows {}",
            x.len(),
            w.nrows()
        )));
    }
    let exact = row_times(x, w);
    let (xr, wr) = match rotation {
        Some(rot) => (rot.rotate_activation(x)?, rot.fold_weights(w)?),
        None => (x.to_vec(), w.clone()),
    };
    let xq = quantize_act_int8(&Array2::from_shape_vec((1, xr.len()), xr).expect("row shape"))?;
    let wq = quantize_w4(&wr)?;
    let xd = xq.dequantize();
    let got = row_times(xd.row(0).as_slice().expect("contiguous"), &wq.dequantize());
    Ok(MatmulErrorReport {
        rotated: rotation.is_some(),
        relative_l2: relative_l2(&exact, &got),
        exact_norm: exact.iter().map(|v| v * v).sum::<f64>().sqrt(),
        activation_scale: xq.scales[0],
    })
}
