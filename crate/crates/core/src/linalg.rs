//! Complex matrix helpers shared by the channel, solver and model code.

use nalgebra::{Complex, DMatrix};

use crate::autodiff::{Real, Tensor, TensorError};

pub type C64 = Complex<f64>;

/// Dense complex matrix (antennas × users for channels and beamformers).
pub type ComplexMatrix = DMatrix<C64>;

/// `Tr(VᴴV)`, the total transmit power of a beamformer.
pub fn power(v: &ComplexMatrix) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn frobenius_sq(v: &ComplexMatrix) -> f64 {
    power(v)
}

pub fn max_abs(v: &ComplexMatrix) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_finite(v: &ComplexMatrix) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `[rows, cols, 2]` tensor holding real and imaginary parts.
pub fn to_tensor<T: Real>(m: &ComplexMatrix) -> Tensor<T> {
    let (rows, cols) = m.shape();
    let mut data = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            let z = m[(r, c)];
            data.push(T::from_f64_lossy(z.re));
            data.push(T::from_f64_lossy(z.im));
        }
    }
    Tensor::new(vec![rows, cols, 2], data).expect("consistent shape")
}

/// Inverse of [`to_tensor`].
pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<ComplexMatrix, TensorError> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(TensorError::DimMismatch {
            op: "complex view",
            axis: s.len().saturating_sub(1),
            expected: 2,
            found: s.last().copied().unwrap_or(0),
        });
    }
    let d = t.data();
    Ok(ComplexMatrix::from_fn(s[0], s[1], |r, c| {
        let i = (r * s[1] + c) * 2;
        C64::new(d[i].as_f64(), d[i + 1].as_f64())
    }))
}

/// Interleaved real/imaginary values in row-major order.
pub fn interleaved(m: &ComplexMatrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            out.push(m[(r, c)].re);
            out.push(m[(r, c)].im);
        }
    }
    out
}

pub fn from_interleaved(rows: usize, cols: usize, data: &[f64]) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |r, c| {
        let i = (r * cols + c) * 2;
        C64::new(data[i], data[i + 1])
    })
}
