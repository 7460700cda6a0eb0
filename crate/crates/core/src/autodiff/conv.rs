//! Raw 2-D convolution kernels on `[H, W, C]` row-major buffers.
//!
//! A single strided, zero-padded correlation `y = conv(x, k)` is the only
//! geometry; its two adjoints (w.r.t. the input and w.r.t. the kernel) are
//! implemented alongside it. The three maps are bilinear and each one's
//! vector-Jacobian products are expressed through the other two, which is
//! what lets the graph differentiate a backward pass a second time.

use serde::{Deserialize, Serialize};

use super::{Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split top/left-first.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

/// Fully resolved geometry of one correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_plan(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    axis: usize,
) -> Result<(usize, usize), TensorError> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out.saturating_sub(1)) * stride + kernel;
            let total = needed.saturating_sub(input);
            if kernel > input + total {
                return Err(TensorError::KernelTooLarge {
                    axis,
                    kernel,
                    input: input + total,
                });
            }
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(TensorError::KernelTooLarge {
                    axis,
                    kernel,
                    input,
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

impl ConvGeom {
    /// Geometry of `conv(x, k)` for `x: [H, W, Cin]`, `k: [kh, kw, Cin, Cout]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if input.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv2d input",
                expected: 3,
                found: input.len(),
            });
        }
        if kernel.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d kernel",
                expected: 4,
                found: kernel.len(),
            });
        }
        if kernel[2] != input[2] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                axis: 2,
                expected: kernel[2],
                found: input[2],
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (out_h, pad_top) = axis_plan(input[0], kernel[0], stride.0, padding, 0)?;
        let (out_w, pad_left) = axis_plan(input[1], kernel[1], stride.1, padding, 1)?;
        Ok(ConvGeom {
            in_h: input[0],
            in_w: input[1],
            cin: input[2],
            kh: kernel[0],
            kw: kernel[1],
            cout: kernel[3],
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Geometry of the correlation whose input adjoint is a transposed
    /// convolution from `x: [H, W, Cin]` with kernel `[kh, kw, Cout, Cin]`.
    pub fn for_transpose(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if input.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "conv2d_transpose input",
                expected: 3,
                found: input.len(),
            });
        }
        if kernel.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d_transpose kernel",
                expected: 4,
                found: kernel.len(),
            });
        }
        if kernel[3] != input[2] {
            return Err(TensorError::DimMismatch {
                op: "conv2d_transpose",
                axis: 2,
                expected: kernel[3],
                found: input[2],
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d_transpose stride must be positive".into(),
            ));
        }
        let up = |n: usize, k: usize, s: usize| match padding {
            Padding::Same => n * s,
            Padding::Valid => (n - 1) * s + k,
        };
        let full = [
            up(input[0], kernel[0], stride.0),
            up(input[1], kernel[1], stride.1),
            kernel[2],
        ];
        let geom = ConvGeom::new(&full, kernel, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (input[0], input[1]));
        Ok(geom)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_h, self.in_w, self.cin]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin, self.cout]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.cout]
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input pixel read by output `(oh, ow)` at kernel tap `(i, j)`, if inside.
    #[inline]
    fn source(&self, oh: usize, ow: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let h = (oh * self.sh + i).checked_sub(self.pad_top)?;
        let w = (ow * self.sw + j).checked_sub(self.pad_left)?;
        (h < self.in_h && w < self.in_w).then_some((h, w))
    }
}

fn im2col<T: Real>(geom: &ConvGeom, x: &[T]) -> Vec<T> {
    let patch = geom.patch();
    let mut cols = vec![T::zero(); geom.positions() * patch];
    for oh in 0..geom.out_h {
        for ow in 0..geom.out_w {
            let row = &mut cols[(oh * geom.out_w + ow) * patch..][..patch];
            for i in 0..geom.kh {
                for j in 0..geom.kw {
                    if let Some((h, w)) = geom.source(oh, ow, i, j) {
                        let src = &x[(h * geom.in_w + w) * geom.cin..][..geom.cin];
                        row[(i * geom.kw + j) * geom.cin..][..geom.cin].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(geom: &ConvGeom, cols: &[T]) -> Vec<T> {
    let patch = geom.patch();
    let mut x = vec![T::zero(); geom.in_h * geom.in_w * geom.cin];
    for oh in 0..geom.out_h {
        for ow in 0..geom.out_w {
            let row = &cols[(oh * geom.out_w + ow) * patch..][..patch];
            for i in 0..geom.kh {
                for j in 0..geom.kw {
                    if let Some((h, w)) = geom.source(oh, ow, i, j) {
                        let dst = &mut x[(h * geom.in_w + w) * geom.cin..][..geom.cin];
                        let src = &row[(i * geom.kw + j) * geom.cin..][..geom.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[oh, ow, co] = Σ x[oh·sh + i − pt, ow·sw + j − pl, ci] · k[i, j, ci, co]`.
pub fn conv_forward<T: Real>(geom: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let cols = im2col(geom, x);
    let (p, q, n) = (geom.positions(), geom.patch(), geom.cout);
    let mut y = vec![T::zero(); p * n];
    T::gemm(
        p,
        q,
        n,
        &cols,
        (q as isize, 1),
        k,
        (n as isize, 1),
        T::zero(),
        &mut y,
        (n as isize, 1),
    );
    y
}

/// Adjoint of `conv_forward` in its input: returns an `[H, W, Cin]` buffer.
pub fn conv_input_adjoint<T: Real>(geom: &ConvGeom, gy: &[T], k: &[T]) -> Vec<T> {
    let (p, q, n) = (geom.positions(), geom.patch(), geom.cout);
    let mut cols = vec![T::zero(); p * q];
    // cols = gy [p×n] · kᵀ [n×q]
    T::gemm(
        p,
        n,
        q,
        gy,
        (n as isize, 1),
        k,
        (1, n as isize),
        T::zero(),
        &mut cols,
        (q as isize, 1),
    );
    col2im(geom, &cols)
}

/// Adjoint of `conv_forward` in its kernel: returns a `[kh, kw, Cin, Cout]` buffer.
pub fn conv_kernel_adjoint<T: Real>(geom: &ConvGeom, x: &[T], gy: &[T]) -> Vec<T> {
    let cols = im2col(geom, x);
    let (p, q, n) = (geom.positions(), geom.patch(), geom.cout);
    let mut gk = vec![T::zero(); q * n];
    // gk = colsᵀ [q×p] · gy [p×n]
    T::gemm(
        q,
        p,
        n,
        &cols,
        (1, q as isize),
        gy,
        (n as isize, 1),
        T::zero(),
        &mut gk,
        (n as isize, 1),
    );
    gk
}
