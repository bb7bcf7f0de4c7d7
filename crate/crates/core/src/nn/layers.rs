//! Parameterized layers: fully connected and 3×3 convolution.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Dense<T: Scalar> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Tensor<T>,
    /// `[outputs]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = match x.shape() {
            [n, f] if *f == self.inputs => *n,
            s => {
                return Err(Error::Shape(format!(
                    "dense expects [N,{}], got {s:?}",
                    self.inputs
                )))
            }
        };
        let mut out = vec![T::ZERO; n * self.outputs];
        for row in out.chunks_mut(self.outputs) {
            row.copy_from_slice(self.bias.data());
        }
        gemm_nt(n, self.inputs, self.outputs, x.data(), self.weight.data(), &mut out);
        Tensor::from_vec(&[n, self.outputs], out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, input: &Tensor<T>, dy: &Tensor<T>, want_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let n = input.shape()[0];
        let (o, f) = (self.outputs, self.inputs);
        {
            let dw = self.weight.grad_mut();
            gemm_tn(o, n, f, dy.data(), input.data(), dw);
        }
        let db = self.bias.grad_mut();
        for j in 0..o {
            let s: f64 = (0..n).map(|i| dy.data()[i * o + j].to_f64()).sum();
            db[j] += T::from_f64(s);
        }
        if !want_input_grad {
            return Ok(None);
        }
        let mut dx = vec![T::ZERO; n * f];
        gemm_nn(n, o, f, dy.data(), self.weight.data(), &mut dx);
        Ok(Some(Tensor::from_vec(input.shape(), dx)?))
    }
}

/// 3×3 convolution, stride 1, zero padding 1, lowered to a GEMM over
/// expanded patches.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out_channels, in_channels, 3, 3]`
    pub weight: Tensor<T>,
    /// `[out_channels]`
    pub bias: Tensor<T>,
}

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Expand one `[C,H,W]` image into `[C*9, H*W]` patch columns.
pub(crate) fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            T::ZERO
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add patch columns back into an image gradient (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Tensor::zeros(&[out_channels, in_channels, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match shape {
            [n, c, h, w] if *c == self.in_channels => Ok((*n, *h, *w)),
            s => Err(Error::Shape(format!(
                "conv2d expects [N,{},H,W], got {s:?}",
                self.in_channels
            ))),
        }
    }

    /// Forward pass; also returns the per-sample patch columns when `keep_cols`.
    pub fn forward(&self, x: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let (n, h, w) = self.dims(x.shape())?;
        let (ci, co, hw) = (self.in_channels, self.out_channels, h * w);
        let k = ci * TAPS;
        let mut out = vec![T::ZERO; n * co * hw];
        let mut kept = keep_cols.then(|| vec![T::ZERO; n * k * hw]);
        let mut scratch = vec![T::ZERO; k * hw];
        for s in 0..n {
            let cols: &mut [T] = match kept.as_mut() {
                Some(all) => &mut all[s * k * hw..(s + 1) * k * hw],
                None => &mut scratch,
            };
            im2col(&x.data()[s * ci * hw..(s + 1) * ci * hw], ci, h, w, cols);
            let y = &mut out[s * co * hw..(s + 1) * co * hw];
            for (o, b) in self.bias.data().iter().enumerate() {
                y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
            }
            gemm_nn(co, k, hw, self.weight.data(), cols, y);
        }
        Ok((Tensor::from_vec(&[n, co, h, w], out)?, kept))
    }

    pub fn backward(
        &mut self,
        input_shape: &[usize],
        cols: &[T],
        dy: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (n, h, w) = self.dims(input_shape)?;
        let (ci, co, hw) = (self.in_channels, self.out_channels, h * w);
        let k = ci * TAPS;
        let mut dx = want_input_grad.then(|| vec![T::ZERO; n * ci * hw]);
        let mut dcols = vec![T::ZERO; k * hw];
        let mut db = vec![0.0f64; co];
        for s in 0..n {
            let g = &dy.data()[s * co * hw..(s + 1) * co * hw];
            let c = &cols[s * k * hw..(s + 1) * k * hw];
            gemm_nt(co, hw, k, g, c, self.weight.grad_mut());
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += g[o * hw..(o + 1) * hw].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = T::ZERO);
                gemm_tn(k, co, hw, self.weight.data(), g, &mut dcols);
                col2im(&dcols, ci, h, w, &mut dx[s * ci * hw..(s + 1) * ci * hw]);
            }
        }
        for (g, d) in self.bias.grad_mut().iter_mut().zip(&db) {
            *g += T::from_f64(*d);
        }
        dx.map(|d| Tensor::from_vec(input_shape, d)).transpose()
    }
}
