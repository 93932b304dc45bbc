//! Raw convolution kernels (im2col + GEMM) used by the tape.

use crate::tensor::Real;

/// Geometry of a zero-padded 2-d convolution. Padding is `k / 2` on every
/// side so stride 1 preserves the spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * (self.kh / 2) - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * (self.kw / 2) - self.kw) / self.stride + 1
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// 1x1 stride-1 convolutions use the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pw as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column-gradient matrix back onto the input image.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pw as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let p = g.out_pixels();
    let r = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    T::gemm(
        g.out_channels,
        r,
        p,
        T::one(),
        (weight, r as isize, 1),
        (cols, p as isize, 1),
        T::one(),
        (&mut out, p as isize, 1),
    );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let r = g.patch_len();
    let (need_input, need_weight, need_bias) = need;

    let bias = need_bias.then(|| {
        grad_out
            .chunks(p)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect()
    });

    let weight_grad = need_weight.then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            owned = im2col(g, input);
            &owned
        };
        let mut dw = vec![T::zero(); g.out_channels * r];
        // dW = dY * cols^T
        T::gemm(
            g.out_channels,
            p,
            r,
            T::one(),
            (grad_out, p as isize, 1),
            (cols, 1, p as isize),
            T::zero(),
            (&mut dw, r as isize, 1),
        );
        dw
    });

    let input_grad = need_input.then(|| {
        // dcols = W^T * dY
        let mut dcols = vec![T::zero(); r * p];
        T::gemm(
            r,
            g.out_channels,
            p,
            T::one(),
            (weight, 1, r as isize),
            (grad_out, p as isize, 1),
            T::zero(),
            (&mut dcols, p as isize, 1),
        );
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.in_channels * g.height * g.width];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for co in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.in_channels {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - (g.kh / 2) as isize;
                                let ix = (ox * g.stride + kj) as isize - (g.kw / 2) as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                    acc += w[((co * g.in_channels + ci) * g.kh + ki) * g.kw + kj]
                                        * x[(ci * g.height + iy as usize) * g.width + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for &(k, stride) in &[(1, 1), (3, 1), (5, 1), (3, 2), (1, 2)] {
            let g = ConvGeometry {
                in_channels: 2,
                height: 7,
                width: 6,
                out_channels: 3,
                kh: k,
                kw: k,
                stride,
            };
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
            let w: Vec<f64> = (0..3 * g.patch_len())
                .map(|i| ((i * 13 % 7) as f64) / 5.0 - 0.5)
                .collect();
            let b = [0.1, -0.2, 0.3];
            let fast = conv_forward(&g, &x, &w, &b);
            let slow = naive_conv(&g, &x, &w, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn strided_output_size_rounds_up() {
        let g = ConvGeometry {
            in_channels: 1,
            height: 64,
            width: 63,
            out_channels: 1,
            kh: 3,
            kw: 3,
            stride: 2,
        };
        assert_eq!((g.out_height(), g.out_width()), (32, 32));
    }
}
