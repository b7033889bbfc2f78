//! Convolution, pooling and activation kernels with hand-written backward passes.

use rand::Rng;

use crate::grid::Tensor3;

/// Same-padded, stride-1 2-D convolution with bias. `weight` is
/// `out x in x k x k` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-style uniform init, `U(-b, b)` with `b = sqrt(6 / fan_in)`; zero bias.
    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel);
        let bound = (6.0 / c.fan_in() as f64).sqrt();
        for w in &mut c.weight {
            *w = rng.random_range(-bound..bound);
        }
        c
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col<'a>(&self, input: &'a Tensor3) -> std::borrow::Cow<'a, [f64]> {
        if self.kernel == 1 {
            return std::borrow::Cow::Borrowed(&input.data);
        }
        let (h, w) = (input.height, input.width);
        let k = self.kernel;
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.fan_in() * hw];
        for c in 0..self.in_channels {
            let plane = input.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let oy = ky as isize - r;
                    let ox = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize - ox).min(w as isize) as usize;
                        if x_lo < x_hi {
                            let s0 = (x_lo as isize + ox) as usize;
                            dst_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
        std::borrow::Cow::Owned(cols)
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut out = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut out[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let oy = ky as isize - r;
                    let ox = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-ox).max(0) as usize;
                        let x_hi = (w as isize - ox).min(w as isize) as usize;
                        for x in x_lo..x_hi {
                            plane[sy as usize * w + (x as isize + ox) as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let hw = input.plane_len();
        let cols = self.im2col(input);
        let mut out = vec![0.0; self.out_channels * hw];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(*b);
        }
        let kk = self.fan_in();
        // out (O x HW) += W (O x K) * cols (K x HW)
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                hw,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        Tensor3 { channels: self.out_channels, height: input.height, width: input.width, data: out }
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        grad: &mut ConvGrad,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let hw = input.plane_len();
        let kk = self.fan_in();
        let cols = self.im2col(input);
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb += grad_out.data[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        // dW (O x K) += dOut (O x HW) * cols^T (HW x K)
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                hw,
                kk,
                1.0,
                grad_out.data.as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if !need_input_grad {
            return None;
        }
        // dcols (K x HW) = W^T (K x O) * dOut (O x HW)
        let mut dcols = vec![0.0; kk * hw];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                hw,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                hw as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        let data = if self.kernel == 1 { dcols } else { self.col2im(&dcols, input.height, input.width) };
        Some(Tensor3 { channels: self.in_channels, height: input.height, width: input.width, data })
    }
}

/// Gradient buffers shaped like a [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self { weight: vec![0.0; conv.weight.len()], bias: vec![0.0; conv.bias.len()] }
    }
}

pub fn leaky_relu_inplace(t: &mut Tensor3, slope: f64) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward through a leaky rectifier given its (post-activation) output.
pub fn leaky_relu_backward_inplace(output: &Tensor3, grad: &mut Tensor3, slope: f64) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g *= slope;
        }
    }
}

/// 2x2 stride-2 max pooling; returns the output and the flat argmax index of
/// each output cell. Ties go to the first element in row-major order.
pub fn max_pool2(input: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    let mut arg = vec![0usize; input.channels * h * w];
    for c in 0..input.channels {
        let base = c * input.height * input.width;
        for y in 0..h {
            for x in 0..w {
                let mut best = base + 2 * y * input.width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * input.width + 2 * x + dx;
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                let o = (c * h + y) * w + x;
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: (usize, usize, usize), argmax: &[usize], grad_out: &Tensor3) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut g = Tensor3::zeros(c, h, w);
    for (&i, &go) in argmax.iter().zip(&grad_out.data) {
        g.data[i] += go;
    }
    g
}
