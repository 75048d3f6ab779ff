use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Same-padded, stride-1 square convolution computed via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        Conv2d {
            weight: Array2::from_shape_fn((out_channels, fan_in), |_| normal.sample(rng)),
            bias: Array1::zeros(out_channels),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the pre-activation output and the im2col matrix for backward.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.kernel);
        let mut z = self.weight.dot(&cols);
        z += &self.bias.view().insert_axis(Axis(1));
        let z = z
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (z, cols)
    }

    /// Gradients w.r.t. weight, bias and (optionally) the input.
    pub fn backward(
        &self,
        input_dim: (usize, usize, usize),
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        want_params: bool,
        want_input: bool,
    ) -> ConvGrads {
        let (c, h, w) = input_dim;
        let g2 = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels(), h * w))
            .expect("grad shape");
        let params = want_params.then(|| (g2.dot(&cols.t()), g2.sum_axis(Axis(1))));
        let input = want_input.then(|| {
            let gcols = self.weight.t().dot(&g2);
            col2im(&gcols, (c, h, w), self.kernel)
        });
        ConvGrads { params, input }
    }
}

pub struct ConvGrads {
    pub params: Option<(Array2<f64>, Array1<f64>)>,
    pub input: Option<Array3<f64>>,
}

pub fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    if k == 1 {
        return x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("1x1 im2col");
    }
    let pad = (k / 2) as isize;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + sy as usize * w;
                    let dst = base + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            out[dst + xx] = xs[src + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(cols: &Array2<f64>, dim: (usize, usize, usize), k: usize) -> Array3<f64> {
    let (c, h, w) = dim;
    if k == 1 {
        return cols
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .expect("1x1 col2im");
    }
    let pad = (k / 2) as isize;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<f64>::zeros((c, h, w));
    let out = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + sy as usize * w;
                    let src = base + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            out[dst + sx as usize] += cs[src + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(outputs, inputs)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        Dense {
            weight: Array2::from_shape_fn((outputs, inputs), |_| normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// `(grad_weight, grad_bias, grad_input)`
    pub fn backward(&self, x: &Array1<f64>, g: &Array1<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let gw = g
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        (gw, g.clone(), self.weight.t().dot(g))
    }
}

pub fn relu(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(|v| v.max(0.0))
}

pub fn relu_backward(z: &Array3<f64>, g: &Array3<f64>) -> Array3<f64> {
    let mut out = g.clone();
    out.zip_mut_with(z, |gv, zv| {
        if *zv <= 0.0 {
            *gv = 0.0
        }
    });
    out
}

/// 2×2 max pooling with stride 2; returns the flat input index of each max.
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        let v = x[[ci, sy, sx]];
                        if v > best {
                            best = v;
                            best_i = (ci * h + sy) * w + sx;
                        }
                    }
                }
                out[[ci, y, xx]] = best;
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward(
    input_dim: (usize, usize, usize),
    idx: &[usize],
    g: &Array3<f64>,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros(input_dim);
    let flat = out.as_slice_mut().expect("fresh array");
    for (gv, &i) in g.iter().zip(idx) {
        flat[i] += gv;
    }
    out
}

pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dim: (usize, usize, usize), g: &Array1<f64>) -> Array3<f64> {
    let (c, h, w) = dim;
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[ci] * scale)
}
