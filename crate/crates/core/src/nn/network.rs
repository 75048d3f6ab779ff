use ndarray::{Array1, Array2, Array3};

use super::layers::{self, Conv2d, Dense};
use crate::seed::sha256_hex;

/// `conv -> relu -> [2×2 max pool]`. The block's named activation is the
/// ReLU output, taken before pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub conv: Conv2d,
    pub pool: bool,
}

/// Conv blocks followed by global average pooling and a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub blocks: Vec<ConvBlock>,
    pub fc: Dense,
}

pub struct BlockTrace {
    input_dim: (usize, usize, usize),
    cols: Array2<f64>,
    pre: Array3<f64>,
    pub activation: Array3<f64>,
    pool_idx: Option<Vec<usize>>,
}

/// Cached forward pass starting at block `start`.
pub struct Trace {
    pub start: usize,
    pub blocks: Vec<BlockTrace>,
    pooled_dim: (usize, usize, usize),
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

impl Trace {
    pub fn activation(&self, block: usize) -> Option<&Array3<f64>> {
        block
            .checked_sub(self.start)
            .and_then(|i| self.blocks.get(i))
            .map(|b| &b.activation)
    }
}

/// Parameter gradients for blocks `from..` and the classifier.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub from: usize,
    pub blocks: Vec<(Array2<f64>, Array1<f64>)>,
    pub fc: (Array2<f64>, Array1<f64>),
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.blocks.iter_mut().zip(&other.blocks) {
            *w += ow;
            *b += ob;
        }
        self.fc.0 += &other.fc.0;
        self.fc.1 += &other.fc.1;
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.blocks {
            *w *= s;
            *b *= s;
        }
        self.fc.0 *= s;
        self.fc.1 *= s;
    }

    /// Flat views in the same order as [`Network::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in &self.blocks {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.fc.0.as_slice().expect("standard layout"));
        out.push(self.fc.1.as_slice().expect("standard layout"));
        out
    }
}

pub struct Backward {
    pub tap: Option<Array3<f64>>,
    pub params: Option<Gradients>,
}

impl Network {
    /// Runs blocks `start..` on `x` (the input of block `start`).
    pub fn trace_from(&self, start: usize, x: Array3<f64>) -> Trace {
        let mut blocks = Vec::with_capacity(self.blocks.len() - start);
        let mut x = x;
        for block in &self.blocks[start..] {
            let input_dim = x.dim();
            let (pre, cols) = block.conv.forward(&x);
            let activation = layers::relu(&pre);
            let (out, pool_idx) = if block.pool {
                let (p, idx) = layers::max_pool2(&activation);
                (p, Some(idx))
            } else {
                (activation.clone(), None)
            };
            blocks.push(BlockTrace {
                input_dim,
                cols,
                pre,
                activation,
                pool_idx,
            });
            x = out;
        }
        let pooled = layers::global_avg_pool(&x);
        let logits = self.fc.forward(&pooled);
        Trace {
            start,
            blocks,
            pooled_dim: x.dim(),
            pooled,
            logits,
        }
    }

    /// Logits from the output of block `start - 1` without caching.
    pub fn logits_from(&self, start: usize, x: &Array3<f64>) -> Array1<f64> {
        let mut x = x.clone();
        for block in &self.blocks[start..] {
            let a = layers::relu(&block.conv.forward(&x).0);
            x = if block.pool { layers::max_pool2(&a).0 } else { a };
        }
        self.fc.forward(&layers::global_avg_pool(&x))
    }

    /// Logits given the activation of block `block` (post-ReLU, pre-pool).
    pub fn logits_from_activation(&self, block: usize, activation: &Array3<f64>) -> Array1<f64> {
        let out = if self.blocks[block].pool {
            layers::max_pool2(activation).0
        } else {
            activation.clone()
        };
        self.logits_from(block + 1, &out)
    }

    /// Backpropagates `grad_logits` down to block `stop` (inclusive).
    ///
    /// `tap` selects a block whose activation gradient is returned; it must
    /// satisfy `tap >= stop`. Parameter gradients cover blocks `stop..`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_logits: &Array1<f64>,
        stop: usize,
        want_params: bool,
        tap: Option<usize>,
    ) -> Backward {
        assert!(stop >= trace.start, "cannot backprop below the traced start");
        let (gw, gb, gpooled) = self.fc.backward(&trace.pooled, grad_logits);
        let mut g = layers::global_avg_pool_backward(trace.pooled_dim, &gpooled);
        let mut tap_grad = None;
        let mut block_grads = Vec::new();
        for i in (stop..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            let bt = &trace.blocks[i - trace.start];
            if let Some(idx) = &bt.pool_idx {
                g = layers::max_pool2_backward(bt.activation.dim(), idx, &g);
            }
            if tap == Some(i) {
                tap_grad = Some(g.clone());
            }
            let gz = layers::relu_backward(&bt.pre, &g);
            let need_input = i > stop;
            let grads = block
                .conv
                .backward(bt.input_dim, &bt.cols, &gz, want_params, need_input);
            if let Some(p) = grads.params {
                block_grads.push(p);
            }
            match grads.input {
                Some(gi) => g = gi,
                None => break,
            }
        }
        block_grads.reverse();
        Backward {
            tap: tap_grad,
            params: want_params.then_some(Gradients {
                from: stop,
                blocks: block_grads,
                fc: (gw, gb),
            }),
        }
    }

    /// Mutable flat parameter views for blocks `from..` and the classifier.
    pub fn params_mut(&mut self, from: usize) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for block in &mut self.blocks[from..] {
            out.push(block.conv.weight.as_slice_mut().expect("standard layout"));
            out.push(block.conv.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.fc.weight.as_slice_mut().expect("standard layout"));
        out.push(self.fc.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn zero_gradients(&self, from: usize) -> Gradients {
        Gradients {
            from,
            blocks: self.blocks[from..]
                .iter()
                .map(|b| {
                    (
                        Array2::zeros(b.conv.weight.raw_dim()),
                        Array1::zeros(b.conv.bias.len()),
                    )
                })
                .collect(),
            fc: (
                Array2::zeros(self.fc.weight.raw_dim()),
                Array1::zeros(self.fc.bias.len()),
            ),
        }
    }
}

/// SHA-256 over the little-endian bytes of every block parameter.
pub fn blocks_checksum(blocks: &[ConvBlock]) -> String {
    let mut bytes = Vec::new();
    for b in blocks {
        bytes.extend(b.name.as_bytes());
        for v in b.conv.weight.iter().chain(b.conv.bias.iter()) {
            bytes.extend(v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}
