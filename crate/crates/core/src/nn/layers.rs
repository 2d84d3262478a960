//! Network building blocks with hand-written backward passes.
//!
//! Every layer's `forward` is `&self` and returns the activations plus, in
//! training mode, the record its `backward` needs. Gradients are returned
//! rather than accumulated into the layer, so the same weights can be
//! shared by concurrent inference.

use rand::Rng;

use super::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};
use crate::rng::SplitMix64;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A `[C, N, H, W]` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn uniform_init(rng: &mut SplitMix64, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out, in * k * k]`
    pub weight: Tensor,
}

#[derive(Debug)]
pub struct ConvRecord {
    geom: ConvGeom,
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Tensor {
                shape: vec![out_channels, fan_in],
                data: uniform_init(rng, out_channels * fan_in, bound),
            },
        }
    }

    pub fn forward(&self, x: &Act, mode: Mode) -> (Act, Option<ConvRecord>) {
        debug_assert_eq!(x.channels, self.in_channels);
        let geom = ConvGeom {
            channels: x.channels,
            batch: x.batch,
            height: x.height,
            width: x.width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let mut cols = Vec::new();
        im2col(&x.data, &geom, &mut cols);
        let p = geom.positions();
        let mut out = vec![0.0; self.out_channels * p];
        gemm(self.out_channels, geom.patch_len(), p, 1.0, &self.weight.data, false, &cols, false, 0.0, &mut out);
        let act = Act {
            channels: self.out_channels,
            batch: x.batch,
            height: geom.out_height(),
            width: geom.out_width(),
            data: out,
        };
        let record = (mode == Mode::Train).then_some(ConvRecord { geom, cols });
        (act, record)
    }

    /// Returns `(d_weight, d_input)`; the input gradient is skipped when
    /// `need_dx` is false.
    pub fn backward(&self, rec: &ConvRecord, dout: &[f64], need_dx: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let k = rec.geom.patch_len();
        let p = rec.geom.positions();
        let mut dw = vec![0.0; self.out_channels * k];
        gemm(self.out_channels, p, k, 1.0, dout, false, &rec.cols, true, 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; k * p];
            gemm(k, self.out_channels, p, 1.0, &self.weight.data, true, dout, false, 0.0, &mut dcols);
            let g = &rec.geom;
            let mut dx = vec![0.0; g.channels * g.batch * g.height * g.width];
            col2im(&dcols, g, &mut dx);
            dx
        });
        (dw, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug)]
pub struct BnRecord {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn forward(&self, mut x: Act, mode: Mode) -> (Act, Option<BnRecord>) {
        let m = x.plane();
        match mode {
            Mode::Infer => {
                for c in 0..self.channels {
                    let inv = 1.0 / (self.running_var.data[c] + BN_EPS).sqrt();
                    let (g, b, mu) = (self.gamma.data[c], self.beta.data[c], self.running_mean.data[c]);
                    for v in &mut x.data[c * m..(c + 1) * m] {
                        *v = g * (*v - mu) * inv + b;
                    }
                }
                (x, None)
            }
            Mode::Train => {
                let mut xhat = vec![0.0; x.data.len()];
                let mut inv_std = Vec::with_capacity(self.channels);
                let mut batch_mean = Vec::with_capacity(self.channels);
                let mut batch_var = Vec::with_capacity(self.channels);
                for c in 0..self.channels {
                    let slice = &mut x.data[c * m..(c + 1) * m];
                    let mean = slice.iter().sum::<f64>() / m as f64;
                    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + BN_EPS).sqrt();
                    let (g, b) = (self.gamma.data[c], self.beta.data[c]);
                    for (v, xh) in slice.iter_mut().zip(&mut xhat[c * m..(c + 1) * m]) {
                        *xh = (*v - mean) * inv;
                        *v = g * *xh + b;
                    }
                    inv_std.push(inv);
                    batch_mean.push(mean);
                    batch_var.push(var);
                }
                (x, Some(BnRecord { xhat, inv_std, batch_mean, batch_var }))
            }
        }
    }

    /// Returns `(d_gamma, d_beta, d_input)`.
    pub fn backward(&self, rec: &BnRecord, mut dy: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = dy.len() / self.channels;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        for c in 0..self.channels {
            let d = &mut dy[c * m..(c + 1) * m];
            let xh = &rec.xhat[c * m..(c + 1) * m];
            let sum_dy: f64 = d.iter().sum();
            let sum_dy_xh: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            dgamma[c] = sum_dy_xh;
            dbeta[c] = sum_dy;
            let k = self.gamma.data[c] * rec.inv_std[c] / m as f64;
            for (dv, &x) in d.iter_mut().zip(xh) {
                *dv = k * (m as f64 * *dv - sum_dy - x * sum_dy_xh);
            }
        }
        (dgamma, dbeta, dy)
    }

    pub fn update_running(&mut self, rec: &BnRecord) {
        for c in 0..self.channels {
            let rm = &mut self.running_mean.data[c];
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * rec.batch_mean[c];
            let rv = &mut self.running_var.data[c];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * rec.batch_var[c];
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the rectified output was not positive.
pub fn relu_backward(grad: &mut [f64], out: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            weight: Tensor { shape: vec![outputs, inputs], data: uniform_init(rng, outputs * inputs, bound) },
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    /// `x` is `[N, in]`, result `[N, out]`.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (i, o) = (self.inputs(), self.outputs());
        let mut y = vec![0.0; batch * o];
        for n in 0..batch {
            y[n * o..(n + 1) * o].copy_from_slice(&self.bias.data);
        }
        gemm(batch, i, o, 1.0, x, false, &self.weight.data, true, 1.0, &mut y);
        y
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(&self, x: &[f64], dy: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (i, o) = (self.inputs(), self.outputs());
        let mut dw = vec![0.0; o * i];
        gemm(o, batch, i, 1.0, dy, true, x, false, 0.0, &mut dw);
        let mut db = vec![0.0; o];
        for n in 0..batch {
            for (acc, v) in db.iter_mut().zip(&dy[n * o..(n + 1) * o]) {
                *acc += v;
            }
        }
        let mut dx = vec![0.0; batch * i];
        gemm(batch, o, i, 1.0, dy, false, &self.weight.data, false, 0.0, &mut dx);
        (dw, db, dx)
    }
}

/// Two 3x3 convolutions with batch norm and a shortcut; the shortcut is a
/// strided 1x1 projection when the shape changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug)]
pub struct BlockRecord {
    conv1: ConvRecord,
    pub bn1: BnRecord,
    hidden: Vec<f64>,
    conv2: ConvRecord,
    pub bn2: BnRecord,
    projection: Option<(ConvRecord, BnRecord)>,
    out: Vec<f64>,
}

impl BlockRecord {
    pub fn projection_bn(&self) -> Option<&BnRecord> {
        self.projection.as_ref().map(|(_, b)| b)
    }
}

/// Gradients of one block in parameter order.
pub struct BlockGrads {
    pub tensors: Vec<Vec<f64>>,
    pub dx: Vec<f64>,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        let projection = (stride != 1 || in_channels != out_channels)
            .then(|| (Conv2d::new(in_channels, out_channels, 1, stride, rng), BatchNorm2d::new(out_channels)));
        ResidualBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, rng),
            bn1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            projection,
        }
    }

    pub fn forward(&self, x: &Act, mode: Mode) -> (Act, Option<BlockRecord>) {
        let (a, c1) = self.conv1.forward(x, mode);
        let (mut a, b1) = self.bn1.forward(a, mode);
        relu_inplace(&mut a.data);
        let (b, c2) = self.conv2.forward(&a, mode);
        let (mut b, b2) = self.bn2.forward(b, mode);
        let proj = match &self.projection {
            Some((conv, bn)) => {
                let (s, pc) = conv.forward(x, mode);
                let (s, pb) = bn.forward(s, mode);
                for (o, v) in b.data.iter_mut().zip(&s.data) {
                    *o += v;
                }
                pc.zip(pb)
            }
            None => {
                for (o, v) in b.data.iter_mut().zip(&x.data) {
                    *o += v;
                }
                None
            }
        };
        relu_inplace(&mut b.data);
        let record = match mode {
            Mode::Infer => None,
            Mode::Train => Some(BlockRecord {
                conv1: c1.unwrap(),
                bn1: b1.unwrap(),
                hidden: a.data,
                conv2: c2.unwrap(),
                bn2: b2.unwrap(),
                projection: proj,
                out: b.data.clone(),
            }),
        };
        (b, record)
    }

    pub fn backward(&self, rec: &BlockRecord, mut dout: Vec<f64>) -> BlockGrads {
        relu_backward(&mut dout, &rec.out);
        let (dg2, db2, dconv2) = self.bn2.backward(&rec.bn2, dout.clone());
        let (dw2, dh) = self.conv2.backward(&rec.conv2, &dconv2, true);
        let mut dh = dh.unwrap();
        relu_backward(&mut dh, &rec.hidden);
        let (dg1, db1, dconv1) = self.bn1.backward(&rec.bn1, dh);
        let (dw1, dx) = self.conv1.backward(&rec.conv1, &dconv1, true);
        let mut dx = dx.unwrap();
        let mut tensors = vec![dw1, dg1, db1, dw2, dg2, db2];
        match (&self.projection, &rec.projection) {
            (Some((conv, bn)), Some((pc, pb))) => {
                let (dgp, dbp, dproj) = bn.backward(pb, dout);
                let (dwp, dxp) = conv.backward(pc, &dproj, true);
                for (a, b) in dx.iter_mut().zip(dxp.unwrap()) {
                    *a += b;
                }
                tensors.extend([dwp, dgp, dbp]);
            }
            _ => {
                for (a, b) in dx.iter_mut().zip(&dout) {
                    *a += b;
                }
            }
        }
        BlockGrads { tensors, dx }
    }

    pub fn update_running(&mut self, rec: &BlockRecord) {
        self.bn1.update_running(&rec.bn1);
        self.bn2.update_running(&rec.bn2);
        if let (Some((_, bn)), Some(pb)) = (&mut self.projection, rec.projection_bn()) {
            bn.update_running(pb);
        }
    }
}
