//! Reference network interpreter that runs real convolutions on a float
//! tensor and counts every scalar multiply it performs, including taps that
//! land in zero padding. Parameter counts come from the lengths of the weight
//! buffers it allocates. Nothing here shares code with the estimator.

#![allow(dead_code)]

use llmnas_core::space::{ArchitectureConfig, ConvBlock};

#[derive(Clone)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn filled(h: usize, w: usize, c: usize) -> Self {
        let data = (0..h * w * c).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect();
        Self { h, w, c, data }
    }

    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    fn at(&self, y: isize, x: isize, ch: usize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            0.0
        } else {
            self.data[(y as usize * self.w + x as usize) * self.c + ch]
        }
    }
}

#[derive(Default)]
pub struct Counter {
    pub mults: u64,
    pub params: u64,
}

impl Counter {
    fn weights(&mut self, n: usize) -> Vec<f32> {
        self.params += n as u64;
        (0..n).map(|i| 0.01 * ((i % 5) as f32 - 2.0)).collect()
    }

    fn mul(&mut self, a: f32, b: f32) -> f32 {
        self.mults += 1;
        a * b
    }
}

/// TensorFlow SAME padding: output is ceil(in / stride), leading pad is the smaller half.
fn same_pad(input: usize, k: usize, stride: usize) -> (usize, isize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, (total / 2) as isize)
}

/// Dense conv when `groups == 1`, depthwise when `groups == c_in == c_out`.
fn conv(t: &Tensor, n: &mut Counter, k: usize, stride: usize, c_out: usize, depthwise: bool) -> Tensor {
    let (oh, pad_y) = same_pad(t.h, k, stride);
    let (ow, pad_x) = same_pad(t.w, k, stride);
    let per_out = if depthwise { 1 } else { t.c };
    let w = n.weights(k * k * per_out * c_out);
    let mut out = Tensor::zeros(oh, ow, c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..c_out {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad_y;
                        let x = (ox * stride + kx) as isize - pad_x;
                        if depthwise {
                            let wv = w[(ky * k + kx) * c_out + co];
                            acc += n.mul(t.at(y, x, co), wv);
                        } else {
                            for ci in 0..t.c {
                                let wv = w[((ky * k + kx) * t.c + ci) * c_out + co];
                                acc += n.mul(t.at(y, x, ci), wv);
                            }
                        }
                    }
                }
                out.data[(oy * ow + ox) * c_out + co] = acc;
            }
        }
    }
    out
}

fn batch_norm(t: &mut Tensor, n: &mut Counter) {
    let gamma_beta = n.weights(2 * t.c);
    for (i, v) in t.data.iter_mut().enumerate() {
        let ch = i % t.c;
        // Folded into the preceding conv at inference: no multiplies counted.
        *v = *v * (1.0 + gamma_beta[ch]) + gamma_beta[t.c + ch];
    }
}

/// Global average pool, one accumulate per element.
fn gap(t: &Tensor, n: &mut Counter) -> Vec<f32> {
    let mut s = vec![0.0; t.c];
    for (i, v) in t.data.iter().enumerate() {
        s[i % t.c] += n.mul(*v, 1.0);
    }
    s
}

fn dense(x: &[f32], n: &mut Counter, out: usize) -> Vec<f32> {
    let w = n.weights(x.len() * out);
    let b = n.weights(out);
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| n.mul(*v, w[i * out + o])).sum::<f32>())
        .collect()
}

fn squeeze_excite(t: &mut Tensor, n: &mut Counter, ratio: f64) {
    let reduced = ((t.c as f64 * ratio).floor() as usize).max(1);
    let pooled = gap(t, n);
    let hidden: Vec<f32> = dense(&pooled, n, reduced).into_iter().map(|v| v.max(0.0)).collect();
    let gate: Vec<f32> = dense(&hidden, n, t.c).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let c = t.c;
    for i in 0..t.data.len() {
        t.data[i] = n.mul(t.data[i], gate[i % c]);
    }
}

fn add(a: &mut Tensor, b: &Tensor, n: &mut Counter) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += n.mul(*y, 1.0);
    }
}

/// Runs stem, stages and head; returns (multiplies, parameters).
pub fn run(arch: &ArchitectureConfig, resolution: usize, classes: usize) -> (u64, u64) {
    let mut n = Counter::default();
    let mut x = conv(&Tensor::filled(resolution, resolution, 3), &mut n, 3, 2, 16, false);
    batch_norm(&mut x, &mut n);
    for stage in &arch.stages {
        for block in 0..stage.layers {
            let stride = if block == 0 { stage.stride as usize } else { 1 };
            let c_out = stage.out_channels as usize;
            let input = x.clone();
            if stage.conv_block == ConvBlock::MbConv {
                x = conv(&x, &mut n, 1, 1, x.c * stage.expansion as usize, false);
                batch_norm(&mut x, &mut n);
            }
            x = conv(&x, &mut n, stage.kernel as usize, stride, x.c, true);
            batch_norm(&mut x, &mut n);
            if stage.se_enabled {
                squeeze_excite(&mut x, &mut n, stage.se_ratio.expect("ratio set when se enabled"));
            }
            x = conv(&x, &mut n, 1, 1, c_out, false);
            batch_norm(&mut x, &mut n);
            if stage.skip && stride == 1 && input.c == c_out {
                add(&mut x, &input, &mut n);
            }
        }
    }
    let pooled = gap(&x, &mut n);
    dense(&pooled, &mut n, classes);
    (n.mults, n.params)
}
