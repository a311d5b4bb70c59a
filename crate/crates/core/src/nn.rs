//! Minimal trainable blocks: direct (im2col) convolution, dense layer, ReLU,
//! global average pooling, softmax cross-entropy, SGD with momentum and
//! milestone learning-rate decay, and the small reference CNN.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layer::{NormLayer, Normalizer};
use crate::norm::{BackwardCache, Epsilon, Mode};
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves H and W (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

/// Stride-1 2-D cross-correlation.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
    /// `out_c x in_c x kh x kw`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor4,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

impl ConvLayer {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        if in_c == 0 || out_c == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("conv", "all extents must be >= 1"));
        }
        if padding == Padding::Same && (kh.is_multiple_of(2) || kw.is_multiple_of(2)) {
            return Err(Error::invalid(
                "conv",
                format!("same padding needs odd kernels, got {kh}x{kw}"),
            ));
        }
        let bound = (1.0 / (in_c * kh * kw) as f64).sqrt();
        let weight = (0..out_c * in_c * kh * kw)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(ConvLayer {
            in_c,
            out_c,
            kh,
            kw,
            padding,
            weight,
            bias: vec![0.0; out_c],
        })
    }

    fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => ((self.kh - 1) / 2, (self.kw - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_c {
            return Err(Error::invalid(
                "conv input",
                format!("expected {} channels, got {}", self.in_c, input.c),
            ));
        }
        match self.padding {
            Padding::Same => Ok(Shape::new(input.n, self.out_c, input.h, input.w)),
            Padding::Valid => {
                if input.h < self.kh || input.w < self.kw {
                    return Err(Error::invalid("conv input", "spatial extent smaller than kernel"));
                }
                Ok(Shape::new(
                    input.n,
                    self.out_c,
                    input.h - self.kh + 1,
                    input.w - self.kw + 1,
                ))
            }
        }
    }

    /// Visits every (kernel tap, output row) pair with the contiguous
    /// output column range that reads inside the input.
    #[allow(clippy::too_many_arguments)]
    fn for_each_tap(
        &self,
        ishape: Shape,
        oshape: Shape,
        mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
    ) {
        let (ph, pw) = self.pads();
        for ki in 0..self.kh {
            for kj in 0..self.kw {
                let ow_lo = pw.saturating_sub(kj);
                let ow_hi = (ishape.w + pw).saturating_sub(kj).min(oshape.w);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in 0..oshape.h {
                    let ih = oh + ki;
                    if ih < ph || ih - ph >= ishape.h {
                        continue;
                    }
                    let ih = ih - ph;
                    let iw_lo = ow_lo + kj - pw;
                    f(ki, kj, oh, ih, ow_lo, ow_hi, iw_lo);
                }
            }
        }
    }

    /// Unfolds sample `n` into `cols`, a `(in_c*kh*kw) x (oh*ow)` matrix
    /// whose row `k` holds the input values seen by kernel tap `k`.
    fn im2col(&self, x: &Tensor4, n: usize, os: Shape, cols: &mut [f64]) {
        let is = x.shape();
        let (ip, op, taps) = (is.plane(), os.plane(), self.kh * self.kw);
        cols.fill(0.0);
        for ic in 0..self.in_c {
            let inp = &x.data()[(n * self.in_c + ic) * ip..][..ip];
            self.for_each_tap(is, os, |ki, kj, oh, ih, lo, hi, ilo| {
                let row = (ic * taps + ki * self.kw + kj) * op;
                cols[row + oh * os.w + lo..row + oh * os.w + hi]
                    .copy_from_slice(&inp[ih * is.w + ilo..ih * is.w + ilo + (hi - lo)]);
            });
        }
    }

    /// Adds the columns back onto their input positions (adjoint of
    /// [`ConvLayer::im2col`]).
    fn col2im(&self, cols: &[f64], is: Shape, os: Shape, dx: &mut [f64]) {
        let (ip, op, taps) = (is.plane(), os.plane(), self.kh * self.kw);
        for ic in 0..self.in_c {
            let dinp = &mut dx[ic * ip..][..ip];
            self.for_each_tap(is, os, |ki, kj, oh, ih, lo, hi, ilo| {
                let row = (ic * taps + ki * self.kw + kj) * op;
                let src = &cols[row + oh * os.w + lo..row + oh * os.w + hi];
                for (d, &v) in dinp[ih * is.w + ilo..].iter_mut().zip(src) {
                    *d += v;
                }
            });
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let is = x.shape();
        let os = self.output_shape(is)?;
        let op = os.plane();
        let k = self.in_c * self.kh * self.kw;
        let mut cols = vec![0.0; k * op];
        let mut y = Tensor4::zeros(os)?;
        for n in 0..is.n {
            self.im2col(x, n, os, &mut cols);
            let out = &mut y.data_mut()[n * self.out_c * op..][..self.out_c * op];
            for (oc, orow) in out.chunks_exact_mut(op).enumerate() {
                orow.fill(self.bias[oc]);
            }
            // Four output channels per pass so each column row is read once.
            for (blk, oblock) in out.chunks_mut(4 * op).enumerate() {
                let oc0 = blk * 4;
                let rows = oblock.len() / op;
                for (ki, crow) in cols.chunks_exact(op).enumerate() {
                    let w = |r: usize| self.weight[(oc0 + r) * k + ki];
                    if rows == 4 {
                        let (w0, w1, w2, w3) = (w(0), w(1), w(2), w(3));
                        let (o0, rest) = oblock.split_at_mut(op);
                        let (o1, rest) = rest.split_at_mut(op);
                        let (o2, o3) = rest.split_at_mut(op);
                        for p in 0..op {
                            let c = crow[p];
                            o0[p] += w0 * c;
                            o1[p] += w1 * c;
                            o2[p] += w2 * c;
                            o3[p] += w3 * c;
                        }
                    } else {
                        for (r, orow) in oblock.chunks_exact_mut(op).enumerate() {
                            let wr = w(r);
                            for (o, &c) in orow.iter_mut().zip(crow) {
                                *o += wr * c;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<ConvGrads> {
        let is = x.shape();
        let os = self.output_shape(is)?;
        if dy.shape() != os {
            return Err(Error::ShapeMismatch {
                left: dy.shape(),
                right: os,
            });
        }
        let (ip, op) = (is.plane(), os.plane());
        let k = self.in_c * self.kh * self.kw;
        let mut cols = vec![0.0; k * op];
        let mut dcols = vec![0.0; k * op];
        let mut dx = Tensor4::zeros(is)?;
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.out_c];
        for n in 0..is.n {
            self.im2col(x, n, os, &mut cols);
            dcols.fill(0.0);
            let g = &dy.data()[n * self.out_c * op..][..self.out_c * op];
            for (oc, grow) in g.chunks_exact(op).enumerate() {
                dbias[oc] += grow.iter().sum::<f64>();
            }
            for (blk, gblock) in g.chunks(4 * op).enumerate() {
                let oc0 = blk * 4;
                let rows = gblock.len() / op;
                for (ki, (crow, dcrow)) in cols.chunks_exact(op).zip(dcols.chunks_exact_mut(op)).enumerate() {
                    let widx = |r: usize| (oc0 + r) * k + ki;
                    if rows == 4 {
                        let (g0, g1, g2, g3) = (
                            &gblock[..op],
                            &gblock[op..2 * op],
                            &gblock[2 * op..3 * op],
                            &gblock[3 * op..4 * op],
                        );
                        let w = [0, 1, 2, 3].map(|r| self.weight[widx(r)]);
                        let mut acc = [0.0; 4];
                        for p in 0..op {
                            let c = crow[p];
                            acc[0] += g0[p] * c;
                            acc[1] += g1[p] * c;
                            acc[2] += g2[p] * c;
                            acc[3] += g3[p] * c;
                            dcrow[p] += w[0] * g0[p] + w[1] * g1[p] + w[2] * g2[p] + w[3] * g3[p];
                        }
                        for r in 0..4 {
                            dweight[widx(r)] += acc[r];
                        }
                    } else {
                        for (r, grow) in gblock.chunks_exact(op).enumerate() {
                            let w = self.weight[widx(r)];
                            let mut acc = 0.0;
                            for ((&gv, &c), dc) in grow.iter().zip(crow).zip(dcrow.iter_mut()) {
                                acc += gv * c;
                                *dc += w * gv;
                            }
                            dweight[widx(r)] += acc;
                        }
                    }
                }
            }
            self.col2im(
                &dcols,
                is,
                os,
                &mut dx.data_mut()[n * self.in_c * ip..][..self.in_c * ip],
            );
        }
        Ok(ConvGrads { dx, dweight, dbias })
    }
}

/// Fully connected layer over the flattened (C, H, W) features of each
/// sample; output shape `(N, out, 1, 1)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dx: Tensor4,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

impl DenseLayer {
    /// Weights and biases uniform in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::invalid("dense", "extents must be >= 1"));
        }
        let bound = (1.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(DenseLayer {
            inputs,
            outputs,
            weight,
            bias,
        })
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        if s.c * s.plane() != self.inputs {
            return Err(Error::invalid(
                "dense input",
                format!("expected {} features, got {}", self.inputs, s.c * s.plane()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let n = x.shape().n;
        let mut out = Vec::with_capacity(n * self.outputs);
        for row in x.data().chunks(self.inputs) {
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                out.push(self.bias[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Tensor4::from_vec(Shape::new(n, self.outputs, 1, 1), out)
    }

    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<DenseGrads> {
        self.check(x)?;
        let n = x.shape().n;
        let expected = Shape::new(n, self.outputs, 1, 1);
        if dy.shape() != expected {
            return Err(Error::ShapeMismatch {
                left: dy.shape(),
                right: expected,
            });
        }
        let mut dx = Tensor4::zeros(x.shape())?;
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.outputs];
        for ((row, g), drow) in x
            .data()
            .chunks(self.inputs)
            .zip(dy.data().chunks(self.outputs))
            .zip(dx.data_mut().chunks_mut(self.inputs))
        {
            for o in 0..self.outputs {
                let go = g[o];
                dbias[o] += go;
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let dw = &mut dweight[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    dw[i] += go * row[i];
                    drow[i] += go * w[i];
                }
            }
        }
        Ok(DenseGrads { dx, dweight, dbias })
    }
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(x: &Tensor4, dy: &Tensor4) -> Result<Tensor4> {
    x.zip_with(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Mean over (H, W); output `(N, C, 1, 1)`.
pub fn global_avg_pool_forward(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let plane = s.plane() as f64;
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().sum::<f64>() / plane)
        .collect();
    Tensor4::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape is valid")
}

pub fn global_avg_pool_backward(input: Shape, dy: &Tensor4) -> Result<Tensor4> {
    let expected = Shape::new(input.n, input.c, 1, 1);
    if dy.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: dy.shape(),
            right: expected,
        });
    }
    let scale = 1.0 / input.plane() as f64;
    let mut data = Vec::with_capacity(input.numel());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * scale, input.plane()));
    }
    Tensor4::from_vec(input, data)
}

/// Mean softmax cross-entropy over the batch, and its gradient
/// `(softmax - onehot) / N`. Logits are `(N, K, 1, 1)`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    let k = s.c * s.plane();
    if labels.len() != s.n {
        return Err(Error::invalid(
            "labels",
            format!("{} labels for a batch of {}", labels.len(), s.n),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let inv_n = 1.0 / s.n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.numel());
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += -(row[label] - max - log_sum);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max - log_sum).exp();
            grad.push((p - if j == label { 1.0 } else { 0.0 }) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor4::from_vec(s, grad)?))
}

/// Index of the largest logit per sample.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let s = logits.shape();
    let k = s.c * s.plane();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Learning-rate multiplier `factor` applied from `epoch` onward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

/// SGD with heavy-ball momentum: `v <- m*v + g; p <- p - lr(epoch)*v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub base_lr: f64,
    pub momentum: f64,
    pub milestones: Vec<Milestone>,
    /// L2 penalty added to gradients of parameters marked for decay.
    pub weight_decay: f64,
    velocities: Vec<Vec<f64>>,
}

/// One parameter tensor handed to the optimizer.
pub struct ParamRef<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub decay: bool,
}

impl SgdState {
    pub fn new(base_lr: f64, momentum: f64, milestones: Vec<Milestone>, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {momentum}"),
            ));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {base_lr}")));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(SgdState {
            base_lr,
            momentum,
            milestones,
            weight_decay,
            velocities: Vec::new(),
        })
    }

    /// Base rate times every milestone factor whose epoch has been reached.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| epoch >= m.epoch)
            .fold(self.base_lr, |lr, m| lr * m.factor)
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>], grads: &[Vec<f64>], epoch: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "sgd",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocities) {
            if p.values.len() != g.len() || v.len() != g.len() {
                return Err(Error::invalid(
                    "sgd",
                    format!(
                        "parameter {} has {} values, gradient {}",
                        p.name,
                        p.values.len(),
                        g.len()
                    ),
                ));
            }
        }
        let lr = self.lr(epoch);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// conv(3->16, 3x3, same) -> norm -> ReLU -> conv(16->32, 3x3, same) ->
/// norm -> ReLU -> global average pool -> dense(32->K).
#[derive(Debug, Clone)]
pub struct SmallCnn {
    pub normalizer: Normalizer,
    pub conv1: ConvLayer,
    pub norm1: Option<NormLayer>,
    pub conv2: ConvLayer,
    pub norm2: Option<NormLayer>,
    pub dense: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub normalizer: Normalizer,
    pub groups: usize,
    pub eps: Epsilon,
    pub alpha: f64,
}

pub struct CnnCache {
    x: Tensor4,
    n1: Option<BackwardCache>,
    a1_pre: Tensor4,
    a1: Tensor4,
    n2: Option<BackwardCache>,
    a2_pre: Tensor4,
    pooled: Tensor4,
}

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

impl SmallCnn {
    /// Non-normalization weights are drawn from `init_seed` in a fixed
    /// order that does not depend on the normalizer.
    pub fn new(spec: &ModelSpec, init_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let conv1 = ConvLayer::new(spec.in_channels, CONV1_CHANNELS, 3, 3, Padding::Same, &mut rng)?;
        let conv2 = ConvLayer::new(CONV1_CHANNELS, CONV2_CHANNELS, 3, 3, Padding::Same, &mut rng)?;
        let dense = DenseLayer::new(CONV2_CHANNELS, spec.classes, &mut rng)?;
        let norm = |c| -> Result<Option<NormLayer>> {
            spec.normalizer
                .kind(spec.groups)
                .map(|k| NormLayer::new(k, c, spec.eps, spec.alpha))
                .transpose()
        };
        Ok(SmallCnn {
            normalizer: spec.normalizer,
            conv1,
            norm1: norm(CONV1_CHANNELS)?,
            conv2,
            norm2: norm(CONV2_CHANNELS)?,
            dense,
        })
    }

    pub fn classes(&self) -> usize {
        self.dense.outputs
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, CnnCache)> {
        let c1 = self.conv1.forward(x)?;
        let (a1_pre, n1) = apply_norm(&mut self.norm1, &c1, mode)?;
        let a1 = relu_forward(&a1_pre);
        let c2 = self.conv2.forward(&a1)?;
        let (a2_pre, n2) = apply_norm(&mut self.norm2, &c2, mode)?;
        let a2 = relu_forward(&a2_pre);
        let pooled = global_avg_pool_forward(&a2);
        let logits = self.dense.forward(&pooled)?;
        Ok((
            logits,
            CnnCache {
                x: x.clone(),
                n1,
                a1_pre,
                a1,
                n2,
                a2_pre,
                pooled,
            },
        ))
    }

    /// Gradients ordered like [`SmallCnn::params_mut`].
    pub fn backward(&self, cache: &CnnCache, dlogits: &Tensor4) -> Result<Vec<Vec<f64>>> {
        let gd = self.dense.backward(&cache.pooled, dlogits)?;
        let da2 = global_avg_pool_backward(cache.a2_pre.shape(), &gd.dx)?;
        let dn2 = relu_backward(&cache.a2_pre, &da2)?;
        let (dc2, g_norm2) = norm_backward_opt(&self.norm2, cache.n2.as_ref(), &dn2)?;
        let gc2 = self.conv2.backward(&cache.a1, &dc2)?;
        let dn1 = relu_backward(&cache.a1_pre, &gc2.dx)?;
        let (dc1, g_norm1) = norm_backward_opt(&self.norm1, cache.n1.as_ref(), &dn1)?;
        let gc1 = self.conv1.backward(&cache.x, &dc1)?;

        let mut grads = vec![gc1.dweight, gc1.dbias];
        grads.extend(g_norm1);
        grads.push(gc2.dweight);
        grads.push(gc2.dbias);
        grads.extend(g_norm2);
        grads.push(gd.dweight);
        grads.push(gd.dbias);
        Ok(grads)
    }

    pub fn params_mut(&mut self, iota_weight_decay: bool) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef {
                name: "conv1.weight".into(),
                values: &mut self.conv1.weight,
                decay: true,
            },
            ParamRef {
                name: "conv1.bias".into(),
                values: &mut self.conv1.bias,
                decay: false,
            },
        ];
        push_norm_params(&mut out, "norm1", self.norm1.as_mut(), iota_weight_decay);
        out.push(ParamRef {
            name: "conv2.weight".into(),
            values: &mut self.conv2.weight,
            decay: true,
        });
        out.push(ParamRef {
            name: "conv2.bias".into(),
            values: &mut self.conv2.bias,
            decay: false,
        });
        push_norm_params(&mut out, "norm2", self.norm2.as_mut(), iota_weight_decay);
        out.push(ParamRef {
            name: "dense.weight".into(),
            values: &mut self.dense.weight,
            decay: true,
        });
        out.push(ParamRef {
            name: "dense.bias".into(),
            values: &mut self.dense.bias,
            decay: false,
        });
        out
    }

    /// Normalization layers with their checkpoint prefixes.
    pub fn norm_layers(&self) -> Vec<(&'static str, &NormLayer)> {
        [("norm1", self.norm1.as_ref()), ("norm2", self.norm2.as_ref())]
            .into_iter()
            .filter_map(|(name, l)| l.map(|l| (name, l)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_scalar("model.in_channels", self.conv1.in_c as f64);
        c.insert_scalar("model.classes", self.dense.outputs as f64);
        c.insert("conv1.weight", self.conv1.weight.clone());
        c.insert("conv1.bias", self.conv1.bias.clone());
        c.insert("conv2.weight", self.conv2.weight.clone());
        c.insert("conv2.bias", self.conv2.bias.clone());
        c.insert("dense.weight", self.dense.weight.clone());
        c.insert("dense.bias", self.dense.bias.clone());
        for (name, layer) in self.norm_layers() {
            layer.save(name, &mut c);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let in_c = c.require_scalar("model.in_channels")? as usize;
        let classes = c.require_scalar("model.classes")? as usize;
        let load = |key: &str, len: usize| -> Result<Vec<f64>> {
            let v = c.require(key)?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!(
                    "{key} has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v.to_vec())
        };
        let conv = |prefix: &str, i: usize, o: usize| -> Result<ConvLayer> {
            Ok(ConvLayer {
                in_c: i,
                out_c: o,
                kh: 3,
                kw: 3,
                padding: Padding::Same,
                weight: load(&format!("{prefix}.weight"), o * i * 9)?,
                bias: load(&format!("{prefix}.bias"), o)?,
            })
        };
        let norm1 = c.get("norm1.kind").map(|_| NormLayer::load("norm1", c)).transpose()?;
        let norm2 = c.get("norm2.kind").map(|_| NormLayer::load("norm2", c)).transpose()?;
        let normalizer = match norm1.as_ref().map(|l| l.kind()) {
            None => Normalizer::None,
            Some(crate::norm::NormKind::Batch) => Normalizer::Bn,
            Some(crate::norm::NormKind::Layer) => Normalizer::Ln,
            Some(crate::norm::NormKind::Instance) => Normalizer::In,
            Some(crate::norm::NormKind::Group(_)) => Normalizer::Gn,
            Some(crate::norm::NormKind::BatchChannel) => Normalizer::Bcn,
        };
        Ok(SmallCnn {
            normalizer,
            conv1: conv("conv1", in_c, CONV1_CHANNELS)?,
            norm1,
            conv2: conv("conv2", CONV1_CHANNELS, CONV2_CHANNELS)?,
            norm2,
            dense: DenseLayer {
                inputs: CONV2_CHANNELS,
                outputs: classes,
                weight: load("dense.weight", classes * CONV2_CHANNELS)?,
                bias: load("dense.bias", classes)?,
            },
        })
    }
}

fn apply_norm(norm: &mut Option<NormLayer>, x: &Tensor4, mode: Mode) -> Result<(Tensor4, Option<BackwardCache>)> {
    match norm {
        Some(layer) => {
            let (y, cache) = layer.forward(x, mode)?;
            Ok((y, Some(cache)))
        }
        None => Ok((x.clone(), None)),
    }
}

fn norm_backward_opt(
    norm: &Option<NormLayer>,
    cache: Option<&BackwardCache>,
    dy: &Tensor4,
) -> Result<(Tensor4, Vec<Vec<f64>>)> {
    match (norm, cache) {
        (Some(layer), Some(cache)) => {
            let g = layer.backward(cache, dy)?;
            let dx = g.dx.clone();
            Ok((dx, NormLayer::grads_in_order(g)))
        }
        _ => Ok((dy.clone(), Vec::new())),
    }
}

fn push_norm_params<'a>(out: &mut Vec<ParamRef<'a>>, prefix: &str, layer: Option<&'a mut NormLayer>, iota_decay: bool) {
    if let Some(layer) = layer {
        for (name, values) in layer.params_mut() {
            out.push(ParamRef {
                name: format!("{prefix}.{name}"),
                values,
                decay: name == "iota" && iota_decay,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut conv = ConvLayer::new(3, 3, 1, 1, Padding::Same, &mut rng(0)).unwrap();
        conv.weight = vec![0.0; 9];
        for c in 0..3 {
            conv.weight[c * 3 + c] = 1.0;
        }
        let x = Tensor4::uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng(1)).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_valid_padding() {
        let mut conv = ConvLayer::new(2, 1, 3, 3, Padding::Valid, &mut rng(0)).unwrap();
        conv.weight = vec![1.0; 18];
        let x = Tensor4::full(Shape::new(1, 2, 5, 5), 0.5).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        // 9 taps * 0.5 per input channel, two channels
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn same_padding_preserves_extent_and_zero_pads() {
        let mut conv = ConvLayer::new(1, 1, 3, 3, Padding::Same, &mut rng(0)).unwrap();
        conv.weight = vec![1.0; 9];
        let x = Tensor4::full(Shape::new(1, 1, 4, 4), 1.0).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
    }

    #[test]
    fn conv_errors() {
        assert!(ConvLayer::new(1, 1, 2, 3, Padding::Same, &mut rng(0)).is_err());
        let conv = ConvLayer::new(2, 1, 3, 3, Padding::Valid, &mut rng(0)).unwrap();
        assert!(conv.forward(&Tensor4::zeros(Shape::new(1, 3, 4, 4)).unwrap()).is_err());
        assert!(conv.forward(&Tensor4::zeros(Shape::new(1, 2, 2, 4)).unwrap()).is_err());
    }

    #[test]
    fn relu_and_pool_basics() {
        let x = Tensor4::full(Shape::new(2, 2, 2, 2), -1.0).unwrap();
        assert!(relu_forward(&x).data().iter().all(|&v| v == 0.0));
        let dy = Tensor4::full(x.shape(), 3.0).unwrap();
        assert!(relu_backward(&x, &dy).unwrap().data().iter().all(|&v| v == 0.0));
        let c = Tensor4::full(Shape::new(2, 3, 4, 4), 0.7).unwrap();
        let p = global_avg_pool_forward(&c);
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1));
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor4::zeros(Shape::new(3, 10, 1, 1)).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let mut confident = Tensor4::zeros(Shape::new(1, 4, 1, 1)).unwrap();
        confident.data_mut()[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&confident, &[2]).unwrap();
        assert!(loss < 1e-20, "{loss}");
        assert!(matches!(
            softmax_cross_entropy(&confident, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        let mut sgd = SgdState::new(0.1, 0.9, vec![], 0.0).unwrap();
        let g = vec![vec![1.0]];
        sgd.step(
            &mut [ParamRef {
                name: "p".into(),
                values: &mut p,
                decay: true,
            }],
            &g,
            0,
        )
        .unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd.step(
            &mut [ParamRef {
                name: "p".into(),
                values: &mut p,
                decay: true,
            }],
            &g,
            0,
        )
        .unwrap();
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_decays_without_gradient() {
        let mut p = vec![0.0];
        let mut sgd = SgdState::new(0.1, 0.5, vec![], 0.0).unwrap();
        sgd.step(
            &mut [ParamRef {
                name: "p".into(),
                values: &mut p,
                decay: true,
            }],
            &[vec![1.0]],
            0,
        )
        .unwrap();
        let mut moves = Vec::new();
        for _ in 0..20 {
            let before = p[0];
            sgd.step(
                &mut [ParamRef {
                    name: "p".into(),
                    values: &mut p,
                    decay: true,
                }],
                &[vec![0.0]],
                0,
            )
            .unwrap();
            moves.push(before - p[0]);
        }
        for w in moves.windows(2) {
            assert!((w[1] - 0.5 * w[0]).abs() < 1e-15);
        }
        assert!(moves.last().unwrap().abs() < 1e-6);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut a = vec![0.3, -1.2, 2.0];
        let g = vec![vec![0.5, -0.25, 1.0]];
        let mut sgd = SgdState::new(0.05, 0.0, vec![], 0.0).unwrap();
        for _ in 0..3 {
            let expect: Vec<f64> = a.iter().zip(&g[0]).map(|(p, g)| p - 0.05 * g).collect();
            sgd.step(
                &mut [ParamRef {
                    name: "a".into(),
                    values: &mut a,
                    decay: true,
                }],
                &g,
                0,
            )
            .unwrap();
            assert_eq!(a, expect);
        }
    }

    #[test]
    fn milestone_schedule() {
        let sgd = SgdState::new(
            0.1,
            0.9,
            vec![
                Milestone { epoch: 75, factor: 0.1 },
                Milestone { epoch: 85, factor: 0.1 },
            ],
            0.0,
        )
        .unwrap();
        assert_eq!(sgd.lr(0), 0.1);
        assert!((sgd.lr(80) - 0.01).abs() < 1e-15);
        assert!((sgd.lr(90) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sgd_validates() {
        assert!(SgdState::new(0.1, 1.0, vec![], 0.0).is_err());
        assert!(SgdState::new(0.0, 0.5, vec![], 0.0).is_err());
        let mut sgd = SgdState::new(0.1, 0.5, vec![], 0.0).unwrap();
        let mut p = vec![0.0; 2];
        assert!(sgd
            .step(
                &mut [ParamRef {
                    name: "p".into(),
                    values: &mut p,
                    decay: true
                }],
                &[vec![0.0]],
                0
            )
            .is_err());
    }

    fn spec(normalizer: Normalizer) -> ModelSpec {
        ModelSpec {
            in_channels: 3,
            classes: 4,
            normalizer,
            groups: 4,
            eps: Epsilon::default(),
            alpha: 0.9,
        }
    }

    #[test]
    fn reference_cnn_step_stays_finite() {
        let x = Tensor4::uniform(Shape::new(8, 3, 16, 16), 0.0, 1.0, &mut rng(2)).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        for norm in [
            Normalizer::None,
            Normalizer::Bn,
            Normalizer::Ln,
            Normalizer::In,
            Normalizer::Gn,
            Normalizer::Bcn,
        ] {
            let mut model = SmallCnn::new(&spec(norm), 5).unwrap();
            let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
            assert!(loss.is_finite());
            let grads = model.backward(&cache, &dlogits).unwrap();
            let mut sgd = SgdState::new(0.1, 0.9, vec![], 0.0).unwrap();
            sgd.step(&mut model.params_mut(false), &grads, 0).unwrap();
            for p in model.params_mut(false) {
                assert!(p.values.iter().all(|v| v.is_finite()), "{} {}", norm, p.name);
            }
        }
    }

    #[test]
    fn init_independent_of_normalizer() {
        let a = SmallCnn::new(&spec(Normalizer::Bn), 9).unwrap();
        let b = SmallCnn::new(&spec(Normalizer::Bcn), 9).unwrap();
        assert_eq!(a.conv1.weight, b.conv1.weight);
        assert_eq!(a.conv2.weight, b.conv2.weight);
        assert_eq!(a.dense.weight, b.dense.weight);
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let mut m = SmallCnn::new(&spec(Normalizer::Bcn), 3).unwrap();
        let x = Tensor4::uniform(Shape::new(4, 3, 6, 6), 0.0, 1.0, &mut rng(3)).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        let c = m.to_checkpoint();
        let mut back = SmallCnn::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.normalizer, Normalizer::Bcn);
        let (a, _) = m.forward(&x, Mode::Eval).unwrap();
        let (b, _) = back.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }
}
