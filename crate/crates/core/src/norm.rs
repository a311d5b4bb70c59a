//! Normalization layers over NCHW tensors: batch (BN), layer (LN),
//! instance (IN), group (GN) and batch-channel (BCN) normalization.
//!
//! Every normalizer is built from one primitive, a *branch*: the input
//! standardized by statistics over an [`AxisSet`]. BN, LN, IN and GN are a
//! single branch followed by a per-channel affine. BCN runs a batch branch
//! over (N, H, W) and a layer branch over (C, H, W), mixes them per channel
//! with `iota`, then applies one shared affine:
//!
//! ```text
//! x1 = (x - mean_NHW) / sqrt(var_NHW + eps)
//! x2 = (x - mean_CHW) / sqrt(var_CHW + eps)
//! y  = gamma * (iota * x1 + (1 - iota) * x2) + beta
//! ```
//!
//! Variances are biased (divisor n) everywhere, including the values fed
//! into the running averages. Frameworks that track an unbiased running
//! variance will therefore disagree slightly in eval mode.
//!
//! Only batch statistics have running averages. In eval mode the batch
//! branch uses them while the layer branch keeps recomputing per-sample
//! statistics, exactly as LN does.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_binary, reduce_mean, reduce_var, AxisSet, BinaryOp, Shape, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.9;

/// Stabilizer added to the variance under the square root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", format!("must be positive and finite, got {eps}")));
        }
        Ok(Epsilon(eps))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon(DEFAULT_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel scale and shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn new(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        check_len("gamma", &self.gamma, channels)?;
        check_len("beta", &self.beta, channels)
    }
}

/// Per-channel weight of the batch branch in BCN. Unconstrained; the
/// layer branch gets `1 - iota`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixParam {
    pub iota: Vec<f64>,
}

impl MixParam {
    pub fn new(channels: usize) -> Self {
        Self::filled(channels, 1.0)
    }

    pub fn filled(channels: usize, value: f64) -> Self {
        MixParam {
            iota: vec![value; channels],
        }
    }
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    alpha: f64,
    initialized: bool,
}

impl RunningStats {
    /// Mean 0, variance 1, flagged uninitialized until the first update.
    pub fn new(channels: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            alpha,
            initialized: false,
        })
    }

    /// Explicitly provided statistics, usable for eval immediately.
    pub fn seeded(mean: Vec<f64>, var: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if mean.len() != var.len() {
            return Err(Error::ParamLength {
                what: "running var",
                expected: mean.len(),
                got: var.len(),
            });
        }
        if let Some((channel, &value)) = var.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
            return Err(Error::NegativeVariance { channel, value });
        }
        Ok(RunningStats {
            mean,
            var,
            alpha,
            initialized: true,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn set_initialized(&mut self, initialized: bool) {
        self.initialized = initialized;
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_len(what: &'static str, v: &[f64], channels: usize) -> Result<()> {
    if v.len() != channels {
        return Err(Error::ParamLength {
            what,
            expected: channels,
            got: v.len(),
        });
    }
    Ok(())
}

/// `mean <- alpha * mean + (1 - alpha) * batch_mean`, likewise for var.
pub fn ema_update(rs: &mut RunningStats, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
    let c = rs.channels();
    check_len("batch mean", batch_mean, c)?;
    check_len("batch var", batch_var, c)?;
    if let Some((channel, &value)) = batch_var.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(Error::NegativeVariance { channel, value });
    }
    let a = rs.alpha;
    for (m, &bm) in rs.mean.iter_mut().zip(batch_mean) {
        *m = a * *m + (1.0 - a) * bm;
    }
    for (v, &bv) in rs.var.iter_mut().zip(batch_var) {
        *v = a * *v + (1.0 - a) * bv;
    }
    rs.initialized = true;
    Ok(())
}

/// Which normalizer produced a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
    Instance,
    Group(usize),
    BatchChannel,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Batch => "bn",
            NormKind::Layer => "ln",
            NormKind::Instance => "in",
            NormKind::Group(_) => "gn",
            NormKind::BatchChannel => "bcn",
        }
    }

    pub fn has_running_stats(&self) -> bool {
        matches!(self, NormKind::Batch | NormKind::BatchChannel)
    }

    pub fn has_mix(&self) -> bool {
        matches!(self, NormKind::BatchChannel)
    }
}

/// One standardized view of the input and what backward needs from it.
#[derive(Debug, Clone)]
pub struct Branch {
    pub axes: AxisSet,
    pub xhat: Tensor4,
    pub mean: Tensor4,
    pub var: Tensor4,
    pub inv_std: Tensor4,
}

impl Branch {
    /// Statistics computed from `x` itself.
    pub fn from_batch(x: &Tensor4, axes: AxisSet, eps: Epsilon, what: &'static str) -> Result<Self> {
        let count = axes.cardinality(x.shape())?;
        if count < 2 {
            return Err(Error::TooFewElements { what, count });
        }
        let mean = reduce_mean(x, axes)?;
        let var = reduce_var(x, &mean, axes)?;
        Self::from_stats(x, axes, mean, var, eps)
    }

    fn from_stats(x: &Tensor4, axes: AxisSet, mean: Tensor4, var: Tensor4, eps: Epsilon) -> Result<Self> {
        let e = eps.value();
        let inv_std = var.map(|v| 1.0 / (v + e).sqrt());
        let centered = broadcast_binary(x, &mean, BinaryOp::Sub)?;
        let xhat = broadcast_binary(&centered, &inv_std, BinaryOp::Mul)?;
        Ok(Branch {
            axes,
            xhat,
            mean,
            var,
            inv_std,
        })
    }

    /// Input gradient given the gradient w.r.t. `xhat`, including the
    /// mean and variance paths:
    /// `dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))`.
    pub fn backward(&self, dxhat: &Tensor4) -> Result<Tensor4> {
        let m1 = reduce_mean(dxhat, self.axes)?;
        let gx = dxhat.zip_with(&self.xhat, |g, h| g * h)?;
        let m2 = reduce_mean(&gx, self.axes)?;
        let t = broadcast_binary(dxhat, &m1, BinaryOp::Sub)?;
        let proj = broadcast_binary(&self.xhat, &m2, BinaryOp::Mul)?;
        let t = t.zip_with(&proj, |a, b| a - b)?;
        broadcast_binary(&t, &self.inv_std, BinaryOp::Mul)
    }

    /// Per-channel values of a `(1, C, 1, 1)` statistic.
    fn per_channel(stat: &Tensor4) -> Vec<f64> {
        stat.data().to_vec()
    }
}

/// Forward intermediates kept for the analytic backward pass.
#[derive(Debug, Clone)]
pub struct BackwardCache {
    kind: NormKind,
    mode: Mode,
    shape: Shape,
    /// Batch branch for BN/BCN, the only branch otherwise.
    primary: Branch,
    /// Layer branch, BCN only.
    layer: Option<Branch>,
    /// Mixed, pre-affine output.
    ybar: Tensor4,
    gamma: Vec<f64>,
    iota: Option<Vec<f64>>,
}

impl BackwardCache {
    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// The batch branch for BN/BCN, or the single branch of LN/IN/GN.
    pub fn primary_branch(&self) -> &Branch {
        &self.primary
    }

    /// The layer branch of BCN.
    pub fn layer_branch(&self) -> Option<&Branch> {
        self.layer.as_ref()
    }

    /// Pre-affine output.
    pub fn normalized(&self) -> &Tensor4 {
        &self.ybar
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    /// Present for BCN only.
    pub diota: Option<Vec<f64>>,
}

fn check_input(x: &Tensor4, p: &AffineParams) -> Result<()> {
    x.ensure_finite("input")?;
    p.check(x.shape().c)
}

fn apply_affine(ybar: &Tensor4, p: &AffineParams) -> Tensor4 {
    let s = ybar.shape();
    let plane = s.plane();
    let mut y = ybar.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        let (g, b) = (p.gamma[c], p.beta[c]);
        for v in chunk {
            *v = g * *v + b;
        }
    }
    y
}

/// Sum over (N, H, W) of `f(a, b)` for each channel.
fn channel_sums(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let s = a.shape();
    let plane = s.plane();
    let mut out = vec![0.0; s.c];
    for (i, (ca, cb)) in a.data().chunks(plane).zip(b.data().chunks(plane)).enumerate() {
        let acc = &mut out[i % s.c];
        for (&x, &y) in ca.iter().zip(cb) {
            *acc += f(x, y);
        }
    }
    out
}

/// Multiplies each channel plane of `t` by `scale[c]`.
fn scale_channels(t: &Tensor4, scale: impl Fn(usize) -> f64) -> Tensor4 {
    let s = t.shape();
    let plane = s.plane();
    let mut out = t.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = scale(i % s.c);
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    out
}

fn single_branch_forward(
    kind: NormKind,
    x: &Tensor4,
    p: &AffineParams,
    axes: AxisSet,
    mode: Mode,
    eps: Epsilon,
) -> Result<(Tensor4, BackwardCache)> {
    check_input(x, p)?;
    let branch = Branch::from_batch(x, axes, eps, kind.name())?;
    let y = apply_affine(&branch.xhat, p);
    let cache = BackwardCache {
        kind,
        mode,
        shape: x.shape(),
        ybar: branch.xhat.clone(),
        primary: branch,
        layer: None,
        gamma: p.gamma.clone(),
        iota: None,
    };
    Ok((y, cache))
}

fn batch_branch(x: &Tensor4, rs: &RunningStats, mode: Mode, eps: Epsilon) -> Result<Branch> {
    match mode {
        Mode::Train => Branch::from_batch(x, AxisSet::BatchSpatial, eps, "batch statistics"),
        Mode::Eval => {
            if !rs.is_initialized() {
                return Err(Error::UninitializedStats);
            }
            check_len("running mean", &rs.mean, x.shape().c)?;
            let mean = Tensor4::per_channel(&rs.mean)?;
            let var = Tensor4::per_channel(&rs.var)?;
            Branch::from_stats(x, AxisSet::BatchSpatial, mean, var, eps)
        }
    }
}

fn update_running(rs: &mut RunningStats, cache: &BackwardCache) -> Result<()> {
    if cache.mode == Mode::Train {
        let b = &cache.primary;
        ema_update(rs, &Branch::per_channel(&b.mean), &Branch::per_channel(&b.var))?;
    }
    Ok(())
}

/// BN forward without touching running statistics.
pub fn bn_forward_stateless(
    x: &Tensor4,
    p: &AffineParams,
    rs: &RunningStats,
    mode: Mode,
    eps: Epsilon,
) -> Result<(Tensor4, BackwardCache)> {
    check_input(x, p)?;
    let branch = batch_branch(x, rs, mode, eps)?;
    let y = apply_affine(&branch.xhat, p);
    let cache = BackwardCache {
        kind: NormKind::Batch,
        mode,
        shape: x.shape(),
        ybar: branch.xhat.clone(),
        primary: branch,
        layer: None,
        gamma: p.gamma.clone(),
        iota: None,
    };
    Ok((y, cache))
}

/// Batch normalization. In train mode uses per-channel statistics over
/// (N, H, W) and then folds them into `rs`; in eval mode uses `rs` only.
pub fn bn_forward(
    x: &Tensor4,
    p: &AffineParams,
    rs: &mut RunningStats,
    mode: Mode,
    eps: Epsilon,
) -> Result<(Tensor4, BackwardCache)> {
    let out = bn_forward_stateless(x, p, rs, mode, eps)?;
    update_running(rs, &out.1)?;
    Ok(out)
}

pub fn ln_forward(x: &Tensor4, p: &AffineParams, eps: Epsilon) -> Result<(Tensor4, BackwardCache)> {
    single_branch_forward(NormKind::Layer, x, p, AxisSet::ChannelSpatial, Mode::Train, eps)
}

pub fn in_forward(x: &Tensor4, p: &AffineParams, eps: Epsilon) -> Result<(Tensor4, BackwardCache)> {
    single_branch_forward(NormKind::Instance, x, p, AxisSet::Spatial, Mode::Train, eps)
}

pub fn gn_forward(x: &Tensor4, p: &AffineParams, groups: usize, eps: Epsilon) -> Result<(Tensor4, BackwardCache)> {
    single_branch_forward(
        NormKind::Group(groups),
        x,
        p,
        AxisSet::GroupSpatial(groups),
        Mode::Train,
        eps,
    )
}

/// BCN forward without touching running statistics.
pub fn bcn_forward_stateless(
    x: &Tensor4,
    p: &AffineParams,
    m: &MixParam,
    rs: &RunningStats,
    mode: Mode,
    eps: Epsilon,
) -> Result<(Tensor4, BackwardCache)> {
    check_input(x, p)?;
    check_len("iota", &m.iota, x.shape().c)?;
    let x1 = batch_branch(x, rs, mode, eps)?;
    let x2 = Branch::from_batch(x, AxisSet::ChannelSpatial, eps, "layer statistics")?;

    let s = x.shape();
    let plane = s.plane();
    let mut ybar = x1.xhat.clone();
    for (i, (out, b2)) in ybar
        .data_mut()
        .chunks_mut(plane)
        .zip(x2.xhat.data().chunks(plane))
        .enumerate()
    {
        let iota = m.iota[i % s.c];
        for (o, &v2) in out.iter_mut().zip(b2) {
            *o = iota * *o + (1.0 - iota) * v2;
        }
    }
    let y = apply_affine(&ybar, p);
    let cache = BackwardCache {
        kind: NormKind::BatchChannel,
        mode,
        shape: s,
        primary: x1,
        layer: Some(x2),
        ybar,
        gamma: p.gamma.clone(),
        iota: Some(m.iota.clone()),
    };
    Ok((y, cache))
}

/// Batch-channel normalization. Train mode updates `rs` from the batch
/// branch only.
pub fn bcn_forward(
    x: &Tensor4,
    p: &AffineParams,
    m: &MixParam,
    rs: &mut RunningStats,
    mode: Mode,
    eps: Epsilon,
) -> Result<(Tensor4, BackwardCache)> {
    let out = bcn_forward_stateless(x, p, m, rs, mode, eps)?;
    update_running(rs, &out.1)?;
    Ok(out)
}

/// Backward for any normalizer; dispatches on the cache.
pub fn norm_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    if dy.shape() != cache.shape {
        return Err(Error::ShapeMismatch {
            left: dy.shape(),
            right: cache.shape,
        });
    }
    dy.ensure_finite("upstream gradient")?;
    if cache.mode == Mode::Eval && cache.kind.has_running_stats() {
        return Err(Error::EvalCache);
    }
    let dbeta = channel_sums(dy, dy, |g, _| g);
    let dgamma = channel_sums(dy, &cache.ybar, |g, v| g * v);
    let gamma = &cache.gamma;
    let dybar = scale_channels(dy, |c| gamma[c]);

    match (&cache.layer, &cache.iota) {
        (Some(layer), Some(iota)) => {
            let diota = channel_sums(
                &dybar,
                &cache.primary.xhat.zip_with(&layer.xhat, |a, b| a - b)?,
                |g, d| g * d,
            );
            let dx1 = cache.primary.backward(&scale_channels(&dybar, |c| iota[c]))?;
            let dx2 = layer.backward(&scale_channels(&dybar, |c| 1.0 - iota[c]))?;
            Ok(NormGrads {
                dx: dx1.zip_with(&dx2, |a, b| a + b)?,
                dgamma,
                dbeta,
                diota: Some(diota),
            })
        }
        _ => Ok(NormGrads {
            dx: cache.primary.backward(&dybar)?,
            dgamma,
            dbeta,
            diota: None,
        }),
    }
}

fn expect_kind(cache: &BackwardCache, expected: NormKind) -> Result<()> {
    let same = match (cache.kind, expected) {
        (NormKind::Group(_), NormKind::Group(_)) => true,
        (a, b) => a == b,
    };
    if !same {
        return Err(Error::CacheKind {
            cached: cache.kind.name(),
            expected: expected.name(),
        });
    }
    Ok(())
}

pub fn bn_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    expect_kind(cache, NormKind::Batch)?;
    norm_backward(cache, dy)
}

pub fn ln_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    expect_kind(cache, NormKind::Layer)?;
    norm_backward(cache, dy)
}

pub fn in_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    expect_kind(cache, NormKind::Instance)?;
    norm_backward(cache, dy)
}

pub fn gn_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    expect_kind(cache, NormKind::Group(0))?;
    norm_backward(cache, dy)
}

pub fn bcn_backward(cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
    expect_kind(cache, NormKind::BatchChannel)?;
    norm_backward(cache, dy)
}

/// Eval-mode batch branch rewritten as a per-channel affine map of the
/// input, ready to be fused into a preceding linear operation.
///
/// The layer branch depends on per-sample statistics and cannot be
/// folded; its coefficient in the output is `layer_weight`, so that
/// `y = scale * x + shift + layer_weight * x2`. For BN use `iota = 1`,
/// which makes `layer_weight` zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFold {
    /// `1 / sqrt(var + eps)` per channel.
    pub branch_scale: Vec<f64>,
    /// `-mean * branch_scale` per channel.
    pub branch_shift: Vec<f64>,
    /// `gamma * iota * branch_scale`.
    pub scale: Vec<f64>,
    /// `gamma * iota * branch_shift + beta`.
    pub shift: Vec<f64>,
    /// `gamma * (1 - iota)`.
    pub layer_weight: Vec<f64>,
}

pub fn eval_fold(p: &AffineParams, m: &MixParam, rs: &RunningStats, eps: Epsilon) -> Result<EvalFold> {
    if !rs.is_initialized() {
        return Err(Error::UninitializedStats);
    }
    let c = rs.channels();
    p.check(c)?;
    check_len("iota", &m.iota, c)?;
    let branch_scale: Vec<f64> = rs.var.iter().map(|v| 1.0 / (v + eps.value()).sqrt()).collect();
    let branch_shift: Vec<f64> = rs.mean.iter().zip(&branch_scale).map(|(mu, s)| -mu * s).collect();
    let mut fold = EvalFold {
        scale: Vec::with_capacity(c),
        shift: Vec::with_capacity(c),
        layer_weight: Vec::with_capacity(c),
        branch_scale,
        branch_shift,
    };
    for ch in 0..c {
        let (g, b, i) = (p.gamma[ch], p.beta[ch], m.iota[ch]);
        fold.scale.push(g * i * fold.branch_scale[ch]);
        fold.shift.push(g * i * fold.branch_shift[ch] + b);
        fold.layer_weight.push(g * (1.0 - i));
    }
    Ok(fold)
}
