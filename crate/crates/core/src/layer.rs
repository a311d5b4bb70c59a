//! Stateful normalization layer owning its parameters and running
//! statistics, plus checkpoint (de)serialization.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::norm::{
    bcn_forward, bcn_forward_stateless, bn_forward, bn_forward_stateless, gn_forward, in_forward, ln_forward,
    norm_backward, AffineParams, BackwardCache, Epsilon, MixParam, Mode, NormGrads, NormKind, RunningStats,
};
use crate::tensor::Tensor4;

/// Normalizer selected for a model's normalization sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    None,
    Bn,
    Ln,
    In,
    Gn,
    Bcn,
}

impl Normalizer {
    pub const ALL: [Normalizer; 5] = [
        Normalizer::Bn,
        Normalizer::Ln,
        Normalizer::In,
        Normalizer::Gn,
        Normalizer::Bcn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Normalizer::None => "none",
            Normalizer::Bn => "bn",
            Normalizer::Ln => "ln",
            Normalizer::In => "in",
            Normalizer::Gn => "gn",
            Normalizer::Bcn => "bcn",
        }
    }

    pub fn kind(&self, groups: usize) -> Option<NormKind> {
        match self {
            Normalizer::None => None,
            Normalizer::Bn => Some(NormKind::Batch),
            Normalizer::Ln => Some(NormKind::Layer),
            Normalizer::In => Some(NormKind::Instance),
            Normalizer::Gn => Some(NormKind::Group(groups)),
            Normalizer::Bcn => Some(NormKind::BatchChannel),
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "none" => Normalizer::None,
            "bn" => Normalizer::Bn,
            "ln" => Normalizer::Ln,
            "in" => Normalizer::In,
            "gn" => Normalizer::Gn,
            "bcn" => Normalizer::Bcn,
            other => {
                return Err(Error::invalid(
                    "normalizer",
                    format!("unknown normalizer {other:?} (expected bn, ln, in, gn, bcn or none)"),
                ))
            }
        })
    }
}

fn kind_code(kind: NormKind) -> f64 {
    match kind {
        NormKind::Batch => 1.0,
        NormKind::Layer => 2.0,
        NormKind::Instance => 3.0,
        NormKind::Group(_) => 4.0,
        NormKind::BatchChannel => 5.0,
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    kind: NormKind,
    pub affine: AffineParams,
    /// BCN only.
    pub mix: Option<MixParam>,
    /// BN and BCN only.
    pub running: Option<RunningStats>,
    eps: Epsilon,
}

impl NormLayer {
    pub fn new(kind: NormKind, channels: usize, eps: Epsilon, alpha: f64) -> Result<Self> {
        if let NormKind::Group(g) = kind {
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::GroupCount { groups: g, channels });
            }
        }
        Ok(NormLayer {
            kind,
            affine: AffineParams::new(channels),
            mix: kind.has_mix().then(|| MixParam::new(channels)),
            running: if kind.has_running_stats() {
                Some(RunningStats::new(channels, alpha)?)
            } else {
                None
            },
            eps,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn eps(&self) -> Epsilon {
        self.eps
    }

    pub fn channels(&self) -> usize {
        self.affine.channels()
    }

    /// Forward pass; train mode folds batch statistics into the running
    /// averages.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, BackwardCache)> {
        let eps = self.eps;
        let running = self.running.as_mut();
        match self.kind {
            NormKind::Batch => bn_forward(
                x,
                &self.affine,
                running.expect("bn tracks running statistics"),
                mode,
                eps,
            ),
            NormKind::BatchChannel => bcn_forward(
                x,
                &self.affine,
                self.mix.as_ref().expect("bcn layer has a mix parameter"),
                running.expect("bcn tracks running statistics"),
                mode,
                eps,
            ),
            _ => self.forward_stateless(x, mode),
        }
    }

    /// Forward pass that never mutates the layer. Train mode still uses
    /// the batch's own statistics.
    pub fn forward_stateless(&self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, BackwardCache)> {
        let eps = self.eps;
        match self.kind {
            NormKind::Batch => bn_forward_stateless(x, &self.affine, self.running_ref(), mode, eps),
            NormKind::BatchChannel => bcn_forward_stateless(
                x,
                &self.affine,
                self.mix.as_ref().expect("bcn layer has a mix parameter"),
                self.running_ref(),
                mode,
                eps,
            ),
            NormKind::Layer => ln_forward(x, &self.affine, eps),
            NormKind::Instance => in_forward(x, &self.affine, eps),
            NormKind::Group(g) => gn_forward(x, &self.affine, g, eps),
        }
    }

    pub fn backward(&self, cache: &BackwardCache, dy: &Tensor4) -> Result<NormGrads> {
        if cache.kind() != self.kind {
            return Err(Error::CacheKind {
                cached: cache.kind().name(),
                expected: self.kind.name(),
            });
        }
        norm_backward(cache, dy)
    }

    fn running_ref(&self) -> &RunningStats {
        self.running.as_ref().expect("layer kind tracks running statistics")
    }

    /// Learnable parameter groups in a fixed order: gamma, beta, then
    /// iota for BCN.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![("gamma", &self.affine.gamma), ("beta", &self.affine.beta)];
        if let Some(m) = &self.mix {
            v.push(("iota", &m.iota));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> =
            vec![("gamma", &mut self.affine.gamma), ("beta", &mut self.affine.beta)];
        if let Some(m) = &mut self.mix {
            v.push(("iota", &mut m.iota));
        }
        v
    }

    /// Gradients flattened in the same order as [`NormLayer::params`].
    pub fn grads_in_order(grads: NormGrads) -> Vec<Vec<f64>> {
        let mut v = vec![grads.dgamma, grads.dbeta];
        if let Some(d) = grads.diota {
            v.push(d);
        }
        v
    }

    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert_scalar(format!("{prefix}.kind"), kind_code(self.kind));
        if let NormKind::Group(g) = self.kind {
            ckpt.insert_scalar(format!("{prefix}.groups"), g as f64);
        }
        ckpt.insert_scalar(format!("{prefix}.eps"), self.eps.value());
        ckpt.insert(format!("{prefix}.gamma"), self.affine.gamma.clone());
        ckpt.insert(format!("{prefix}.beta"), self.affine.beta.clone());
        if let Some(m) = &self.mix {
            ckpt.insert(format!("{prefix}.iota"), m.iota.clone());
        }
        if let Some(rs) = &self.running {
            ckpt.insert(format!("{prefix}.running_mean"), rs.mean.clone());
            ckpt.insert(format!("{prefix}.running_var"), rs.var.clone());
            ckpt.insert_scalar(format!("{prefix}.alpha"), rs.alpha());
            ckpt.insert_scalar(
                format!("{prefix}.running_initialized"),
                if rs.is_initialized() { 1.0 } else { 0.0 },
            );
        }
    }

    pub fn load(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let code = ckpt.require_scalar(&format!("{prefix}.kind"))?;
        let gamma = ckpt.require(&format!("{prefix}.gamma"))?.to_vec();
        let channels = gamma.len();
        let kind = match code as i64 {
            1 => NormKind::Batch,
            2 => NormKind::Layer,
            3 => NormKind::Instance,
            4 => NormKind::Group(ckpt.require_scalar(&format!("{prefix}.groups"))? as usize),
            5 => NormKind::BatchChannel,
            _ => return Err(Error::Checkpoint(format!("{prefix}.kind has unknown code {code}"))),
        };
        let eps = Epsilon::new(ckpt.require_scalar(&format!("{prefix}.eps"))?)?;
        let alpha = if kind.has_running_stats() {
            ckpt.require_scalar(&format!("{prefix}.alpha"))?
        } else {
            crate::norm::DEFAULT_ALPHA
        };
        let mut layer = NormLayer::new(kind, channels, eps, alpha)?;
        let read = |name: &str| -> Result<Vec<f64>> {
            let key = format!("{prefix}.{name}");
            let v = ckpt.require(&key)?;
            if v.len() != channels {
                return Err(Error::Checkpoint(format!(
                    "{key} has {} values, expected {channels}",
                    v.len()
                )));
            }
            Ok(v.to_vec())
        };
        layer.affine.gamma = gamma;
        layer.affine.beta = read("beta")?;
        if let Some(m) = &mut layer.mix {
            m.iota = read("iota")?;
        }
        if let Some(rs) = &mut layer.running {
            rs.mean = read("running_mean")?;
            rs.var = read("running_var")?;
            rs.set_initialized(ckpt.require_scalar(&format!("{prefix}.running_initialized"))? != 0.0);
        }
        Ok(layer)
    }
}
