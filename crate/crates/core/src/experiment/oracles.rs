use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_layer_with_step, check_softmax_ce, FlipGradSign, GradLayer, GradReport, Stateless};
use crate::layer::NormLayer;
use crate::nn::{ConvLayer, DenseLayer, Padding};
use crate::norm::{Epsilon, Mode, NormKind, RunningStats};
use crate::tensor::{Shape, Tensor4};

use super::config::{ExperimentConfig, Fault};
use super::create_out_dir;

const NORM_SHAPE: Shape = Shape { n: 4, c: 8, h: 5, w: 5 };
const BCN_CHECK_IOTA: f64 = 0.3;

fn seeded_input(shape: Shape, seed: u64) -> Result<Tensor4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::uniform(shape, -2.0, 2.0, &mut rng)
}

/// Every normalizer on a `(4,8,5,5)` input plus each building block of
/// the reference CNN. BCN is checked with iota = 0.3 so both branches
/// carry gradient.
pub fn gradcheck_reports(cfg: &ExperimentConfig) -> Result<Vec<GradReport>> {
    let eps = Epsilon::new(cfg.eps)?;
    let (tol, h, seed) = (cfg.gradcheck_tol, cfg.gradcheck_step, cfg.seed);
    let x = seeded_input(NORM_SHAPE, seed)?;
    let mut reports = Vec::new();
    let kinds = [
        NormKind::Batch,
        NormKind::Layer,
        NormKind::Instance,
        NormKind::Group(cfg.groups),
        NormKind::BatchChannel,
    ];
    for kind in kinds {
        let mut layer = NormLayer::new(kind, NORM_SHAPE.c, eps, cfg.alpha)?;
        if let Some(m) = layer.mix.as_mut() {
            m.iota.fill(BCN_CHECK_IOTA);
        }
        let report = match (kind, cfg.fault) {
            (NormKind::BatchChannel, Fault::IotaSign) => check_layer_with_step(
                &mut FlipGradSign {
                    inner: layer,
                    group: "iota".into(),
                },
                &x,
                tol,
                seed,
                h,
            )?,
            _ => check_layer_with_step(&mut layer, &x, tol, seed, h)?,
        };
        reports.push(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = seeded_input(Shape::new(2, 2, 4, 4), seed.wrapping_add(1))?;
    for padding in [Padding::Same, Padding::Valid] {
        let mut conv = ConvLayer::new(2, 3, 3, 3, padding, &mut rng)?;
        conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        reports.push(check_layer_with_step(&mut conv, &small, tol, seed, h)?);
    }
    let mut dense = DenseLayer::new(6, 3, &mut rng)?;
    let flat = seeded_input(Shape::new(4, 6, 1, 1), seed.wrapping_add(2))?;
    reports.push(check_layer_with_step(&mut dense, &flat, tol, seed, h)?);
    for mut layer in [Stateless::Relu, Stateless::GlobalAvgPool] {
        reports.push(check_layer_with_step(
            &mut layer as &mut dyn GradLayer,
            &small,
            tol,
            seed,
            h,
        )?);
    }
    let logits = seeded_input(Shape::new(4, 5, 1, 1), seed.wrapping_add(3))?;
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    reports.push(check_softmax_ce(&logits, &labels, tol)?);
    Ok(reports)
}

/// Runs [`gradcheck_reports`] and writes `gradcheck.csv`, one row per
/// layer and parameter group.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradReport>> {
    let reports = gradcheck_reports(cfg)?;
    let dir = create_out_dir(&cfg.out_dir)?;
    let path = dir.join("gradcheck.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(GradReport::CSV_HEADER)?;
    for r in &reports {
        for row in r.csv_rows() {
            w.write_record(row)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceRow {
    pub pair: String,
    pub mode: Mode,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl EquivalenceRow {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

pub const EQUIVALENCE_HEADER: [&str; 5] = ["pair", "mode", "max_deviation", "tolerance", "passed"];

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Train => "train",
        Mode::Eval => "eval",
    }
}

struct Pair {
    left: NormLayer,
    right: NormLayer,
}

impl Pair {
    /// Both layers get the same random affine parameters and, where
    /// tracked, the same running statistics.
    fn new(left: NormKind, right: NormKind, eps: Epsilon, paired: Epsilon, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = NORM_SHAPE.c;
        let mut l = NormLayer::new(left, c, eps, 0.9)?;
        let mut r = NormLayer::new(right, c, paired, 0.9)?;
        let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        for layer in [&mut l, &mut r] {
            layer.affine.gamma.clone_from(&gamma);
            layer.affine.beta.clone_from(&beta);
            if layer.running.is_some() {
                layer.running = Some(RunningStats::seeded(mean.clone(), var.clone(), 0.9)?);
            }
        }
        Ok(Pair { left: l, right: r })
    }

    fn deviation(&self, x: &Tensor4, mode: Mode) -> Result<f64> {
        let (a, _) = self.left.forward_stateless(x, mode)?;
        let (b, _) = self.right.forward_stateless(x, mode)?;
        a.same_shape(&b)?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max))
    }
}

/// Limit cases of BCN and the GN/LN/IN relationships on a seeded
/// `(4,8,5,5)` input. Deviations are max absolute elementwise differences.
pub fn equivalence_rows(cfg: &ExperimentConfig) -> Result<Vec<EquivalenceRow>> {
    let eps = Epsilon::new(cfg.eps)?;
    let paired = Epsilon::new(cfg.paired_eps.unwrap_or(cfg.eps))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor4::uniform(NORM_SHAPE, -3.0, 3.0, &mut rng)?;
    let mut rows = Vec::new();

    let mut bcn_bn = Pair::new(NormKind::BatchChannel, NormKind::Batch, eps, paired, &mut rng)?;
    bcn_bn.left.mix.as_mut().expect("bcn mix").iota.fill(1.0);
    let mut bcn_ln = Pair::new(NormKind::BatchChannel, NormKind::Layer, eps, paired, &mut rng)?;
    bcn_ln.left.mix.as_mut().expect("bcn mix").iota.fill(0.0);
    let gn_ln = Pair::new(NormKind::Group(1), NormKind::Layer, eps, paired, &mut rng)?;
    let gn_in = Pair::new(NormKind::Group(NORM_SHAPE.c), NormKind::Instance, eps, paired, &mut rng)?;

    let cases: [(&str, &Pair, &[Mode], f64); 4] = [
        ("bcn(iota=1)~bn", &bcn_bn, &[Mode::Train, Mode::Eval], 1e-9),
        ("bcn(iota=0)~ln", &bcn_ln, &[Mode::Train, Mode::Eval], 1e-9),
        ("gn(1)~ln", &gn_ln, &[Mode::Train], 1e-12),
        ("gn(c)~in", &gn_in, &[Mode::Train], 1e-12),
    ];
    for (name, pair, modes, tolerance) in cases {
        for &mode in modes {
            rows.push(EquivalenceRow {
                pair: name.to_string(),
                mode,
                max_deviation: pair.deviation(&x, mode)?,
                tolerance,
            });
        }
    }
    Ok(rows)
}

/// Runs [`equivalence_rows`] and writes `equivalence.csv`.
pub fn cmd_equivalence(cfg: &ExperimentConfig) -> Result<Vec<EquivalenceRow>> {
    let rows = equivalence_rows(cfg)?;
    let dir = create_out_dir(&cfg.out_dir)?;
    let path = dir.join("equivalence.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(EQUIVALENCE_HEADER)?;
    for r in &rows {
        w.write_record([
            r.pair.clone(),
            mode_name(r.mode).to_string(),
            format!("{:.6e}", r.max_deviation),
            format!("{:e}", r.tolerance),
            r.passed().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_oracles_pass() {
        let cfg = ExperimentConfig::default();
        for r in gradcheck_reports(&cfg).unwrap() {
            assert!(r.passed(), "{r}");
        }
        let rows = equivalence_rows(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(EquivalenceRow::passed), "{rows:?}");
    }

    #[test]
    fn faults_are_caught() {
        let cfg = ExperimentConfig {
            fault: Fault::IotaSign,
            ..ExperimentConfig::default()
        };
        let reports = gradcheck_reports(&cfg).unwrap();
        let failed: Vec<_> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.layer.as_str())
            .collect();
        assert_eq!(failed, ["bcn"]);

        let cfg = ExperimentConfig {
            paired_eps: Some(1e-3),
            ..ExperimentConfig::default()
        };
        assert!(equivalence_rows(&cfg).unwrap().iter().any(|r| !r.passed()));
    }
}
