//! Central finite-difference checks of analytic gradients.
//!
//! The scalar loss is a fixed seeded random projection of the layer
//! output, `L = sum(R * y)`, so the analytic pass is fed `dy = R`. The
//! numeric side only ever calls the stateless forward.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::NormLayer;
use crate::nn::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, softmax_cross_entropy, ConvLayer,
    DenseLayer,
};
use crate::norm::Mode;
use crate::tensor::{max_rel_error_slices, Shape, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const PROJECTION_STREAM: u64 = 0x6772_6164;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff(mut f: impl FnMut(&Tensor4) -> Result<f64>, x: &Tensor4, h: f64) -> Result<Tensor4> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor4::from_vec(x.shape(), grad)
}

/// Central differences of the projected loss `sum(r * forward(x))`,
/// accumulating `r * (y+ - y-)` elementwise so large loss values do not
/// cancel catastrophically.
pub fn finite_diff_projected(
    mut forward: impl FnMut(&Tensor4) -> Result<Tensor4>,
    r: &Tensor4,
    x: &Tensor4,
    h: f64,
) -> Result<Tensor4> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = forward(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = forward(&probe)?;
        probe.data_mut()[i] = orig;
        plus.same_shape(r)?;
        minus.same_shape(r)?;
        let mut acc = 0.0;
        for ((&w, &p), &m) in r.data().iter().zip(plus.data()).zip(minus.data()) {
            acc += w * (p - m);
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation",
                index: i,
            });
        }
        grad.push(acc / (2.0 * h));
    }
    Tensor4::from_vec(x.shape(), grad)
}

/// A layer whose gradients can be checked numerically.
pub trait GradLayer {
    fn label(&self) -> String;

    /// Train-mode forward that leaves all internal state untouched.
    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4>;

    /// Input gradient and parameter gradients, in [`GradLayer::param_groups`] order.
    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)>;

    fn param_groups(&self) -> Vec<(String, Vec<f64>)>;

    fn set_param_group(&mut self, group: usize, values: &[f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub layer: String,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub const CSV_HEADER: [&'static str; 7] = [
        "layer",
        "group",
        "max_rel_error",
        "worst_index",
        "step",
        "tolerance",
        "passed",
    ];

    /// One CSV record per parameter group.
    pub fn csv_rows(&self) -> Vec<[String; 7]> {
        self.groups
            .iter()
            .map(|g| {
                [
                    self.layer.clone(),
                    g.name.clone(),
                    format!("{:.6e}", g.max_rel_error),
                    g.worst_index.to_string(),
                    format!("{:e}", self.step),
                    format!("{:e}", self.tolerance),
                    g.passed.to_string(),
                ]
            })
            .collect()
    }

    fn push(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        let (err, idx) = max_rel_error_slices(analytic, numeric, REL_FLOOR);
        self.groups.push(GroupResult {
            name: name.into(),
            max_rel_error: err,
            worst_index: idx,
            passed: err < self.tolerance,
        });
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<14} {:<14} {:>12.3e} {:>8} {:>9.1e} {}",
                self.layer,
                g.name,
                g.max_rel_error,
                g.worst_index,
                self.step,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Header line matching the [`GradReport`] table rows.
pub fn table_header() -> String {
    format!(
        "{:<14} {:<14} {:>12} {:>8} {:>9} {}",
        "layer", "group", "max_rel_err", "worst", "step", "status"
    )
}

/// Projection weights come from their own ChaCha stream so they stay
/// independent of inputs drawn from the same seed.
fn projection(shape: Shape, seed: u64) -> Result<Tensor4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROJECTION_STREAM);
    Tensor4::uniform(shape, -1.0, 1.0, &mut rng)
}

pub fn check_layer(layer: &mut dyn GradLayer, x: &Tensor4, tol: f64, seed: u64) -> Result<GradReport> {
    check_layer_with_step(layer, x, tol, seed, DEFAULT_STEP)
}

pub fn check_layer_with_step(
    layer: &mut dyn GradLayer,
    x: &Tensor4,
    tol: f64,
    seed: u64,
    h: f64,
) -> Result<GradReport> {
    let y = layer.forward_pure(x)?;
    let r = projection(y.shape(), seed)?;
    let (dx, pgrads) = layer.backward_analytic(x, &r)?;

    let mut report = GradReport {
        layer: layer.label(),
        step: h,
        tolerance: tol,
        groups: Vec::new(),
    };
    let num_dx = finite_diff_projected(|xp| layer.forward_pure(xp), &r, x, h)?;
    report.push("dx", dx.data(), num_dx.data());

    let groups = layer.param_groups();
    if groups.len() != pgrads.len() {
        return Err(Error::invalid(
            "gradcheck",
            format!("{} parameter groups but {} gradients", groups.len(), pgrads.len()),
        ));
    }
    for (gi, ((name, values), analytic)) in groups.into_iter().zip(&pgrads).enumerate() {
        let p = Tensor4::from_vec(Shape::new(1, values.len(), 1, 1), values.clone())?;
        let numeric = finite_diff_projected(
            |pp| {
                layer.set_param_group(gi, pp.data());
                layer.forward_pure(x)
            },
            &r,
            &p,
            h,
        );
        layer.set_param_group(gi, &values);
        report.push(format!("d{name}"), analytic, numeric?.data());
    }
    Ok(report)
}

/// Checks `dlogits` of the mean softmax cross-entropy.
pub fn check_softmax_ce(logits: &Tensor4, labels: &[usize], tol: f64) -> Result<GradReport> {
    let (_, analytic) = softmax_cross_entropy(logits, labels)?;
    let numeric = finite_diff(|l| Ok(softmax_cross_entropy(l, labels)?.0), logits, DEFAULT_STEP)?;
    let mut report = GradReport {
        layer: "softmax_ce".into(),
        step: DEFAULT_STEP,
        tolerance: tol,
        groups: Vec::new(),
    };
    report.push("dlogits", analytic.data(), numeric.data());
    Ok(report)
}

impl GradLayer for NormLayer {
    fn label(&self) -> String {
        match self.kind() {
            crate::norm::NormKind::Group(g) => format!("gn{g}"),
            k => k.name().to_string(),
        }
    }

    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_stateless(x, Mode::Train)?.0)
    }

    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let (_, cache) = self.forward_stateless(x, Mode::Train)?;
        let g = self.backward(&cache, dy)?;
        let dx = g.dx.clone();
        Ok((dx, NormLayer::grads_in_order(g)))
    }

    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        self.params()
            .into_iter()
            .map(|(n, v)| (n.to_string(), v.to_vec()))
            .collect()
    }

    fn set_param_group(&mut self, group: usize, values: &[f64]) {
        let mut params = self.params_mut();
        params[group].1.copy_from_slice(values);
    }
}

impl GradLayer for ConvLayer {
    fn label(&self) -> String {
        match self.padding {
            crate::nn::Padding::Same => "conv_same".into(),
            crate::nn::Padding::Valid => "conv_valid".into(),
        }
    }

    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4> {
        self.forward(x)
    }

    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let g = self.backward(x, dy)?;
        Ok((g.dx, vec![g.dweight, g.dbias]))
    }

    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }

    fn set_param_group(&mut self, group: usize, values: &[f64]) {
        match group {
            0 => self.weight.copy_from_slice(values),
            _ => self.bias.copy_from_slice(values),
        }
    }
}

impl GradLayer for DenseLayer {
    fn label(&self) -> String {
        "dense".into()
    }

    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4> {
        self.forward(x)
    }

    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let g = self.backward(x, dy)?;
        Ok((g.dx, vec![g.dweight, g.dbias]))
    }

    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }

    fn set_param_group(&mut self, group: usize, values: &[f64]) {
        match group {
            0 => self.weight.copy_from_slice(values),
            _ => self.bias.copy_from_slice(values),
        }
    }
}

/// Parameter-free layers.
#[derive(Debug, Clone, Copy)]
pub enum Stateless {
    Identity,
    Relu,
    GlobalAvgPool,
}

impl GradLayer for Stateless {
    fn label(&self) -> String {
        match self {
            Stateless::Identity => "identity",
            Stateless::Relu => "relu",
            Stateless::GlobalAvgPool => "avg_pool",
        }
        .into()
    }

    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(match self {
            Stateless::Identity => x.clone(),
            Stateless::Relu => relu_forward(x),
            Stateless::GlobalAvgPool => global_avg_pool_forward(x),
        })
    }

    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let dx = match self {
            Stateless::Identity => dy.clone(),
            Stateless::Relu => relu_backward(x, dy)?,
            Stateless::GlobalAvgPool => global_avg_pool_backward(x.shape(), dy)?,
        };
        Ok((dx, Vec::new()))
    }

    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        Vec::new()
    }

    fn set_param_group(&mut self, _group: usize, _values: &[f64]) {}
}

/// Wraps a layer and negates the analytic gradient of one parameter
/// group. Used to confirm the checker catches sign errors.
pub struct FlipGradSign<L> {
    pub inner: L,
    pub group: String,
}

impl<L: GradLayer> GradLayer for FlipGradSign<L> {
    fn label(&self) -> String {
        self.inner.label()
    }

    fn forward_pure(&self, x: &Tensor4) -> Result<Tensor4> {
        self.inner.forward_pure(x)
    }

    fn backward_analytic(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<Vec<f64>>)> {
        let (dx, mut grads) = self.inner.backward_analytic(x, dy)?;
        for ((name, _), g) in self.inner.param_groups().iter().zip(&mut grads) {
            if *name == self.group {
                g.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok((dx, grads))
    }

    fn param_groups(&self) -> Vec<(String, Vec<f64>)> {
        self.inner.param_groups()
    }

    fn set_param_group(&mut self, group: usize, values: &[f64]) {
        self.inner.set_param_group(group, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Padding;
    use crate::norm::{Epsilon, NormKind};

    fn input(shape: Shape, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::uniform(shape, -2.0, 2.0, &mut rng).unwrap()
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = input(Shape::new(2, 2, 2, 2), 1);
        let g = finite_diff(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_of_quadratic() {
        let x = Tensor4::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!((g.data()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let x = input(Shape::new(1, 3, 2, 1), 2);
        let g = finite_diff(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_errors() {
        let x = input(Shape::new(1, 1, 1, 2), 3);
        assert!(finite_diff(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(matches!(
            finite_diff(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn identity_gradient_is_projection() {
        let x = input(Shape::new(2, 3, 2, 2), 4);
        let mut id = Stateless::Identity;
        let report = check_layer(&mut id, &x, DEFAULT_TOLERANCE, 11).unwrap();
        assert!(report.group("dx").unwrap().max_rel_error < 1e-10);
        let (dx, _) = id.backward_analytic(&x, &projection(x.shape(), 11).unwrap()).unwrap();
        assert_eq!(dx, projection(x.shape(), 11).unwrap());
    }

    #[test]
    fn bn_passes() {
        let x = input(Shape::new(4, 3, 2, 2), 7);
        let mut layer = NormLayer::new(NormKind::Batch, 3, Epsilon::default(), 0.9).unwrap();
        let report = check_layer(&mut layer, &x, DEFAULT_TOLERANCE, 7).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.groups.len(), 3);
    }

    #[test]
    fn bcn_passes_with_partial_mix() {
        let x = input(Shape::new(4, 3, 2, 2), 8);
        let mut layer = NormLayer::new(NormKind::BatchChannel, 3, Epsilon::default(), 0.9).unwrap();
        layer.mix.as_mut().unwrap().iota = vec![0.3; 3];
        let report = check_layer(&mut layer, &x, DEFAULT_TOLERANCE, 8).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.group("diota").is_some());
        assert!(layer.running.as_ref().unwrap().mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn flipped_iota_sign_fails() {
        let x = input(Shape::new(4, 3, 2, 2), 9);
        let mut layer = NormLayer::new(NormKind::BatchChannel, 3, Epsilon::default(), 0.9).unwrap();
        layer.mix.as_mut().unwrap().iota = vec![0.3; 3];
        let mut faulty = FlipGradSign {
            inner: layer,
            group: "iota".into(),
        };
        let report = check_layer(&mut faulty, &x, DEFAULT_TOLERANCE, 9).unwrap();
        assert!(!report.passed());
        assert!(!report.group("diota").unwrap().passed);
        assert!(report.group("dgamma").unwrap().passed);
    }

    #[test]
    fn nn_blocks_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = input(Shape::new(2, 2, 4, 4), 5);
        for padding in [Padding::Same, Padding::Valid] {
            let mut conv = ConvLayer::new(2, 3, 3, 3, padding, &mut rng).unwrap();
            conv.bias = vec![0.1, -0.2, 0.3];
            let r = check_layer(&mut conv, &x, DEFAULT_TOLERANCE, 1).unwrap();
            assert!(r.passed(), "{r}");
        }
        let mut dense = DenseLayer::new(6, 3, &mut rng).unwrap();
        let r = check_layer(&mut dense, &input(Shape::new(4, 6, 1, 1), 6), DEFAULT_TOLERANCE, 2).unwrap();
        assert!(r.passed(), "{r}");
        for mut l in [Stateless::Relu, Stateless::GlobalAvgPool] {
            let r = check_layer(&mut l, &x, DEFAULT_TOLERANCE, 3).unwrap();
            assert!(r.passed(), "{r}");
        }
        let logits = input(Shape::new(4, 5, 1, 1), 7);
        let r = check_softmax_ce(&logits, &[0, 1, 4, 2], DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn smaller_step_does_not_amplify_error() {
        let kinds = [
            NormKind::Batch,
            NormKind::Layer,
            NormKind::Instance,
            NormKind::Group(3),
            NormKind::BatchChannel,
        ];
        for kind in kinds {
            for seed in 0..6 {
                let x = input(Shape::new(4, 3, 2, 2), seed);
                let mut layer = NormLayer::new(kind, 3, Epsilon::default(), 0.9).unwrap();
                if let Some(m) = layer.mix.as_mut() {
                    m.iota = vec![0.0, 0.37, 0.74];
                }
                let coarse = check_layer_with_step(&mut layer, &x, DEFAULT_TOLERANCE, seed, 1e-4).unwrap();
                let fine = check_layer_with_step(&mut layer, &x, DEFAULT_TOLERANCE, seed, 1e-5).unwrap();
                assert!(
                    fine.worst() <= 10.0 * coarse.worst(),
                    "{} seed {seed}: {} vs {}",
                    kind.name(),
                    fine.worst(),
                    coarse.worst()
                );
            }
        }
    }

    #[test]
    fn report_csv_has_row_per_group() {
        let x = input(Shape::new(4, 2, 2, 2), 10);
        let mut layer = NormLayer::new(NormKind::BatchChannel, 2, Epsilon::default(), 0.9).unwrap();
        let report = check_layer(&mut layer, &x, DEFAULT_TOLERANCE, 1).unwrap();
        let rows = report.csv_rows();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3][1], "diota");
        assert_eq!(report.to_string().lines().count(), 4);
    }
}
