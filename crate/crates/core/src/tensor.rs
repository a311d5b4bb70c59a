//! Dense NCHW tensors of `f64` with axis-set reductions and broadcasting.
//!
//! Reductions accumulate sequentially in memory order (N outermost, W
//! innermost) into one accumulator per statistic, so results are
//! bit-identical from run to run.

use rand::Rng;

use crate::error::{Error, Result};

/// Tensor extents in (N, C, H, W) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::ZeroDimension(*self));
        }
        Ok(())
    }
}

/// The index set a statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisSet {
    /// Reduce over (N, H, W): one statistic per channel.
    BatchSpatial,
    /// Reduce over (C, H, W): one statistic per sample.
    ChannelSpatial,
    /// Reduce over (H, W): one statistic per (sample, channel).
    Spatial,
    /// Reduce over (H, W) and the channels of each of `g` contiguous
    /// channel groups: one statistic per (sample, group).
    GroupSpatial(usize),
}

impl AxisSet {
    /// Shape of the broadcastable statistic produced for an input of
    /// `shape`. Group statistics are stored per channel, repeated across
    /// the channels of a group, so they broadcast like [`AxisSet::Spatial`].
    pub fn stat_shape(&self, shape: Shape) -> Result<Shape> {
        self.check(shape)?;
        Ok(match self {
            AxisSet::BatchSpatial => Shape::new(1, shape.c, 1, 1),
            AxisSet::ChannelSpatial => Shape::new(shape.n, 1, 1, 1),
            AxisSet::Spatial | AxisSet::GroupSpatial(_) => Shape::new(shape.n, shape.c, 1, 1),
        })
    }

    /// Number of input elements contributing to each statistic.
    pub fn cardinality(&self, shape: Shape) -> Result<usize> {
        self.check(shape)?;
        Ok(match *self {
            AxisSet::BatchSpatial => shape.n * shape.plane(),
            AxisSet::ChannelSpatial => shape.c * shape.plane(),
            AxisSet::Spatial => shape.plane(),
            AxisSet::GroupSpatial(g) => (shape.c / g) * shape.plane(),
        })
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if let AxisSet::GroupSpatial(g) = *self {
            if g == 0 || !shape.c.is_multiple_of(g) {
                return Err(Error::GroupCount {
                    groups: g,
                    channels: shape.c,
                });
            }
        }
        Ok(())
    }

    /// Number of distinct statistics and the accumulator slot for `(n, c)`.
    fn slots(&self, shape: Shape) -> (usize, impl Fn(usize, usize) -> usize) {
        let (count, per_group) = match *self {
            AxisSet::BatchSpatial => (shape.c, 1),
            AxisSet::ChannelSpatial => (shape.n, 1),
            AxisSet::Spatial => (shape.n * shape.c, 1),
            AxisSet::GroupSpatial(g) => (shape.n * g, shape.c / g),
        };
        let axes = *self;
        let channels = shape.c;
        let slot = move |n: usize, c: usize| match axes {
            AxisSet::BatchSpatial => c,
            AxisSet::ChannelSpatial => n,
            AxisSet::Spatial => n * channels + c,
            AxisSet::GroupSpatial(g) => n * g + c / per_group,
        };
        (count, slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Dense row-major (N, C, H, W) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected: shape.numel(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, low: f64, high: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.numel()).map(|_| rng.random_range(low..high)).collect();
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_with(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.same_shape(other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_shape(&self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Errors on the first NaN or infinity.
    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what, index }),
            None => Ok(()),
        }
    }

    /// Samples `start..start + count` along N as a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor4> {
        if count == 0 || start + count > self.shape.n {
            return Err(Error::invalid(
                "batch slice",
                format!("{start}..{} outside 0..{}", start + count, self.shape.n),
            ));
        }
        let per = self.shape.c * self.shape.plane();
        let shape = Shape::new(count, self.shape.c, self.shape.h, self.shape.w);
        Ok(Tensor4 {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Gathers the listed samples along N.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor4> {
        let per = self.shape.c * self.shape.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::invalid("sample index", format!("{i} >= {}", self.shape.n)));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor4::from_vec(
            Shape::new(indices.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        )
    }

    /// Per-channel values laid out as a `(1, C, 1, 1)` statistic.
    pub fn per_channel(values: &[f64]) -> Result<Tensor4> {
        Tensor4::from_vec(Shape::new(1, values.len(), 1, 1), values.to_vec())
    }
}

/// Arithmetic mean over `axes`, returned in broadcastable form.
pub fn reduce_mean(x: &Tensor4, axes: AxisSet) -> Result<Tensor4> {
    let shape = x.shape();
    let stat = axes.stat_shape(shape)?;
    let count = axes.cardinality(shape)? as f64;
    let sums = accumulate(x, axes, None);
    Ok(expand_slots(
        shape,
        stat,
        axes,
        sums.into_iter().map(|s| s / count).collect(),
    ))
}

/// Biased (divisor n) variance about `mean` over `axes`.
pub fn reduce_var(x: &Tensor4, mean: &Tensor4, axes: AxisSet) -> Result<Tensor4> {
    let shape = x.shape();
    let stat = axes.stat_shape(shape)?;
    if mean.shape() != stat {
        return Err(Error::ShapeMismatch {
            left: mean.shape(),
            right: stat,
        });
    }
    let count = axes.cardinality(shape)? as f64;
    let sums = accumulate(x, axes, Some(mean));
    Ok(expand_slots(
        shape,
        stat,
        axes,
        sums.into_iter().map(|s| s / count).collect(),
    ))
}

/// Compensated (Neumaier) sum per statistic slot, visiting elements in
/// memory order. With `center`, sums squared deviations from it instead.
fn accumulate(x: &Tensor4, axes: AxisSet, center: Option<&Tensor4>) -> Vec<f64> {
    let shape = x.shape();
    let (count, slot) = axes.slots(shape);
    let plane = shape.plane();
    let mut sums = vec![(0.0, 0.0); count];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let s = slot(n, c);
            let base = (n * shape.c + c) * plane;
            let mu = center.map(|m| m.data[stat_index(shape, m.shape, base)]);
            let (mut acc, mut comp) = sums[s];
            for &v in &x.data[base..base + plane] {
                let term = match mu {
                    Some(mu) => (v - mu) * (v - mu),
                    None => v,
                };
                let t = acc + term;
                comp += if acc.abs() >= term.abs() {
                    (acc - t) + term
                } else {
                    (term - t) + acc
                };
                acc = t;
            }
            sums[s] = (acc, comp);
        }
    }
    sums.into_iter().map(|(acc, comp)| acc + comp).collect()
}

fn expand_slots(shape: Shape, stat: Shape, axes: AxisSet, slots: Vec<f64>) -> Tensor4 {
    let data = match axes {
        AxisSet::GroupSpatial(_) => {
            let (_, slot) = axes.slots(shape);
            let mut out = Vec::with_capacity(stat.numel());
            for n in 0..shape.n {
                for c in 0..shape.c {
                    out.push(slots[slot(n, c)]);
                }
            }
            out
        }
        _ => slots,
    };
    Tensor4 { shape: stat, data }
}

/// Flat index into a broadcast statistic for flat input index `i`.
#[inline]
fn stat_index(shape: Shape, stat: Shape, i: usize) -> usize {
    let w = i % shape.w;
    let h = (i / shape.w) % shape.h;
    let c = (i / shape.plane()) % shape.c;
    let n = i / (shape.plane() * shape.c);
    let pick = |idx: usize, dim: usize| if dim == 1 { 0 } else { idx };
    ((pick(n, stat.n) * stat.c + pick(c, stat.c)) * stat.h + pick(h, stat.h)) * stat.w + pick(w, stat.w)
}

/// `x op s` with `s` expanded along its singleton axes.
pub fn broadcast_binary(x: &Tensor4, s: &Tensor4, op: BinaryOp) -> Result<Tensor4> {
    let shape = x.shape();
    let stat = s.shape();
    let ok = shape.dims().iter().zip(stat.dims()).all(|(&d, sd)| sd == 1 || sd == d);
    if !ok {
        return Err(Error::NotBroadcastable { stat, target: shape });
    }
    if op == BinaryOp::Div {
        if let Some(index) = s.data.iter().position(|&v| v == 0.0) {
            return Err(Error::DivisionByZero { index });
        }
    }
    let apply = |a: f64, b: f64| match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    };
    let plane = shape.plane();
    let mut data = Vec::with_capacity(x.data.len());
    for (p, chunk) in x.data.chunks_exact(plane).enumerate() {
        let base = p * plane;
        if stat.h == 1 && stat.w == 1 {
            let b = s.data[stat_index(shape, stat, base)];
            data.extend(chunk.iter().map(|&a| apply(a, b)));
        } else {
            data.extend(
                chunk
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| apply(a, s.data[stat_index(shape, stat, base + i)])),
            );
        }
    }
    Ok(Tensor4 { shape, data })
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all elements.
pub fn max_rel_error(a: &Tensor4, b: &Tensor4, floor: f64) -> Result<f64> {
    a.same_shape(b)?;
    Ok(max_rel_error_slices(a.data(), b.data(), floor).0)
}

/// Slice form of [`max_rel_error`], also returning the worst index.
pub fn max_rel_error_slices(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let denom = x.abs().max(y.abs()).max(floor);
        let err = (x - y).abs() / denom;
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor4 {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    fn small() -> Tensor4 {
        t(Shape::new(2, 1, 1, 2), &[1.0, 2.0, 3.0, 4.0])
    }

    #[test]
    fn constant_mean_and_var() {
        let x = Tensor4::full(Shape::new(2, 4, 3, 3), 5.0).unwrap();
        for axes in [
            AxisSet::BatchSpatial,
            AxisSet::ChannelSpatial,
            AxisSet::Spatial,
            AxisSet::GroupSpatial(2),
        ] {
            let m = reduce_mean(&x, axes).unwrap();
            assert!(m.data().iter().all(|&v| v == 5.0));
            let v = reduce_var(&x, &m, axes).unwrap();
            assert!(v.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_means_and_vars() {
        let x = small();
        let m = reduce_mean(&x, AxisSet::BatchSpatial).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(m.data(), &[2.5]);
        assert_eq!(reduce_var(&x, &m, AxisSet::BatchSpatial).unwrap().data(), &[1.25]);

        let m = reduce_mean(&x, AxisSet::ChannelSpatial).unwrap();
        assert_eq!(m.shape(), Shape::new(2, 1, 1, 1));
        assert_eq!(m.data(), &[1.5, 3.5]);
        assert_eq!(
            reduce_var(&x, &m, AxisSet::ChannelSpatial).unwrap().data(),
            &[0.25, 0.25]
        );
    }

    #[test]
    fn group_stats_repeat_within_group() {
        // one sample, 4 channels of 1x1, two groups
        let x = t(Shape::new(1, 4, 1, 1), &[1.0, 3.0, 10.0, 20.0]);
        let m = reduce_mean(&x, AxisSet::GroupSpatial(2)).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(m.data(), &[2.0, 2.0, 15.0, 15.0]);
        let v = reduce_var(&x, &m, AxisSet::GroupSpatial(2)).unwrap();
        assert_eq!(v.data(), &[1.0, 1.0, 25.0, 25.0]);
    }

    #[test]
    fn group_count_must_divide_channels() {
        let x = Tensor4::zeros(Shape::new(1, 6, 2, 2)).unwrap();
        assert!(matches!(
            reduce_mean(&x, AxisSet::GroupSpatial(4)),
            Err(Error::GroupCount { groups: 4, channels: 6 })
        ));
        assert!(reduce_mean(&x, AxisSet::GroupSpatial(0)).is_err());
    }

    #[test]
    fn var_rejects_wrong_mean_shape() {
        let x = small();
        let m = reduce_mean(&x, AxisSet::ChannelSpatial).unwrap();
        assert!(matches!(
            reduce_var(&x, &m, AxisSet::BatchSpatial),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_sub_per_channel() {
        let x = small();
        let s = t(Shape::new(1, 1, 1, 1), &[2.5]);
        let y = broadcast_binary(&x, &s, BinaryOp::Sub).unwrap();
        assert_eq!(y.data(), &[-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn broadcast_mul_ones_is_identity() {
        let mut rng = rand::rng();
        let x = Tensor4::uniform(Shape::new(2, 3, 2, 2), -2.0, 2.0, &mut rng).unwrap();
        let ones = Tensor4::full(Shape::new(1, 3, 1, 1), 1.0).unwrap();
        assert_eq!(broadcast_binary(&x, &ones, BinaryOp::Mul).unwrap(), x);
    }

    #[test]
    fn broadcast_errors() {
        let x = Tensor4::zeros(Shape::new(2, 3, 2, 2)).unwrap();
        let bad = Tensor4::zeros(Shape::new(1, 2, 1, 1)).unwrap();
        assert!(matches!(
            broadcast_binary(&x, &bad, BinaryOp::Add),
            Err(Error::NotBroadcastable { .. })
        ));
        let zero = Tensor4::zeros(Shape::new(1, 3, 1, 1)).unwrap();
        assert!(matches!(
            broadcast_binary(&x, &zero, BinaryOp::Div),
            Err(Error::DivisionByZero { index: 0 })
        ));
    }

    #[test]
    fn rel_error_cases() {
        let a = t(Shape::new(1, 1, 1, 1), &[1.0]);
        assert_eq!(max_rel_error(&a, &a, 1e-8).unwrap(), 0.0);
        let b = t(Shape::new(1, 1, 1, 1), &[1.0 + 1e-6]);
        let e = max_rel_error(&a, &b, 1e-8).unwrap();
        assert!((e - 1e-6).abs() < 1e-11, "{e}");
        let z = t(Shape::new(1, 1, 1, 1), &[0.0]);
        assert_eq!(max_rel_error(&z, &z, 1e-8).unwrap(), 0.0);
        assert!(max_rel_error(&a, &small(), 1e-8).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(matches!(
            Tensor4::zeros(Shape::new(0, 1, 1, 1)),
            Err(Error::ZeroDimension(_))
        ));
        assert!(matches!(
            Tensor4::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]),
            Err(Error::DataLength { expected: 4, .. })
        ));
    }

    fn axes_strategy() -> impl Strategy<Value = AxisSet> {
        prop_oneof![
            Just(AxisSet::BatchSpatial),
            Just(AxisSet::ChannelSpatial),
            Just(AxisSet::Spatial),
            Just(AxisSet::GroupSpatial(1)),
            Just(AxisSet::GroupSpatial(2)),
        ]
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor4> {
        (1usize..4, 1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(n, half_c, h, w)| {
            let shape = Shape::new(n, 2 * half_c, h, w);
            proptest::collection::vec(-100.0f64..100.0, shape.numel())
                .prop_map(move |data| Tensor4::from_vec(shape, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn centering_identity(x in tensor_strategy(), axes in axes_strategy()) {
            let m = reduce_mean(&x, axes).unwrap();
            let centered = broadcast_binary(&x, &m, BinaryOp::Sub).unwrap();
            let again = reduce_mean(&centered, axes).unwrap();
            // scaled by the input magnitude (values up to 100)
            prop_assert!(again.max_abs() < 1e-12 * 100.0);
        }

        #[test]
        fn variance_identity(x in tensor_strategy(), axes in axes_strategy()) {
            let m = reduce_mean(&x, axes).unwrap();
            let v = reduce_var(&x, &m, axes).unwrap();
            let d = broadcast_binary(&x, &m, BinaryOp::Sub).unwrap();
            let sq = d.map(|v| v * v);
            let v2 = reduce_mean(&sq, axes).unwrap();
            prop_assert!(v.data().iter().all(|&e| e >= 0.0));
            prop_assert!(max_rel_error(&v, &v2, 1.0).unwrap() < 1e-12);
        }

        #[test]
        fn broadcast_round_trip(x in tensor_strategy(), axes in axes_strategy()) {
            // dyadic statistic values keep every partial sum exact
            let stat = reduce_mean(&x, axes).unwrap().map(|v| (v * 8.0).round() / 8.0);
            let expanded = broadcast_binary(&Tensor4::zeros(x.shape()).unwrap(), &stat, BinaryOp::Add).unwrap();
            let back = reduce_mean(&expanded, axes).unwrap();
            prop_assert_eq!(back, stat);
        }

        #[test]
        fn reductions_are_deterministic(x in tensor_strategy(), axes in axes_strategy()) {
            let a = reduce_mean(&x, axes).unwrap();
            let b = reduce_mean(&x.clone(), axes).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
