//! Image-classification datasets: a seeded synthetic generator and the
//! CIFAR-10 binary format.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images `(N,3,H,W)` in `[0,1]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor4,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.c != 3 {
            return Err(Error::invalid(
                "images",
                format!("expected 3 channels, got {}", shape.c),
            ));
        }
        if labels.len() != shape.n {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} images", labels.len(), shape.n),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        images.ensure_finite("images")?;
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("images", format!("pixel {i} outside [0,1]")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous samples `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_batch(start, count)?,
            labels: self.labels[start..start + count].to_vec(),
            classes: self.classes,
        })
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let images = self.images.gather_batch(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Concatenates datasets with identical image geometry and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("datasets", "nothing to concatenate"))?;
        let s = first.images.shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            let ps = p.images.shape();
            if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) || p.classes != first.classes {
                return Err(Error::ShapeMismatch { left: s, right: ps });
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let images = Tensor4::from_vec(Shape::new(labels.len(), s.c, s.h, s.w), data)?;
        Ok(Dataset {
            images,
            labels,
            classes: first.classes,
        })
    }
}

/// Parameters of the synthetic task.
///
/// Class `k` images carry a fixed zero-mean cosine pattern over `(H,W)`,
/// shifted to channel means `means[k]`, plus i.i.d. Gaussian noise.
/// Values are clipped to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub means: Vec<[f64; 3]>,
    pub pattern_amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

const PATTERN_FREQS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
];

impl SyntheticSpec {
    pub const DEFAULT_SEPARATION: f64 = 0.5;
    pub const DEFAULT_NOISE: f64 = 0.15;
    pub const DEFAULT_AMPLITUDE: f64 = 0.2;

    /// Channel `c` of class `k` sits at 0.25 or 0.25 + `separation`
    /// according to bit `c` of `k`, so up to 8 classes get distinct means.
    pub fn default_means(classes: usize, separation: f64) -> Vec<[f64; 3]> {
        (0..classes)
            .map(|k| {
                let bit = |c: usize| ((k % 8) >> c & 1) as f64;
                [
                    0.25 + separation * bit(0),
                    0.25 + separation * bit(1),
                    0.25 + separation * bit(2),
                ]
            })
            .collect()
    }

    pub fn new(classes: usize, height: usize, width: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            height,
            width,
            samples_per_class,
            means: Self::default_means(classes, Self::DEFAULT_SEPARATION),
            pattern_amplitude: Self::DEFAULT_AMPLITUDE,
            noise: Self::DEFAULT_NOISE,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("classes", "must be at least 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class", "must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size", "height and width must be positive"));
        }
        if self.means.len() != self.classes {
            return Err(Error::invalid(
                "means",
                format!("{} entries for {} classes", self.means.len(), self.classes),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(
                "noise",
                format!("must be finite and >= 0, got {}", self.noise),
            ));
        }
        if !self.pattern_amplitude.is_finite() || self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means", "pattern amplitude and means must be finite"));
        }
        Ok(())
    }

    /// The noise-free pattern of class `k`, row-major `(H,W)`.
    pub fn pattern(&self, k: usize) -> Vec<f64> {
        let (a, b) = PATTERN_FREQS[k % PATTERN_FREQS.len()];
        let (hh, ww) = (self.height as f64, self.width as f64);
        let mut out = Vec::with_capacity(self.height * self.width);
        for h in 0..self.height {
            for w in 0..self.width {
                let phase = 2.0 * PI * (a * h as f64 / hh + b * w as f64 / ww);
                out.push(self.pattern_amplitude * phase.cos());
            }
        }
        out
    }
}

/// Samples are interleaved by class: sample `i` has label `i % K`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.classes * spec.samples_per_class;
    let plane = spec.height * spec.width;
    let patterns: Vec<Vec<f64>> = (0..spec.classes).map(|k| spec.pattern(k)).collect();
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        for c in 0..3 {
            let mu = spec.means[k][c];
            for &p in &patterns[k] {
                let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push((mu + p + noise).clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor4::from_vec(Shape::new(n, 3, spec.height, spec.width), data)?;
    Dataset::new(images, labels, spec.classes)
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes as
/// R, G, B planes of 32x32, row-major.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::CifarFormat(format!(
            "size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::CifarFormat(format!("record {i} has label byte {label}")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor4::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), data)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Encodes a 32x32 dataset with at most 10 classes; pixels are rounded to
/// the nearest multiple of 1/255.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    let s = ds.images.shape();
    if (s.c, s.h, s.w) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::CifarFormat(format!("images must be 3x32x32, got {s:?}")));
    }
    if ds.classes > CIFAR_CLASSES {
        return Err(Error::CifarFormat(format!("{} classes do not fit", ds.classes)));
    }
    let per = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            ds.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| (v * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar10(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cifar10(ds)?).map_err(|e| Error::io(path, e))
}

/// Seed for the shuffle of a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One epoch of shuffled mini-batches, gathered lazily.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor4, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(
            self.ds
                .gather(idx)
                .expect("indices come from a permutation of the dataset"),
        )
    }
}

/// Shuffles with `seed` and cuts into batches of `batch_size`. With
/// `drop_last` the trailing partial batch is discarded.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, drop_last: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if drop_last && batch_size > ds.len() {
        return Err(Error::invalid(
            "batch_size",
            format!("{batch_size} exceeds dataset size {} with drop_last", ds.len()),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if drop_last {
        order.truncate(ds.len() / batch_size * batch_size);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            noise,
            ..SyntheticSpec::new(4, 8, 8, 10, 3)
        }
    }

    #[test]
    fn noise_free_images_repeat_per_class() {
        let ds = gen_synthetic(&small_spec(0.0)).unwrap();
        let per = 3 * 64;
        let img = |i: usize| &ds.images().data()[i * per..(i + 1) * per];
        for i in 4..ds.len() {
            assert_eq!(img(i), img(i % 4));
        }
        assert_ne!(img(0), img(1));
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_synthetic(&small_spec(0.15)).unwrap();
        let b = gen_synthetic(&small_spec(0.15)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec {
            seed: 4,
            ..small_spec(0.15)
        })
        .unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(gen_synthetic(&SyntheticSpec::new(0, 8, 8, 10, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(4, 8, 8, 0, 0)).is_err());
        assert!(gen_synthetic(&small_spec(-0.1)).is_err());
    }

    fn channel_means(ds: &Dataset, i: usize) -> [f64; 3] {
        let s = ds.images().shape();
        let plane = s.plane();
        let mut m = [0.0; 3];
        for (c, slot) in m.iter_mut().enumerate() {
            let base = (i * 3 + c) * plane;
            *slot = ds.images().data()[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
        m
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let spec = SyntheticSpec {
            noise: 0.1,
            ..SyntheticSpec::new(4, 8, 8, 250, 11)
        };
        let ds = gen_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 1000);
        let mut correct = 0;
        for i in 0..ds.len() {
            let m = channel_means(&ds, i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let d = |k: usize| (0..3).map(|c| (m[c] - spec.means[k][c]).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            correct += usize::from(best == ds.labels()[i]);
        }
        assert_eq!(correct, 1000);
    }

    #[test]
    fn class_means_match_spec() {
        let spec = SyntheticSpec {
            means: vec![[0.35, 0.65, 0.5], [0.65, 0.35, 0.4]],
            pattern_amplitude: 0.1,
            noise: 0.03,
            ..SyntheticSpec::new(2, 8, 8, 200, 5)
        };
        let ds = gen_synthetic(&spec).unwrap();
        let bound = 3.0 * spec.noise / ((spec.samples_per_class * 64) as f64).sqrt();
        for k in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in (k..ds.len()).step_by(2) {
                    acc += channel_means(&ds, i)[c];
                }
                let mean = acc / spec.samples_per_class as f64;
                assert!((mean - spec.means[k][c]).abs() < bound, "class {k} channel {c}: {mean}");
            }
        }
    }

    fn cifar_bytes(labels: &[u8], fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut out = Vec::new();
        for (r, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..CIFAR_RECORD - 1).map(|i| fill(r * CIFAR_RECORD + i)));
        }
        out
    }

    #[test]
    fn cifar_record_count_and_labels() {
        let bytes = cifar_bytes(&[7, 0, 1, 2, 3, 4, 5, 6, 8, 9], |i| (i % 256) as u8);
        assert_eq!(bytes.len(), 30_730);
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels()[0], 7);
        assert_eq!(ds.images().at(0, 1, 0, 0), (1024 % 256) as f64 / 255.0);
        assert_eq!(ds.images().at(0, 0, 1, 2), 34.0 / 255.0);
    }

    #[test]
    fn cifar_format_errors() {
        assert!(matches!(parse_cifar10(&[0u8; 3072]), Err(Error::CifarFormat(_))));
        assert!(parse_cifar10(&[]).is_err());
        assert!(parse_cifar10(&cifar_bytes(&[10], |_| 0)).is_err());
        let missing = load_cifar10("/nonexistent/data_batch_1.bin").unwrap_err();
        assert!(missing.is_io());
    }

    #[test]
    fn cifar_file_round_trip() {
        let bytes = cifar_bytes(&[3, 9], |i| (i * 7 % 256) as u8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10(&path).unwrap();
        let out = dir.path().join("again.bin");
        write_cifar10(&ds, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);
        assert_eq!(load_cifar10(&out).unwrap(), ds);
    }

    #[test]
    fn batch_counts() {
        let ds = gen_synthetic(&SyntheticSpec::new(2, 4, 4, 5, 1)).unwrap();
        assert_eq!(batches(&ds, 4, 0, true).unwrap().count(), 2);
        assert!(batches(&ds, 4, 0, true)
            .unwrap()
            .all(|(x, l)| x.shape().n == 4 && l.len() == 4));
        assert_eq!(batches(&ds, 4, 0, false).unwrap().count(), 3);
        assert!(batches(&ds, 11, 0, true).is_err());
        assert!(batches(&ds, 0, 0, false).is_err());
        assert_eq!(batches(&ds, 11, 0, false).unwrap().count(), 1);
    }

    #[test]
    fn batch_order_is_seeded() {
        let ds = gen_synthetic(&SyntheticSpec::new(2, 4, 4, 8, 1)).unwrap();
        let a: Vec<_> = batches(&ds, 4, 9, true).unwrap().collect();
        let b: Vec<_> = batches(&ds, 4, 9, true).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(epoch_seed(9, 0), epoch_seed(9, 1));
    }

    proptest! {
        #[test]
        fn epoch_visits_each_sample_once(n in 1usize..40, bs in 1usize..12, seed in any::<u64>()) {
            let data: Vec<f64> = (0..n * 3).map(|i| i as f64 / (n * 3) as f64).collect();
            let images = Tensor4::from_vec(Shape::new(n, 3, 1, 1), data).unwrap();
            let ds = Dataset::new(images, vec![0; n], 1).unwrap();
            let mut seen: Vec<f64> = batches(&ds, bs, seed, false)
                .unwrap()
                .flat_map(|(x, _)| x.data().chunks(3).map(|c| c[0]).collect::<Vec<_>>())
                .collect();
            seen.sort_by(f64::total_cmp);
            let expected: Vec<f64> = (0..n).map(|i| (i * 3) as f64 / (n * 3) as f64).collect();
            prop_assert_eq!(seen, expected);
        }

        #[test]
        fn cifar_bytes_round_trip(labels in proptest::collection::vec(0u8..10, 1..4), salt in any::<u8>()) {
            let bytes = cifar_bytes(&labels, |i| (i as u8).wrapping_mul(31).wrapping_add(salt));
            let ds = parse_cifar10(&bytes).unwrap();
            prop_assert_eq!(encode_cifar10(&ds).unwrap(), bytes);
        }
    }
}
