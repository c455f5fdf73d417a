//! Simulated dataset shift.
//!
//! A seeded generator produces single-channel oriented-grating images, one
//! pattern per class, in the `[0, 1]` range. Covariate shift is simulated
//! by four perturbation families (rotation, brightness, additive Gaussian
//! noise, cut-out) and concept shift by splitting classes between train and
//! test with a controlled overlap.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor4;

pub const IMAGE_SIZE: usize = 16;

/// Per-pixel noise of generated images.
pub const PIXEL_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    /// Grating orientation in radians.
    pub orientation: f64,
    /// Angular frequency in radians per pixel.
    pub frequency: f64,
    pub amplitude: f64,
    /// Mean brightness.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub patterns: Vec<ClassPattern>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            patterns: self.patterns.clone(),
        })
    }

    /// Every sample whose label is in `classes`.
    pub fn with_classes(&self, classes: &[usize]) -> Result<Self> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| wanted.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    /// Sorted distinct labels present.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn class_patterns(class_count: usize, rng: &mut ChaCha8Rng) -> Vec<ClassPattern> {
    let span = (class_count - 1).max(1) as f64;
    (0..class_count)
        .map(|k| {
            let jitter: f64 = rng.random_range(-0.05..0.05);
            ClassPattern {
                orientation: PI * (k as f64 + jitter) / class_count as f64,
                frequency: 2.0 * PI * if k % 2 == 0 { 0.08 } else { 0.3 },
                amplitude: 0.25,
                offset: 0.45 + 0.1 * ((3 * k) % class_count) as f64 / span,
            }
        })
        .collect()
}

/// Seeded dataset of `class_count * samples_per_class` images of size
/// 16x16, labels interleaved (sample `i` has class `i % class_count`).
pub fn generate_dataset(
    class_count: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if class_count < 2 {
        return Err(invalid("need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = class_patterns(class_count, &mut rng);
    let n = class_count * samples_per_class;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    let center = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    for i in 0..n {
        let k = i % class_count;
        let p = patterns[k];
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let (s, c) = p.orientation.sin_cos();
        for r in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let y = r as f64 - center;
                let x = col as f64 - center;
                let v = p.offset
                    + p.amplitude * (p.frequency * (x * c + y * s) + phase).cos()
                    + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(k);
    }
    Ok(SyntheticDataset {
        images: Tensor4::from_raw([n, 1, IMAGE_SIZE, IMAGE_SIZE], data),
        labels,
        class_count,
        patterns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShiftSpec {
    Rotation { degrees: f64 },
    Brightness { delta: f64 },
    GaussianNoise { sigma: f64 },
    CutOut { holes: usize, hole_size: usize },
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSpec::Rotation { degrees } if !(0.0..360.0).contains(&degrees) => Err(invalid(
                format!("rotation must lie in [0, 360), got {degrees}"),
            )),
            ShiftSpec::Brightness { delta } if !delta.is_finite() => {
                Err(invalid("brightness delta must be finite"))
            }
            ShiftSpec::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                invalid(format!("noise sigma must be non-negative, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            ShiftSpec::Rotation { degrees } => degrees == 0.0,
            ShiftSpec::Brightness { delta } => delta == 0.0,
            ShiftSpec::GaussianNoise { sigma } => sigma == 0.0,
            ShiftSpec::CutOut { holes, hole_size } => holes == 0 || hole_size == 0,
        }
    }
}

/// Applies a perturbation to every image. Zero severity returns the input
/// unchanged.
pub fn apply_shift(images: &Tensor4, spec: &ShiftSpec, seed: u64) -> Result<Tensor4> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(images.clone());
    }
    Ok(match *spec {
        ShiftSpec::Rotation { degrees } => rotate(images, degrees),
        ShiftSpec::Brightness { delta } => images.map(|v| (v + delta).clamp(0.0, 1.0)),
        ShiftSpec::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = images.clone();
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            out
        }
        ShiftSpec::CutOut { holes, hole_size } => cut_out(images, holes, hole_size, seed),
    })
}

/// Nearest-neighbour rotation about `((H-1)/2, (W-1)/2)`; pixels mapped
/// from outside the image take the mean of the input.
fn rotate(images: &Tensor4, degrees: f64) -> Tensor4 {
    let [b, ch, h, w] = images.shape();
    let fill = images.mean();
    let (s, c) = match degrees {
        d if d == 90.0 => (1.0, 0.0),
        d if d == 180.0 => (0.0, -1.0),
        d if d == 270.0 => (-1.0, 0.0),
        d => d.to_radians().sin_cos(),
    };
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // source coordinate for every destination pixel (inverse rotation)
    let mut map = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = (c * dy - s * dx + cy).round();
            let sx = (s * dy + c * dx + cx).round();
            let inside = sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64;
            map.push(inside.then(|| sy as usize * w + sx as usize));
        }
    }
    let mut out = Tensor4::zeros([b, ch, h, w]);
    for n in 0..b {
        for k in 0..ch {
            let src = images.channel_plane(n, k);
            let dst = out.channel_plane_mut(n, k);
            for (d, m) in dst.iter_mut().zip(&map) {
                *d = m.map_or(fill, |idx| src[idx]);
            }
        }
    }
    out
}

/// Zeroes `holes` square patches per image at seeded positions, clipped to
/// the image.
fn cut_out(images: &Tensor4, holes: usize, size: usize, seed: u64) -> Tensor4 {
    let [b, ch, h, w] = images.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.clone();
    for n in 0..b {
        for _ in 0..holes {
            let cy = rng.random_range(0..h) as isize;
            let cx = rng.random_range(0..w) as isize;
            let half = (size / 2) as isize;
            let (y0, x0) = ((cy - half).max(0) as usize, (cx - half).max(0) as usize);
            let y1 = ((cy - half + size as isize) as usize).min(h);
            let x1 = ((cx - half + size as isize) as usize).min(w);
            for k in 0..ch {
                let plane = out.channel_plane_mut(n, k);
                for y in y0..y1 {
                    plane[y * w + x0..y * w + x1]
                        .iter_mut()
                        .for_each(|v| *v = 0.0);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSpec {
    pub total_classes: usize,
    pub classes_per_split: usize,
    pub overlap_probability: f64,
    pub seed: u64,
}

impl OverlapSpec {
    /// Number of classes present on both sides.
    pub fn shared_classes(&self) -> usize {
        (self.overlap_probability * self.classes_per_split as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_split == 0 || self.classes_per_split > self.total_classes {
            return Err(invalid(format!(
                "{} classes per split out of {}",
                self.classes_per_split, self.total_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return Err(invalid("overlap probability must lie in [0, 1]"));
        }
        let needed = 2 * self.classes_per_split - self.shared_classes();
        if needed > self.total_classes {
            return Err(invalid(format!(
                "overlap split needs {needed} distinct classes, only {} exist",
                self.total_classes
            )));
        }
        Ok(())
    }
}

/// Index-level result of an overlapping split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub shared: Vec<usize>,
}

/// Chooses `classes_per_split` classes for each side, `round(p * c)` of
/// them shared. Exclusive classes contribute all their samples to their
/// side; shared classes alternate samples between the two sides.
pub fn overlapping_split_indices(labels: &[usize], spec: &OverlapSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.total_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: spec.total_classes,
        });
    }
    let c = spec.classes_per_split;
    let shared_n = spec.shared_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.total_classes).collect();
    order.shuffle(&mut rng);

    let shared: Vec<usize> = order[..shared_n].to_vec();
    let train_only = &order[shared_n..c];
    let test_only = &order[c..2 * c - shared_n];

    let mut train_classes: Vec<usize> = shared.iter().chain(train_only).copied().collect();
    let mut test_classes: Vec<usize> = shared.iter().chain(test_only).copied().collect();
    train_classes.sort_unstable();
    test_classes.sort_unstable();

    let side = |set: &[usize]| set.iter().copied().collect::<BTreeSet<usize>>();
    let (shared_set, train_set, test_set) = (side(&shared), side(train_only), side(test_only));
    let mut seen = vec![0usize; spec.total_classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        if shared_set.contains(&l) {
            if seen[l] % 2 == 0 {
                train.push(i);
            } else {
                test.push(i);
            }
            seen[l] += 1;
        } else if train_set.contains(&l) {
            train.push(i);
        } else if test_set.contains(&l) {
            test.push(i);
        }
    }
    let mut shared = shared;
    shared.sort_unstable();
    Ok(SplitIndices {
        train,
        test,
        train_classes,
        test_classes,
        shared,
    })
}

#[derive(Debug, Clone)]
pub struct OverlapSplit {
    pub train: SyntheticDataset,
    pub test: SyntheticDataset,
    pub overlapped_classes: usize,
}

pub fn overlapping_split(dataset: &SyntheticDataset, spec: &OverlapSpec) -> Result<OverlapSplit> {
    if spec.total_classes > dataset.class_count {
        return Err(invalid(format!(
            "split over {} classes, dataset has {}",
            spec.total_classes, dataset.class_count
        )));
    }
    let idx = overlapping_split_indices(&dataset.labels, spec)?;
    Ok(OverlapSplit {
        train: dataset.subset(&idx.train)?,
        test: dataset.subset(&idx.test)?,
        overlapped_classes: idx.shared.len(),
    })
}

/// Class draws for each cycle: `c` distinct classes, fresh draw per cycle.
pub fn cycle_classes(
    class_count: usize,
    c: usize,
    cycles: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if c == 0 || c > class_count {
        return Err(invalid(format!(
            "{c} classes per cycle out of {class_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cycles)
        .map(|_| {
            let mut draw = index::sample(&mut rng, class_count, c).into_vec();
            draw.sort_unstable();
            draw
        })
        .collect())
}

/// One class-subset dataset per cycle.
pub fn cycle_stream(
    dataset: &SyntheticDataset,
    c: usize,
    cycles: usize,
    seed: u64,
) -> Result<Vec<SyntheticDataset>> {
    cycle_classes(dataset.class_count, c, cycles, seed)?
        .iter()
        .map(|classes| dataset.with_classes(classes))
        .collect()
}

/// Endless stream of random batches drawn without replacement from a
/// pool of images; the pool is reshuffled whenever it runs out.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    images: &'a Tensor4,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(images: &'a Tensor4, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if images.batch() < batch_size {
            return Err(shape(format!(
                "pool of {} images cannot fill batches of {batch_size}",
                images.batch()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..images.batch()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            images,
            batch_size,
            order,
            cursor: 0,
            rng,
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Tensor4;

    fn next(&mut self) -> Option<Tensor4> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        self.images.select(idx).ok()
    }
}
