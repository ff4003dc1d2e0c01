//! Synthetic objectness dataset.
//!
//! Each image is 3x64x64: Gaussian noise plus 1-4 axis-aligned rectangles of
//! random size and colour. The label is an 8x8 grid with a 1 in every cell that
//! contains a rectangle centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};
use crate::zoo::{GRID, INPUT_CHANNELS, INPUT_SIZE};

pub const CELL: usize = INPUT_SIZE / GRID;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset split sizes must be at least 1 (train {train}, val {val})")]
    EmptySplit { train: usize, val: usize },
    #[error("invalid generator setting: {0}")]
    Generator(String),
    #[error("batch range {start}..{end} exceeds split of {len} images")]
    Range { start: usize, end: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub train: usize,
    pub val: usize,
    pub max_rects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub noise_std: f64,
    /// Lower bound of each colour channel; the upper bound is 1.
    pub min_color: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            train: 2000,
            val: 500,
            max_rects: 4,
            min_side: 6,
            max_side: 16,
            noise_std: 0.1,
            min_color: 0.5,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn with_sizes(train: usize, val: usize) -> Self {
        SyntheticDatasetSpec {
            train,
            val,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.train == 0 || self.val == 0 {
            return Err(DataError::EmptySplit {
                train: self.train,
                val: self.val,
            });
        }
        if self.max_rects == 0 {
            return Err(DataError::Generator("max_rects must be at least 1".into()));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > INPUT_SIZE {
            return Err(DataError::Generator(format!(
                "side range {}..={} must lie in 1..={INPUT_SIZE}",
                self.min_side, self.max_side
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Generator(format!("noise std {} must be finite and non-negative", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.min_color) {
            return Err(DataError::Generator(format!("min colour {} must lie in [0, 1]", self.min_color)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
}

/// One rectangle, in pixels: `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
}

impl Rect {
    /// Grid cell `(row, col)` holding the centre.
    pub fn center_cell(&self) -> (usize, usize) {
        ((2 * self.y0 + self.h) / (2 * CELL), (2 * self.x0 + self.w) / (2 * CELL))
    }
}

/// Labels for the given rectangles: `GRID * GRID` values in row-major order.
pub fn label_grid(rects: &[Rect]) -> Vec<f64> {
    let mut g = vec![0.0; GRID * GRID];
    for r in rects {
        let (row, col) = r.center_cell();
        g[row * GRID + col] = 1.0;
    }
    g
}

fn image_seed(seed: u64, split: SplitKind, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([split as u8]);
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Rectangles of one image, a pure function of `(spec, seed, split, index)`.
pub fn sample_rects(spec: &SyntheticDatasetSpec, seed: u64, split: SplitKind, index: usize) -> Vec<Rect> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, split, index));
    sample_rects_with(spec, &mut rng)
}

fn sample_rects_with(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let k = rng.random_range(1..=spec.max_rects);
    (0..k)
        .map(|_| {
            let w = rng.random_range(spec.min_side..=spec.max_side);
            let h = rng.random_range(spec.min_side..=spec.max_side);
            let x0 = rng.random_range(0..=INPUT_SIZE - w);
            let y0 = rng.random_range(0..=INPUT_SIZE - h);
            let color = [(); 3].map(|_| rng.random_range(spec.min_color..=1.0));
            Rect { x0, y0, w, h, color }
        })
        .collect()
}

/// Renders one image and its labels into the given buffers.
pub fn render(spec: &SyntheticDatasetSpec, seed: u64, split: SplitKind, index: usize, image: &mut [f64], label: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, split, index));
    let rects = sample_rects_with(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let plane = INPUT_SIZE * INPUT_SIZE;
    for v in image.iter_mut() {
        *v = noise.sample(&mut rng);
    }
    for r in &rects {
        for (c, &col) in r.color.iter().enumerate() {
            for y in r.y0..r.y0 + r.h {
                let row = &mut image[c * plane + y * INPUT_SIZE + r.x0..c * plane + y * INPUT_SIZE + r.x0 + r.w];
                for v in row {
                    *v += col;
                }
            }
        }
    }
    label.copy_from_slice(&label_grid(&rects));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `(n, 3, 64, 64)`.
    pub images: Tensor<f64>,
    /// `(n, 1, 8, 8)`.
    pub labels: Tensor<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images and labels `start..start + len`.
    pub fn batch(&self, start: usize, len: usize) -> Result<(Tensor<f64>, Tensor<f64>), DataError> {
        let end = start + len;
        if len == 0 || end > self.len() {
            return Err(DataError::Range {
                start,
                end,
                len: self.len(),
            });
        }
        Ok((
            self.images.batch_range(start, len).expect("range checked"),
            self.labels.batch_range(start, len).expect("range checked"),
        ))
    }

    /// Consecutive batches; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<f64>, Tensor<f64>)> + '_ {
        let n = self.len();
        (0..n)
            .step_by(batch_size.max(1))
            .map(move |s| self.batch(s, batch_size.max(1).min(n - s)).expect("in range"))
    }

    pub fn positive_fraction(&self) -> f64 {
        let l = self.labels.data();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
}

fn gen_split(spec: &SyntheticDatasetSpec, seed: u64, kind: SplitKind, n: usize) -> Split {
    let plane = INPUT_CHANNELS * INPUT_SIZE * INPUT_SIZE;
    let mut images = vec![0.0; n * plane];
    let mut labels = vec![0.0; n * GRID * GRID];
    for (i, (img, lab)) in images.chunks_exact_mut(plane).zip(labels.chunks_exact_mut(GRID * GRID)).enumerate() {
        render(spec, seed, kind, i, img, lab);
    }
    Split {
        images: Tensor::new(Shape::new(n, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), images).expect("sized"),
        labels: Tensor::new(Shape::new(n, 1, GRID, GRID), labels).expect("sized"),
    }
}

/// Train and validation splits; the splits draw from distinct seed streams.
pub fn gen_dataset(spec: &SyntheticDatasetSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    Ok(Dataset {
        spec: *spec,
        seed,
        train: gen_split(spec, seed, SplitKind::Train, spec.train),
        val: gen_split(spec, seed, SplitKind::Val, spec.val),
    })
}

impl Dataset {
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in [&self.train, &self.val] {
            h.update(s.images.to_le_bytes());
            h.update(s.labels.to_le_bytes());
        }
        h.finalize().into()
    }
}
