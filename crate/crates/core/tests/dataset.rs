use slimsplit::data::{gen_dataset, label_grid, render, sample_rects, SplitKind, SyntheticDatasetSpec};
use slimsplit::zoo::{GRID, INPUT_SIZE};

/// P(centre lands in grid index `i` along one axis) for one rectangle,
/// enumerating every side length and offset.
fn axis_probs(spec: &SyntheticDatasetSpec) -> Vec<f64> {
    let cell = INPUT_SIZE / GRID;
    let sides = spec.min_side..=spec.max_side;
    let n_sides = sides.clone().count() as f64;
    let mut p = vec![0.0; GRID];
    for w in sides {
        let offsets = INPUT_SIZE - w + 1;
        for x0 in 0..offsets {
            // centre (x0 + w/2) in cell units, exact in half pixels
            let idx = (2 * x0 + w) / (2 * cell);
            p[idx] += 1.0 / (offsets as f64 * n_sides);
        }
    }
    p
}

/// P(label = 1) per cell: a uniform count k of independent rectangles.
fn cell_probs(spec: &SyntheticDatasetSpec) -> Vec<f64> {
    let a = axis_probs(spec);
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            let p = a[r] * a[c];
            let hit: f64 = (1..=spec.max_rects).map(|k| 1.0 - (1.0 - p).powi(k as i32)).sum::<f64>() / spec.max_rects as f64;
            out.push(hit);
        }
    }
    out
}

#[test]
fn label_frequencies_match_geometry_oracle() {
    let spec = SyntheticDatasetSpec::default();
    let n = 10_000;
    let mut counts = vec![0.0; GRID * GRID];
    let mut rect_counts = vec![0usize; spec.max_rects + 1];
    for i in 0..n {
        let rects = sample_rects(&spec, 7, SplitKind::Train, i);
        rect_counts[rects.len()] += 1;
        for r in &rects {
            assert!(r.x0 + r.w <= INPUT_SIZE && r.y0 + r.h <= INPUT_SIZE);
            assert!((spec.min_side..=spec.max_side).contains(&r.w));
            assert!(r.color.iter().all(|&c| (spec.min_color..=1.0).contains(&c)));
        }
        for (acc, l) in counts.iter_mut().zip(label_grid(&rects)) {
            *acc += l;
        }
    }
    let expected = cell_probs(&spec);
    for (cell, (&c, &p)) in counts.iter().zip(&expected).enumerate() {
        let freq = c / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 5.0 * sigma + 1e-9, "cell {cell}: observed {freq}, expected {p} (sigma {sigma})");
    }
    let mean_obs = counts.iter().sum::<f64>() / (n * GRID * GRID) as f64;
    let mean_exp = expected.iter().sum::<f64>() / (GRID * GRID) as f64;
    assert!((mean_obs - mean_exp).abs() < 0.002, "positive fraction {mean_obs} vs {mean_exp}");

    // rectangle count uniform on 1..=max_rects
    let q = 1.0 / spec.max_rects as f64;
    let sigma = (q * (1.0 - q) / n as f64).sqrt();
    assert_eq!(rect_counts[0], 0);
    for &k in &rect_counts[1..] {
        assert!((k as f64 / n as f64 - q).abs() <= 5.0 * sigma);
    }
}

#[test]
fn background_noise_has_spec_moments() {
    let spec = SyntheticDatasetSpec::default();
    let plane = INPUT_SIZE * INPUT_SIZE;
    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0usize);
    let mut image = vec![0.0; 3 * plane];
    let mut label = vec![0.0; GRID * GRID];
    for i in 0..200 {
        render(&spec, 3, SplitKind::Val, i, &mut image, &mut label);
        let rects = sample_rects(&spec, 3, SplitKind::Val, i);
        assert_eq!(label, label_grid(&rects));
        for y in 0..INPUT_SIZE {
            for x in 0..INPUT_SIZE {
                if rects.iter().any(|r| x >= r.x0 && x < r.x0 + r.w && y >= r.y0 && y < r.y0 + r.h) {
                    continue;
                }
                for c in 0..3 {
                    let v = image[c * plane + y * INPUT_SIZE + x];
                    sum += v;
                    sq += v * v;
                    count += 1;
                }
            }
        }
    }
    let mean = sum / count as f64;
    let std = (sq / count as f64 - mean * mean).sqrt();
    assert!(mean.abs() < 5.0 * spec.noise_std / (count as f64).sqrt());
    assert!((std - spec.noise_std).abs() < 0.01 * spec.noise_std);
}

#[test]
fn generation_is_pure_per_index() {
    let spec = SyntheticDatasetSpec::with_sizes(12, 4);
    let a = gen_dataset(&spec, 9).unwrap();
    let b = gen_dataset(&SyntheticDatasetSpec::with_sizes(20, 4), 9).unwrap();
    // a prefix of a larger dataset is the smaller dataset
    let per = 3 * INPUT_SIZE * INPUT_SIZE;
    assert_eq!(a.train.images.data(), &b.train.images.data()[..12 * per]);
    assert_eq!(a.val, b.val);
    assert_eq!(a.hash(), gen_dataset(&spec, 9).unwrap().hash());
}
