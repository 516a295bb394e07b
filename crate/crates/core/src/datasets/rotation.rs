//! Continuous-angle rotation targets built from grayscale base images.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, ImageSet};

/// Rotates a square row-major image about its center by `angle` degrees
/// (counter-clockwise), sampling bilinearly. Samples falling outside the
/// frame read as zero.
pub fn rotate_image(img: &[f32], size: usize, angle: f64) -> Vec<f32> {
    assert_eq!(img.len(), size * size, "image must be square");
    let (s, c) = angle.to_radians().sin_cos();
    let center = (size as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= size as isize || col >= size as isize {
            0.0
        } else {
            img[r as usize * size + col as usize] as f64
        }
    };
    let mut out = vec![0.0f32; size * size];
    for r in 0..size {
        for col in 0..size {
            let (dx, dy) = (col as f64 - center, r as f64 - center);
            // inverse map: rotate the destination point back by -angle
            let sx = c * dx - s * dy + center;
            let sy = s * dx + c * dy + center;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out[r * size + col] = v as f32;
        }
    }
    out
}

/// `count` equally spaced angles on `[0, 180)`: `180 * k / count`.
pub fn angle_grid(count: usize) -> Vec<f64> {
    (0..count).map(|k| 180.0 * k as f64 / count as f64).collect()
}

/// Renders `per_angle` distinct base images at every angle of the grid.
///
/// Each angle draws its images without replacement from its own RNG stream
/// derived from `(seed, angle index)`, so the result does not depend on
/// generation order. The returned dataset is shuffled.
pub fn build_rotation_dataset(
    base: &ImageSet,
    angle_count: usize,
    per_angle: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if base.rows != base.cols {
        return Err(DataError::Config(format!(
            "base images must be square, got {}x{}",
            base.rows, base.cols
        )));
    }
    if angle_count == 0 || per_angle == 0 {
        return Err(DataError::Config("angle count and per-angle count must be positive".into()));
    }
    if base.count < per_angle {
        return Err(DataError::InsufficientImages {
            needed: per_angle,
            available: base.count,
        });
    }
    let size = base.rows;
    let angles = angle_grid(angle_count);
    let mut inputs = Vec::with_capacity(angle_count * per_angle * size * size);
    let mut targets = Vec::with_capacity(angle_count * per_angle);
    for (k, &angle) in angles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        for idx in sample(&mut rng, base.count, per_angle) {
            inputs.extend(rotate_image(base.image(idx), size, angle));
            targets.push(angle as f32);
        }
    }
    let ds = Dataset::new(vec![1, size, size], inputs, targets)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(ds.subset(&order))
}
