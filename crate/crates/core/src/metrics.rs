//! Image scoring: a CLIP-style cosine score and pixel-level corruption
//! statistics against an error-free reference.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng;

/// Default per-pixel threshold for the corruption mask.
pub const DEFAULT_THRESHOLD: f32 = 2.0 / 255.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("embedding widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("image sizes differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// `100 * max(0, cos(a, b))`.
pub fn clip_like_score(image_embedding: &[f64], text_embedding: &[f64]) -> Result<f64, MetricError> {
    if image_embedding.len() != text_embedding.len() {
        return Err(MetricError::WidthMismatch(image_embedding.len(), text_embedding.len()));
    }
    let (na, nb) = (norm(image_embedding), norm(text_embedding));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(MetricError::ZeroNorm);
    }
    let dot: f64 = image_embedding
        .iter()
        .zip(text_embedding)
        .map(|(&a, &b)| a * b)
        .sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(100.0 * cos.max(0.0))
}

/// Stand-in image encoder: a fixed seeded projection of the mean-centred
/// image onto `width` dimensions, normalized to unit length.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    width: usize,
    image_size: usize,
    projection: Arc<[f32]>,
}

impl ImageEncoder {
    pub fn new(seed: u64, image_size: usize, width: usize) -> Self {
        let n = 3 * image_size * image_size;
        let mut r = rng::stream(seed, "image-encoder", 0);
        let projection = (0..width * n).map(|_| r.random_range(-1.0f32..1.0)).collect();
        ImageEncoder {
            width,
            image_size,
            projection,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Unit-norm embedding. A constant image has no centred content and
    /// embeds to the zero vector.
    pub fn embed(&self, img: &Image) -> Result<Vec<f64>, MetricError> {
        if img.size() != self.image_size {
            return Err(MetricError::DimensionMismatch(img.size(), self.image_size));
        }
        let data = img.data();
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let centred: Vec<f32> = data.iter().map(|&v| (v as f64 - mean) as f32).collect();
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(data.len())
            .map(|row| crate::model::ops::dot(row, &centred) as f64)
            .collect();
        let n = norm(&out);
        if n > 0.0 {
            for v in &mut out {
                *v /= n;
            }
        }
        Ok(out)
    }
}

/// Unit-norm projection of `img` with a fresh encoder for `seed`.
pub fn toy_image_embed(img: &Image, seed: u64, width: usize) -> Vec<f64> {
    ImageEncoder::new(seed, img.size(), width)
        .embed(img)
        .expect("encoder built for this size")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStats {
    /// `||img - baseline|| / ||baseline||` over all channels; the plain
    /// norm when the baseline is all zeros.
    pub deviation: f64,
    pub corrupted_fraction: f64,
    pub component_count: usize,
    /// Zero when no pixel is corrupted.
    pub mean_component_area: f64,
}

/// Pixels whose largest per-channel absolute difference exceeds `threshold`.
pub fn corruption_mask(img: &Image, baseline: &Image, threshold: f32) -> Result<Vec<bool>, MetricError> {
    if img.size() != baseline.size() {
        return Err(MetricError::DimensionMismatch(img.size(), baseline.size()));
    }
    let plane = img.size() * img.size();
    let (a, b) = (img.data(), baseline.data());
    Ok((0..plane)
        .map(|p| (0..3).map(|c| (a[c * plane + p] - b[c * plane + p]).abs()).fold(0.0f32, f32::max) > threshold)
        .collect())
}

/// Sizes of the 4-connected components of `mask` (row-major, `side x side`),
/// in scan order of each component's first pixel.
pub fn component_areas(mask: &[bool], side: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (y, x) = (p / side, p % side);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < side {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - side);
            }
            if y + 1 < side {
                visit(p + side);
            }
        }
        areas.push(area);
    }
    areas
}

pub fn corruption_stats(img: &Image, baseline: &Image, threshold: f32) -> Result<CorruptionStats, MetricError> {
    let mask = corruption_mask(img, baseline, threshold)?;
    let mut diff2 = 0.0f64;
    let mut base2 = 0.0f64;
    for (&a, &b) in img.data().iter().zip(baseline.data()) {
        let d = a as f64 - b as f64;
        diff2 += d * d;
        base2 += b as f64 * b as f64;
    }
    let deviation = if base2 > 0.0 { (diff2 / base2).sqrt() } else { diff2.sqrt() };
    let areas = component_areas(&mask, img.size());
    let corrupted = areas.iter().sum::<usize>();
    Ok(CorruptionStats {
        deviation,
        corrupted_fraction: corrupted as f64 / mask.len() as f64,
        component_count: areas.len(),
        mean_component_area: if areas.is_empty() {
            0.0
        } else {
            corrupted as f64 / areas.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assume, proptest};

    #[test]
    fn hand_computed_scores() {
        assert!((clip_like_score(&[1.0, 0.0], &[0.6, 0.8]).unwrap() - 60.0).abs() < 1e-12);
        assert_eq!(clip_like_score(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap(), 100.0);
        assert_eq!(clip_like_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(clip_like_score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(clip_like_score(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricError::ZeroNorm));
        assert_eq!(clip_like_score(&[1.0], &[1.0, 0.0]), Err(MetricError::WidthMismatch(1, 2)));
    }

    proptest! {
        #[test]
        fn score_is_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let s = clip_like_score(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            let scaled = clip_like_score(&sa, &sb).unwrap();
            prop_assert!((0.0..=100.0).contains(&s));
            prop_assert!((s - scaled).abs() < 1e-9);
        }
    }

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, "test-image", 0);
        Image::from_unclamped(size, (0..3 * size * size).map(|_| r.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn embedding_is_unit_and_sensitive() {
        let enc = ImageEncoder::new(3, 8, 16);
        let img = noise_image(8, 1);
        let e = enc.embed(&img).unwrap();
        assert_eq!(e, enc.embed(&img).unwrap());
        assert!((norm(&e) - 1.0).abs() < 1e-6);
        let mut other = img.clone();
        other.set(1, 4, 4, 1.0 - img.get(1, 4, 4));
        assert_ne!(e, enc.embed(&other).unwrap());
        assert!(enc.embed(&Image::constant(8, 0.3)).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(enc.embed(&Image::constant(4, 0.3)), Err(MetricError::DimensionMismatch(4, 8)));
        assert_eq!(toy_image_embed(&img, 3, 16), e);
    }

    #[test]
    fn identical_images_have_no_corruption() {
        let img = noise_image(16, 2);
        let s = corruption_stats(&img, &img, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(
            s,
            CorruptionStats {
                deviation: 0.0,
                corrupted_fraction: 0.0,
                component_count: 0,
                mean_component_area: 0.0
            }
        );
    }

    #[test]
    fn single_pixel_and_square_fixtures() {
        let base = Image::constant(64, 0.5);
        let mut one = base.clone();
        one.set(2, 10, 20, 0.9);
        let s = corruption_stats(&one, &base, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((s.component_count, s.mean_component_area), (1, 1.0));
        assert_eq!(s.corrupted_fraction, 1.0 / 4096.0);

        let mut square = base.clone();
        for y in 30..38 {
            for x in 5..13 {
                square.set(0, y, x, 0.0);
            }
        }
        let s = corruption_stats(&square, &base, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((s.component_count, s.mean_component_area), (1, 64.0));
        assert_eq!(s.corrupted_fraction, 64.0 / 4096.0);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let mask = [true, false, false, true];
        assert_eq!(component_areas(&mask, 2), [1, 1]);
        let mask = [true, true, false, true];
        assert_eq!(component_areas(&mask, 2), [3]);
    }

    #[test]
    fn small_differences_stay_below_threshold() {
        let base = Image::constant(4, 0.5);
        let mut img = base.clone();
        img.set(0, 0, 0, 0.5 + 1.0 / 255.0);
        let s = corruption_stats(&img, &base, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(s.component_count, 0);
        assert!(s.deviation > 0.0);
        assert!(corruption_stats(&img, &Image::constant(5, 0.5), 0.0).is_err());
    }

    #[test]
    fn mask_is_symmetric_and_dilation_grows_area() {
        let a = noise_image(16, 4);
        let b = noise_image(16, 5);
        assert_eq!(corruption_mask(&a, &b, 0.3).unwrap(), corruption_mask(&b, &a, 0.3).unwrap());

        let base = Image::constant(32, 0.5);
        let mut prev = 0.0;
        for r in 0..6usize {
            let mut img = base.clone();
            for (cy, cx) in [(8usize, 8usize), (22, 20)] {
                for y in cy - r..=cy + r {
                    for x in cx - r..=cx + r {
                        img.set(0, y, x, 1.0);
                    }
                }
            }
            let s = corruption_stats(&img, &base, DEFAULT_THRESHOLD).unwrap();
            assert!(s.mean_component_area >= prev);
            prev = s.mean_component_area;
        }
    }
}
