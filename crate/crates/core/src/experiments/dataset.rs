use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Quadrants times rectangle sizes.
pub const MAX_PATTERNS: usize = 12;

/// Rectangle side lengths as fractions of the image side, smallest first.
const SIZE_FRACTIONS: [f64; 3] = [0.0625, 0.125, 0.1875];

/// Maximum rectangle offset from the quadrant centre, as a fraction of the side.
const JITTER: f64 = 1.0 / 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            num_classes: 10,
            samples_per_class: 200,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_PATTERNS {
            return Err(Error::config(format!(
                "num_classes must be in 1..={MAX_PATTERNS} (quadrant x size patterns), got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 || self.channels == 0 || self.samples_per_class == 0 {
            return Err(Error::config("dataset needs image_size >= 16 and non-empty classes"));
        }
        Ok(())
    }
}

/// Images stored contiguously as `[n, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into a `[batch, H, W, C]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let shape = vec![indices.len(), self.image_size, self.image_size, self.channels];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

/// Class `k` is a bright square in quadrant `k % 4` whose side is
/// `SIZE_FRACTIONS[k / 4]` of the image, placed near the quadrant centre with a small random
/// offset, over uniform `[0, 0.1]` background noise. Classes are balanced and
/// the sample order is shuffled; the whole dataset is a function of the seed.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let c = spec.channels;
    let n = spec.num_classes * spec.samples_per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let half = s / 2;
    let mut images = Vec::with_capacity(n * s * s * c);
    for &k in &labels {
        let quadrant = k % 4;
        let side = ((SIZE_FRACTIONS[k / 4] * s as f64).round() as usize).clamp(1, half);
        let (qy, qx) = ((quadrant / 2) * half, (quadrant % 2) * half);
        // Centred in the quadrant, jittered by at most JITTER of the image side.
        let slack = half - side;
        let jitter = ((JITTER * s as f64) as usize).min(slack / 2);
        let base = slack / 2 - jitter;
        let y0 = qy + base + rng.random_range(0..=2 * jitter);
        let x0 = qx + base + rng.random_range(0..=2 * jitter);
        let brightness: f32 = rng.random_range(0.8..1.0);
        let start = images.len();
        images.extend((0..s * s * c).map(|_| rng.random_range(0.0f32..0.1)));
        let img = &mut images[start..];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for ch in 0..c {
                    img[(y * s + x) * c + ch] = brightness;
                }
            }
        }
    }
    Ok(Dataset {
        image_size: s,
        channels: c,
        num_classes: spec.num_classes,
        images,
        labels,
    })
}

/// Smallest pairwise class separation: for each pair of classes, the distance
/// between their mean images divided by the pooled within-class standard
/// deviation of samples projected on that mean-difference direction.
pub fn separability(data: &Dataset) -> f64 {
    let k = data.num_classes;
    let p = data.image_len();
    let mut means = vec![vec![0.0f64; p]; k];
    let mut counts = vec![0usize; k];
    for i in 0..data.len() {
        let y = data.labels[i];
        counts[y] += 1;
        for (m, &v) in means[y].iter_mut().zip(data.image(i)) {
            *m += v as f64;
        }
    }
    for (m, &cnt) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= cnt.max(1) as f64);
    }
    let mut worst = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let dir: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect();
            let dist = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dist == 0.0 {
                return 0.0;
            }
            let unit: Vec<f64> = dir.iter().map(|v| v / dist).collect();
            let mut ss = 0.0;
            let mut cnt = 0usize;
            for i in 0..data.len() {
                let y = data.labels[i];
                if y != a && y != b {
                    continue;
                }
                let proj: f64 = data
                    .image(i)
                    .iter()
                    .zip(&means[y])
                    .zip(&unit)
                    .map(|((&x, &m), &u)| (x as f64 - m) * u)
                    .sum();
                ss += proj * proj;
                cnt += 1;
            }
            let std = (ss / cnt.max(1) as f64).sqrt();
            worst = worst.min(dist / std);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            samples_per_class: 30,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 12;
        assert_ne!(a.images, generate_dataset(&other).unwrap().images);
    }

    #[test]
    fn labels_exactly_balanced() {
        let d = generate_dataset(&small()).unwrap();
        let mut hist = vec![0; 10];
        d.labels.iter().for_each(|&y| hist[y] += 1);
        assert!(hist.iter().all(|&h| h == 30));
    }

    #[test]
    fn too_many_classes_rejected() {
        let spec = SyntheticDatasetSpec {
            num_classes: 13,
            ..small()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_ranges() {
        let d = generate_dataset(&small()).unwrap();
        assert!(d.images.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn classes_are_separable() {
        let d = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let s = separability(&d);
        assert!(s > 5.0, "separability {s}");
    }
}
