use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Item, Split};
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Bright elliptical shell with a fainter inner ring.
    Rings,
    /// Linear ramp at a random angle.
    Gradients,
}

/// Generator settings for the blob-detection proxy set. Label 1 means a
/// blob is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub blob_probability: f64,
    pub blob_radius_range: (f64, f64),
    pub blob_intensity: f64,
    pub background: Background,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 2000,
            image_size: 32,
            blob_probability: 0.3,
            blob_radius_range: (2.0, 4.0),
            blob_intensity: 0.95,
            background: Background::Rings,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_radius_range;
        if !(0.0..=1.0).contains(&self.blob_probability) {
            return Err(Error::Config(format!("blob_probability {} outside [0, 1]", self.blob_probability)));
        }
        if !(lo > 0.0 && lo <= hi && hi < self.image_size as f64 / 2.0) {
            return Err(Error::Config(format!(
                "blob radius range ({lo}, {hi}) must satisfy 0 < min <= max < image_size/2"
            )));
        }
        if self.image_size < 8 || !(0.0..=1.0).contains(&self.blob_intensity) || self.noise_sigma < 0.0 {
            return Err(Error::Config("image_size >= 8, blob_intensity in [0,1], noise_sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Anti-aliased inside-test for a rotated ellipse: 1 inside, 0 outside,
/// a one-pixel linear ramp across the edge.
fn ellipse_cover(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    let u = (dx * c + dy * s) / a;
    let v = (-dx * s + dy * c) / b;
    let r = (u * u + v * v).sqrt();
    // distance to the edge in pixels, approximately
    let d = (1.0 - r) * a.min(b);
    (d + 0.5).clamp(0.0, 1.0)
}

fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<f32>, usize) {
    let n = spec.image_size;
    let size = n as f64;
    let mid = (size - 1.0) / 2.0;
    let mut img = vec![0.0f64; n * n];

    // geometry of the head region; blobs land inside it
    let cx = mid + rng.random_range(-1.0..1.0);
    let cy = mid + rng.random_range(-1.0..1.0);
    let ax = size * rng.random_range(0.38..0.45);
    let ay = size * rng.random_range(0.40..0.46);
    match spec.background {
        Background::Rings => {
            let tilt = rng.random_range(-0.2..0.2);
            let inner = size * rng.random_range(0.12..0.2);
            let shell = 0.65 + rng.random_range(0.0..0.1);
            let tissue = 0.25 + rng.random_range(0.0..0.08);
            for y in 0..n {
                for x in 0..n {
                    let (xf, yf) = (x as f64, y as f64);
                    let outer = ellipse_cover(xf, yf, cx, cy, ax, ay, tilt);
                    let brain = ellipse_cover(xf, yf, cx, cy, ax - 2.0, ay - 2.0, tilt);
                    let ring = ellipse_cover(xf, yf, cx, cy, inner, inner * 1.3, tilt)
                        - ellipse_cover(xf, yf, cx, cy, inner - 1.2, inner * 1.3 - 1.2, tilt);
                    img[y * n + x] = shell * (outer - brain) + tissue * brain + 0.2 * ring;
                }
            }
        }
        Background::Gradients => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let (lo, hi) = (rng.random_range(0.05..0.2), rng.random_range(0.35..0.55));
            for y in 0..n {
                for x in 0..n {
                    let t = ((x as f64 - mid) * c + (y as f64 - mid) * s) / size + 0.5;
                    img[y * n + x] = lo + (hi - lo) * t.clamp(0.0, 1.0);
                }
            }
        }
    }

    let label = usize::from(rng.random_bool(spec.blob_probability));
    if label == 1 {
        let (rlo, rhi) = spec.blob_radius_range;
        let a = rng.random_range(rlo..=rhi);
        let b = rng.random_range(rlo..=rhi);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let reach = 0.55 * (ax.min(ay) - rhi - 2.0).max(1.0);
        let rho = reach * rng.random::<f64>().sqrt();
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (bx, by) = (cx + rho * phi.cos(), cy + rho * phi.sin());
        for y in 0..n {
            for x in 0..n {
                let cover = ellipse_cover(x as f64, y as f64, bx, by, a, b, angle);
                let v = &mut img[y * n + x];
                *v = *v * (1.0 - cover) + spec.blob_intensity * cover;
            }
        }
    }

    let pixels = img
        .into_iter()
        .map(|v| {
            let noisy = v + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            (noisy.clamp(0.0, 1.0) * 2.0 - 1.0) as f32
        })
        .collect();
    (pixels, label)
}

/// Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let items = (0..spec.n_images)
        .map(|i| {
            let (data, label) = render(spec, &mut rng);
            Item {
                name: format!("img_{i:05}.pgm"),
                image: Array {
                    shape: vec![1, n, n],
                    data,
                },
                label: Some(label),
            }
        })
        .collect();
    Ok(Dataset {
        items,
        class_names: Some(vec!["background".into(), "blob".into()]),
        split: Split::Train,
    })
}
