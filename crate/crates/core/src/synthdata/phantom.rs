//! Seeded phantom volumes: a small, bent, randomly oriented target with
//! exact per-slice area control, ellipsoidal distractor blobs in an
//! overlapping intensity band, and additive Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::{LabelVolume, Volume, HU_MAX, HU_MIN};

/// Intensity of empty background tissue before noise.
pub const BACKGROUND_HU: i16 = -40;
/// Target intensity band; overlaps the top of the distractor band.
const TARGET_HU: (f64, f64) = (85.0, 130.0);
/// Distractor intensity band.
const DISTRACTOR_HU: (f64, f64) = (0.0, 95.0);

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error(
        "fraction range ({lo}, {hi}) is unachievable on a {w}x{h} slice: \
         no integer pixel count in [{n_min}, {n_max}]"
    )]
    UnachievableFraction { lo: f64, hi: f64, w: u32, h: u32, n_min: u64, n_max: u64 },
}

/// Parameters of one synthetic volume. Generation is a pure function of this
/// struct, seed included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: (u32, u32, u32),
    /// Per-axial-slice foreground area fraction band on slices where the
    /// target appears.
    pub target_fraction_range: (f64, f64),
    pub distractor_count: u32,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: (64, 64, 64),
            target_fraction_range: (0.001, 0.008),
            distractor_count: 3,
            noise_std: 8.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<(u64, u64), PhantomError> {
        let (w, h, d) = self.dims;
        if w < 32 || h < 32 || d < 32 {
            return Err(PhantomError::InvalidConfig(format!("dims {w}x{h}x{d} must be >= 32 per axis")));
        }
        let (lo, hi) = self.target_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.05) {
            return Err(PhantomError::InvalidConfig(format!(
                "fraction range ({lo}, {hi}) must satisfy 0 < min <= max < 0.05"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(PhantomError::InvalidConfig("noise_std must be >= 0".into()));
        }
        let area = w as f64 * h as f64;
        let n_min = (lo * area).ceil().max(1.0) as u64;
        let n_max = (hi * area).floor() as u64;
        if n_min > n_max {
            return Err(PhantomError::UnachievableFraction { lo, hi, w, h, n_min, n_max });
        }
        // The thick end of the target must fit inside the slice with margin.
        let max_semi_axis = (n_max as f64 * ASPECT_MAX / std::f64::consts::PI).sqrt();
        let margin = (2.0 * max_semi_axis).ceil() as u32 + 2;
        if 2 * margin >= w || 2 * margin >= h {
            return Err(PhantomError::UnachievableFraction { lo, hi, w, h, n_min, n_max });
        }
        Ok((n_min, n_max))
    }
}

const ASPECT_MIN: f64 = 1.2;
const ASPECT_MAX: f64 = 2.0;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

/// Pick exactly `count` pixels forming a rotated elliptical blob centered at
/// (cx, cy): the `count` in-bounds pixels nearest in elliptical distance,
/// ties broken by row-major order.
fn rasterize_blob(
    w: u32,
    h: u32,
    cx: f64,
    cy: f64,
    count: usize,
    aspect: f64,
    angle: f64,
) -> Vec<(u32, u32)> {
    let a = (count as f64 * aspect / std::f64::consts::PI).sqrt().max(0.6);
    let b = a / aspect;
    let reach = (2.5 * a).ceil() as i64;
    let (sin, cos) = angle.sin_cos();
    let mut candidates: Vec<(f64, u32, u32)> = Vec::new();
    let x_lo = (cx as i64 - reach).max(0);
    let x_hi = (cx as i64 + reach).min(w as i64 - 1);
    let y_lo = (cy as i64 - reach).max(0);
    let y_hi = (cy as i64 + reach).min(h as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let dist = (u / a).powi(2) + (v / b).powi(2);
            candidates.push((dist, y as u32, x as u32));
        }
    }
    candidates.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    candidates.truncate(count);
    candidates.into_iter().map(|(_, y, x)| (x, y)).collect()
}

/// Generate one phantom volume and its ground-truth label.
///
/// The target is a stack of rotated elliptical cross-sections whose pixel
/// count declines from a thick head to a thin tail along a bent spine; every
/// containing axial slice carries a foreground fraction inside the
/// configured band, exactly by construction.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelVolume), PhantomError> {
    let (n_min, n_max) = cfg.validate()?;
    let (w, h, d) = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Target extent and per-slice pixel budget.
    let z_len = (uniform(&mut rng, d as f64 / 3.0, d as f64 * 0.6)).round().max(4.0) as u32;
    let z0 = uniform(&mut rng, 2.0, (d - z_len - 2) as f64).floor() as u32;
    let spread = (n_max - n_min) as f64;
    let head_count = n_max as f64 - uniform(&mut rng, 0.0, spread * 0.25);
    let tail_count = n_min as f64 + uniform(&mut rng, 0.0, spread * 0.25);

    // Bent spine through the slice plane, biased toward the volume center.
    let a_head = (head_count * ASPECT_MAX / std::f64::consts::PI).sqrt();
    let margin = (2.0 * a_head).ceil() + 2.0;
    let cx0 = w as f64 / 2.0 + uniform(&mut rng, -(w as f64) / 8.0, w as f64 / 8.0);
    let cy0 = h as f64 / 2.0 + uniform(&mut rng, -(h as f64) / 8.0, h as f64 / 8.0);
    let vx = uniform(&mut rng, -(w as f64) / 8.0, w as f64 / 8.0);
    let vy = uniform(&mut rng, -(h as f64) / 8.0, h as f64 / 8.0);
    let bend_x = uniform(&mut rng, -(w as f64) / 16.0, w as f64 / 16.0);
    let bend_y = uniform(&mut rng, -(h as f64) / 16.0, h as f64 / 16.0);
    let aspect = uniform(&mut rng, ASPECT_MIN, ASPECT_MAX);
    let angle0 = uniform(&mut rng, 0.0, std::f64::consts::PI);
    let twist = uniform(&mut rng, -0.8, 0.8);
    let target_hu = uniform(&mut rng, TARGET_HU.0, TARGET_HU.1).round() as i16;

    // Distractor parameters are drawn up front so the stream layout does not
    // depend on rasterization details.
    let min_dim = w.min(h).min(d) as f64;
    let distractors: Vec<(f64, f64, f64, f64, f64, f64, i16)> = (0..cfg.distractor_count)
        .map(|_| {
            let cx = uniform(&mut rng, 2.0, w as f64 - 3.0);
            let cy = uniform(&mut rng, 2.0, h as f64 - 3.0);
            let cz = uniform(&mut rng, 2.0, d as f64 - 3.0);
            let rx = uniform(&mut rng, 2.0, (min_dim / 10.0).max(3.0));
            let ry = uniform(&mut rng, 2.0, (min_dim / 10.0).max(3.0));
            let rz = uniform(&mut rng, 2.0, (min_dim / 10.0).max(3.0));
            let hu = uniform(&mut rng, DISTRACTOR_HU.0, DISTRACTOR_HU.1).round() as i16;
            (cx, cy, cz, rx, ry, rz, hu)
        })
        .collect();

    let mut label = LabelVolume::zeros(w, h, d);
    for dz in 0..z_len {
        let z = z0 + dz;
        let t = if z_len > 1 { dz as f64 / (z_len - 1) as f64 } else { 0.0 };
        let count = (head_count + (tail_count - head_count) * t)
            .round()
            .clamp(n_min as f64, n_max as f64) as usize;
        let cx = (cx0 + vx * t + bend_x * t * t).clamp(margin, w as f64 - 1.0 - margin);
        let cy = (cy0 + vy * t + bend_y * t * t).clamp(margin, h as f64 - 1.0 - margin);
        let angle = angle0 + twist * t;
        for (x, y) in rasterize_blob(w, h, cx, cy, count, aspect, angle) {
            label.set(x, y, z, true);
        }
    }

    let mut vol = Volume::filled(w, h, d, BACKGROUND_HU);
    for &(cx, cy, cz, rx, ry, rz, hu) in &distractors {
        let x_lo = (cx - rx).floor().max(0.0) as u32;
        let x_hi = (cx + rx).ceil().min(w as f64 - 1.0) as u32;
        let y_lo = (cy - ry).floor().max(0.0) as u32;
        let y_hi = (cy + ry).ceil().min(h as f64 - 1.0) as u32;
        let z_lo = (cz - rz).floor().max(0.0) as u32;
        let z_hi = (cz + rz).ceil().min(d as f64 - 1.0) as u32;
        for z in z_lo..=z_hi {
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let e = ((x as f64 - cx) / rx).powi(2)
                        + ((y as f64 - cy) / ry).powi(2)
                        + ((z as f64 - cz) / rz).powi(2);
                    if e <= 1.0 {
                        vol.set(x, y, z, hu);
                    }
                }
            }
        }
    }

    // The target is written last: label marks exactly the target voxels.
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if label.get(x, y, z) == 1 {
                    vol.set(x, y, z, target_hu);
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
        for v in vol.data.iter_mut() {
            let noisy = *v as f64 + normal.sample(&mut rng);
            *v = (noisy.round() as i32).clamp(HU_MIN as i32, HU_MAX as i32) as i16;
        }
    }

    Ok((vol, label))
}
