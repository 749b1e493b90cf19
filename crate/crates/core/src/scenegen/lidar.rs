use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::raycast::first_hit;
use super::{Degradation, LidarConfig, WeatherFlags};
use crate::error::{Error, Result};
use crate::grid::LabelGrid;

/// Returns are placed this far past the entry face so they voxelize into
/// the voxel that was hit.
const SURFACE_BIAS: f64 = 1e-3;
const BACKSCATTER_MIN_RANGE: f64 = 0.5;
const BACKSCATTER_MAX_INTENSITY: f64 = 0.2;

/// Single-sweep LiDAR over an azimuth × elevation lattice.
///
/// Points are `(x, y, z, intensity)`. In rain each ray may instead return
/// a near-range backscatter point of low intensity, and true returns may
/// be lost.
pub fn simulate_lidar(
    labels: &LabelGrid,
    cfg: &LidarConfig,
    deg: &Degradation,
    weather: WeatherFlags,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f32; 4]>> {
    if cfg.beams == 0 || cfg.azimuth_steps == 0 {
        return Err(Error::contract("lidar needs at least one ray"));
    }
    let exp = Exp::new(deg.backscatter_rate)
        .map_err(|e| Error::contract(format!("backscatter rate: {e}")))?;
    let mut points = Vec::with_capacity(cfg.beams * cfg.azimuth_steps);
    for b in 0..cfg.beams {
        let el = if cfg.beams == 1 {
            cfg.elevation_min_deg
        } else {
            cfg.elevation_min_deg
                + (cfg.elevation_max_deg - cfg.elevation_min_deg) * b as f64
                    / (cfg.beams - 1) as f64
        }
        .to_radians();
        for s in 0..cfg.azimuth_steps {
            let az = std::f64::consts::TAU * s as f64 / cfg.azimuth_steps as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let hit = first_hit(labels, cfg.origin, dir, cfg.range_max);
            let at = |t: f64| {
                [
                    (cfg.origin[0] + dir[0] * t) as f32,
                    (cfg.origin[1] + dir[1] * t) as f32,
                    (cfg.origin[2] + dir[2] * t) as f32,
                ]
            };

            if weather.rainy {
                // Fixed draw count per ray keeps the stream aligned.
                let u_bs: f64 = rng.random();
                let u_drop: f64 = rng.random();
                let r: f64 = exp.sample(rng);
                let u_int: f64 = rng.random();
                if u_bs < deg.backscatter_prob {
                    let true_range = hit.map_or(cfg.range_max, |h| h.t);
                    let upper = true_range.max(BACKSCATTER_MIN_RANGE);
                    let range = r.clamp(BACKSCATTER_MIN_RANGE, upper * (1.0 - 1e-6));
                    let intensity = BACKSCATTER_MAX_INTENSITY * (0.1 + 0.9 * u_int);
                    let [x, y, z] = at(range);
                    points.push([x, y, z, intensity as f32]);
                    continue;
                }
                if u_drop < deg.drop_prob {
                    continue;
                }
            }
            if let Some(h) = hit {
                let intensity = (1.0 - h.t / cfg.range_max).clamp(0.0, 1.0);
                let [x, y, z] = at(h.t + SURFACE_BIAS);
                points.push([x, y, z, intensity as f32]);
            }
        }
    }
    Ok(points)
}
