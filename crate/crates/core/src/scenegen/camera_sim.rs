use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::raycast::first_hit;
use super::{Degradation, WeatherFlags};
use crate::encoders::{CameraModel, FeatureMap};
use crate::error::{Error, Result};
use crate::grid::{LabelGrid, NUM_CLASSES};

const CAMERA_RANGE: f64 = 40.0;

/// Fixed unit signature of `class` over `channels` dims.
///
/// The last channel is the atmosphere channel and is always zero here;
/// signatures use two of the remaining channels with weights (0.8, 0.6).
pub fn class_signature(class: u8, channels: usize) -> Vec<f32> {
    let mut sig = vec![0.0f32; channels];
    if channels < 2 || class == 0 || class as usize > NUM_CLASSES {
        return sig;
    }
    let m = channels - 1;
    if m == 1 {
        sig[0] = 1.0;
        return sig;
    }
    let k = class as usize - 1;
    let a = k % m;
    let mut b = (a + 4 + k / m) % m;
    if b == a {
        b = (a + 1) % m;
    }
    sig[a] = 0.8;
    sig[b] = 0.6;
    sig
}

/// Render per-camera feature maps `[channels, H, W]` by ray casting into `labels`.
pub fn simulate_camera(
    labels: &LabelGrid,
    cameras: &[CameraModel],
    channels: usize,
    deg: &Degradation,
    weather: WeatherFlags,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeatureMap>> {
    if cameras.is_empty() {
        return Err(Error::contract(
            "camera simulation needs at least one camera",
        ));
    }
    if channels < 2 {
        return Err(Error::contract(format!(
            "camera maps need at least 2 channels, got {channels}"
        )));
    }
    let sigs: Vec<Vec<f32>> = (0..=NUM_CLASSES as u8)
        .map(|c| class_signature(c, channels))
        .collect();
    let night_noise = Normal::new(0.0, deg.night_noise)
        .map_err(|e| Error::contract(format!("night noise: {e}")))?;
    let rain_noise = Normal::new(0.0, deg.rain_noise)
        .map_err(|e| Error::contract(format!("rain noise: {e}")))?;

    let mut maps = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let (h, w) = (cam.height, cam.width);
        let mut map = FeatureMap::zeros(channels, h, w);
        let origin = cam.center();
        for v in 0..h {
            for u in 0..w {
                let dir = cam.ego_ray(u, v);
                if let Some(hit) = first_hit(labels, origin, dir, CAMERA_RANGE) {
                    let atten = 1.0 / (1.0 + hit.t / 10.0);
                    let sig = &sigs[hit.label as usize];
                    for c in 0..channels - 1 {
                        *map.at_mut(c, v, u) = (sig[c] as f64 * atten) as f32;
                    }
                }
            }
        }
        if weather.night {
            for x in map.data.iter_mut() {
                *x = (*x as f64 * deg.night_gain + night_noise.sample(rng)) as f32;
            }
        }
        if weather.rainy {
            for x in map.data.iter_mut() {
                *x = (*x as f64 + rain_noise.sample(rng)) as f32;
            }
            for v in 0..h {
                for u in 0..w {
                    *map.at_mut(channels - 1, v, u) += deg.rain_haze as f32;
                }
            }
            let streaks = ((deg.streak_fraction * w as f64).round() as usize).min(w);
            for u in sample(rng, w, streaks) {
                for c in 0..channels {
                    for v in 0..h {
                        *map.at_mut(c, v, u) = 0.0;
                    }
                }
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::grid::DRIVEABLE_SURFACE;
    use crate::scenegen::{generate_scene, rasterize, CameraRigConfig, SceneConfig};

    fn quiet() -> Degradation {
        Degradation {
            night_noise: 0.0,
            rain_noise: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn signatures_are_unit_and_distinct() {
        for ch in [4usize, 8, 16] {
            let sigs: Vec<Vec<f32>> = (1..=NUM_CLASSES as u8)
                .map(|c| class_signature(c, ch))
                .collect();
            for s in &sigs {
                let n: f32 = s.iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-6);
                assert_eq!(s[ch - 1], 0.0);
            }
            if ch == 16 {
                for i in 0..sigs.len() {
                    for j in i + 1..sigs.len() {
                        assert_ne!(sigs[i], sigs[j], "classes {} and {}", i + 1, j + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn clear_day_empty_scene_shows_ground_below_horizon() {
        let labels = rasterize(&crate::grid::GridSpec::desk(), &[]);
        let cams = CameraRigConfig::default().build().unwrap();
        let maps = simulate_camera(
            &labels,
            &cams,
            16,
            &Degradation::default(),
            WeatherFlags::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let ground = class_signature(DRIVEABLE_SURFACE, 16);
        let g = ground.iter().position(|&x| x == 0.8).unwrap();
        for m in &maps {
            for v in 0..m.height {
                for u in 0..m.width {
                    let x = m.at(g, v, u);
                    if v < m.height / 2 {
                        assert_eq!(x, 0.0, "sky pixel ({u},{v})");
                    } else if v >= 3 * m.height / 4 {
                        assert!(x > 0.0, "ground pixel ({u},{v})");
                    }
                    for c in 0..16 {
                        if ground[c] == 0.0 {
                            assert_eq!(m.at(c, v, u), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn night_is_quarter_of_day_without_noise() {
        let cfg = SceneConfig::default();
        let (_, labels) = generate_scene(&cfg, WeatherFlags::default(), 4);
        let cams = cfg.cameras.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let day = simulate_camera(
            &labels,
            &cams,
            16,
            &quiet(),
            WeatherFlags::default(),
            &mut rng,
        )
        .unwrap();
        let night = simulate_camera(
            &labels,
            &cams,
            16,
            &quiet(),
            WeatherFlags {
                rainy: false,
                night: true,
            },
            &mut rng,
        )
        .unwrap();
        for (d, n) in day.iter().zip(&night) {
            for (a, b) in d.data.iter().zip(&n.data) {
                assert!((a * 0.25 - b).abs() < 1e-7);
            }
        }
    }

    fn snr(clean: &[FeatureMap], noisy: &[FeatureMap]) -> f64 {
        let (mut s, mut n) = (0.0f64, 0.0f64);
        for (c, y) in clean.iter().zip(noisy) {
            let ch = c.channels;
            // Atmosphere channel is excluded from the signal.
            let len = (ch - 1) * c.pixels();
            for (a, b) in c.data[..len].iter().zip(&y.data[..len]) {
                s += (*a as f64).powi(2);
                n += (*b as f64 - *a as f64).powi(2);
            }
        }
        s / n
    }

    #[test]
    fn night_lowers_snr_across_seeds() {
        let cfg = SceneConfig::default();
        let cams = cfg.cameras.build().unwrap();
        let (mut day_total, mut night_total) = (0.0, 0.0);
        for seed in 0..20 {
            let (_, labels) = generate_scene(&cfg, WeatherFlags::default(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = simulate_camera(
                &labels,
                &cams,
                16,
                &cfg.degradation,
                WeatherFlags::default(),
                &mut rng,
            )
            .unwrap();
            let day = simulate_camera(
                &labels,
                &cams,
                16,
                &cfg.degradation,
                WeatherFlags {
                    rainy: true,
                    night: false,
                },
                &mut rng,
            )
            .unwrap();
            let night = simulate_camera(
                &labels,
                &cams,
                16,
                &cfg.degradation,
                WeatherFlags {
                    rainy: true,
                    night: true,
                },
                &mut rng,
            )
            .unwrap();
            let (sd, sn) = (snr(&clean, &day), snr(&clean, &night));
            assert!(sn < sd, "seed {seed}: night {sn} vs day {sd}");
            day_total += sd;
            night_total += sn;
        }
        assert!(night_total < day_total);
    }

    #[test]
    fn rain_zeroes_streak_columns_and_lifts_atmosphere() {
        let cfg = SceneConfig::default();
        let (_, labels) = generate_scene(&cfg, WeatherFlags::default(), 2);
        let cams = cfg.cameras.build().unwrap();
        let maps = simulate_camera(
            &labels,
            &cams,
            16,
            &quiet(),
            WeatherFlags {
                rainy: true,
                night: false,
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        for m in &maps {
            let dead = (0..m.width)
                .filter(|&u| (0..m.channels).all(|c| (0..m.height).all(|v| m.at(c, v, u) == 0.0)))
                .count();
            assert_eq!(dead, 2);
            let live = (0..m.width).find(|&u| m.at(15, 0, u) != 0.0).unwrap();
            assert!((m.at(15, 0, live) - 0.5).abs() < 1e-6);
        }
    }
}
