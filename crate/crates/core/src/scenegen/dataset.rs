use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_scene, render_scene, write_scene_pack, SceneConfig, WeatherFlags};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Deterministic RNG for one stream of one scene.
pub fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-scene seed from the dataset seed and scene index (SplitMix64 finalizer).
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    ClearDay,
    ClearNight,
    RainyDay,
    RainyNight,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::ClearDay,
        Condition::ClearNight,
        Condition::RainyDay,
        Condition::RainyNight,
    ];

    pub fn flags(self) -> WeatherFlags {
        WeatherFlags {
            rainy: matches!(self, Condition::RainyDay | Condition::RainyNight),
            night: matches!(self, Condition::ClearNight | Condition::RainyNight),
        }
    }

    pub fn from_flags(f: WeatherFlags) -> Self {
        match (f.rainy, f.night) {
            (false, false) => Condition::ClearDay,
            (false, true) => Condition::ClearNight,
            (true, false) => Condition::RainyDay,
            (true, true) => Condition::RainyNight,
        }
    }
}

/// Relative weights of clear-day, clear-night, rainy-day, rainy-night scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherMix(pub [f64; 4]);

impl Default for WeatherMix {
    fn default() -> Self {
        WeatherMix([0.4, 0.2, 0.2, 0.2])
    }
}

impl FromStr for WeatherMix {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(format!(
                "expected 4 comma-separated weights, got {}",
                parts.len()
            ));
        }
        let mut w = [0.0; 4];
        for (slot, p) in w.iter_mut().zip(&parts) {
            let v: f64 = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
            *slot = v;
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("weight `{p}` must be finite and non-negative"));
            }
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err("weights sum to zero".into());
        }
        Ok(WeatherMix(w))
    }
}

impl fmt::Display for WeatherMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.0;
        write!(f, "{},{},{},{}", w[0], w[1], w[2], w[3])
    }
}

impl WeatherMix {
    /// Scene counts per condition summing to `n` (largest-remainder rounding).
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let total: f64 = self.0.iter().sum();
        let exact = self.0.map(|w| w / total * n as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset directory.
    pub path: String,
    pub weather: WeatherFlags,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.path, e.weather.rainy as u8, e.weather.night as u8
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let flag = |s: &str, line: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Dataset(format!(
            "{MANIFEST_NAME} line {line}: flag `{s}` is not 0 or 1"
        ))),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Dataset(format!(
                "{MANIFEST_NAME} line {}: expected 3 tab-separated fields",
                i + 1
            )));
        }
        out.push(ManifestEntry {
            path: cols[0].to_string(),
            weather: WeatherFlags {
                rainy: flag(cols[1], i + 1)?,
                night: flag(cols[2], i + 1)?,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "{} lists no scenes",
            path.display()
        )));
    }
    Ok(out)
}

/// Generate `n` scenes into `dir` with the given weather mix and write the manifest.
pub fn generate_dataset(
    dir: &Path,
    n: usize,
    seed: u64,
    mix: WeatherMix,
    cfg: &SceneConfig,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let counts = mix.counts(n);
    let mut conditions: Vec<Condition> = Condition::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    conditions.shuffle(&mut scene_rng(seed, u64::MAX));

    let mut entries = Vec::with_capacity(n);
    for (i, cond) in conditions.into_iter().enumerate() {
        let weather = cond.flags();
        let (scene, labels) = generate_scene(cfg, weather, scene_seed(seed, i as u64));
        let pack = render_scene(cfg, &scene, &labels)?;
        let name = format!("scene_{i:05}.wocpack");
        write_scene_pack(&dir.join(&name), &pack)?;
        entries.push(ManifestEntry {
            path: name,
            weather,
        });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}
