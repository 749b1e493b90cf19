//! Synthetic scenes, weather-degraded sensor simulation and the on-disk
//! scene format.

mod camera_sim;
mod dataset;
mod lidar;
mod pack;
pub mod raycast;

pub use camera_sim::{class_signature, simulate_camera};
pub use dataset::{
    generate_dataset, read_manifest, scene_rng, scene_seed, write_manifest, Condition,
    ManifestEntry, WeatherMix, MANIFEST_NAME,
};
pub use lidar::simulate_lidar;
pub use pack::{read_scene_pack, write_scene_pack, PackError, ScenePack, PACK_MAGIC, PACK_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::CameraModel;
use crate::error::Result;
use crate::grid::{GridSpec, LabelGrid, VoxelIndex, DRIVEABLE_SURFACE, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct WeatherFlags {
    pub rainy: bool,
    pub night: bool,
}

impl WeatherFlags {
    pub const ALL: [WeatherFlags; 4] = [
        WeatherFlags {
            rainy: false,
            night: false,
        },
        WeatherFlags {
            rainy: false,
            night: true,
        },
        WeatherFlags {
            rainy: true,
            night: false,
        },
        WeatherFlags {
            rainy: true,
            night: true,
        },
    ];

    pub fn label(self) -> &'static str {
        match (self.rainy, self.night) {
            (false, false) => "clear-day",
            (false, true) => "clear-night",
            (true, false) => "rainy-day",
            (true, true) => "rainy-night",
        }
    }
}

/// Axis-aligned object box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisBox {
    pub class: u8,
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl AxisBox {
    pub fn lo(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] - self.half[a])
    }

    pub fn hi(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + self.half[a])
    }

    /// Half-open containment, matching the grid's cell convention.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.lo(), self.hi());
        (0..3).all(|a| p[a] >= lo[a] - 1e-9 && p[a] < hi[a] - 1e-9)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: GridSpec,
    pub objects: Vec<AxisBox>,
    pub z_ground: f64,
    pub weather: WeatherFlags,
    pub seed: u64,
}

/// Sensor degradation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradation {
    /// Camera signal multiplier at night.
    pub night_gain: f64,
    pub night_noise: f64,
    pub rain_noise: f64,
    /// Constant added to the camera's atmosphere channel in rain.
    pub rain_haze: f64,
    /// Fraction of image columns zeroed by rain streaks.
    pub streak_fraction: f64,
    /// Per-ray probability of a rain backscatter return.
    pub backscatter_prob: f64,
    /// Rate (1/m) of the exponential backscatter range distribution.
    pub backscatter_rate: f64,
    /// Per-ray probability that a true return is lost in rain.
    pub drop_prob: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation {
            night_gain: 0.25,
            night_noise: 0.3,
            rain_noise: 0.1,
            rain_haze: 0.5,
            streak_fraction: 0.05,
            backscatter_prob: 0.15,
            backscatter_rate: 0.2,
            drop_prob: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarConfig {
    pub origin: [f64; 3],
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub range_max: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            origin: [0.0, 0.0, 1.0],
            beams: 24,
            elevation_min_deg: -35.0,
            elevation_max_deg: 5.0,
            azimuth_steps: 240,
            range_max: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRigConfig {
    pub count: usize,
    pub position: [f64; 3],
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        CameraRigConfig {
            count: 4,
            position: [0.0, 0.0, 0.8],
            fov_deg: 90.0,
            height: 32,
            width: 32,
            channels: 16,
        }
    }
}

impl CameraRigConfig {
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        CameraModel::ring(
            self.count,
            self.position,
            self.fov_deg.to_radians(),
            self.height,
            self.width,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub spec: GridSpec,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects are kept out of the square `|x|, |y| < keep_out` around the sensors.
    pub keep_out: f64,
    pub lidar: LidarConfig,
    pub cameras: CameraRigConfig,
    pub degradation: Degradation,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            spec: GridSpec::desk(),
            min_objects: 6,
            max_objects: 12,
            keep_out: 1.6,
            lidar: LidarConfig::default(),
            cameras: CameraRigConfig::default(),
            degradation: Degradation::default(),
        }
    }
}

/// Top of the ground layer: the lowest voxel layer is the road surface.
pub fn ground_height(spec: &GridSpec) -> f64 {
    spec.min[2] + spec.voxel
}

const FLAT_CLASSES: [u8; 3] = [12, 13, 14];

/// Nominal half-extents per class (index = label − 1); flat classes use
/// the ground layer's thickness instead of the z entry.
const SIZE_PRIORS: [[f64; 3]; NUM_CLASSES] = [
    [0.25, 1.0, 0.5],
    [0.85, 0.3, 0.6],
    [3.0, 1.3, 1.5],
    [2.2, 0.95, 0.8],
    [2.4, 1.3, 1.4],
    [1.0, 0.4, 0.7],
    [0.3, 0.3, 0.9],
    [0.2, 0.2, 0.4],
    [2.6, 1.2, 1.2],
    [3.0, 1.3, 1.5],
    [0.0, 0.0, 0.0],
    [1.6, 1.6, 0.0],
    [4.0, 1.0, 0.0],
    [2.2, 2.2, 0.0],
    [1.6, 1.6, 1.5],
    [1.0, 1.0, 1.2],
];

fn sample_object(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> AxisBox {
    let spec = &cfg.spec;
    let z_ground = ground_height(spec);
    loop {
        let class = loop {
            let c = rng.random_range(1..=NUM_CLASSES as u8);
            if c != DRIVEABLE_SURFACE {
                break c;
            }
        };
        let prior = SIZE_PRIORS[class as usize - 1];
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
        let mut half = [
            prior[0] * jitter[0],
            prior[1] * jitter[1],
            prior[2] * jitter[2],
        ];
        if rng.random_bool(0.5) {
            half.swap(0, 1);
        }
        let cz = if FLAT_CLASSES.contains(&class) {
            half[2] = spec.voxel / 2.0;
            spec.min[2] + spec.voxel / 2.0
        } else {
            z_ground + half[2]
        };
        let cx = rng.random_range(spec.min[0]..spec.max[0]);
        let cy = rng.random_range(spec.min[1]..spec.max[1]);
        let b = AxisBox {
            class,
            center: [cx, cy, cz],
            half,
        };
        let clear = b.hi()[0] <= -cfg.keep_out
            || b.lo()[0] >= cfg.keep_out
            || b.hi()[1] <= -cfg.keep_out
            || b.lo()[1] >= cfg.keep_out;
        if clear {
            return b;
        }
    }
}

/// Rasterize ground and boxes: a voxel takes the label of the last box
/// whose half-open extent contains its center.
pub fn rasterize(spec: &GridSpec, objects: &[AxisBox]) -> LabelGrid {
    let mut grid = LabelGrid::empty(*spec);
    let z_ground = ground_height(spec);
    let (_, ground_top) = spec.center_range(2, spec.min[2], z_ground);
    for i in 0..spec.dims[0] {
        for j in 0..spec.dims[1] {
            for k in 0..ground_top {
                grid.set(VoxelIndex([i, j, k]), DRIVEABLE_SURFACE);
            }
        }
    }
    for b in objects {
        let (lo, hi) = (b.lo(), b.hi());
        let (x0, x1) = spec.center_range(0, lo[0], hi[0]);
        let (y0, y1) = spec.center_range(1, lo[1], hi[1]);
        let (z0, z1) = spec.center_range(2, lo[2], hi[2]);
        for i in x0..x1 {
            for j in y0..y1 {
                for k in z0..z1 {
                    grid.set(VoxelIndex([i, j, k]), b.class);
                }
            }
        }
    }
    grid
}

/// Sample a scene and its ground-truth labels; deterministic in `seed`.
pub fn generate_scene(cfg: &SceneConfig, weather: WeatherFlags, seed: u64) -> (Scene, LabelGrid) {
    let mut rng = scene_rng(seed, 0);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let objects: Vec<AxisBox> = (0..n).map(|_| sample_object(cfg, &mut rng)).collect();
    let labels = rasterize(&cfg.spec, &objects);
    let scene = Scene {
        spec: cfg.spec,
        objects,
        z_ground: ground_height(&cfg.spec),
        weather,
        seed,
    };
    (scene, labels)
}

/// Full sensor record for one scene.
pub fn render_scene(cfg: &SceneConfig, scene: &Scene, labels: &LabelGrid) -> Result<ScenePack> {
    let cameras = cfg.cameras.build()?;
    let mut lidar_rng = scene_rng(scene.seed, 1);
    let points = simulate_lidar(
        labels,
        &cfg.lidar,
        &cfg.degradation,
        scene.weather,
        &mut lidar_rng,
    )?;
    let mut cam_rng = scene_rng(scene.seed, 2);
    let feature_maps = simulate_camera(
        labels,
        &cameras,
        cfg.cameras.channels,
        &cfg.degradation,
        scene.weather,
        &mut cam_rng,
    )?;
    Ok(ScenePack {
        spec: scene.spec,
        weather: scene.weather,
        points,
        cameras,
        feature_maps,
        labels: labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_objects() -> SceneConfig {
        SceneConfig {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_has_only_ground_and_empty() {
        let (scene, labels) = generate_scene(&no_objects(), WeatherFlags::default(), 3);
        assert!(scene.objects.is_empty());
        let spec = labels.spec();
        for (f, &l) in labels.labels().iter().enumerate() {
            let k = spec.unflat(f).0[2];
            assert_eq!(l, if k == 0 { DRIVEABLE_SURFACE } else { 0 });
        }
    }

    #[test]
    fn cube_on_lattice_covers_eight_voxels() {
        // Enumerate voxel centers against a 0.8 m cube: its half-open extent
        // holds two centers per axis whether centered on a voxel center or corner.
        let spec = GridSpec::desk();
        let on_center = spec.index_to_center(VoxelIndex([25, 17, 3])).unwrap();
        let on_corner = [2.0, -1.2, 0.6];
        for center in [on_center, on_corner] {
            let b = AxisBox {
                class: 4,
                center,
                half: [0.4; 3],
            };
            let brute = (0..spec.num_voxels())
                .filter(|&f| b.contains(spec.index_to_center(spec.unflat(f)).unwrap()))
                .count();
            assert_eq!(brute, 8);
            let labels = rasterize(&spec, &[b]);
            let got = labels.labels().iter().filter(|&&l| l == 4).count();
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let (a, la) = generate_scene(&cfg, WeatherFlags::default(), 11);
        let (b, lb) = generate_scene(&cfg, WeatherFlags::default(), 11);
        assert_eq!(a, b);
        assert_eq!(la.labels(), lb.labels());
        let (_, lc) = generate_scene(&cfg, WeatherFlags::default(), 12);
        assert_ne!(la.labels(), lc.labels());
    }

    #[test]
    fn object_voxels_lie_inside_their_box() {
        let cfg = SceneConfig::default();
        for seed in 0..10 {
            let (scene, labels) = generate_scene(&cfg, WeatherFlags::default(), seed);
            let spec = labels.spec();
            for (f, &l) in labels.labels().iter().enumerate() {
                let c = spec.index_to_center(spec.unflat(f)).unwrap();
                let k = spec.unflat(f).0[2];
                if l == 0 || (l == DRIVEABLE_SURFACE && k == 0) {
                    continue;
                }
                assert!(
                    scene.objects.iter().any(|b| b.class == l && b.contains(c)),
                    "voxel {f} label {l} outside all boxes"
                );
            }
            for b in &scene.objects {
                assert!((1..=NUM_CLASSES as u8).contains(&b.class) && b.class != DRIVEABLE_SURFACE);
                let (lo, hi) = (b.lo(), b.hi());
                assert!((0..3).all(|a| lo[a] < spec.max[a] && hi[a] > spec.min[a]));
            }
        }
    }
}
