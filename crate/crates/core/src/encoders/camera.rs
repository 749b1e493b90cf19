use crate::error::{Error, Result};

/// Pinhole camera: `K` maps camera-frame rays (x right, y down, z forward)
/// to pixels; `extrinsics` maps camera coordinates into the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::contract("intrinsics must be upper-triangular"));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0 && k[2][2] > 0.0) {
            return Err(Error::contract("intrinsics need positive focal entries"));
        }
        let r = |i: usize, j: usize| extrinsics[i][j];
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|m| r(m, i) * r(m, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::contract("extrinsic rotation is not orthonormal"));
                }
            }
        }
        if extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::contract("extrinsics must be a rigid 4x4 transform"));
        }
        if height == 0 || width == 0 {
            return Err(Error::contract("image dimensions must be positive"));
        }
        Ok(CameraModel {
            intrinsics,
            extrinsics,
            height,
            width,
        })
    }

    /// Level camera at `position` looking along ego yaw angle `yaw` (radians),
    /// with a square-pixel horizontal field of view `fov`.
    pub fn looking(
        position: [f64; 3],
        yaw: f64,
        fov: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let f = width as f64 / 2.0 / (fov / 2.0).tan();
        let intrinsics = [
            [f, 0.0, width as f64 / 2.0],
            [0.0, f, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        let (s, c) = yaw.sin_cos();
        // Columns: camera right, down, forward expressed in ego coordinates.
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let fwd = [c, s, 0.0];
        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            e[i] = [right[i], down[i], fwd[i], position[i]];
        }
        e[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(intrinsics, e, height, width)
    }

    /// `count` cameras evenly spaced in yaw around `position`.
    pub fn ring(
        count: usize,
        position: [f64; 3],
        fov: f64,
        height: usize,
        width: usize,
    ) -> Result<Vec<Self>> {
        (0..count)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::TAU / count as f64;
                Self::looking(position, yaw, fov, height, width)
            })
            .collect()
    }

    pub fn center(&self) -> [f64; 3] {
        [
            self.extrinsics[0][3],
            self.extrinsics[1][3],
            self.extrinsics[2][3],
        ]
    }

    /// Camera-frame direction with unit depth (z = 1) through pixel `(u, v)`'s center.
    pub fn pixel_direction(&self, u: usize, v: usize) -> [f64; 3] {
        let k = &self.intrinsics;
        let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
        // Back-substitute K·d = (px, py, 1), then rescale to z = 1.
        let dz = 1.0 / k[2][2];
        let dy = (py - k[1][2] * dz) / k[1][1];
        let dx = (px - k[0][1] * dy - k[0][2] * dz) / k[0][0];
        [dx / dz, dy / dz, 1.0]
    }

    pub fn cam_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Ego-frame point at optical-axis depth `depth` along pixel `(u, v)`.
    pub fn unproject(&self, u: usize, v: usize, depth: f64) -> [f64; 3] {
        let d = self.pixel_direction(u, v);
        self.cam_to_ego([d[0] * depth, d[1] * depth, depth])
    }

    /// Unit ray in the ego frame through pixel `(u, v)`.
    pub fn ego_ray(&self, u: usize, v: usize) -> [f64; 3] {
        let d = self.pixel_direction(u, v);
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = e[i][0] * d[0] + e[i][1] * d[1] + e[i][2] * d[2];
        }
        let n = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
        out.map(|x| x / n)
    }
}

/// Depth discretization of the lift: `count` bins of equal width over `[d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0) || !(d_max > d_min) || count == 0 {
            return Err(Error::contract(format!(
                "depth bins need 0 < d_min < d_max and count >= 1, got ({d_min}, {d_max}, {count})"
            )));
        }
        Ok(DepthBins {
            d_min,
            d_max,
            count,
        })
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * (self.d_max - self.d_min) / self.count as f64
    }
}

/// `[channels, height, width]` camera feature map, 32-bit as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, v: usize, u: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, v: usize, u: usize) -> &mut f32 {
        &mut self.data[(c * self.height + v) * self.width + u]
    }
}
