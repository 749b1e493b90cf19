//! Voxel traversal (Amanatides & Woo) against a rasterized label grid.

use crate::grid::LabelGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter at which the ray enters the first occupied voxel.
    pub t: f64,
    pub voxel: usize,
    pub label: u8,
}

/// Parametric interval `[t_enter, t_exit]` of a ray inside an axis-aligned box.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Walk voxels along `origin + t·dir` for `t ∈ [0, max_t]` and return the
/// first one whose label is an occupied class.
pub fn first_hit(grid: &LabelGrid, origin: [f64; 3], dir: [f64; 3], max_t: f64) -> Option<Hit> {
    let spec = grid.spec();
    let (t_enter, t_exit) = ray_box(origin, dir, spec.min, spec.max)?;
    let t_start = t_enter.max(0.0);
    let t_end = t_exit.min(max_t);
    if t_start > t_end {
        return None;
    }

    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + dir[a] * t_start;
        let cell = ((p - spec.min[a]) / spec.voxel).floor() as i64;
        idx[a] = cell.clamp(0, spec.dims[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = spec.min[a] + (idx[a] + 1) as f64 * spec.voxel;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = spec.voxel / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = spec.min[a] + idx[a] as f64 * spec.voxel;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = -spec.voxel / dir[a];
        }
    }

    let mut t = t_start;
    loop {
        let flat = spec.flat(crate::grid::VoxelIndex([
            idx[0] as usize,
            idx[1] as usize,
            idx[2] as usize,
        ]));
        if grid.is_occupied(flat) {
            return Some(Hit {
                t,
                voxel: flat,
                label: grid.labels()[flat],
            });
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t = t_max[a];
        if t > t_end {
            return None;
        }
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= spec.dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}
