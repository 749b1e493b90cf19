use std::sync::Arc;

use super::{CameraModel, DepthBins, FeatureMap};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::numerics::{CustomBackward, Tape, Tensor, Var};

/// Frustum point that falls outside the grid.
pub const NO_VOXEL: u32 = u32::MAX;

/// Precomputed voxel of every (pixel, depth bin) frustum point.
///
/// Pixels are numbered camera-major, then row, then column, matching
/// [`image_tensor`].
#[derive(Clone, Debug)]
pub struct LiftTable {
    pub cameras: usize,
    pub pixels: usize,
    pub bins: usize,
    pub dims: [usize; 3],
    index: Arc<[u32]>,
    density: Arc<[f64]>,
}

impl LiftTable {
    pub fn new(cameras: &[CameraModel], bins: &DepthBins, spec: &GridSpec) -> Result<Self> {
        let Some(first) = cameras.first() else {
            return Err(Error::contract("lift needs at least one camera"));
        };
        let (h, w) = (first.height, first.width);
        if cameras.iter().any(|c| (c.height, c.width) != (h, w)) {
            return Err(Error::contract("all cameras must share one image size"));
        }
        let mut index = Vec::with_capacity(cameras.len() * h * w * bins.count);
        for cam in cameras {
            for v in 0..h {
                for u in 0..w {
                    for k in 0..bins.count {
                        let p = cam.unproject(u, v, bins.center(k));
                        index.push(spec.world_to_flat(p).map_or(NO_VOXEL, |f| f as u32));
                    }
                }
            }
        }
        let mut hits = vec![0usize; spec.num_voxels()];
        for &v in index.iter().filter(|&&v| v != NO_VOXEL) {
            hits[v as usize] += 1;
        }
        let density: Vec<f64> = hits
            .iter()
            .map(|&k| {
                if k == 0 {
                    0.0
                } else {
                    bins.count as f64 / k as f64
                }
            })
            .collect();
        Ok(LiftTable {
            cameras: cameras.len(),
            pixels: cameras.len() * h * w,
            bins: bins.count,
            dims: spec.dims,
            index: index.into(),
            density: density.into(),
        })
    }

    /// Per-voxel factor `D / hits`, zero for voxels no frustum point reaches.
    pub fn density_scale(&self) -> &[f64] {
        &self.density
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel(&self, pixel: usize, bin: usize) -> Option<usize> {
        let v = self.index[pixel * self.bins + bin];
        (v != NO_VOXEL).then_some(v as usize)
    }
}

/// Stack per-camera maps into a `[C_img, cameras·H·W]` tensor.
pub fn image_tensor(maps: &[FeatureMap]) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::contract("no camera feature maps"));
    };
    let (c, hw) = (first.channels, first.pixels());
    if maps
        .iter()
        .any(|m| m.channels != c || m.pixels() != hw || m.data.len() != c * hw)
    {
        return Err(Error::contract("camera feature maps differ in shape"));
    }
    let p = maps.len() * hw;
    let mut data = vec![0.0; c * p];
    for (cam, m) in maps.iter().enumerate() {
        for ch in 0..c {
            let dst = &mut data[ch * p + cam * hw..ch * p + (cam + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(&m.data[ch * hw..(ch + 1) * hw]) {
                *d = s as f64;
            }
        }
    }
    Tensor::new(vec![c, p], data)
}

struct SplatRule {
    index: Arc<[u32]>,
    bins: usize,
    voxels: usize,
}

impl CustomBackward for SplatRule {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (probs, proj) = (inputs[0], inputs[1]);
        let (d_count, p) = (self.bins, probs.shape()[1]);
        let c = proj.shape()[0];
        let (pd, xd, gd) = (probs.data(), proj.data(), g.data());
        let mut g_probs = needs[0].then(|| Tensor::zeros(probs.shape()));
        let mut g_proj = needs[1].then(|| Tensor::zeros(proj.shape()));
        for px in 0..p {
            for d in 0..d_count {
                let vx = self.index[px * d_count + d];
                if vx == NO_VOXEL {
                    continue;
                }
                let vx = vx as usize;
                if let Some(gp) = g_probs.as_mut() {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += gd[ch * self.voxels + vx] * xd[ch * p + px];
                    }
                    gp.data_mut()[d * p + px] = s;
                }
                if let Some(gx) = g_proj.as_mut() {
                    let wgt = pd[d * p + px];
                    let gx = gx.data_mut();
                    for ch in 0..c {
                        gx[ch * p + px] += wgt * gd[ch * self.voxels + vx];
                    }
                }
            }
        }
        vec![g_probs, g_proj]
    }
}

/// Accumulate `probs[d, p] · proj[:, p]` into the voxel of each frustum point.
///
/// `probs: [D, P]`, `proj: [C, P]` → `[C, nx, ny, nz]`.
pub fn splat(tape: &mut Tape, probs: Var, proj: Var, table: &LiftTable) -> Result<Var> {
    let (pv, xv) = (tape.value(probs), tape.value(proj));
    if pv.shape() != [table.bins, table.pixels] {
        return Err(Error::contract(format!(
            "depth distribution shape {:?} does not match {} bins × {} pixels ({} cameras)",
            pv.shape(),
            table.bins,
            table.pixels,
            table.cameras
        )));
    }
    if xv.shape().len() != 2 || xv.shape()[1] != table.pixels {
        return Err(Error::Shape {
            op: "splat",
            left: pv.shape().to_vec(),
            right: xv.shape().to_vec(),
        });
    }
    let (c, p, d_count, voxels) = (xv.shape()[0], table.pixels, table.bins, table.voxels());
    let (pd, xd) = (pv.data(), xv.data());
    let mut out = vec![0.0; c * voxels];
    for px in 0..p {
        for d in 0..d_count {
            let vx = table.index[px * d_count + d];
            if vx == NO_VOXEL {
                continue;
            }
            let wgt = pd[d * p + px];
            for ch in 0..c {
                out[ch * voxels + vx as usize] += wgt * xd[ch * p + px];
            }
        }
    }
    let [nx, ny, nz] = table.dims;
    let value = Tensor::new(vec![c, nx, ny, nz], out)?;
    let rule = SplatRule {
        index: table.index.clone(),
        bins: d_count,
        voxels,
    };
    Ok(tape.custom(value, vec![probs, proj], Box::new(rule)))
}

struct VoxelScaleRule {
    scale: Arc<[f64]>,
}

impl CustomBackward for VoxelScaleRule {
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| scale_voxels(g, &self.scale))]
    }
}

fn scale_voxels(x: &Tensor, scale: &[f64]) -> Tensor {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(scale.len()) {
        for (y, s) in row.iter_mut().zip(scale) {
            *y *= s;
        }
    }
    out
}

/// Divide each voxel of a splatted volume by its frustum hit count and
/// multiply by `D`, so a uniform depth distribution deposits the mean
/// projected feature of the pixels that reach the voxel.
pub fn normalize_density(tape: &mut Tape, v_cam: Var, table: &LiftTable) -> Result<Var> {
    let x = tape.value(v_cam);
    if x.shape().len() != 4 || x.shape()[1..] != table.dims {
        return Err(Error::contract(format!(
            "volume {:?} does not match lift grid {:?}",
            x.shape(),
            table.dims
        )));
    }
    let value = scale_voxels(x, &table.density);
    let rule = VoxelScaleRule {
        scale: table.density.clone(),
    };
    Ok(tape.custom(value, vec![v_cam], Box::new(rule)))
}

/// Full lift: depth logits from a 1×1 map, softmax over bins, `W_lift`
/// projection, then splat. `image: [C_img, P]`.
pub fn lift_splat(
    tape: &mut Tape,
    image: Var,
    depth_w: Var,
    depth_b: Var,
    w_lift: Var,
    table: &LiftTable,
) -> Result<Var> {
    let img = tape.value(image);
    if img.shape().len() != 2 || img.shape()[1] != table.pixels {
        return Err(Error::contract(format!(
            "image tensor {:?} does not cover {} cameras ({} pixels)",
            img.shape(),
            table.cameras,
            table.pixels
        )));
    }
    let logits = tape.channel_mix(image, depth_w, Some(depth_b))?;
    let probs = tape.softmax(logits, 0)?;
    let proj = tape.channel_mix(image, w_lift, None)?;
    splat(tape, probs, proj, table)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, uniform, ParamStore};

    fn single_pixel() -> (Vec<CameraModel>, DepthBins, GridSpec) {
        let cam = CameraModel::looking([0.0, 0.0, 0.0], 0.0, 1.0, 1, 1).unwrap();
        (
            vec![cam],
            DepthBins::new(0.5, 7.5, 7).unwrap(),
            GridSpec::desk(),
        )
    }

    #[test]
    fn one_hot_depth_lands_in_one_voxel() {
        let (cams, bins, spec) = single_pixel();
        let table = LiftTable::new(&cams, &bins, &spec).unwrap();
        assert!((bins.center(3) - 4.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 7];
        logits[3] = 1e3;
        let lg = tape.constant(Tensor::new(vec![7, 1], logits).unwrap());
        let probs = tape.softmax(lg, 0).unwrap();
        let proj = tape.constant(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let out = splat(&mut tape, probs, proj, &table).unwrap();
        let v = tape.value(out);
        let target = spec.world_to_flat([4.0, 0.0, 0.0]).unwrap();
        let n = spec.num_voxels();
        for c in 0..3 {
            for f in 0..n {
                let want = if f == target {
                    [0.5, -1.0, 2.0][c]
                } else {
                    0.0
                };
                assert_eq!(v.data()[c * n + f], want, "channel {c} voxel {f}");
            }
        }
    }

    #[test]
    fn uniform_depth_spreads_one_over_d() {
        let (cams, bins, spec) = single_pixel();
        let table = LiftTable::new(&cams, &bins, &spec).unwrap();
        let mut tape = Tape::new();
        let lg = tape.constant(Tensor::zeros(&[7, 1]));
        let probs = tape.softmax(lg, 0).unwrap();
        let proj = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let out = splat(&mut tape, probs, proj, &table).unwrap();
        let v = tape.value(out).data();
        let mut expected = vec![0.0; spec.num_voxels()];
        for k in 0..7 {
            if let Some(f) = spec.world_to_flat(cams[0].unproject(0, 0, bins.center(k))) {
                expected[f] += 1.0 / 7.0;
            }
        }
        let touched = expected.iter().filter(|&&x| x > 0.0).count();
        assert_eq!(touched, 7, "bins one metre apart land in distinct voxels");
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let norm = normalize_density(&mut tape, out, &table).unwrap();
        for (a, b) in tape.value(norm).data().iter().zip(&expected) {
            let want = if *b > 0.0 { 1.0 } else { 0.0 };
            assert!((a - want).abs() < 1e-12);
        }
    }

    fn toy() -> (LiftTable, Tensor) {
        let cams = CameraModel::ring(2, [0.0, 0.0, 0.8], 1.6, 3, 4).unwrap();
        let bins = DepthBins::new(1.0, 12.0, 5).unwrap();
        let table = LiftTable::new(&cams, &bins, &GridSpec::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (table, uniform(&[3, 24], 1.0, &mut rng))
    }

    #[test]
    fn splat_conserves_in_grid_mass() {
        let (table, img) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let lg = tape.constant(uniform(&[5, 24], 2.0, &mut rng));
        let probs = tape.softmax(lg, 0).unwrap();
        let x = tape.constant(img.clone());
        let out = splat(&mut tape, probs, x, &table).unwrap();
        let pv = tape.value(probs).clone();
        let mut mass = 0.0;
        for p in 0..24 {
            let col: f64 = (0..5).map(|d| pv.data()[d * 24 + p]).sum();
            assert!((col - 1.0).abs() < 1e-12);
            for d in 0..5 {
                if table.voxel(p, d).is_some() {
                    mass +=
                        pv.data()[d * 24 + p] * (0..3).map(|c| img.data()[c * 24 + p]).sum::<f64>();
                }
            }
        }
        assert!((tape.value(out).sum() - mass).abs() < 1e-9);
    }

    #[test]
    fn lift_gradients_match_finite_differences() {
        let (table, img) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dw = store.add("depth.w", uniform(&[5, 3], 1.0, &mut rng), true);
        let db = store.add("depth.b", uniform(&[5], 1.0, &mut rng), true);
        let wl = store.add("lift.w", uniform(&[2, 3], 1.0, &mut rng), true);
        let readout = uniform(&[2 * table.voxels()], 1.0, &mut rng);
        let f = |s: &ParamStore, tape: &mut Tape| -> crate::error::Result<Var> {
            let x = tape.constant(img.clone());
            let (a, b, c) = (tape.param(s, dw), tape.param(s, db), tape.param(s, wl));
            let v = lift_splat(tape, x, a, b, c, &table)?;
            let r = tape.constant(readout.clone().reshape(tape.value(v).shape())?);
            let m = tape.mul(v, r)?;
            Ok(tape.sum(m))
        };
        let mut tape = Tape::new();
        let loss = f(&store, &mut tape).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let ids = [dw, db, wl];
        let fd = finite_diff_grad(&mut store, &ids, 1e-6, |s| {
            let mut t = Tape::new();
            let l = f(s, &mut t)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();
        for (id, g) in ids.iter().zip(&fd) {
            assert!(
                relative_error(store.grad(*id), g) < 1e-6,
                "{}",
                store.get(*id).name
            );
        }
    }

    #[test]
    fn camera_count_mismatch_is_an_error() {
        let (table, _) = toy();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[3, 12]));
        let w = tape.constant(Tensor::zeros(&[5, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            lift_splat(&mut tape, img, w, b, l, &table),
            Err(Error::Contract(_))
        ));
    }
}
