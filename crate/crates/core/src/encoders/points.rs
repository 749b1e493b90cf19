use rand::Rng;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::numerics::{glorot, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-voxel LiDAR statistics: log1p(count), mean intensity, mean offset (x, y, z).
pub const POINT_STATS: usize = 5;

/// Raw per-voxel point statistics `[POINT_STATS, nx, ny, nz]`.
///
/// Offsets are measured from the voxel center in units of the voxel size.
/// Points are accumulated in a canonical order, so the result is bitwise
/// independent of input order.
pub fn voxelize_points(points: &[[f32; 4]], spec: &GridSpec) -> Tensor {
    let mut keyed: Vec<(usize, [u32; 4])> = points
        .iter()
        .filter_map(|p| {
            let w = [p[0] as f64, p[1] as f64, p[2] as f64];
            spec.world_to_flat(w).map(|f| (f, p.map(f32::to_bits)))
        })
        .collect();
    keyed.sort_unstable();

    let n = spec.num_voxels();
    let mut out = vec![0.0; POINT_STATS * n];
    let mut i = 0;
    while i < keyed.len() {
        let flat = keyed[i].0;
        let center = spec
            .index_to_center(spec.unflat(flat))
            .expect("in-grid voxel");
        let (mut count, mut inten, mut off) = (0usize, 0.0, [0.0; 3]);
        while i < keyed.len() && keyed[i].0 == flat {
            let p = keyed[i].1.map(f32::from_bits);
            count += 1;
            inten += p[3] as f64;
            for a in 0..3 {
                off[a] += (p[a] as f64 - center[a]) / spec.voxel;
            }
            i += 1;
        }
        let k = count as f64;
        out[flat] = k.ln_1p();
        out[n + flat] = inten / k;
        for a in 0..3 {
            out[(2 + a) * n + flat] = off[a] / k;
        }
    }
    let [nx, ny, nz] = spec.dims;
    Tensor::new(vec![POINT_STATS, nx, ny, nz], out).expect("sized above")
}

/// Shared per-voxel perceptron `K → C → C` with a sigmoid hidden layer.
#[derive(Clone, Copy, Debug)]
pub struct PointEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub inputs: usize,
    pub channels: usize,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, inputs: usize, channels: usize, rng: &mut impl Rng) -> Self {
        PointEncoder {
            w1: store.add("point.w1", glorot(channels, inputs, rng), true),
            b1: store.add("point.b1", Tensor::zeros(&[channels]), true),
            w2: store.add("point.w2", glorot(channels, channels, rng), true),
            b2: store.add("point.b2", Tensor::zeros(&[channels]), true),
            inputs,
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stats: Var) -> Result<Var> {
        let got = tape.value(stats).shape().first().copied().unwrap_or(0);
        if got != self.inputs {
            return Err(Error::contract(format!(
                "point encoder expects {} stat channels, got {got}",
                self.inputs
            )));
        }
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let h = tape.channel_mix(stats, w1, Some(b1))?;
        let h = tape.sigmoid(h);
        tape.channel_mix(h, w2, Some(b2))
    }
}

/// Mean over cameras and pixels per channel: `[C_img]`.
pub fn pool2d(maps: &[FeatureMap]) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::contract("pooling needs at least one feature map"));
    };
    let c = first.channels;
    if maps
        .iter()
        .any(|m| m.channels != c || m.data.len() != c * m.pixels())
    {
        return Err(Error::contract("feature maps disagree on channel count"));
    }
    let total: usize = maps.iter().map(FeatureMap::pixels).sum();
    let mut out = vec![0.0; c];
    for m in maps {
        let hw = m.pixels();
        for (ch, o) in out.iter_mut().enumerate() {
            *o += m.data[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&x| x as f64)
                .sum::<f64>();
        }
    }
    Ok(Tensor::from_vec(
        out.into_iter().map(|s| s / total as f64).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grid::VoxelIndex;
    use crate::numerics::{finite_diff_grad, relative_error, uniform};

    #[test]
    fn empty_cloud_gives_zero_stats() {
        let t = voxelize_points(&[], &GridSpec::desk());
        assert_eq!(t.shape(), [5, 40, 40, 8]);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_point_at_center() {
        let spec = GridSpec::desk();
        let idx = VoxelIndex([12, 30, 5]);
        let c = spec.index_to_center(idx).unwrap();
        let p = [c[0] as f32, c[1] as f32, c[2] as f32, 0.8];
        let t = voxelize_points(&[p], &spec);
        let (n, f) = (spec.num_voxels(), spec.flat(idx));
        assert!((t.data()[f] - 2f64.ln()).abs() < 1e-15);
        assert!((t.data()[n + f] - 0.8).abs() < 1e-7);
        for a in 0..3 {
            assert!(t.data()[(2 + a) * n + f].abs() < 1e-6);
        }
        assert_eq!(
            t.data().iter().filter(|&&x| x != 0.0).count(),
            t.data()[2 * n..].iter().filter(|&&x| x != 0.0).count() + 2
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn voxelization_is_permutation_invariant(seed in any::<u64>(), n in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = GridSpec::desk();
            let mut pts: Vec<[f32; 4]> = (0..n)
                .map(|_| {
                    // Clustered so several points share voxels.
                    [
                        rng.random_range(-2.0f32..2.0),
                        rng.random_range(-2.0f32..2.0),
                        rng.random_range(-1.5f32..1.0),
                        rng.random_range(0.0f32..1.0),
                    ]
                })
                .collect();
            let a = voxelize_points(&pts, &spec);
            pts.shuffle(&mut rng);
            let b = voxelize_points(&pts, &spec);
            prop_assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        }
    }

    #[test]
    fn encoder_zero_input_is_constant_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, 5, 4, &mut rng);
        let mut tape = Tape::new();
        let mut stats = Tensor::zeros(&[5, 3]);
        // Voxels 0 and 2 share identical stats.
        for k in 0..5 {
            stats.data_mut()[k * 3] = 0.1 * k as f64;
            stats.data_mut()[k * 3 + 2] = 0.1 * k as f64;
        }
        let x = tape.constant(stats);
        let y = enc.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(y);
        for c in 0..4 {
            assert_eq!(v.data()[c * 3], v.data()[c * 3 + 2]);
        }
        // Zero stats with zero biases: output is W2·σ(0) per channel.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 6]));
        let y = enc.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(y);
        let w2 = store.value(enc.w2);
        for c in 0..4 {
            let want: f64 = (0..4).map(|j| w2.data()[c * 4 + j] * 0.5).sum();
            for pos in 0..6 {
                assert!((v.data()[c * 6 + pos] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, 5, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            enc.forward(&mut tape, &store, x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn encoder_gradcheck_on_three_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = PointEncoder::new(&mut store, 5, 3, &mut rng);
        for id in [enc.b1, enc.b2] {
            store.set_value(id, uniform(&[3], 0.5, &mut rng)).unwrap();
        }
        let stats = uniform(&[5, 3], 1.0, &mut rng);
        let readout = uniform(&[3, 3], 1.0, &mut rng);
        let f = |s: &ParamStore, tape: &mut Tape| -> Result<Var> {
            let x = tape.constant(stats.clone());
            let y = enc.forward(tape, s, x)?;
            let r = tape.constant(readout.clone());
            let m = tape.mul(y, r)?;
            Ok(tape.sum(m))
        };
        let mut tape = Tape::new();
        let l = f(&store, &mut tape).unwrap();
        tape.backward(l, &mut store).unwrap();
        let ids = [enc.w1, enc.b1, enc.w2, enc.b2];
        let fd = finite_diff_grad(&mut store, &ids, 1e-6, |s| {
            let mut t = Tape::new();
            let l = f(s, &mut t)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();
        for (id, g) in ids.iter().zip(&fd) {
            assert!(relative_error(store.grad(*id), g) < 1e-6);
        }
    }

    #[test]
    fn pool_examples() {
        let mut a = FeatureMap::zeros(2, 2, 3);
        a.data.fill(1.5);
        assert_eq!(pool2d(&[a.clone()]).unwrap().data(), [1.5, 1.5]);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|x| *x = -*x);
        assert_eq!(pool2d(&[a, b]).unwrap().data(), [0.0, 0.0]);
        assert!(pool2d(&[]).is_err());
    }

    #[test]
    fn pool_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<FeatureMap> = (0..3)
            .map(|_| {
                let mut m = FeatureMap::zeros(4, 5, 6);
                m.data
                    .iter_mut()
                    .for_each(|x| *x = rng.random_range(-1.0..1.0));
                m
            })
            .collect();
        let got = pool2d(&maps).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for m in &maps {
                for v in 0..5 {
                    for u in 0..6 {
                        s += m.at(c, v, u) as f64;
                    }
                }
            }
            assert!((got.data()[c] - s / 90.0).abs() < 1e-12);
        }
    }
}
