use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envgate::{
    fuse_add_values, fuse_concat_values, fuse_values, FusionContext, FusionStrategy,
};
use crate::error::{Error, Result};
use crate::metrics::Table;
use crate::numerics::{uniform, Tensor};

pub const MIN_REPS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: FusionStrategy,
    pub channels: usize,
    pub dims: [usize; 3],
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl BenchRow {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn ns_per_voxel(&self) -> f64 {
        self.median_ms * 1e6 / self.voxels() as f64
    }
}

/// Median of a non-empty sample; the mean of the two middle values when even.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Wall-clock of the fusion operation alone, with the context precomputed.
pub fn bench_fusion(
    strategies: &[FusionStrategy],
    channels: usize,
    dims: [usize; 3],
    reps: usize,
) -> Result<Vec<BenchRow>> {
    if reps < MIN_REPS {
        return Err(Error::Config {
            key: "reps".into(),
            msg: format!("need at least {MIN_REPS} repetitions, got {reps}"),
        });
    }
    if channels == 0 || dims.contains(&0) {
        return Err(Error::Config {
            key: "channels".into(),
            msg: "channels and grid dims must be nonzero".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe4c);
    let shape = [channels, dims[0], dims[1], dims[2]];
    let v_cam = uniform(&shape, 1.0, &mut rng);
    let v_pts = uniform(&shape, 1.0, &mut rng);
    let mut gate = || {
        (0..channels)
            .map(|_| rng.random::<f64>())
            .collect::<Vec<_>>()
    };
    let ctx = FusionContext {
        f_env: Vec::new(),
        f_proj: Vec::new(),
        g_cam: gate(),
        g_pts: gate(),
        w_env: 0.6,
    };
    let w = uniform(&[channels, 2 * channels], 0.5, &mut rng);
    let b = Tensor::zeros(&[channels]);
    let warmup = (reps / 10).max(3);

    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let run = || -> Result<Tensor> {
            match s {
                FusionStrategy::Addition => fuse_add_values(&v_cam, &v_pts),
                FusionStrategy::Concatenation => fuse_concat_values(&v_cam, &v_pts, &w, &b),
                FusionStrategy::Gated => fuse_values(&v_cam, &v_pts, &ctx),
            }
        };
        for _ in 0..warmup {
            black_box(run()?);
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            black_box(run()?);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            strategy: s,
            channels,
            dims,
            median_ms: median(&times),
            p95_ms: percentile(&times, 95.0),
        });
    }
    Ok(rows)
}

/// One row per measurement, with the gated overhead over addition at the same size.
pub fn bench_table(rows: &[BenchRow]) -> Table {
    let mut t = Table::new([
        "grid",
        "voxels",
        "strategy",
        "median_ms",
        "p95_ms",
        "ns_per_voxel",
        "overhead_vs_addition_ms",
    ]);
    for r in rows {
        let base = rows.iter().find(|o| {
            o.strategy == FusionStrategy::Addition && o.dims == r.dims && o.channels == r.channels
        });
        let overhead = base.map_or("-".to_string(), |b| {
            format!("{:.4}", r.median_ms - b.median_ms)
        });
        t.push(vec![
            format!("{}x{}x{}", r.dims[0], r.dims[1], r.dims[2]),
            r.voxels().to_string(),
            r.strategy.to_string(),
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.p95_ms),
            format!("{:.3}", r.ns_per_voxel()),
            overhead,
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 95.0), 19.0);
        assert_eq!(percentile(&xs, 100.0), 20.0);
    }

    #[test]
    fn one_row_per_strategy_and_rep_floor() {
        let rows = bench_fusion(&FusionStrategy::ALL, 4, [4, 4, 2], 10).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows
            .iter()
            .all(|r| r.median_ms >= 0.0 && r.p95_ms >= r.median_ms));
        assert!(bench_fusion(&FusionStrategy::ALL, 4, [4, 4, 2], 9).is_err());
        assert_eq!(bench_table(&rows).rows.len(), 3);
    }
}
