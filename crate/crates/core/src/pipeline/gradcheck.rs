//! Named analytic-vs-finite-difference checks on 64-bit toy shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Model, SceneInputs};
use super::TrainConfig;
use crate::encoders::{
    image_tensor, pool2d, splat, voxelize_points, CameraModel, FeatureMap, LiftTable,
};
use crate::envgate::FusionStrategy;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, IGNORE, NUM_CLASSES};
use crate::headloss::{bce, cross_entropy, lovasz_softmax};
use crate::metrics::Table;
use crate::numerics::{
    finite_diff_grad, relative_error, uniform, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::scenegen::WeatherFlags;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Single-op checks run by default.
pub const PRIMITIVE_OPS: [&str; 12] = [
    "linear",
    "sigmoid",
    "softmax",
    "channel_mix",
    "mul",
    "channel_scale",
    "scalar_mul",
    "concat",
    "splat",
    "cross_entropy",
    "lovasz",
    "bce",
];

/// Pathway checks through the whole network, added by `--full`.
pub const PATHWAY_OPS: [&str; 13] = [
    "lift_splat",
    "point_encoder",
    "lora",
    "projection",
    "gates",
    "trust",
    "occ_head",
    "weather_heads",
    "concat_reducer",
    "total_addition",
    "total_concat",
    "total_gated",
    "frozen_encoder",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub op: String,
    pub params: usize,
    pub max_rel_err: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

pub fn all_ops() -> Vec<&'static str> {
    PRIMITIVE_OPS
        .iter()
        .chain(PATHWAY_OPS.iter())
        .copied()
        .collect()
}

type LossFn<'a> = dyn Fn(&ParamStore, &mut Tape) -> Result<Var> + 'a;

/// Norm-wise relative error between backward and central differences, over
/// the concatenation of all listed params.
pub fn check_params(store: &mut ParamStore, ids: &[ParamId], loss: &LossFn) -> Result<f64> {
    store.zero_grads();
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    tape.backward(l, store)?;
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| store.grad(id).data().to_vec())
        .collect();
    let fd = finite_diff_grad(store, ids, GRADCHECK_STEP, |s| {
        let mut t = Tape::new();
        let l = loss(s, &mut t)?;
        Ok(t.value(l).data()[0])
    })?;
    let numeric: Vec<f64> = fd.into_iter().flat_map(Tensor::into_data).collect();
    Ok(relative_error(
        &Tensor::from_vec(analytic),
        &Tensor::from_vec(numeric),
    ))
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(tape.value(y).shape(), 1.0, &mut rng);
    let r = tape.constant(r);
    let m = tape.mul(y, r)?;
    Ok(tape.sum(m))
}

fn toy_config(strategy: FusionStrategy) -> TrainConfig {
    TrainConfig {
        strategy,
        channels: 4,
        depth_bins: 6,
        depth_min: 0.3,
        depth_max: 2.5,
        d_txt: 8,
        d_env: 6,
        lora_rank: 2,
        lora_alpha: 4.0,
        seed: 11,
        ..TrainConfig::default()
    }
}

pub fn toy_spec() -> GridSpec {
    GridSpec::new([-2.0, -2.0, -1.0], [2.0, 2.0, 0.6], 0.4)
        .expect("toy extents are voxel multiples")
}

/// A 10×10×4 scene seen by two 4×4 cameras with random features, points and labels.
pub fn toy_scene(
    seed: u64,
    image_channels: usize,
    depth_bins: &crate::encoders::DepthBins,
) -> Result<SceneInputs> {
    let spec = toy_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = CameraModel::ring(2, [0.0, 0.0, 0.2], std::f64::consts::FRAC_PI_2, 4, 4)?;
    let maps: Vec<FeatureMap> = cams
        .iter()
        .map(|c| {
            let mut m = FeatureMap::zeros(image_channels, c.height, c.width);
            for v in &mut m.data {
                *v = rng.random_range(-1.0..1.0);
            }
            m
        })
        .collect();
    let points: Vec<[f32; 4]> = (0..80)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..0.6),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let labels: Vec<u8> = (0..spec.num_voxels())
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            1..=4 => 0,
            _ => rng.random_range(1..=NUM_CLASSES as u8),
        })
        .collect();
    let image = image_tensor(&maps)?;
    let pooled = pool2d(&maps)?.reshape(&[1, image_channels])?;
    Ok(SceneInputs {
        name: "toy".into(),
        image,
        pooled,
        stats: voxelize_points(&points, &spec),
        labels,
        weather: WeatherFlags {
            rainy: true,
            night: true,
        },
        table: LiftTable::new(&cams, depth_bins, &spec)?,
    })
}

/// Toy model with every zero-initialized block moved off zero.
pub fn toy_model(strategy: FusionStrategy) -> Result<(Model, SceneInputs)> {
    let cfg = toy_config(strategy);
    let mut model = Model::new(&cfg, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = model.store.value(id).shape().to_vec();
        let mut v = uniform(&shape, 0.5, &mut rng);
        v.axpy(1.0, model.store.value(id));
        model.store.set_value(id, v)?;
    }
    let scene = toy_scene(5, 4, &cfg.depth()?)?;
    Ok((model, scene))
}

fn primitive(op: &str) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c);
    let mut store = ParamStore::new();
    let mut p =
        |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| store_add(&mut store, name, shape, rng);
    let (ids, loss): (Vec<ParamId>, Box<LossFn>) = match op {
        "linear" => {
            let (x, w, b) = (
                p("x", &[3, 4], &mut rng),
                p("w", &[2, 4], &mut rng),
                p("b", &[2], &mut rng),
            );
            (
                vec![x, w, b],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
                    let y = t.linear(xv, wv, Some(bv))?;
                    probe(t, y, 1)
                }),
            )
        }
        "sigmoid" => {
            let x = p("x", &[3, 5], &mut rng);
            (
                vec![x],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let xv = t.param(s, x);
                    let y = t.sigmoid(xv);
                    probe(t, y, 2)
                }),
            )
        }
        "softmax" => {
            let x = p("x", &[4, 3, 2], &mut rng);
            (
                vec![x],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let xv = t.param(s, x);
                    let a = t.softmax(xv, 0)?;
                    let b = t.softmax(xv, 2)?;
                    let y = t.add(a, b)?;
                    probe(t, y, 3)
                }),
            )
        }
        "channel_mix" => {
            let (x, w, b) = (
                p("x", &[3, 2, 2, 2], &mut rng),
                p("w", &[4, 3], &mut rng),
                p("b", &[4], &mut rng),
            );
            (
                vec![x, w, b],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
                    let y = t.channel_mix(xv, wv, Some(bv))?;
                    probe(t, y, 4)
                }),
            )
        }
        "mul" => {
            let (a, b) = (p("a", &[2, 3], &mut rng), p("b", &[2, 3], &mut rng));
            (
                vec![a, b],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (av, bv) = (t.param(s, a), t.param(s, b));
                    let y = t.mul(av, bv)?;
                    probe(t, y, 5)
                }),
            )
        }
        "channel_scale" => {
            let (x, g) = (p("x", &[3, 2, 2], &mut rng), p("g", &[1, 3], &mut rng));
            (
                vec![x, g],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (xv, gv) = (t.param(s, x), t.param(s, g));
                    let y = t.channel_scale(xv, gv)?;
                    probe(t, y, 6)
                }),
            )
        }
        "scalar_mul" => {
            let (x, k) = (p("x", &[3, 2], &mut rng), p("k", &[1, 1], &mut rng));
            (
                vec![x, k],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (xv, kv) = (t.param(s, x), t.param(s, k));
                    let y = t.scalar_mul(xv, kv)?;
                    probe(t, y, 7)
                }),
            )
        }
        "concat" => {
            let (a, b) = (p("a", &[2, 3], &mut rng), p("b", &[1, 3], &mut rng));
            (
                vec![a, b],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (av, bv) = (t.param(s, a), t.param(s, b));
                    let y = t.concat0(av, bv)?;
                    probe(t, y, 8)
                }),
            )
        }
        "splat" => {
            let cams = CameraModel::ring(2, [0.0, 0.0, 0.2], std::f64::consts::FRAC_PI_2, 3, 3)?;
            let bins = crate::encoders::DepthBins::new(0.3, 2.5, 5)?;
            let table = LiftTable::new(&cams, &bins, &toy_spec())?;
            let (lg, x) = (
                p("logits", &[5, 18], &mut rng),
                p("proj", &[3, 18], &mut rng),
            );
            (
                vec![lg, x],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let (lv, xv) = (t.param(s, lg), t.param(s, x));
                    let probs = t.softmax(lv, 0)?;
                    let y = splat(t, probs, xv, &table)?;
                    probe(t, y, 9)
                }),
            )
        }
        "cross_entropy" | "lovasz" => {
            let lg = p("logits", &[4, 3, 3], &mut rng);
            let labels: Vec<u8> = (0..9)
                .map(|i| if i == 4 { IGNORE } else { (i % 4) as u8 })
                .collect();
            let lovasz = op == "lovasz";
            (
                vec![lg],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let lv = t.param(s, lg);
                    if lovasz {
                        let probs = t.softmax(lv, 0)?;
                        Ok(lovasz_softmax(t, probs, &labels)?.var)
                    } else {
                        Ok(cross_entropy(t, lv, &labels)?.var)
                    }
                }),
            )
        }
        "bce" => {
            let x = p("x", &[1, 2], &mut rng);
            (
                vec![x],
                Box::new(move |s: &ParamStore, t: &mut Tape| {
                    let xv = t.param(s, x);
                    let w = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0])?);
                    let a = t.linear(xv, w, None)?;
                    let w = t.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0])?);
                    let b = t.linear(xv, w, None)?;
                    let la = bce(t, a, true)?;
                    let lb = bce(t, b, false)?;
                    t.add(la, lb)
                }),
            )
        }
        other => return Err(Error::contract(format!("unknown gradcheck op `{other}`"))),
    };
    let n = ids.iter().map(|&id| store.value(id).len()).sum();
    Ok((n, check_params(&mut store, &ids, &*loss)?))
}

fn store_add(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, uniform(shape, 1.0, rng), true)
}

fn pathway(op: &str) -> Result<(usize, f64)> {
    let strategy = match op {
        "total_addition" => FusionStrategy::Addition,
        "total_concat" | "concat_reducer" => FusionStrategy::Concatenation,
        _ => FusionStrategy::Gated,
    };
    let (mut model, scene) = toy_model(strategy)?;
    let m = &model;
    let env = &m.env;
    let ids: Vec<ParamId> = match op {
        "lift_splat" => vec![m.depth_w, m.depth_b, m.w_lift],
        "point_encoder" => vec![m.points.w1, m.points.b1, m.points.w2, m.points.b2],
        "lora" => vec![env.lora.a, env.lora.b],
        "projection" => vec![env.proj.w, env.proj.b],
        "gates" => vec![
            env.gate_cam.w,
            env.gate_cam.b,
            env.gate_pts.w,
            env.gate_pts.b,
        ],
        "trust" => vec![env.trust.w, env.trust.b],
        "occ_head" => vec![m.occ.hidden.w, m.occ.hidden.b, m.occ.out.w, m.occ.out.b],
        "weather_heads" => m.weather_ids().to_vec(),
        "concat_reducer" => vec![m.reducer.w, m.reducer.b],
        "total_addition" | "total_concat" | "total_gated" => {
            let used: Vec<ParamId> = env.trainable_ids();
            let skip_env = strategy != FusionStrategy::Gated;
            let skip_reducer = strategy != FusionStrategy::Concatenation;
            m.store
                .iter()
                .filter(|(id, p)| {
                    p.trainable
                        && !(skip_env && used.contains(id))
                        && !(skip_reducer && (*id == m.reducer.w || *id == m.reducer.b))
                })
                .map(|(id, _)| id)
                .collect()
        }
        "frozen_encoder" => {
            // Frozen params must receive exactly zero gradient.
            let frozen = m.frozen_ids();
            let mut store = m.store.clone();
            store.zero_grads();
            let mut tape = Tape::new();
            let (l, _, _) = m.loss_with(&store, &mut tape, &scene)?;
            tape.backward(l, &mut store)?;
            let n = frozen.iter().map(|&id| store.value(id).len()).sum();
            let max = frozen
                .iter()
                .flat_map(|&id| store.grad(id).data().to_vec())
                .fold(0.0f64, |a, g| a.max(g.abs()));
            return Ok((n, max));
        }
        other => return Err(Error::contract(format!("unknown gradcheck op `{other}`"))),
    };
    let n = ids.iter().map(|&id| m.store.value(id).len()).sum();
    let mut store = std::mem::take(&mut model.store);
    let model = &model;
    let scene = &scene;
    let err = check_params(&mut store, &ids, &move |s: &ParamStore, t: &mut Tape| {
        Ok(model.loss_with(s, t, scene)?.0)
    })?;
    Ok((n, err))
}

/// Run one named check.
pub fn run_check(op: &str) -> Result<GradcheckRow> {
    let (params, max_rel_err) = if PRIMITIVE_OPS.contains(&op) {
        primitive(op)?
    } else if PATHWAY_OPS.contains(&op) {
        pathway(op)?
    } else {
        return Err(Error::Config {
            key: "op".into(),
            msg: format!("unknown op `{op}`; known: {}", all_ops().join(", ")),
        });
    };
    Ok(GradcheckRow {
        op: op.to_string(),
        params,
        max_rel_err,
    })
}

pub fn run_checks(ops: &[&str]) -> Result<Vec<GradcheckRow>> {
    ops.iter().map(|op| run_check(op)).collect()
}

pub fn gradcheck_table(rows: &[GradcheckRow]) -> Table {
    let mut t = Table::new(["op", "params", "max_rel_err", "status"]);
    for r in rows {
        t.push(vec![
            r.op.clone(),
            r.params.to_string(),
            format!("{:.3e}", r.max_rel_err),
            if r.passed() { "pass" } else { "FAIL" }.to_string(),
        ]);
    }
    t
}
