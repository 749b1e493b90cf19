use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::encoders::{
    image_tensor, lift_splat, normalize_density, pool2d, voxelize_points, CameraModel, LiftTable,
    PointEncoder, POINT_STATS,
};
use crate::envgate::{
    fuse, fuse_baseline, load_embeddings, select_prompt, ConcatReducer, EnvGate, FusionStrategy,
};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::headloss::{
    bce, cross_entropy, lovasz_softmax, predict_flags, total_loss, LossBreakdown, OccHead,
    WeatherHeads,
};
use crate::numerics::{glorot, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegen::{read_manifest, read_scene_pack, ScenePack, WeatherFlags};

/// Precomputed per-scene model inputs.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub name: String,
    /// `[C_img, P]`
    pub image: Tensor,
    /// `[1, C_img]`
    pub pooled: Tensor,
    /// `[POINT_STATS, nx, ny, nz]`
    pub stats: Tensor,
    pub labels: Vec<u8>,
    pub weather: WeatherFlags,
    pub table: LiftTable,
}

impl SceneInputs {
    pub fn from_pack(name: String, pack: &ScenePack, table: LiftTable) -> Result<Self> {
        let image = image_tensor(&pack.feature_maps)?;
        let pooled = pool2d(&pack.feature_maps)?;
        let c_img = pooled.len();
        Ok(SceneInputs {
            name,
            image,
            pooled: pooled.reshape(&[1, c_img])?,
            stats: voxelize_points(&pack.points, &pack.spec),
            labels: pack.labels.labels().to_vec(),
            weather: pack.weather,
            table,
        })
    }

    pub fn image_channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// All scenes of a dataset directory, loaded in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GridSpec,
    pub scenes: Vec<SceneInputs>,
}

impl Dataset {
    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let bins = cfg.depth()?;
        let mut tables: Vec<(Vec<CameraModel>, LiftTable)> = Vec::new();
        let mut spec: Option<GridSpec> = None;
        let mut scenes = Vec::with_capacity(entries.len());
        for e in &entries {
            let pack = read_scene_pack(&dir.join(&e.path))?;
            match spec {
                None => spec = Some(pack.spec),
                Some(s) if s != pack.spec => {
                    return Err(Error::Dataset(format!(
                        "{}: grid {:?} differs from the first scene's {:?}",
                        e.path, pack.spec.dims, s.dims
                    )))
                }
                Some(_) => {}
            }
            if pack.weather != e.weather {
                return Err(Error::Dataset(format!(
                    "{}: weather flags disagree with the manifest",
                    e.path
                )));
            }
            let table = match tables.iter().find(|(c, _)| *c == pack.cameras) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = LiftTable::new(&pack.cameras, &bins, &pack.spec)?;
                    tables.push((pack.cameras.clone(), t.clone()));
                    t
                }
            };
            scenes.push(SceneInputs::from_pack(e.path.clone(), &pack, table)?);
        }
        let spec = spec.ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let want = cfg.spec()?;
        if spec != want {
            return Err(Error::Dataset(format!(
                "scenes use grid {:?} but the config asks for `{}` {:?}",
                spec.dims, cfg.grid, want.dims
            )));
        }
        let c_img = scenes[0].image_channels();
        if scenes.iter().any(|s| s.image_channels() != c_img) {
            return Err(Error::Dataset(
                "scenes disagree on camera feature channels".into(),
            ));
        }
        Ok(Dataset { spec, scenes })
    }

    pub fn image_channels(&self) -> usize {
        self.scenes[0].image_channels()
    }
}

/// Every trainable and frozen parameter of the network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub image_channels: usize,
    pub store: ParamStore,
    /// `[D, C_img]`
    pub depth_w: ParamId,
    pub depth_b: ParamId,
    /// `[C, C_img]`
    pub w_lift: ParamId,
    pub points: PointEncoder,
    pub env: EnvGate,
    pub reducer: ConcatReducer,
    pub occ: OccHead,
    pub weather: WeatherHeads,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub logit_rainy: Var,
    pub logit_night: Var,
    pub w_env: Option<Var>,
    pub prompt: usize,
}

/// How the prompt is chosen for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    GroundTruth,
    Predicted,
}

impl Model {
    /// Fresh parameters. Every component is registered regardless of strategy,
    /// so parameter order and RNG use do not depend on it.
    pub fn new(config: &TrainConfig, image_channels: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = match &config.embeddings {
            Some(p) => Some(load_embeddings(p, config.d_txt)?),
            None => None,
        };
        let (c, d) = (config.channels, config.depth_bins);
        let mut store = ParamStore::new();
        let depth_w = store.add("lift.depth.w", glorot(d, image_channels, &mut rng), true);
        let depth_b = store.add("lift.depth.b", Tensor::zeros(&[d]), true);
        let w_lift = store.add("lift.w", glorot(c, image_channels, &mut rng), true);
        let points = PointEncoder::new(&mut store, POINT_STATS, c, &mut rng);
        let env = EnvGate::new(&mut store, config.env_dims(), embeddings, &mut rng)?;
        let reducer = ConcatReducer::new(&mut store, c);
        let occ = OccHead::new(&mut store, c, &mut rng);
        let weather = WeatherHeads::new(&mut store, image_channels);
        Ok(Model {
            config: config.clone(),
            image_channels,
            store,
            depth_w,
            depth_b,
            w_lift,
            points,
            env,
            reducer,
            occ,
            weather,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.config.strategy
    }

    pub fn frozen_ids(&self) -> [ParamId; 2] {
        [self.env.encoder.embeddings, self.env.encoder.w_txt]
    }

    pub fn weather_ids(&self) -> [ParamId; 4] {
        let h = &self.weather;
        [h.rainy.w, h.rainy.b, h.night.w, h.night.b]
    }

    /// Forward pass through the full network on `store` (which may be a perturbed copy).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        scene: &SceneInputs,
        source: PromptSource,
    ) -> Result<ForwardVars> {
        if scene.image_channels() != self.image_channels {
            return Err(Error::contract(format!(
                "model expects {} camera channels, scene `{}` has {}",
                self.image_channels,
                scene.name,
                scene.image_channels()
            )));
        }
        let pooled = tape.constant(scene.pooled.clone());
        let (logit_rainy, logit_night) = self.weather.logits(tape, store, pooled)?;
        let prompt = match source {
            PromptSource::GroundTruth => select_prompt(scene.weather),
            PromptSource::Predicted => {
                let (rainy, night) = predict_flags(
                    tape.value(logit_rainy).data()[0],
                    tape.value(logit_night).data()[0],
                );
                select_prompt(WeatherFlags { rainy, night })
            }
        };

        let image = tape.constant(scene.image.clone());
        let dw = tape.param(store, self.depth_w);
        let db = tape.param(store, self.depth_b);
        let wl = tape.param(store, self.w_lift);
        let mut v_cam = lift_splat(tape, image, dw, db, wl, &scene.table)?;
        if self.config.lift_normalize {
            v_cam = normalize_density(tape, v_cam, &scene.table)?;
        }
        let stats = tape.constant(scene.stats.clone());
        let v_pts = self.points.forward(tape, store, stats)?;

        let (fused, w_env) = match self.strategy() {
            FusionStrategy::Gated => {
                let ctx = self.env.context(tape, store, prompt)?;
                (fuse(tape, v_cam, v_pts, &ctx)?, Some(ctx.w_env))
            }
            s => (
                fuse_baseline(tape, store, s, v_cam, v_pts, &self.reducer)?,
                None,
            ),
        };
        let logits = self.occ.forward(tape, store, fused)?;
        Ok(ForwardVars {
            logits,
            logit_rainy,
            logit_night,
            w_env,
            prompt,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        scene: &SceneInputs,
        source: PromptSource,
    ) -> Result<ForwardVars> {
        self.forward_with(&self.store, tape, scene, source)
    }

    /// Multi-task loss with teacher-forced prompts.
    pub fn loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        scene: &SceneInputs,
    ) -> Result<(Var, LossBreakdown, ForwardVars)> {
        let f = self.forward_with(store, tape, scene, PromptSource::GroundTruth)?;
        let probs = tape.softmax(f.logits, 0)?;
        let ce = cross_entropy(tape, f.logits, &scene.labels)?;
        let lov = lovasz_softmax(tape, probs, &scene.labels)?;
        let br = bce(tape, f.logit_rainy, scene.weather.rainy)?;
        let bn = bce(tape, f.logit_night, scene.weather.night)?;
        let (total, bd) = total_loss(tape, ce.var, lov.var, br, bn, self.config.loss_weights())?;
        Ok((total, bd, f))
    }
}

/// Index of the largest logit per voxel; ties resolve to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.len() / k;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
