use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::model::{argmax_labels, Dataset, Model, PromptSource, SceneInputs};
use super::TrainConfig;
use crate::envgate::FusionStrategy;
use crate::error::{Error, Result};
use crate::headloss::predict_flags;
use crate::metrics::{
    accumulate_labels, breakdown_table, class_table, condition_breakdown, miou, pct, Breakdown,
    ConfusionCounts, IouReport, Table,
};
use crate::numerics::{AdamWState, Tape};
use crate::scenegen::{scene_rng, Condition, WeatherFlags};

/// Means over one epoch of training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub weather: f64,
    pub acc_rainy: f64,
    pub acc_night: f64,
}

impl EpochLog {
    pub const HEADER: &'static str =
        "epoch\tL_total\tL_ce\tL_lovasz\tL_weather\tacc_rainy\tacc_night";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch,
            self.total,
            self.ce,
            self.lovasz,
            self.weather,
            self.acc_rainy,
            self.acc_night
        )
    }
}

/// Train a fresh model on `data`. `on_epoch` sees each epoch log as it completes.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::new(cfg, data.image_channels())?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    train_steps(&mut model, &data.scenes, cfg.epochs, |log| {
        on_epoch(log);
        logs.push(*log);
    })?;
    Ok((model, logs))
}

/// Params that only exist for a fusion strategy: the environment branch
/// and the concatenation reducer.
pub fn is_fusion_param(name: &str) -> bool {
    name.starts_with("env.") || name.starts_with("fuse.")
}

/// Whether `strategy` reads the param called `name` in its forward pass.
pub fn strategy_uses(strategy: FusionStrategy, name: &str) -> bool {
    if name.starts_with("env.") {
        strategy == FusionStrategy::Gated
    } else if name.starts_with("fuse.concat.") {
        strategy == FusionStrategy::Concatenation
    } else {
        true
    }
}

/// Train `model` in place for `epochs` passes over `scenes` with a fresh optimizer.
///
/// Params the strategy never reads are held fixed, weight decay included.
pub fn train_steps(
    model: &mut Model,
    scenes: &[SceneInputs],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Dataset("no training scenes".into()));
    }
    let cfg = model.config.clone();
    let mut opt = AdamWState::new(&model.store, cfg.adam());
    for (id, p) in model.store.iter() {
        if !strategy_uses(cfg.strategy, &p.name) {
            opt.lr_scale[id.index()] = 0.0;
        } else if is_fusion_param(&p.name) {
            opt.lr_scale[id.index()] = cfg.fusion_lr_scale;
        }
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = scene_rng(cfg.seed, 1);
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let (mut hit_r, mut hit_n) = (0usize, 0usize);
        for &i in &order {
            let scene = &scenes[i];
            model.store.zero_grads();
            let mut tape = Tape::new();
            let (loss, bd, f) = model.loss_with(&model.store, &mut tape, scene)?;
            if !bd.total.is_finite() {
                return Err(Error::NonFinite { step });
            }
            let (r, n) = predict_flags(
                tape.value(f.logit_rainy).data()[0],
                tape.value(f.logit_night).data()[0],
            );
            hit_r += (r == scene.weather.rainy) as usize;
            hit_n += (n == scene.weather.night) as usize;
            for (s, v) in sums
                .iter_mut()
                .zip([bd.total, bd.ce, bd.lovasz, bd.weather])
            {
                *s += v;
            }
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store, cfg.lr);
            step += 1;
        }
        let k = scenes.len() as f64;
        on_epoch(&EpochLog {
            epoch,
            total: sums[0] / k,
            ce: sums[1] / k,
            lovasz: sums[2] / k,
            weather: sums[3] / k,
            acc_rainy: hit_r as f64 / k,
            acc_night: hit_n as f64 / k,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub counts: ConfusionCounts,
    pub weather: WeatherFlags,
    pub predicted: WeatherFlags,
    pub w_env: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub prompts: PromptSource,
    /// Worker threads; 1 is fully serial.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            prompts: PromptSource::Predicted,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneResult>,
    pub counts: ConfusionCounts,
    pub overall: IouReport,
    pub breakdown: Breakdown,
}

fn eval_scene(model: &Model, scene: &SceneInputs, prompts: PromptSource) -> Result<SceneResult> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, scene, prompts)?;
    let (rainy, night) = predict_flags(
        tape.value(f.logit_rainy).data()[0],
        tape.value(f.logit_night).data()[0],
    );
    let pred = argmax_labels(tape.value(f.logits));
    Ok(SceneResult {
        counts: accumulate_labels(&pred, &scene.labels)?,
        weather: scene.weather,
        predicted: WeatherFlags { rainy, night },
        w_env: f.w_env.map(|v| tape.value(v).data()[0]),
    })
}

/// Evaluate every scene; results are merged in scene-index order whatever the thread count.
pub fn evaluate(model: &Model, scenes: &[SceneInputs], opts: EvalOptions) -> Result<EvalReport> {
    let threads = opts.threads.clamp(1, scenes.len().max(1));
    let results: Vec<SceneResult> = if threads == 1 {
        scenes
            .iter()
            .map(|s| eval_scene(model, s, opts.prompts))
            .collect::<Result<_>>()?
    } else {
        let chunk = scenes.len().div_ceil(threads);
        let parts: Vec<Result<Vec<SceneResult>>> = std::thread::scope(|sc| {
            let handles: Vec<_> = scenes
                .chunks(chunk)
                .map(|part| {
                    sc.spawn(move || {
                        part.iter()
                            .map(|s| eval_scene(model, s, opts.prompts))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(scenes.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut counts = ConfusionCounts::default();
    for r in &results {
        counts.merge(&r.counts);
    }
    let tagged: Vec<_> = results
        .iter()
        .map(|r| (r.counts.clone(), r.weather))
        .collect();
    Ok(EvalReport {
        overall: miou(&counts),
        breakdown: condition_breakdown(&tagged),
        counts,
        scenes: results,
    })
}

impl EvalReport {
    /// Fraction of scenes whose predicted flag matches, for (rainy, night).
    pub fn weather_accuracy(&self) -> (f64, f64) {
        let k = self.scenes.len().max(1) as f64;
        let r = self
            .scenes
            .iter()
            .filter(|s| s.predicted.rainy == s.weather.rainy)
            .count();
        let n = self
            .scenes
            .iter()
            .filter(|s| s.predicted.night == s.weather.night)
            .count();
        (r as f64 / k, n as f64 / k)
    }

    /// Mean trust scalar over scenes of one ground-truth condition.
    pub fn mean_w_env(&self, cond: Condition) -> Option<f64> {
        let v: Vec<f64> = self
            .scenes
            .iter()
            .filter(|s| Condition::from_flags(s.weather) == cond)
            .filter_map(|s| s.w_env)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn row_miou(&self, row: crate::metrics::ConditionRow) -> Option<f64> {
        self.breakdown.get(row).and_then(|c| miou(c).miou)
    }

    pub fn summary_table(&self) -> Table {
        let (ar, an) = self.weather_accuracy();
        let mut t = Table::new(["metric", "value"]);
        t.push(vec!["scenes".into(), self.scenes.len().to_string()]);
        t.push(vec!["mIoU".into(), pct(self.overall.miou)]);
        t.push(vec!["IoU".into(), pct(self.overall.iou)]);
        t.push(vec!["weather_acc_rainy".into(), pct(Some(ar))]);
        t.push(vec!["weather_acc_night".into(), pct(Some(an))]);
        for c in Condition::ALL {
            if let Some(w) = self.mean_w_env(c) {
                t.push(vec![
                    format!("w_env_{}", c.flags().label()),
                    format!("{w:.4}"),
                ]);
            }
        }
        t
    }

    /// Summary, per-class and (optionally) per-condition tables.
    pub fn render(&self, by_condition: bool, tsv: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.summary_table().render(tsv));
        let _ = writeln!(s, "{}", class_table(&self.overall).render(tsv));
        if by_condition {
            let _ = writeln!(s, "{}", breakdown_table(&self.breakdown).render(tsv));
        }
        s
    }
}
