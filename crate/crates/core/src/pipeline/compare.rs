use super::bench::{bench_fusion, median};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::model::{Dataset, PromptSource};
use super::train::{evaluate, train, EvalOptions, EvalReport};
use super::TrainConfig;
use crate::envgate::FusionStrategy;
use crate::error::{Error, Result};
use crate::metrics::{pct, ConditionRow, Table};
use crate::scenegen::Condition;

const LATENCY_REPS: usize = 20;

#[derive(Clone, Debug)]
pub struct CompareRun {
    pub strategy: FusionStrategy,
    pub seed: u64,
    pub report: EvalReport,
    /// Same model evaluated with ground-truth prompts (gated runs only).
    pub gt_report: Option<EvalReport>,
    pub latency_ms: f64,
}

impl CompareRun {
    pub fn miou(&self) -> Option<f64> {
        self.report.overall.miou
    }

    pub fn row(&self, row: ConditionRow) -> Option<f64> {
        self.report.row_miou(row)
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub runs: Vec<CompareRun>,
}

/// Train every strategy once per seed (`cfg.seed + i`) and evaluate on `eval`.
///
/// Up to `opts.threads` runs train concurrently; each run is itself serial,
/// so results do not depend on the thread count. Latency is measured
/// afterwards, one run at a time.
pub fn compare(
    strategies: &[FusionStrategy],
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    seeds: usize,
    opts: EvalOptions,
    mut progress: impl FnMut(&CompareRun),
) -> Result<Comparison> {
    if strategies.len() < 2 {
        return Err(Error::Config {
            key: "strategies".into(),
            msg: "compare needs at least two strategies".into(),
        });
    }
    if seeds == 0 {
        return Err(Error::Config {
            key: "seeds".into(),
            msg: "must be >= 1".into(),
        });
    }
    if train_data.spec != eval_data.spec {
        return Err(Error::Dataset("train and eval grids differ".into()));
    }
    let jobs: Vec<(FusionStrategy, u64)> = (0..seeds as u64)
        .flat_map(|i| strategies.iter().map(move |&s| (s, cfg.seed + i)))
        .collect();
    let serial = EvalOptions { threads: 1, ..opts };
    let run_one = |(strategy, seed): (FusionStrategy, u64)| -> Result<CompareRun> {
        let run_cfg = TrainConfig {
            strategy,
            seed,
            ..cfg.clone()
        };
        let (model, _) = train(train_data, &run_cfg, |_| {})?;
        let report = evaluate(&model, &eval_data.scenes, serial)?;
        let gt_report = match strategy {
            FusionStrategy::Gated => Some(evaluate(
                &model,
                &eval_data.scenes,
                EvalOptions {
                    prompts: PromptSource::GroundTruth,
                    ..serial
                },
            )?),
            _ => None,
        };
        Ok(CompareRun {
            strategy,
            seed,
            report,
            gt_report,
            latency_ms: 0.0,
        })
    };

    let workers = opts.threads.clamp(1, jobs.len());
    let mut runs: Vec<CompareRun> = Vec::with_capacity(jobs.len());
    if workers == 1 {
        for &job in &jobs {
            let mut run = run_one(job)?;
            run.latency_ms = latency(run.strategy, cfg, train_data)?;
            progress(&run);
            runs.push(run);
        }
        return Ok(Comparison { runs });
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CompareRun>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                let out = run_one(job);
                slots.lock().expect("compare worker panicked")[i] = Some(out);
            });
        }
    });
    for slot in slots.into_inner().expect("compare worker panicked") {
        let mut run = slot.expect("every job runs")?;
        run.latency_ms = latency(run.strategy, cfg, train_data)?;
        progress(&run);
        runs.push(run);
    }
    Ok(Comparison { runs })
}

fn latency(strategy: FusionStrategy, cfg: &TrainConfig, data: &Dataset) -> Result<f64> {
    Ok(bench_fusion(&[strategy], cfg.channels, data.spec.dims, LATENCY_REPS)?[0].median_ms)
}

fn med(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| median(&v))
}

impl Comparison {
    pub fn strategies(&self) -> Vec<FusionStrategy> {
        let mut out: Vec<FusionStrategy> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.strategy) {
                out.push(r.strategy);
            }
        }
        out
    }

    /// Median overall mIoU across seeds.
    pub fn median_miou(&self, s: FusionStrategy) -> Option<f64> {
        med(self
            .runs
            .iter()
            .filter(|r| r.strategy == s)
            .map(|r| r.miou()))
    }

    pub fn median_row(&self, s: FusionStrategy, row: ConditionRow) -> Option<f64> {
        med(self
            .runs
            .iter()
            .filter(|r| r.strategy == s)
            .map(|r| r.row(row)))
    }

    /// Median over seeds of the per-seed margin `a − b` on one row (`None` = overall).
    pub fn median_margin(
        &self,
        a: FusionStrategy,
        b: FusionStrategy,
        row: Option<ConditionRow>,
    ) -> Option<f64> {
        let pick = |r: &CompareRun| row.map_or(r.miou(), |row| r.row(row));
        let margins = self.runs.iter().filter(|r| r.strategy == a).map(|ra| {
            let rb = self
                .runs
                .iter()
                .find(|r| r.strategy == b && r.seed == ra.seed)?;
            Some(pick(ra)? - pick(rb)?)
        });
        med(margins)
    }

    pub fn runs_table(&self) -> Table {
        let mut t = Table::new([
            "strategy",
            "seed",
            "mIoU",
            "IoU",
            "Rainy",
            "Day",
            "Night",
            "latency_ms",
        ]);
        for r in &self.runs {
            t.push(vec![
                r.strategy.to_string(),
                r.seed.to_string(),
                pct(r.miou()),
                pct(r.report.overall.iou),
                pct(r.row(ConditionRow::Rainy)),
                pct(r.row(ConditionRow::Day)),
                pct(r.row(ConditionRow::Night)),
                format!("{:.4}", r.latency_ms),
            ]);
        }
        t
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new([
            "strategy",
            "median_mIoU",
            "median_Rainy",
            "median_Day",
            "median_Night",
            "median_latency_ms",
        ]);
        for s in self.strategies() {
            let lat = med(self
                .runs
                .iter()
                .filter(|r| r.strategy == s)
                .map(|r| Some(r.latency_ms)));
            t.push(vec![
                s.to_string(),
                pct(self.median_miou(s)),
                pct(self.median_row(s, ConditionRow::Rainy)),
                pct(self.median_row(s, ConditionRow::Day)),
                pct(self.median_row(s, ConditionRow::Night)),
                lat.map_or("-".into(), |l| format!("{l:.4}")),
            ]);
        }
        t
    }

    /// Median over seeds of the mean trust scalar on one weather condition.
    pub fn median_w_env(&self, s: FusionStrategy, cond: Condition) -> Option<f64> {
        med(self
            .runs
            .iter()
            .filter(|r| r.strategy == s)
            .map(|r| r.report.mean_w_env(cond)))
    }

    /// Lowest held-out weather accuracy over all runs, as (rainy, night).
    pub fn min_weather_accuracy(&self) -> (f64, f64) {
        self.runs.iter().fold((1.0, 1.0), |(r, n), run| {
            let (a, b) = run.report.weather_accuracy();
            (r.min(a), n.min(b))
        })
    }

    /// Per-seed margins `a − b`, median over seeds, overall and per row.
    pub fn margin_table(&self, a: FusionStrategy, b: FusionStrategy) -> Table {
        let mut t = Table::new(["margin", "overall", "Rainy", "Day", "Night"]);
        let mut row = vec![format!("{a}-{b}")];
        row.push(fmt_margin(self.median_margin(a, b, None)));
        for r in ConditionRow::ALL {
            row.push(fmt_margin(self.median_margin(a, b, Some(r))));
        }
        t.push(row);
        t
    }

    /// Median trust scalar per weather condition for gated runs.
    pub fn trust_table(&self) -> Table {
        let mut t = Table::new(["condition", "median_w_env"]);
        for c in Condition::ALL {
            if let Some(w) = self.median_w_env(FusionStrategy::Gated, c) {
                t.push(vec![c.flags().label().to_string(), format!("{w:.4}")]);
            }
        }
        t
    }
}

fn fmt_margin(m: Option<f64>) -> String {
    m.map_or("-".into(), |m| format!("{:+.2}", 100.0 * m))
}
