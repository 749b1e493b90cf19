//! Confusion counts, IoU / mIoU and the per-condition breakdown.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, CLASS_NAMES, EMPTY, IGNORE, NUM_CLASSES};
use crate::scenegen::WeatherFlags;

/// Per-class TP/FP/FN over classes `1..=N` plus binary occupied-vs-empty counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: [u64; NUM_CLASSES],
    pub fp: [u64; NUM_CLASSES],
    pub fn_: [u64; NUM_CLASSES],
    pub occ_tp: u64,
    pub occ_fp: u64,
    pub occ_fn: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..NUM_CLASSES {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.occ_tp += other.occ_tp;
        self.occ_fp += other.occ_fp;
        self.occ_fn += other.occ_fn;
    }

    pub fn is_zero(&self) -> bool {
        *self == ConfusionCounts::default()
    }
}

fn occupied(l: u8) -> bool {
    l != EMPTY && l != IGNORE
}

/// Count one prediction against ground truth; voxels labeled ignore are skipped.
pub fn accumulate(pred: &LabelGrid, gt: &LabelGrid) -> Result<ConfusionCounts> {
    if pred.spec() != gt.spec() {
        return Err(Error::contract(
            "prediction and ground truth use different grids",
        ));
    }
    accumulate_labels(pred.labels(), gt.labels())
}

pub fn accumulate_labels(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE {
            continue;
        }
        if p == IGNORE || p as usize > NUM_CLASSES {
            return Err(Error::contract(format!("invalid predicted label {p}")));
        }
        if p == g {
            if g != EMPTY {
                c.tp[g as usize - 1] += 1;
            }
        } else {
            if p != EMPTY {
                c.fp[p as usize - 1] += 1;
            }
            if g != EMPTY {
                c.fn_[g as usize - 1] += 1;
            }
        }
        match (occupied(p), occupied(g)) {
            (true, true) => c.occ_tp += 1,
            (true, false) => c.occ_fp += 1,
            (false, true) => c.occ_fn += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` where the class has a zero denominator.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// `None` when no class is included.
    pub miou: Option<f64>,
    /// Binary occupied-vs-empty IoU.
    pub iou: Option<f64>,
}

fn ratio(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let d = tp + fp + fn_;
    (d > 0).then(|| tp as f64 / d as f64)
}

pub fn miou(c: &ConfusionCounts) -> IouReport {
    let per_class: [Option<f64>; NUM_CLASSES] =
        std::array::from_fn(|i| ratio(c.tp[i], c.fp[i], c.fn_[i]));
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = (!included.is_empty()).then(|| included.iter().sum::<f64>() / included.len() as f64);
    IouReport {
        per_class,
        miou,
        iou: ratio(c.occ_tp, c.occ_fp, c.occ_fn),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionRow {
    Rainy,
    Day,
    Night,
}

impl ConditionRow {
    pub const ALL: [ConditionRow; 3] =
        [ConditionRow::Rainy, ConditionRow::Day, ConditionRow::Night];

    pub fn name(self) -> &'static str {
        match self {
            ConditionRow::Rainy => "Rainy",
            ConditionRow::Day => "Day",
            ConditionRow::Night => "Night",
        }
    }

    pub fn includes(self, f: WeatherFlags) -> bool {
        match self {
            ConditionRow::Rainy => f.rainy,
            ConditionRow::Day => !f.night,
            ConditionRow::Night => f.night,
        }
    }
}

/// Counts per row; `None` when no scene falls in the row. Rows overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct Breakdown {
    pub rows: Vec<(ConditionRow, Option<ConfusionCounts>)>,
}

impl Breakdown {
    pub fn get(&self, row: ConditionRow) -> Option<&ConfusionCounts> {
        self.rows
            .iter()
            .find(|(r, _)| *r == row)
            .and_then(|(_, c)| c.as_ref())
    }
}

pub fn condition_breakdown(scenes: &[(ConfusionCounts, WeatherFlags)]) -> Breakdown {
    let rows = ConditionRow::ALL
        .iter()
        .map(|&row| {
            let mut acc: Option<ConfusionCounts> = None;
            for (c, _) in scenes.iter().filter(|(_, f)| row.includes(*f)) {
                acc.get_or_insert_with(ConfusionCounts::default).merge(c);
            }
            (row, acc)
        })
        .collect();
    Breakdown { rows }
}

/// Plain table rendered either tab-separated or column-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.headers.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn to_aligned(&self) -> String {
        let cols = self.headers.len();
        let width: Vec<usize> = (0..cols)
            .map(|i| {
                self.rows
                    .iter()
                    .map(|r| r[i].chars().count())
                    .chain([self.headers[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &self.headers);
        let _ = writeln!(
            s,
            "{}",
            "-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1))
        );
        for r in &self.rows {
            line(&mut s, r);
        }
        s
    }

    pub fn render(&self, tsv: bool) -> String {
        if tsv {
            self.to_tsv()
        } else {
            self.to_aligned()
        }
    }
}

/// Percentage with two decimals, or `-` when undefined.
pub fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// One row per class: name, IoU.
pub fn class_table(r: &IouReport) -> Table {
    let mut t = Table::new(["class", "IoU"]);
    for (name, v) in CLASS_NAMES.iter().zip(&r.per_class) {
        t.push(vec![name.to_string(), pct(*v)]);
    }
    t
}

/// Rainy/Day/Night rows with binary IoU and mIoU.
pub fn breakdown_table(b: &Breakdown) -> Table {
    let mut t = Table::new(["condition", "IoU", "mIoU"]);
    for (row, c) in &b.rows {
        let r = c.as_ref().map(miou);
        t.push(vec![
            row.name().to_string(),
            pct(r.as_ref().and_then(|r| r.iou)),
            pct(r.as_ref().and_then(|r| r.miou)),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = [0u8, 1, 2, 3, 16, IGNORE];
        let c = accumulate_labels(&[0, 1, 2, 3, 16, 0], &gt).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&x| x == 0));
        assert_eq!(miou(&c).miou, Some(1.0));
        assert_eq!(miou(&c).iou, Some(1.0));
    }

    #[test]
    fn four_voxel_example() {
        let c = accumulate_labels(&[1, 2, 2, 2], &[1, 1, 2, 2]).unwrap();
        assert_eq!((c.tp[0], c.fp[0], c.fn_[0]), (1, 0, 1));
        assert_eq!((c.tp[1], c.fp[1], c.fn_[1]), (2, 1, 0));
        let r = miou(&c);
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(2.0 / 3.0));
        assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!(r.per_class[2..].iter().all(Option::is_none));
    }

    #[test]
    fn all_ignore_is_zero_delta() {
        let c = accumulate_labels(&[1, 2, 0], &[IGNORE; 3]).unwrap();
        assert!(c.is_zero());
        assert_eq!(miou(&c).miou, None);
    }

    #[test]
    fn breakdown_routing() {
        let c = accumulate_labels(&[1], &[1]).unwrap();
        let b = condition_breakdown(&[(c.clone(), WeatherFlags::default())]);
        assert!(b.get(ConditionRow::Night).is_none());
        assert!(b.get(ConditionRow::Rainy).is_none());
        assert!(b.get(ConditionRow::Day).is_some());
        let rn = WeatherFlags {
            rainy: true,
            night: true,
        };
        let b = condition_breakdown(&[(c, rn)]);
        assert!(b.get(ConditionRow::Rainy).is_some() && b.get(ConditionRow::Night).is_some());
        assert!(b.get(ConditionRow::Day).is_none());
        assert!(breakdown_table(&b).to_tsv().contains("Day\t-\t-"));
    }

    /// Direct per-class counting by enumeration.
    fn direct(pred: &[u8], gt: &[u8]) -> IouReport {
        let mut per_class = [None; NUM_CLASSES];
        let mut inc = Vec::new();
        for cls in 1..=NUM_CLASSES as u8 {
            let valid = || pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE);
            let tp = valid().filter(|(&p, &g)| p == cls && g == cls).count();
            let fp = valid().filter(|(&p, &g)| p == cls && g != cls).count();
            let fn_ = valid().filter(|(&p, &g)| p != cls && g == cls).count();
            if tp + fp + fn_ > 0 {
                let v = tp as f64 / (tp + fp + fn_) as f64;
                per_class[cls as usize - 1] = Some(v);
                inc.push(v);
            }
        }
        let occ = |l: u8| l != 0 && l != IGNORE;
        let valid = || pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE);
        let tp = valid().filter(|(&p, &g)| occ(p) && occ(g)).count();
        let un = valid().filter(|(&p, &g)| occ(p) || occ(g)).count();
        IouReport {
            per_class,
            miou: (!inc.is_empty()).then(|| inc.iter().sum::<f64>() / inc.len() as f64),
            iou: (un > 0).then(|| tp as f64 / un as f64),
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, classes: u8) -> (Vec<u8>, Vec<u8>) {
        let label = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..=classes)
            }
        };
        let gt: Vec<u8> = (0..n).map(|_| label(rng)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..=classes)).collect();
        (pred, gt)
    }

    proptest! {
        #[test]
        fn matches_direct_counting(seed in any::<u64>(), n in 1usize..60, classes in 1u8..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_grid(&mut rng, n, classes);
            let got = miou(&accumulate_labels(&pred, &gt).unwrap());
            prop_assert_eq!(got, direct(&pred, &gt));
        }

        #[test]
        fn counts_are_additive(seed in any::<u64>(), n in 1usize..40, m in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pa, ga) = random_grid(&mut rng, n, 5);
            let (pb, gb) = random_grid(&mut rng, m, 5);
            let mut sum = accumulate_labels(&pa, &ga).unwrap();
            sum.merge(&accumulate_labels(&pb, &gb).unwrap());
            let joined = accumulate_labels(&[pa, pb].concat(), &[ga, gb].concat()).unwrap();
            prop_assert_eq!(sum, joined);
        }

        #[test]
        fn binary_iou_ignores_label_permutation(seed in any::<u64>(), n in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pred, gt) = random_grid(&mut rng, n, 16);
            let perm = |l: u8| if l == 0 || l == IGNORE { l } else { (l % 16) + 1 };
            let pp: Vec<u8> = pred.iter().map(|&l| perm(l)).collect();
            let a = miou(&accumulate_labels(&pred, &gt).unwrap());
            let b = miou(&accumulate_labels(&pp, &gt).unwrap());
            prop_assert_eq!(a.iou, b.iou);
            if let Some(m) = a.miou {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn absent_class_is_excluded() {
        // Class 3 never appears; classes 1 and 2 are perfect.
        let c = accumulate_labels(&[1, 2, 0], &[1, 2, 0]).unwrap();
        let r = miou(&c);
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn tables_render() {
        let mut t = Table::new(["a", "bb"]);
        t.push(vec!["x".into(), "1.00".into()]);
        assert_eq!(t.to_tsv(), "a\tbb\nx\t1.00\n");
        assert!(t.to_aligned().starts_with("a    bb\n"));
    }
}
