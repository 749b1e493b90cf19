//! Weather heads, the occupancy head and the multi-task objective.

use rand::Rng;

use crate::envgate::Affine;
use crate::error::{Error, Result};
use crate::grid::{IGNORE, NUM_CLASSES};
use crate::numerics::{glorot, sigmoid, softplus, CustomBackward, ParamStore, Tape, Tensor, Var};

/// Logit count of the occupancy head: empty plus every semantic class.
pub const OCC_CLASSES: usize = NUM_CLASSES + 1;

/// Two independent affine heads `C_img → 1` on the pooled image features.
#[derive(Clone, Copy, Debug)]
pub struct WeatherHeads {
    pub rainy: Affine,
    pub night: Affine,
}

impl WeatherHeads {
    /// Zero-initialized heads.
    pub fn new(store: &mut ParamStore, c_img: usize) -> Self {
        let mut head = |name: &str| Affine {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[1, c_img]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1]), true),
        };
        WeatherHeads {
            rainy: head("weather.rainy"),
            night: head("weather.night"),
        }
    }

    /// `(logit_rainy, logit_night)`, each `[1, 1]`, from `pooled: [1, C_img]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<(Var, Var)> {
        Ok((
            self.rainy.apply(tape, store, pooled)?,
            self.night.apply(tape, store, pooled)?,
        ))
    }
}

/// Flag predictions by the strict rule `logit > 0`.
pub fn predict_flags(logit_rainy: f64, logit_night: f64) -> (bool, bool) {
    (logit_rainy > 0.0, logit_night > 0.0)
}

/// Per-voxel perceptron `C → C → N+1` with a sigmoid hidden layer.
#[derive(Clone, Copy, Debug)]
pub struct OccHead {
    pub hidden: Affine,
    pub out: Affine,
}

impl OccHead {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = Affine {
            w: store.add("occ.w1", glorot(channels, channels, rng), true),
            b: store.add("occ.b1", Tensor::zeros(&[channels]), true),
        };
        let out = Affine {
            w: store.add("occ.w2", glorot(OCC_CLASSES, channels, rng), true),
            b: store.add("occ.b2", Tensor::zeros(&[OCC_CLASSES]), true),
        };
        OccHead { hidden, out }
    }

    /// `[C, nx, ny, nz]` → logits `[N+1, nx, ny, nz]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        let (w1, b1) = (
            tape.param(store, self.hidden.w),
            tape.param(store, self.hidden.b),
        );
        let h = tape.channel_mix(fused, w1, Some(b1))?;
        let h = tape.sigmoid(h);
        let (w2, b2) = (tape.param(store, self.out.w), tape.param(store, self.out.b));
        tape.channel_mix(h, w2, Some(b2))
    }
}

/// Loss value plus a flag set when every voxel was ignored (or no class was present).
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub degenerate: bool,
}

fn check_labels(shape: &[usize], labels: &[u8]) -> Result<(usize, usize)> {
    let k = shape.first().copied().unwrap_or(0);
    if k == 0 || shape.iter().product::<usize>() != k * labels.len() {
        return Err(Error::contract(format!(
            "class scores {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return Err(Error::contract(format!("label {bad} outside {k} classes")));
    }
    Ok((k, labels.len()))
}

struct FixedGrad {
    grad: Tensor,
}

impl CustomBackward for FixedGrad {
    fn backward(&self, g: &Tensor, _: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let k = g.data()[0];
        vec![needs[0].then(|| self.grad.map(|x| k * x))]
    }
}

/// Mean `−log softmax(logits)[label]` over voxels whose label is not ignore.
///
/// `logits: [K, ...]` with one trailing position per label.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<LossTerm> {
    let lv = tape.value(logits);
    let (k, n) = check_labels(lv.shape(), labels)?;
    let ld = lv.data();
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = vec![0.0; k * n];
    let mut total = 0.0;
    if valid > 0 {
        let scale = 1.0 / valid as f64;
        let mut e = vec![0.0; k];
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let m = (0..k)
                .map(|c| ld[c * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, ec) in e.iter_mut().enumerate() {
                *ec = (ld[c * n + i] - m).exp();
                sum += *ec;
            }
            total += m + sum.ln() - ld[l as usize * n + i];
            for (c, &ec) in e.iter().enumerate() {
                grad[c * n + i] = scale * (ec / sum - if c == l as usize { 1.0 } else { 0.0 });
            }
        }
        total *= scale;
    }
    let rule = FixedGrad {
        grad: Tensor::new(lv.shape().to_vec(), grad)?,
    };
    let var = tape.custom(Tensor::scalar(total), vec![logits], Box::new(rule));
    Ok(LossTerm {
        var,
        degenerate: valid == 0,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss for a ground-truth
/// indicator already in sorted-error order.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_gt, mut cum_other) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_gt += 1.0;
        } else {
            cum_other += 1.0;
        }
        let jac = 1.0 - (gts - cum_gt) / (gts + cum_other);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Bit pattern whose unsigned order matches the total order of `f64`.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 1 << 63
    }
}

/// Lovász-Softmax on probabilities `probs: [K, ...]`, averaged over the
/// classes present among the non-ignored labels.
pub fn lovasz_softmax(tape: &mut Tape, probs: Var, labels: &[u8]) -> Result<LossTerm> {
    let pv = tape.value(probs);
    let (k, n) = check_labels(pv.shape(), labels)?;
    let pd = pv.data();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    let mut present = vec![false; k];
    for &i in &valid {
        present[labels[i] as usize] = true;
    }
    let count = present.iter().filter(|&&p| p).count();
    let mut grad = vec![0.0; k * n];
    let mut total = 0.0;
    let mut keys: Vec<u128> = Vec::with_capacity(valid.len());
    let mut order: Vec<usize> = Vec::with_capacity(valid.len());
    let mut errs = vec![0.0; n];
    for c in (0..k).filter(|&c| present[c]) {
        for &i in &valid {
            let p = pd[c * n + i];
            errs[i] = if labels[i] as usize == c { 1.0 - p } else { p };
        }
        // Key: descending error, then ascending index.
        keys.clear();
        keys.extend(
            valid
                .iter()
                .map(|&i| ((!ordered_bits(errs[i]) as u128) << 64) | i as u128),
        );
        keys.sort_unstable();
        order.clear();
        order.extend(keys.iter().map(|&key| key as u64 as usize));
        let gt: Vec<bool> = order.iter().map(|&i| labels[i] as usize == c).collect();
        let g = lovasz_grad(&gt);
        let scale = 1.0 / count as f64;
        let mut loss_c = 0.0;
        for ((&i, &gi), &is_gt) in order.iter().zip(&g).zip(&gt) {
            loss_c += errs[i] * gi;
            grad[c * n + i] = scale * if is_gt { -gi } else { gi };
        }
        total += loss_c;
    }
    if count > 0 {
        total /= count as f64;
    }
    let rule = FixedGrad {
        grad: Tensor::new(pv.shape().to_vec(), grad)?,
    };
    let var = tape.custom(Tensor::scalar(total), vec![probs], Box::new(rule));
    Ok(LossTerm {
        var,
        degenerate: count == 0,
    })
}

/// `t·softplus(−x) + (1 − t)·softplus(x)`: binary cross-entropy on a logit.
pub fn bce_value(logit: f64, target: f64) -> f64 {
    target * softplus(-logit) + (1.0 - target) * softplus(logit)
}

struct BceRule {
    target: f64,
}

impl CustomBackward for BceRule {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = sigmoid(inputs[0].data()[0]) - self.target;
        vec![needs[0].then(|| inputs[0].map(|_| g.data()[0] * d))]
    }
}

pub fn bce(tape: &mut Tape, logit: Var, target: bool) -> Result<Var> {
    let Some(x) = tape.value(logit).item() else {
        return Err(Error::contract("bce expects a single logit"));
    };
    let t = if target { 1.0 } else { 0.0 };
    Ok(tape.custom(
        Tensor::scalar(bce_value(x, t)),
        vec![logit],
        Box::new(BceRule { target: t }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub occ: f64,
    pub weather: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            occ: 1.0,
            weather: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lovasz: f64,
    pub occ: f64,
    pub weather: f64,
    pub total: f64,
    pub lambda_occ: f64,
    pub lambda_weather: f64,
}

/// `L_total = λ_occ·(CE + Lovász) + λ_weather·(BCE_rainy + BCE_night)`.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    lovasz: Var,
    bce_rainy: Var,
    bce_night: Var,
    w: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let occ = tape.add(ce, lovasz)?;
    let weather = tape.add(bce_rainy, bce_night)?;
    let a = tape.scale_shift(occ, w.occ, 0.0);
    let b = tape.scale_shift(weather, w.weather, 0.0);
    let total = tape.add(a, b)?;
    let v = |t: &Tape, x: Var| t.value(x).data()[0];
    let bd = LossBreakdown {
        ce: v(tape, ce),
        lovasz: v(tape, lovasz),
        occ: v(tape, occ),
        weather: v(tape, weather),
        total: v(tape, total),
        lambda_occ: w.occ,
        lambda_weather: w.weather,
    };
    Ok((total, bd))
}
