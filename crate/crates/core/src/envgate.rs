//! Prompt-conditioned environment embedding, channel gates, trust scalar
//! and the fusion strategies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{glorot, uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegen::WeatherFlags;

pub const PROMPTS: [&str; 4] = [
    "a driving scene on a clear day",
    "a driving scene on a clear night",
    "a driving scene on a rainy day",
    "a driving scene on a rainy night",
];

const W_TXT_KEY: &str = "frozen text projection";

pub fn select_prompt(flags: WeatherFlags) -> usize {
    (flags.rainy as usize) * 2 + flags.night as usize
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::contract("embedding has zero or non-finite norm"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Unit embedding derived from the prompt text alone.
pub fn stub_embedding(prompt: &str, d_txt: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()));
    let v: Vec<f64> = (0..d_txt)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    unit(v).expect("gaussian draw is nonzero")
}

/// Parse `prompt-id<TAB>v1,v2,...` lines. The id is `0..=3` or a condition
/// label such as `rainy-night`. Vectors are rescaled to unit norm.
pub fn load_embeddings(path: &Path, d_txt: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: [Option<Vec<f64>>; 4] = Default::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Embedding { line: line_no, msg };
        let (id, vals) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `prompt-id<TAB>values`".into()))?;
        let id = match id.trim() {
            "0" | "clear-day" => 0,
            "1" | "clear-night" => 1,
            "2" | "rainy-day" => 2,
            "3" | "rainy-night" => 3,
            other => return Err(err(format!("unknown prompt id `{other}`"))),
        };
        let v: Vec<f64> = vals
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("`{s}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if v.len() != d_txt {
            return Err(err(format!("expected {d_txt} values, got {}", v.len())));
        }
        if rows[id].is_some() {
            return Err(err(format!("prompt id {id} listed twice")));
        }
        rows[id] = Some(unit(v).map_err(|e| err(e.to_string()))?);
    }
    let missing: Vec<usize> = (0..4).filter(|&i| rows[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Embedding {
            line: text.lines().count(),
            msg: format!("missing prompt ids {missing:?}"),
        });
    }
    Ok(rows.into_iter().map(Option::unwrap).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvDims {
    pub d_txt: usize,
    pub d_env: usize,
    pub rank: usize,
    pub alpha: f64,
    pub channels: usize,
}

impl Default for EnvDims {
    fn default() -> Self {
        EnvDims {
            d_txt: 64,
            d_env: 32,
            rank: 4,
            alpha: 8.0,
            channels: 16,
        }
    }
}

/// Frozen prompt embeddings `[4, d_txt]` and projection `W_txt: [d_env, d_txt]`.
#[derive(Clone, Copy, Debug)]
pub struct FrozenTextEncoder {
    pub embeddings: ParamId,
    pub w_txt: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    /// `[r, d_txt]`
    pub a: ParamId,
    /// `[d_env, r]`, zero at init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, w: Tensor, out: usize) -> Self {
        Affine {
            w: store.add(format!("{name}.w"), w, true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out]), true),
        }
    }

    /// `x: [n, d_in]` → `[n, d_out]`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.linear(x, w, Some(b))
    }
}

/// Environment branch: encoder, adapter, projection, two gate layers and the trust perceptron.
#[derive(Clone, Copy, Debug)]
pub struct EnvGate {
    pub dims: EnvDims,
    pub encoder: FrozenTextEncoder,
    pub lora: LoraAdapter,
    pub proj: Affine,
    pub gate_cam: Affine,
    pub gate_pts: Affine,
    pub trust: Affine,
}

/// Tape handles for one scene's fusion context; masks are `[1, C]`, `w_env` is `[1, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub f_env: Var,
    pub f_proj: Var,
    pub g_cam: Var,
    pub g_pts: Var,
    pub w_env: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionContext {
    pub f_env: Vec<f64>,
    pub f_proj: Vec<f64>,
    pub g_cam: Vec<f64>,
    pub g_pts: Vec<f64>,
    pub w_env: f64,
}

impl EnvGate {
    /// Register all envgate params. `embeddings` replaces the seeded stub vectors.
    pub fn new(
        store: &mut ParamStore,
        dims: EnvDims,
        embeddings: Option<Vec<Vec<f64>>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.rank == 0 || dims.rank > dims.d_env.min(dims.d_txt) {
            return Err(Error::Config {
                key: "lora_rank".into(),
                msg: format!(
                    "rank {} must be in 1..={}",
                    dims.rank,
                    dims.d_env.min(dims.d_txt)
                ),
            });
        }
        let EnvDims {
            d_txt,
            d_env,
            rank,
            channels: c,
            ..
        } = dims;
        let rows = match embeddings {
            Some(rows) => {
                if rows.len() != 4 || rows.iter().any(|r| r.len() != d_txt) {
                    return Err(Error::contract(format!(
                        "need 4 embeddings of length {d_txt}"
                    )));
                }
                rows
            }
            None => PROMPTS.iter().map(|p| stub_embedding(p, d_txt)).collect(),
        };
        let emb = Tensor::new(vec![4, d_txt], rows.concat())?;
        let mut key_rng = ChaCha8Rng::seed_from_u64(fnv1a(W_TXT_KEY.as_bytes()));
        let w_txt = glorot(d_env, d_txt, &mut key_rng);
        let encoder = FrozenTextEncoder {
            embeddings: store.add("env.embeddings", emb, false),
            w_txt: store.add("env.w_txt", w_txt, false),
        };
        let lora = LoraAdapter {
            a: store.add(
                "env.lora.a",
                uniform(&[rank, d_txt], 1.0 / (d_txt as f64).sqrt(), rng),
                true,
            ),
            b: store.add("env.lora.b", Tensor::zeros(&[d_env, rank]), true),
            rank,
            alpha: dims.alpha,
        };
        let proj = Affine::new(store, "env.proj", glorot(c, d_env, rng), c);
        let gate_cam = Affine::new(store, "env.gate_cam", glorot(c, c, rng), c);
        let gate_pts = Affine::new(store, "env.gate_pts", glorot(c, c, rng), c);
        let trust = Affine::new(store, "env.trust", glorot(1, c, rng), 1);
        Ok(EnvGate {
            dims,
            encoder,
            lora,
            proj,
            gate_cam,
            gate_pts,
            trust,
        })
    }

    /// Trainable params of the environment branch (excludes the frozen encoder).
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.lora.a, self.lora.b];
        for a in [self.proj, self.gate_cam, self.gate_pts, self.trust] {
            v.extend([a.w, a.b]);
        }
        v
    }

    /// `f_env = (W_txt + (α/r)·B·A)·e_prompt` as a `[1, d_env]` row.
    pub fn encode_env(&self, tape: &mut Tape, store: &ParamStore, prompt: usize) -> Result<Var> {
        if prompt >= PROMPTS.len() {
            return Err(Error::contract(format!("prompt id {prompt} out of range")));
        }
        let d = self.dims.d_txt;
        let row =
            store.value(self.encoder.embeddings).data()[prompt * d..(prompt + 1) * d].to_vec();
        let e = tape.constant(Tensor::new(vec![1, d], row)?);
        let w_txt = tape.param(store, self.encoder.w_txt);
        let base = tape.linear(e, w_txt, None)?;
        let (a, b) = (
            tape.param(store, self.lora.a),
            tape.param(store, self.lora.b),
        );
        let low = tape.linear(e, a, None)?;
        let low = tape.linear(low, b, None)?;
        let low = tape.scale_shift(low, self.lora.alpha / self.lora.rank as f64, 0.0);
        tape.add(base, low)
    }

    pub fn context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prompt: usize,
    ) -> Result<ContextVars> {
        let f_env = self.encode_env(tape, store, prompt)?;
        let f_proj = self.proj.apply(tape, store, f_env)?;
        let g = self.gate_cam.apply(tape, store, f_proj)?;
        let g_cam = tape.sigmoid(g);
        let g = self.gate_pts.apply(tape, store, f_proj)?;
        let g_pts = tape.sigmoid(g);
        let t = self.trust.apply(tape, store, f_proj)?;
        let w_env = tape.sigmoid(t);
        Ok(ContextVars {
            f_env,
            f_proj,
            g_cam,
            g_pts,
            w_env,
        })
    }

    pub fn context_values(&self, store: &ParamStore, prompt: usize) -> Result<FusionContext> {
        let mut tape = Tape::new();
        let v = self.context(&mut tape, store, prompt)?;
        Ok(FusionContext {
            f_env: tape.value(v.f_env).data().to_vec(),
            f_proj: tape.value(v.f_proj).data().to_vec(),
            g_cam: tape.value(v.g_cam).data().to_vec(),
            g_pts: tape.value(v.g_pts).data().to_vec(),
            w_env: tape.value(v.w_env).data()[0],
        })
    }
}

/// `V_fused = w·(G_cam ⊙ V_cam) + (1 − w)·(G_pts ⊙ V_pts)` on the tape.
pub fn fuse(tape: &mut Tape, v_cam: Var, v_pts: Var, ctx: &ContextVars) -> Result<Var> {
    let (a, b) = (tape.value(v_cam), tape.value(v_pts));
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cam = tape.channel_scale(v_cam, ctx.g_cam)?;
    let pts = tape.channel_scale(v_pts, ctx.g_pts)?;
    let cam = tape.scalar_mul(cam, ctx.w_env)?;
    let rest = tape.scale_shift(ctx.w_env, -1.0, 1.0);
    let pts = tape.scalar_mul(pts, rest)?;
    tape.add(cam, pts)
}

fn check_pair(v_cam: &Tensor, v_pts: &Tensor) -> Result<usize> {
    if v_cam.shape() != v_pts.shape() || v_cam.shape().is_empty() {
        return Err(Error::contract(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            v_cam.shape(),
            v_pts.shape()
        )));
    }
    Ok(v_cam.shape()[0])
}

/// Gated fusion on plain values with a precomputed context.
pub fn fuse_values(v_cam: &Tensor, v_pts: &Tensor, ctx: &FusionContext) -> Result<Tensor> {
    let c = check_pair(v_cam, v_pts)?;
    if ctx.g_cam.len() != c || ctx.g_pts.len() != c {
        return Err(Error::contract(format!(
            "gate length {} vs {c} channels",
            ctx.g_cam.len()
        )));
    }
    let n = v_cam.len() / c;
    let w = ctx.w_env;
    let mut cam = v_cam.clone();
    let mut pts = v_pts.clone();
    for ch in 0..c {
        let (gc, gp) = (w * ctx.g_cam[ch], (1.0 - w) * ctx.g_pts[ch]);
        cam.data_mut()[ch * n..(ch + 1) * n]
            .iter_mut()
            .for_each(|x| *x *= gc);
        pts.data_mut()[ch * n..(ch + 1) * n]
            .iter_mut()
            .for_each(|x| *x *= gp);
    }
    cam.axpy(1.0, &pts);
    Ok(cam)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Addition,
    Concatenation,
    Gated,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::Addition,
        FusionStrategy::Concatenation,
        FusionStrategy::Gated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Addition => "addition",
            FusionStrategy::Concatenation => "concat",
            FusionStrategy::Gated => "gated",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "addition" | "add" => Ok(FusionStrategy::Addition),
            "concat" | "concatenation" => Ok(FusionStrategy::Concatenation),
            "gated" => Ok(FusionStrategy::Gated),
            other => Err(Error::contract(format!(
                "unknown fusion strategy `{other}` (expected addition, concat or gated)"
            ))),
        }
    }
}

/// Per-voxel `2C → C` reducer over stacked `[V_cam; V_pts]`, initialized to `[I | 0]`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatReducer {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConcatReducer {
    /// Starts as `[I|I]`, so the reducer initially reproduces addition.
    pub fn new(store: &mut ParamStore, channels: usize) -> Self {
        Self::with_blocks(store, channels, 1.0, 1.0)
    }

    /// Reducer initialized to `[cam·I | pts·I]` with zero bias.
    pub fn with_blocks(store: &mut ParamStore, channels: usize, cam: f64, pts: f64) -> Self {
        let mut w = Tensor::zeros(&[channels, 2 * channels]);
        for c in 0..channels {
            w.data_mut()[c * 2 * channels + c] = cam;
            w.data_mut()[c * 2 * channels + channels + c] = pts;
        }
        ConcatReducer {
            w: store.add("fuse.concat.w", w, true),
            b: store.add("fuse.concat.b", Tensor::zeros(&[channels]), true),
        }
    }
}

/// Addition or concatenation fusion on the tape.
pub fn fuse_baseline(
    tape: &mut Tape,
    store: &ParamStore,
    strategy: FusionStrategy,
    v_cam: Var,
    v_pts: Var,
    reducer: &ConcatReducer,
) -> Result<Var> {
    check_pair(tape.value(v_cam), tape.value(v_pts))?;
    match strategy {
        FusionStrategy::Addition => tape.add(v_cam, v_pts),
        FusionStrategy::Concatenation => {
            let x = tape.concat0(v_cam, v_pts)?;
            let (w, b) = (tape.param(store, reducer.w), tape.param(store, reducer.b));
            tape.channel_mix(x, w, Some(b))
        }
        FusionStrategy::Gated => Err(Error::contract("gated fusion needs a fusion context")),
    }
}

pub fn fuse_add_values(v_cam: &Tensor, v_pts: &Tensor) -> Result<Tensor> {
    check_pair(v_cam, v_pts)?;
    let mut out = v_cam.clone();
    out.axpy(1.0, v_pts);
    Ok(out)
}

pub fn fuse_concat_values(
    v_cam: &Tensor,
    v_pts: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let c = check_pair(v_cam, v_pts)?;
    if w.shape() != [c, 2 * c] || b.len() != c {
        return Err(Error::Shape {
            op: "concat reducer",
            left: w.shape().to_vec(),
            right: vec![c, 2 * c],
        });
    }
    let n = v_cam.len() / c;
    let mut out = Tensor::zeros(v_cam.shape());
    let od = out.data_mut();
    for o in 0..c {
        let row = &mut od[o * n..(o + 1) * n];
        row.fill(b.data()[o]);
        for i in 0..2 * c {
            let k = w.data()[o * 2 * c + i];
            let src = if i < c {
                &v_cam.data()[i * n..(i + 1) * n]
            } else {
                &v_pts.data()[(i - c) * n..(i - c + 1) * n]
            };
            row.iter_mut().zip(src).for_each(|(r, &s)| *r += k * s);
        }
    }
    Ok(out)
}
