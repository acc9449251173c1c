//! Masked denoising diffusion over raw scene tokens.
//!
//! Every token is a row of [`RAW_WIDTH`] continuous values: face vertices and
//! a relaxed material one-hot, antenna position and orientation, or the
//! link's normalized power and scaled delay spread. Coordinates are
//! multiplied by [`COORD_SCALE`] so that scene extents are of order one.
//! The denoiser re-tokenizes the noisy rows into multivectors, predicts the
//! clean rows, and conditioned rows are clamped to their known values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ga::{embed_direction, embed_plane, embed_point, Multivector, DIM, E01, E012, E013, E02, E023, E03};
use crate::io::Dataset;
use crate::net::{Batch, Model, ParamVars, Task, TIME_FEATURES};
use crate::scene::{Antenna, Face, Scene};
use crate::tokenizer::{
    Channel, PowerNorm, TokenKind, DELAY_SCALE, DELAY_SLOT, MATERIAL_SLOTS, MV_CHANNELS, POWER_SLOT, RX_FLAG,
    SCALAR_CHANNELS, TX_FLAG,
};
use crate::training::{clip_gradient, cosine_lr, Adam};

/// Values per token row.
pub const RAW_WIDTH: usize = 9 + MATERIAL_SLOTS;
/// Metres to diffusion units. A power of two, so scaling is exact.
pub const COORD_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probabilities of the unconditional, signal, receiver and mesh masks.
    pub mask_probs: [f64; 4],
    pub ddim_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, mask_probs: [0.2, 0.3, 0.2, 0.3], ddim_steps: 100 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Configuration("need T ≥ 1 and 0 < β_1 ≤ β_T < 1".into()));
        }
        if self.mask_probs.iter().any(|p| *p < 0.0) || (self.mask_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Configuration("mask probabilities must be non-negative and sum to 1".into()));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.steps {
            return Err(Error::Configuration("ddim_steps must lie in [1, T]".into()));
        }
        Ok(())
    }
}

/// Linear β schedule with cumulative products, indexed by `t ∈ [1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.steps;
        let betas: Vec<f64> = (0..t)
            .map(|i| if t == 1 { cfg.beta_start } else { cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64 })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Coefficients of `q(x_{t−1} | x_t, x0)`: mean `c0·x0 + ct·x_t` and variance.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, beta) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
        (c0, ct, beta * (1.0 - ab_prev) / (1.0 - ab))
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Argument(format!("timestep {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`; `t = 0` returns `x0`.
pub fn q_sample(schedule: &Schedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Argument(format!("{} values with {} noise draws", x0.len(), noise.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

/// `KL(q(x_T | x0) ‖ N(0, I))` per value.
pub fn prior_kl(schedule: &Schedule, x0: &[f64]) -> Vec<f64> {
    let ab = schedule.alpha_bar(schedule.steps());
    x0.iter().map(|x| 0.5 * ((1.0 - ab) + ab * x * x - 1.0 - (1.0 - ab).ln())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Every token except the origin is generated.
    None,
    /// Only the link's channel values are generated.
    Signal,
    /// Only the receiver antenna is generated.
    Rx,
    /// Every face except floor and ceiling is generated.
    Mesh,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::None, MaskKind::Signal, MaskKind::Rx, MaskKind::Mesh];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::None => "none",
            MaskKind::Signal => "signal",
            MaskKind::Rx => "rx",
            MaskKind::Mesh => "mesh",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Argument(format!("unknown mask {s:?}")))
    }
}

/// One scene with a single link and its channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub channel: Channel,
}

impl Example {
    pub fn new(scene: Scene, channel: Channel) -> Result<Self> {
        if scene.tx.len() != 1 || scene.rx.len() != 1 {
            return Err(Error::Argument("diffusion examples need exactly one tx and one rx".into()));
        }
        if scene.faces.iter().any(|f| f.material >= MATERIAL_SLOTS) {
            return Err(Error::Format(format!("material indices must be below {MATERIAL_SLOTS}")));
        }
        Ok(Self { scene, channel })
    }

    pub fn num_tokens(&self) -> usize {
        self.scene.faces.len() + 4
    }

    fn kinds(&self) -> Vec<TokenKind> {
        token_kinds(self.scene.faces.len())
    }

    /// Clean token rows `[tokens, RAW_WIDTH]` and the mask of meaningful entries.
    pub fn encode(&self, norm: &PowerNorm) -> (Vec<f64>, Vec<bool>) {
        let n = self.num_tokens();
        let mut raw = vec![0.0; n * RAW_WIDTH];
        let mut valid = vec![false; n * RAW_WIDTH];
        for (i, f) in self.scene.faces.iter().enumerate() {
            let row = &mut raw[i * RAW_WIDTH..(i + 1) * RAW_WIDTH];
            for v in 0..3 {
                for k in 0..3 {
                    row[3 * v + k] = f.v[v][k] * COORD_SCALE;
                }
            }
            row[9 + f.material] = 1.0;
        }
        let nf = self.scene.faces.len();
        for (j, a) in [self.scene.tx[0], self.scene.rx[0]].iter().enumerate() {
            let row = &mut raw[(nf + j) * RAW_WIDTH..];
            for k in 0..3 {
                row[k] = a.pos[k] * COORD_SCALE;
                row[3 + k] = a.ori[k];
            }
        }
        raw[(nf + 2) * RAW_WIDTH] = norm.normalize(self.channel.power_db);
        raw[(nf + 2) * RAW_WIDTH + 1] = self.channel.delay_spread_s * DELAY_SCALE;
        for (i, kind) in self.kinds().iter().enumerate() {
            for s in 0..valid_width(*kind) {
                valid[i * RAW_WIDTH + s] = true;
            }
        }
        (raw, valid)
    }

    /// Which tokens a mask generates.
    pub fn mask(&self, kind: MaskKind) -> Vec<bool> {
        let nf = self.scene.faces.len();
        let mut m = vec![false; self.num_tokens()];
        match kind {
            MaskKind::None => m[..nf + 3].iter_mut().for_each(|x| *x = true),
            MaskKind::Signal => m[nf + 2] = true,
            MaskKind::Rx => m[nf + 1] = true,
            MaskKind::Mesh => {
                for (i, f) in self.scene.faces.iter().enumerate() {
                    m[i] = !is_horizontal(f);
                }
            }
        }
        m
    }
}

fn is_horizontal(f: &Face) -> bool {
    let c = f.cross();
    c.z.abs() > 0.99 * c.norm()
}

fn token_kinds(n_faces: usize) -> Vec<TokenKind> {
    let mut k = vec![TokenKind::MeshFace; n_faces];
    k.extend([TokenKind::Antenna, TokenKind::Antenna, TokenKind::Link, TokenKind::Origin]);
    k
}

fn valid_width(kind: TokenKind) -> usize {
    match kind {
        TokenKind::MeshFace => RAW_WIDTH,
        TokenKind::Antenna => 6,
        TokenKind::Link => 2,
        TokenKind::Origin => 0,
    }
}

/// Rebuilds a scene and channel from token rows. Tokens not generated by
/// `mask` are copied from `reference`, so conditioning survives bit-exactly.
pub fn decode(raw: &[f64], mask: &[bool], reference: &Example, norm: &PowerNorm) -> Result<Example> {
    let nf = reference.scene.faces.len();
    if raw.len() != reference.num_tokens() * RAW_WIDTH || mask.len() != reference.num_tokens() {
        return Err(Error::Argument("token rows do not match the reference layout".into()));
    }
    let n_mat = reference.scene.materials.len().clamp(1, MATERIAL_SLOTS);
    let mut out = reference.clone();
    for i in 0..nf {
        if !mask[i] {
            continue;
        }
        let row = &raw[i * RAW_WIDTH..(i + 1) * RAW_WIDTH];
        let v = [0, 1, 2].map(|j| [0, 1, 2].map(|k| row[3 * j + k] / COORD_SCALE));
        let onehot = &row[9..9 + n_mat];
        let material = (0..n_mat).fold(0, |b, j| if onehot[j] > onehot[b] { j } else { b });
        out.scene.faces[i] = Face { v, material };
    }
    for j in 0..2 {
        if !mask[nf + j] {
            continue;
        }
        let row = &raw[(nf + j) * RAW_WIDTH..];
        let ori = [row[3], row[4], row[5]];
        let len = (ori[0] * ori[0] + ori[1] * ori[1] + ori[2] * ori[2]).sqrt();
        let a = Antenna {
            pos: [0, 1, 2].map(|k| row[k] / COORD_SCALE),
            ori: if len > 1e-12 { ori.map(|x| x / len) } else { [0.0, 0.0, 1.0] },
        };
        if j == 0 {
            out.scene.tx[0] = a;
        } else {
            out.scene.rx[0] = a;
        }
    }
    if mask[nf + 2] {
        let row = &raw[(nf + 2) * RAW_WIDTH..];
        out.channel = Channel { power_db: norm.denormalize(row[0]), delay_spread_s: row[1] / DELAY_SCALE };
    }
    Ok(out)
}

/// Sinusoidal features of `t / T`.
pub fn time_features(t: usize, total: usize) -> [f64; TIME_FEATURES] {
    let u = t as f64 / total.max(1) as f64;
    let mut f = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * 2f64.powi(k as i32);
        f[2 * k] = (w * u).sin();
        f[2 * k + 1] = (w * u).cos();
    }
    f
}

/// Multivector and scalar token inputs built from (possibly noisy) rows.
fn raw_tokens(n_faces: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let kinds = token_kinds(n_faces);
    let base = SCALAR_CHANNELS + TokenKind::COUNT;
    let mut mv = Vec::with_capacity(kinds.len() * MV_CHANNELS * DIM);
    let mut s = Vec::with_capacity(kinds.len() * base);
    let unscale = |v: &[f64]| [v[0] / COORD_SCALE, v[1] / COORD_SCALE, v[2] / COORD_SCALE];
    let tx = unscale(&x[n_faces * RAW_WIDTH..]);
    let rx = unscale(&x[(n_faces + 1) * RAW_WIDTH..]);
    for (i, kind) in kinds.iter().enumerate() {
        let row = &x[i * RAW_WIDTH..(i + 1) * RAW_WIDTH];
        let mut m = [Multivector::ZERO; MV_CHANNELS];
        let mut sc = [0.0; SCALAR_CHANNELS];
        match kind {
            TokenKind::MeshFace => {
                let v = [unscale(&row[0..3]), unscale(&row[3..6]), unscale(&row[6..9])];
                let c = [0, 1, 2].map(|k| (v[0][k] + v[1][k] + v[2][k]) / 3.0);
                m[0] = embed_point(c);
                for j in 0..3 {
                    m[1 + j] = embed_point(v[j]);
                }
                let e1 = [0, 1, 2].map(|k| v[1][k] - v[0][k]);
                let e2 = [0, 1, 2].map(|k| v[2][k] - v[0][k]);
                let n = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > 1e-9 {
                    let d = (n[0] * v[0][0] + n[1] * v[0][1] + n[2] * v[0][2]) / len;
                    m[4] = embed_plane(n, d).expect("normal is nonzero");
                }
                sc.copy_from_slice(&row[9..9 + MATERIAL_SLOTS]);
            }
            TokenKind::Antenna => {
                m[0] = embed_point(unscale(&row[0..3]));
                m[1] = embed_direction([row[3], row[4], row[5]]);
                sc[if i == n_faces { TX_FLAG } else { RX_FLAG }] = 1.0;
            }
            TokenKind::Link => {
                m[0] = embed_point(tx);
                m[1] = embed_point(rx);
                m[2] = embed_direction([rx[0] - tx[0], rx[1] - tx[1], rx[2] - tx[2]]);
                sc[POWER_SLOT] = row[0];
                sc[DELAY_SLOT] = row[1];
            }
            TokenKind::Origin => {
                m[0] = embed_point([0.0; 3]);
                m[1] = embed_direction([0.0, 0.0, 1.0]);
            }
        }
        for c in &m {
            mv.extend_from_slice(c.components());
        }
        s.extend_from_slice(&sc);
        let mut onehot = [0.0; TokenKind::COUNT];
        onehot[kind.index()] = 1.0;
        s.extend_from_slice(&onehot);
    }
    (mv, s)
}

/// One denoiser input: noisy rows, generated-token mask and timestep.
#[derive(Clone, Debug)]
pub struct DenoiseItem {
    pub n_faces: usize,
    pub x: Vec<f64>,
    pub mask: Vec<bool>,
    pub t: usize,
}

fn denoise_batch(items: &[DenoiseItem], in_scalars: usize, total_steps: usize) -> Result<Batch> {
    let base = SCALAR_CHANNELS + TokenKind::COUNT;
    if in_scalars != base + 1 + TIME_FEATURES {
        return Err(Error::Configuration("model was not built for diffusion".into()));
    }
    let mut b = Batch { mv: Vec::new(), s: Vec::new(), segments: Vec::new(), link_rows: Vec::new(), in_scalars };
    for it in items {
        let n = it.n_faces + 4;
        if it.x.len() != n * RAW_WIDTH || it.mask.len() != n {
            return Err(Error::Argument("denoiser item has inconsistent sizes".into()));
        }
        let start = b.segments.last().map(|s| s.0 + s.1).unwrap_or(0);
        let (mv, s) = raw_tokens(it.n_faces, &it.x);
        b.mv.extend(mv);
        let tf = time_features(it.t, total_steps);
        for (row, &gen) in s.chunks(base).zip(&it.mask) {
            b.s.extend_from_slice(row);
            b.s.push(if gen { 1.0 } else { 0.0 });
            b.s.extend_from_slice(&tf);
        }
        b.link_rows.push(start + it.n_faces + 2);
        b.segments.push((start, n));
    }
    Ok(b)
}

/// Width of the per-token feature row read off the network outputs.
const FEATURES: usize = MV_CHANNELS * 6 + SCALAR_CHANNELS;

fn selection(kind: TokenKind) -> Vec<f64> {
    let mut s = vec![0.0; FEATURES * RAW_WIDTH];
    let mut set = |f: usize, slot: usize, v: f64| s[f * RAW_WIDTH + slot] = v;
    let mut point = |ch: usize, slot: usize| {
        set(ch * 6, slot, -COORD_SCALE);
        set(ch * 6 + 1, slot + 1, COORD_SCALE);
        set(ch * 6 + 2, slot + 2, -COORD_SCALE);
    };
    match kind {
        TokenKind::MeshFace => {
            for v in 0..3 {
                point(1 + v, 3 * v);
            }
            for j in 0..MATERIAL_SLOTS {
                s[(MV_CHANNELS * 6 + j) * RAW_WIDTH + 9 + j] = 1.0;
            }
        }
        TokenKind::Antenna => {
            point(0, 0);
            for k in 0..3 {
                s[(6 + 3 + k) * RAW_WIDTH + 3 + k] = 1.0;
            }
        }
        TokenKind::Link => {
            s[(MV_CHANNELS * 6 + POWER_SLOT) * RAW_WIDTH] = 1.0;
            s[(MV_CHANNELS * 6 + DELAY_SLOT) * RAW_WIDTH + 1] = 1.0;
        }
        TokenKind::Origin => {}
    }
    s
}

/// Predicted clean rows `[N, RAW_WIDTH]` for a batch of denoiser items.
fn predict_rows<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    items: &[DenoiseItem],
    total_steps: usize,
    trainable: bool,
) -> Result<(Var, ParamVars)> {
    let batch = denoise_batch(items, model.config.in_scalars(), total_steps)?;
    let pv = model.param_vars(tape, trainable);
    let input = batch.input(tape)?;
    let (out_mv, out_s) = model.forward(tape, &pv, &input)?;
    let n = batch.num_tokens();
    let comps = tape.gather(out_mv, &[E023, E013, E012, E01, E02, E03])?;
    let comps = tape.permute(comps, [1, 2, 0])?;
    let comps = tape.reshape(comps, vec![n, MV_CHANNELS * 6])?;
    let feats = tape.concat(&[comps, out_s], 1)?;
    let mut rows_by_kind: [Vec<usize>; 3] = Default::default();
    for (it, &(start, _)) in items.iter().zip(&batch.segments) {
        for (i, k) in token_kinds(it.n_faces).iter().enumerate() {
            match k {
                TokenKind::MeshFace => rows_by_kind[0].push(start + i),
                TokenKind::Antenna => rows_by_kind[1].push(start + i),
                TokenKind::Link => rows_by_kind[2].push(start + i),
                TokenKind::Origin => {}
            }
        }
    }
    let mut acc: Option<Var> = None;
    for (rows, kind) in rows_by_kind.iter().zip([TokenKind::MeshFace, TokenKind::Antenna, TokenKind::Link]) {
        if rows.is_empty() {
            continue;
        }
        let f = tape.gather(feats, rows)?;
        let sel = tape.constant(Tensor::from_f64(vec![FEATURES, RAW_WIDTH], &selection(kind))?);
        let p = tape.matmul(f, sel)?;
        let p = tape.scatter_add(p, rows, n)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, p)?,
            None => p,
        });
    }
    let pred = acc.ok_or_else(|| Error::Argument("no tokens to denoise".into()))?;
    Ok((pred, pv))
}

/// Denoiser predictions of the clean rows, one vector per item.
pub fn predict_x0(model: &Model, items: &[DenoiseItem], total_steps: usize) -> Result<Vec<Vec<f64>>> {
    check_model(model)?;
    let mut tape = Tape::<f32>::new();
    let (pred, _) = predict_rows(model, &mut tape, items, total_steps, false)?;
    let data = tape.data(pred);
    let mut out = Vec::with_capacity(items.len());
    let mut at = 0;
    for it in items {
        let len = (it.n_faces + 4) * RAW_WIDTH;
        out.push(data[at..at + len].iter().map(|v| v.f64()).collect());
        at += len;
    }
    Ok(out)
}

fn check_model(model: &Model) -> Result<()> {
    if model.config.task != Task::Diffusion {
        return Err(Error::Configuration("checkpoint is not a diffusion model".into()));
    }
    Ok(())
}

/// A training example noised at timestep `t` under a generation mask.
#[derive(Clone, Debug)]
pub struct NoisedExample {
    pub item: DenoiseItem,
    pub x0: Vec<f64>,
    /// Loss weight per entry: generated token and meaningful slot.
    pub weight: Vec<f64>,
}

/// Noises the generated entries of `x0`; conditioned entries keep their
/// clean values and unused slots stay zero.
pub fn noised_example(
    schedule: &Schedule,
    ex: &Example,
    norm: &PowerNorm,
    mask: &[bool],
    t: usize,
    noise: &[f64],
) -> Result<NoisedExample> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Argument("mask generates nothing".into()));
    }
    if mask.len() != ex.num_tokens() || *mask.last().unwrap() {
        return Err(Error::Argument("mask must cover every token and keep the origin conditioned".into()));
    }
    let (x0, valid) = ex.encode(norm);
    let xt_all = q_sample(schedule, &x0, t, noise)?;
    let mut x = x0.clone();
    let mut weight = vec![0.0; x0.len()];
    for (i, &gen) in mask.iter().enumerate() {
        if !gen {
            continue;
        }
        for s in 0..RAW_WIDTH {
            let k = i * RAW_WIDTH + s;
            if valid[k] {
                x[k] = xt_all[k];
                weight[k] = 1.0;
            }
        }
    }
    Ok(NoisedExample { item: DenoiseItem { n_faces: ex.scene.faces.len(), x, mask: mask.to_vec(), t }, x0, weight })
}

/// Squared error of the denoiser averaged over each example's generated
/// entries, then over the batch, with its gradient.
pub fn masked_loss(model: &Model, schedule: &Schedule, batch: &[NoisedExample]) -> Result<(f64, Vec<f64>)> {
    check_model(model)?;
    let items: Vec<DenoiseItem> = batch.iter().map(|b| b.item.clone()).collect();
    let x0: Vec<f64> = batch.iter().flat_map(|b| b.x0.iter().copied()).collect();
    let mut w = Vec::with_capacity(x0.len());
    for b in batch {
        let count: f64 = b.weight.iter().sum();
        if count == 0.0 {
            return Err(Error::Argument("mask generates nothing".into()));
        }
        w.extend(b.weight.iter().map(|x| x / (count * batch.len() as f64)));
    }
    let n = x0.len() / RAW_WIDTH;
    let mut tape = Tape::<f32>::new();
    let (pred, pv) = predict_rows(model, &mut tape, &items, schedule.steps(), true)?;
    let target = tape.constant(Tensor::from_f64(vec![n, RAW_WIDTH], &x0)?);
    let wv = tape.constant(Tensor::from_f64(vec![n, RAW_WIDTH], &w)?);
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.mul(sq, wv)?;
    let loss = tape.sum(weighted);
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    Ok((value, model.flat_gradient(&pv, &grads)))
}

pub fn sample_mask<R: Rng + ?Sized>(probs: &[f64; 4], rng: &mut R) -> MaskKind {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, k) in probs.iter().zip(MaskKind::ALL) {
        acc += p;
        if u < acc {
            return k;
        }
    }
    MaskKind::Mesh
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, batch_size: 64, lr: 1e-3, clip_norm: 100.0, log_every: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLogRow {
    pub step: usize,
    pub loss: f64,
}

pub const DIFFUSION_LOG_HEADER: [&str; 2] = ["step", "loss"];

/// Example of dataset link `i`.
pub fn dataset_example(data: &Dataset, i: usize) -> Result<Example> {
    Example::new(data.link_scene(i)?, data.links[i].channel)
}

/// Trains a diffusion denoiser on the given links. The model's power
/// normalization is refitted to them.
pub fn train_diffusion(
    model: &mut Model,
    dcfg: &DiffusionConfig,
    data: &Dataset,
    links: &[usize],
    cfg: &DiffusionTrainConfig,
    mut on_log: impl FnMut(&DiffusionLogRow),
) -> Result<Vec<DiffusionLogRow>> {
    check_model(model)?;
    if links.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Argument("diffusion training needs links, steps and a batch size".into()));
    }
    let schedule = Schedule::new(dcfg)?;
    let powers: Vec<f64> = links.iter().map(|&i| data.links[i].channel.power_db).collect();
    model.norm = PowerNorm::fit(&powers)?;
    let examples: Vec<Example> = links.iter().map(|&i| dataset_example(data, i)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(model.num_params());
    let mut log = Vec::new();
    let mut acc = (0.0, 0usize);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            let e = rng.gen_range(0..examples.len());
            let ex = &examples[e];
            let mask = ex.mask(sample_mask(&dcfg.mask_probs, &mut rng));
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let t = rng.gen_range(1..=schedule.steps());
            let noise = normals(ex.num_tokens() * RAW_WIDTH, &mut rng);
            batch.push(noised_example(&schedule, ex, &model.norm, &mask, t, &noise)?);
            picked.push(links[e]);
        }
        let (loss, mut grad) = masked_loss(model, &schedule, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite diffusion loss at step {step}; batch links {picked:?}")));
        }
        clip_gradient(&mut grad, cfg.clip_norm);
        adam.step(&mut model.params, &grad, cosine_lr(cfg.lr, step, cfg.steps));
        acc.0 += loss;
        acc.1 += 1;
        if step + 1 == cfg.steps || (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            let row = DiffusionLogRow { step: step + 1, loss: acc.0 / acc.1 as f64 };
            on_log(&row);
            log.push(row);
            acc = (0.0, 0);
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            _ => Err(Error::Argument(format!("unknown sampler {s:?}"))),
        }
    }
}

/// Timesteps visited by the DDIM sampler, descending, ending at 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut ts: Vec<usize> = (0..=steps).map(|i| (i * total + steps / 2) / steps).collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Draws `n` joint samples of the generated tokens given the conditioned
/// ones. Chains run as one batch; each chain has its own noise stream.
pub fn sample(
    model: &Model,
    dcfg: &DiffusionConfig,
    conditioning: &Example,
    mask: &[bool],
    sampler: Sampler,
    n: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    check_model(model)?;
    let schedule = Schedule::new(dcfg)?;
    if mask.len() != conditioning.num_tokens() || *mask.last().unwrap_or(&true) {
        return Err(Error::Argument("mask must cover every token and keep the origin conditioned".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Argument("mask generates nothing".into()));
    }
    let (x0, valid) = conditioning.encode(&model.norm);
    let free: Vec<bool> = (0..x0.len()).map(|k| mask[k / RAW_WIDTH] && valid[k]).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(c as u64);
            r
        })
        .collect();
    let clamp = |x: &mut Vec<f64>| {
        for k in 0..x.len() {
            if !free[k] {
                x[k] = x0[k];
            }
        }
    };
    let mut xs: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| {
            let mut x = normals(x0.len(), r);
            clamp(&mut x);
            x
        })
        .collect();
    let nf = conditioning.scene.faces.len();
    let total = schedule.steps();
    let times: Vec<usize> = match sampler {
        Sampler::Ddpm => (0..=total).rev().collect(),
        Sampler::Ddim => ddim_timesteps(total, dcfg.ddim_steps),
    };
    for w in times.windows(2) {
        let (t, prev) = (w[0], w[1]);
        let items: Vec<DenoiseItem> =
            xs.iter().map(|x| DenoiseItem { n_faces: nf, x: x.clone(), mask: mask.to_vec(), t }).collect();
        let preds = predict_x0(model, &items, total)?;
        for ((x, x0_hat), r) in xs.iter_mut().zip(&preds).zip(&mut rngs) {
            match sampler {
                Sampler::Ddpm => {
                    let (c0, ct, var) = schedule.posterior(t);
                    let z = normals(x.len(), r);
                    for k in 0..x.len() {
                        let mean = c0 * x0_hat[k] + ct * x[k];
                        x[k] = if t > 1 { mean + var.sqrt() * z[k] } else { mean };
                    }
                }
                Sampler::Ddim => {
                    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
                    for k in 0..x.len() {
                        let eps = (x[k] - ab.sqrt() * x0_hat[k]) / (1.0 - ab).sqrt();
                        x[k] = ab_prev.sqrt() * x0_hat[k] + (1.0 - ab_prev).sqrt() * eps;
                    }
                }
            }
            clamp(x);
        }
    }
    xs.iter().map(|x| decode(x, mask, conditioning, &model.norm)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlbReport {
    /// Generated values the bound is taken over.
    pub dims: usize,
    pub prior_nats: f64,
    /// Sum of the `L_{t−1}` terms for `t = 2..T`.
    pub diffusion_nats: f64,
    pub reconstruction_nats: f64,
    pub total_nats: f64,
    pub nats_per_dim: f64,
}

/// Timesteps evaluated per denoiser batch in [`vlb`].
const VLB_CHUNK: usize = 50;

/// Single-sample estimate of the variational bound on `−log p(x0)` over the
/// generated entries. `L_0` is a Gaussian log-likelihood with variance `β_1`.
pub fn vlb(model: &Model, dcfg: &DiffusionConfig, ex: &Example, mask: &[bool], seed: u64) -> Result<VlbReport> {
    check_model(model)?;
    let schedule = Schedule::new(dcfg)?;
    let (x0, valid) = ex.encode(&model.norm);
    let free: Vec<usize> = (0..x0.len()).filter(|&k| mask[k / RAW_WIDTH] && valid[k]).collect();
    if free.is_empty() {
        return Err(Error::Argument("mask generates nothing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0_free: Vec<f64> = free.iter().map(|&k| x0[k]).collect();
    let prior: f64 = prior_kl(&schedule, &x0_free).iter().sum();
    let total = schedule.steps();
    let mut noised = Vec::with_capacity(total);
    for t in 1..=total {
        let noise = normals(x0.len(), &mut rng);
        noised.push(noised_example(&schedule, ex, &model.norm, mask, t, &noise)?);
    }
    let mut diffusion = 0.0;
    let mut recon = 0.0;
    for chunk in noised.chunks(VLB_CHUNK) {
        let items: Vec<DenoiseItem> = chunk.iter().map(|c| c.item.clone()).collect();
        let preds = predict_x0(model, &items, total)?;
        for (c, p) in chunk.iter().zip(&preds) {
            let sq: f64 = free.iter().map(|&k| (x0[k] - p[k]).powi(2)).sum();
            let t = c.item.t;
            if t == 1 {
                let b1 = schedule.beta(1);
                recon += 0.5 * free.len() as f64 * (2.0 * std::f64::consts::PI * b1).ln() + sq / (2.0 * b1);
            } else {
                let (c0, _, var) = schedule.posterior(t);
                diffusion += c0 * c0 * sq / (2.0 * var);
            }
        }
    }
    let total_nats = prior + diffusion + recon;
    Ok(VlbReport {
        dims: free.len(),
        prior_nats: prior,
        diffusion_nats: diffusion,
        reconstruction_nats: recon,
        total_nats,
        nats_per_dim: total_nats / free.len() as f64,
    })
}

/// Energy distance between two point clouds.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += dist(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

/// Permutation p-value of the energy distance between `a` and `b`.
pub fn permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> (f64, f64) {
    use rand::seq::SliceRandom;
    let observed = energy_distance(a, b);
    let mut pool: Vec<Vec<f64>> = a.iter().chain(b).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0;
    for _ in 0..permutations {
        pool.shuffle(&mut rng);
        if energy_distance(&pool[..a.len()], &pool[a.len()..]) >= observed {
            exceed += 1;
        }
    }
    (observed, (exceed + 1) as f64 / (permutations + 1) as f64)
}
