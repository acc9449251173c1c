//! The equivariant geometric-algebra transformer and a plain transformer
//! baseline over the same tokens.
//!
//! Both networks consume a batch of token sequences laid out back to back:
//! multivector inputs `[16, N, 5]` (component-major, see [`Tape::equi_linear`]),
//! scalar inputs `[N, S_in]`, the segment
//! `(start, len)` of every sequence, and a per-token reference value (the mean
//! homogeneous coordinate of the sequence's input points) that the join uses
//! to stay equivariant under reflections. Outputs are per token.
//!
//! Parameters live in one flat `f32` buffer addressed through a named layout,
//! so that optimizers and checkpoints see a single vector.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var, EQUI_COEFFS};
use crate::error::{Error, Result};
use crate::ga::{Versor, DIM, E123, NON_DEGENERATE};
use crate::tokenizer::{PowerNorm, TokenKind, TokenSequence, MV_CHANNELS, SCALAR_CHANNELS};

/// Sinusoidal features of the diffusion timestep appended to the scalar inputs.
pub const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gatr,
    Transformer,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gatr" => Ok(Variant::Gatr),
            "transformer" => Ok(Variant::Transformer),
            _ => Err(Error::Argument(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Predicts normalized power at the link token.
    Predictive,
    /// Predicts clean token values from noised ones.
    Diffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    pub blocks: usize,
    pub mv_channels: usize,
    pub scalar_channels: usize,
    pub heads: usize,
    /// Hidden width of the transformer baseline.
    pub transformer_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gatr,
            task: Task::Predictive,
            blocks: 8,
            mv_channels: 16,
            scalar_channels: 32,
            heads: 8,
            transformer_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        match self.variant {
            Variant::Gatr => {
                if self.mv_channels == 0 || self.mv_channels % self.heads != 0 || self.scalar_channels % self.heads != 0 {
                    return bad(format!(
                        "mv_channels {} and scalar_channels {} must be positive multiples of heads {}",
                        self.mv_channels, self.scalar_channels, self.heads
                    ));
                }
                if self.mv_channels % 2 != 0 {
                    return bad("mv_channels must be even".into());
                }
            }
            Variant::Transformer => {
                if self.transformer_width == 0 || self.transformer_width % self.heads != 0 {
                    return bad(format!(
                        "transformer_width {} must be a positive multiple of heads {}",
                        self.transformer_width, self.heads
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn in_mv(&self) -> usize {
        MV_CHANNELS
    }

    pub fn in_scalars(&self) -> usize {
        let base = SCALAR_CHANNELS + TokenKind::COUNT;
        match self.task {
            Task::Predictive => base,
            Task::Diffusion => base + 1 + TIME_FEATURES,
        }
    }

    pub fn out_mv(&self) -> usize {
        match self.task {
            Task::Predictive => 1,
            Task::Diffusion => MV_CHANNELS,
        }
    }

    pub fn out_scalars(&self) -> usize {
        match self.task {
            Task::Predictive => 1,
            Task::Diffusion => SCALAR_CHANNELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zero,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let len: usize = shape.iter().product();
        if len == 0 {
            return;
        }
        self.entries.push(ParamEntry { name, shape, offset: self.total });
        self.inits.push(init);
        self.total += len;
    }

    /// Equivariant linear layer `(ci mv, si scalars) → (co mv, so scalars)`.
    fn equi(&mut self, prefix: &str, ci: usize, si: usize, co: usize, so: usize, gain: f64) {
        let fan = (ci + si).max(1) as f64;
        self.add(format!("{prefix}.w"), vec![co, ci, EQUI_COEFFS], Init::Normal(gain / fan.sqrt()));
        self.add(format!("{prefix}.s2mv"), vec![si, co], Init::Normal(gain / fan.sqrt()));
        self.add(format!("{prefix}.mv2s"), vec![ci, so], Init::Normal(gain / fan.sqrt()));
        self.add(format!("{prefix}.ss"), vec![si, so], Init::Normal(gain / fan.sqrt()));
        self.add(format!("{prefix}.bmv"), vec![co], Init::Zero);
        self.add(format!("{prefix}.bs"), vec![so], Init::Zero);
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize, gain: f64) {
        self.add(format!("{prefix}.w"), vec![i, o], Init::Normal(gain / (i.max(1) as f64).sqrt()));
        self.add(format!("{prefix}.b"), vec![o], Init::Zero);
    }
}

fn build_layout(cfg: &ModelConfig) -> LayoutBuilder {
    let mut b = LayoutBuilder::default();
    let residual_gain = 1.0 / (2.0 * cfg.blocks.max(1) as f64).sqrt();
    match cfg.variant {
        Variant::Gatr => {
            let (c, s, h) = (cfg.mv_channels, cfg.scalar_channels, cfg.heads);
            b.equi("in", cfg.in_mv(), cfg.in_scalars(), c, s, 1.0);
            for k in 0..cfg.blocks {
                b.equi(&format!("b{k}.q"), c, s, c, s, 1.0);
                b.equi(&format!("b{k}.k"), c, s, c / h, s / h, 1.0);
                b.equi(&format!("b{k}.v"), c, s, c / h, s / h, 1.0);
                b.equi(&format!("b{k}.o"), c, s, c, s, residual_gain);
                b.equi(&format!("b{k}.proj"), c, s, 2 * c, s, 1.0);
                b.equi(&format!("b{k}.mix"), c, s, c, s, 1.0);
                b.equi(&format!("b{k}.out"), c, s, c, s, residual_gain);
            }
            b.equi("out", c, s, cfg.out_mv(), cfg.out_scalars(), 1.0);
        }
        Variant::Transformer => {
            let (w, h) = (cfg.transformer_width, cfg.heads);
            b.linear("in", cfg.in_mv() * DIM + cfg.in_scalars(), w, 1.0);
            for k in 0..cfg.blocks {
                b.linear(&format!("b{k}.q"), w, w, 1.0);
                b.linear(&format!("b{k}.k"), w, w / h, 1.0);
                b.linear(&format!("b{k}.v"), w, w / h, 1.0);
                b.linear(&format!("b{k}.o"), w, w, residual_gain);
                b.linear(&format!("b{k}.fc1"), w, 2 * w, 1.0);
                b.linear(&format!("b{k}.fc2"), 2 * w, w, residual_gain);
            }
            b.linear("out", w, cfg.out_mv() * DIM + cfg.out_scalars(), 1.0);
        }
    }
    b
}

/// Network parameters together with their configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Standardization of the power targets the model was trained on.
    pub norm: PowerNorm,
    pub params: Vec<f32>,
    layout: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Parameter tensors registered on a tape, in layout order.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Scale applied to the `e0` coefficients of equivariant layers at initialization.
const E0_INIT_SCALE: f64 = 0.1;

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let b = build_layout(&model.config);
        for (entry, init) in b.entries.iter().zip(&b.inits) {
            if let Init::Normal(std) = *init {
                let normal = Normal::new(0.0, std).expect("finite std");
                let is_equi = entry.shape.len() == 3 && entry.shape[2] == EQUI_COEFFS;
                for (k, p) in model.params[entry.offset..entry.offset + entry.len()].iter_mut().enumerate() {
                    let mut x: f64 = normal.sample(rng);
                    if is_equi && k % EQUI_COEFFS >= 5 {
                        x *= E0_INIT_SCALE;
                    }
                    *p = x as f32;
                }
            }
        }
        Ok(model)
    }

    /// A model with all parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = build_layout(&config);
        let index = b.entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Ok(Self { params: vec![0.0; b.total], layout: b.entries, index, config, norm: PowerNorm::default() })
    }

    /// Rebuilds a model from stored parameters; the count must match the config.
    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match the configuration ({})",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    /// Registers every parameter tensor on `tape`.
    pub fn param_vars<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .layout
            .iter()
            .map(|e| {
                let data = self.params[e.offset..e.offset + e.len()].iter().map(|&x| T::of(x as f64)).collect();
                let t = Tensor { shape: e.shape.clone(), data };
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Flattens per-tensor gradients into one vector aligned with `params`.
    pub fn flat_gradient<T: Real>(&self, pv: &ParamVars, grads: &crate::autodiff::Gradients<T>) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        for (e, &v) in self.layout.iter().zip(&pv.vars) {
            if let Some(g) = grads.get(v) {
                for (o, x) in out[e.offset..e.offset + e.len()].iter_mut().zip(g) {
                    *o = x.f64();
                }
            }
        }
        out
    }

    fn p(&self, pv: &ParamVars, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| pv.vars[i])
    }

    /// Runs the network. `mv: [16, N, 5]`, `s: [N, S_in]`, `refs: [N]`.
    /// Returns `([16, N, out_mv], [N, out_scalars])`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, input: &NetInput) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = input.segments.iter().map(|s| s.1).sum::<usize>();
        let (smv, ss) = (tape.shape(input.mv).to_vec(), tape.shape(input.s).to_vec());
        if smv != [DIM, n, cfg.in_mv()] || ss != [n, cfg.in_scalars()] {
            return Err(Error::Configuration(format!(
                "input shapes {smv:?} and {ss:?} do not match the model ({} tokens, {} mv, {} scalars)",
                n,
                cfg.in_mv(),
                cfg.in_scalars()
            )));
        }
        match cfg.variant {
            Variant::Gatr => self.forward_gatr(tape, pv, input),
            Variant::Transformer => self.forward_transformer(tape, pv, input),
        }
    }

    fn equi<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, prefix: &str, x_mv: Var, x_s: Var) -> Result<(Var, Var)> {
        let w = self.p(pv, &format!("{prefix}.w")).expect("layer weights");
        let (n, ci) = (tape.shape(x_mv)[1], tape.shape(x_mv)[2]);
        let co = tape.shape(w)[0];
        let mut y_mv = tape.equi_linear(x_mv, w)?;
        let mut scalar_part: Option<Var> = None;
        if let Some(s2mv) = self.p(pv, &format!("{prefix}.s2mv")) {
            scalar_part = Some(tape.matmul(x_s, s2mv)?);
        }
        if let Some(b) = self.p(pv, &format!("{prefix}.bmv")) {
            scalar_part = Some(match scalar_part {
                Some(sp) => tape.add(sp, b)?,
                None => {
                    let z = tape.constant(Tensor::zeros(vec![n, co]));
                    tape.add(z, b)?
                }
            });
        }
        if let Some(sp) = scalar_part {
            let sp = tape.reshape(sp, vec![1, n, co])?;
            let scalar = tape.slice(y_mv, 0, 0, 1)?;
            let scalar = tape.add(scalar, sp)?;
            let rest = tape.slice(y_mv, 0, 1, DIM - 1)?;
            y_mv = tape.concat(&[scalar, rest], 0)?;
        }
        let mut y_s: Option<Var> = None;
        if let Some(ss) = self.p(pv, &format!("{prefix}.ss")) {
            y_s = Some(tape.matmul(x_s, ss)?);
        }
        if let Some(mv2s) = self.p(pv, &format!("{prefix}.mv2s")) {
            let sc = tape.slice(x_mv, 0, 0, 1)?;
            let sc = tape.reshape(sc, vec![n, ci])?;
            let t = tape.matmul(sc, mv2s)?;
            y_s = Some(match y_s {
                Some(y) => tape.add(y, t)?,
                None => t,
            });
        }
        let y_s = match (y_s, self.p(pv, &format!("{prefix}.bs"))) {
            (Some(y), Some(b)) => tape.add(y, b)?,
            (Some(y), None) => y,
            (None, _) => tape.constant(Tensor::zeros(vec![n, 0])),
        };
        Ok((y_mv, y_s))
    }

    fn forward_gatr<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, input: &NetInput) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (c, s, h) = (cfg.mv_channels, cfg.scalar_channels, cfg.heads);
        let n = tape.shape(input.mv)[1];
        let refs = input.refs(tape)?;
        let (mut x_mv, mut x_s) = self.equi(tape, pv, "in", input.mv, input.s)?;
        for b in 0..cfg.blocks {
            // attention
            let h_mv = tape.mv_norm(x_mv)?;
            let h_s = tape.layer_norm(x_s)?;
            let (q_mv, q_s) = self.equi(tape, pv, &format!("b{b}.q"), h_mv, h_s)?;
            let (k_mv, k_s) = self.equi(tape, pv, &format!("b{b}.k"), h_mv, h_s)?;
            let (v_mv, v_s) = self.equi(tape, pv, &format!("b{b}.v"), h_mv, h_s)?;
            let (ch, sh) = (c / h, s / h);
            let qi = tape.gather(q_mv, &NON_DEGENERATE)?;
            let qi = tape.permute(qi, [1, 2, 0])?;
            let qi = tape.reshape(qi, vec![n, h, ch * NON_DEGENERATE.len()])?;
            let qs = tape.reshape(q_s, vec![n, h, sh])?;
            let q = tape.concat(&[qi, qs], 2)?;
            let ki = tape.gather(k_mv, &NON_DEGENERATE)?;
            let ki = tape.permute(ki, [1, 2, 0])?;
            let ki = tape.reshape(ki, vec![n, ch * NON_DEGENERATE.len()])?;
            let k = tape.concat(&[ki, k_s], 1)?;
            let vm = tape.permute(v_mv, [1, 2, 0])?;
            let vm = tape.reshape(vm, vec![n, ch * DIM])?;
            let v = tape.concat(&[vm, v_s], 1)?;
            let a = tape.attention(q, k, v, &input.segments)?;
            let a_mv = tape.slice(a, 2, 0, ch * DIM)?;
            let a_mv = tape.reshape(a_mv, vec![n, c, DIM])?;
            let a_mv = tape.permute(a_mv, [2, 0, 1])?;
            let a_s = tape.slice(a, 2, ch * DIM, sh)?;
            let a_s = tape.reshape(a_s, vec![n, s])?;
            let (o_mv, o_s) = self.equi(tape, pv, &format!("b{b}.o"), a_mv, a_s)?;
            x_mv = tape.add(x_mv, o_mv)?;
            x_s = tape.add(x_s, o_s)?;

            // geometric MLP
            let h_mv = tape.mv_norm(x_mv)?;
            let h_s = tape.layer_norm(x_s)?;
            let (p_mv, p_s) = self.equi(tape, pv, &format!("b{b}.proj"), h_mv, h_s)?;
            let half = c / 2;
            let gl = tape.slice(p_mv, 2, 0, half)?;
            let gr = tape.slice(p_mv, 2, half, half)?;
            let jl = tape.slice(p_mv, 2, 2 * half, half)?;
            let jr = tape.slice(p_mv, 2, 3 * half, half)?;
            let bil = geometric_bilinear(tape, gl, gr, jl, jr, refs)?;
            let (m_mv, m_s) = self.equi(tape, pv, &format!("b{b}.mix"), bil, p_s)?;
            let m_mv = tape.mv_gate(m_mv)?;
            let m_s = tape.gelu(m_s);
            let (o_mv, o_s) = self.equi(tape, pv, &format!("b{b}.out"), m_mv, m_s)?;
            x_mv = tape.add(x_mv, o_mv)?;
            x_s = tape.add(x_s, o_s)?;
        }
        self.equi(tape, pv, "out", x_mv, x_s)
    }

    fn dense<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(pv, &format!("{prefix}.w")).expect("layer weights");
        let y = tape.matmul(x, w)?;
        match self.p(pv, &format!("{prefix}.b")) {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    fn forward_transformer<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, input: &NetInput) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (w, h) = (cfg.transformer_width, cfg.heads);
        let n = tape.shape(input.mv)[1];
        let flat = tape.permute(input.mv, [1, 2, 0])?;
        let flat = tape.reshape(flat, vec![n, cfg.in_mv() * DIM])?;
        let feat = tape.concat(&[flat, input.s], 1)?;
        let mut x = self.dense(tape, pv, "in", feat)?;
        for b in 0..cfg.blocks {
            let hn = tape.layer_norm(x)?;
            let q = self.dense(tape, pv, &format!("b{b}.q"), hn)?;
            let q = tape.reshape(q, vec![n, h, w / h])?;
            let k = self.dense(tape, pv, &format!("b{b}.k"), hn)?;
            let v = self.dense(tape, pv, &format!("b{b}.v"), hn)?;
            let a = tape.attention(q, k, v, &input.segments)?;
            let a = tape.reshape(a, vec![n, w])?;
            let o = self.dense(tape, pv, &format!("b{b}.o"), a)?;
            x = tape.add(x, o)?;
            let hn = tape.layer_norm(x)?;
            let f = self.dense(tape, pv, &format!("b{b}.fc1"), hn)?;
            let f = tape.gelu(f);
            let f = self.dense(tape, pv, &format!("b{b}.fc2"), f)?;
            x = tape.add(x, f)?;
        }
        let hn = tape.layer_norm(x)?;
        let y = self.dense(tape, pv, "out", hn)?;
        let mvw = cfg.out_mv() * DIM;
        let y_mv = tape.slice(y, 1, 0, mvw)?;
        let y_mv = tape.reshape(y_mv, vec![n, cfg.out_mv(), DIM])?;
        let y_mv = tape.permute(y_mv, [2, 0, 1])?;
        let y_s = tape.slice(y, 1, mvw, cfg.out_scalars())?;
        Ok((y_mv, y_s))
    }

    /// Normalized power predictions for a batch of predictive sequences.
    ///
    /// The equivariant variant averages the prediction over the sequence and
    /// its grade involution, which makes the output exactly invariant under
    /// reflections of the scene as well as rotations and translations.
    pub fn predict_normalized(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        if self.config.task != Task::Predictive {
            return Err(Error::Configuration("model was not trained for power prediction".into()));
        }
        let symmetrize = self.config.variant == Variant::Gatr;
        let mut batch = Batch::from_sequences(seqs, self.config.in_scalars())?;
        if symmetrize {
            batch = batch.with_involution();
        }
        let mut tape = Tape::<f32>::new();
        let pv = self.param_vars(&mut tape, false);
        let input = batch.input(&mut tape)?;
        let (_, out_s) = self.forward(&mut tape, &pv, &input)?;
        let y = tape.data(out_s);
        let width = self.config.out_scalars();
        let preds: Vec<f64> = batch.link_rows.iter().map(|&r| y[r * width] as f64).collect();
        Ok(if symmetrize {
            let b = seqs.len();
            (0..b).map(|i| 0.5 * (preds[i] + preds[b + i])).collect()
        } else {
            preds
        })
    }

    /// Predicted received power in dB.
    pub fn predict_power_db(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        Ok(self.predict_normalized(seqs)?.into_iter().map(|y| self.norm.denormalize(y)).collect())
    }
}

/// Geometric products `x_gp · y_gp` concatenated channel-wise with the joins
/// `x_join ∨ y_join` scaled by the per-token reference values `refs`.
pub fn geometric_bilinear<T: Real>(tape: &mut Tape<T>, x_gp: Var, y_gp: Var, x_join: Var, y_join: Var, refs: Var) -> Result<Var> {
    if tape.data(refs).iter().any(|r| r.abs() < T::of(1e-12)) {
        return Err(Error::Argument("join reference has zero homogeneous coordinate".into()));
    }
    let gp = tape.geometric_product(x_gp, y_gp)?;
    let jn = tape.join(x_join, y_join, refs)?;
    tape.concat(&[gp, jn], 2)
}

/// Per-sequence reference values: mean `e123` component over all tokens and
/// channels of each sequence, repeated per token.
pub fn reference_values(mv: &[f64], segments: &[(usize, usize)], channels: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &(start, len) in segments {
        let mut acc = 0.0;
        for t in start..start + len {
            for c in 0..channels {
                acc += mv[(t * channels + c) * DIM + E123];
            }
        }
        let r = acc / (len * channels) as f64;
        if r.abs() < 1e-12 {
            return Err(Error::Argument("reference point has zero homogeneous coordinate".into()));
        }
        out.extend(std::iter::repeat(r).take(len));
    }
    Ok(out)
}

/// Network inputs registered on a tape.
pub struct NetInput {
    pub mv: Var,
    pub s: Var,
    pub refs: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
}

impl NetInput {
    fn refs<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let n = self.refs.len();
        Ok(tape.constant(Tensor::from_f64(vec![n], &self.refs)?))
    }
}

/// Flattened inputs of several sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub mv: Vec<f64>,
    pub s: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
    pub link_rows: Vec<usize>,
    pub in_scalars: usize,
}

impl Batch {
    /// Concatenates sequences. Scalar inputs are the token scalars and kind
    /// one-hot, padded with zeros up to `in_scalars`.
    pub fn from_sequences(seqs: &[TokenSequence], in_scalars: usize) -> Result<Self> {
        let mut b = Batch { mv: Vec::new(), s: Vec::new(), segments: Vec::new(), link_rows: Vec::new(), in_scalars };
        let base = SCALAR_CHANNELS + TokenKind::COUNT;
        if in_scalars < base {
            return Err(Error::Configuration(format!("model takes {in_scalars} scalars, tokens carry {base}")));
        }
        for seq in seqs {
            let start = b.segments.last().map(|s| s.0 + s.1).unwrap_or(0);
            if seq.is_empty() {
                return Err(Error::Argument("empty token sequence".into()));
            }
            b.mv.extend(seq.mv_array());
            for row in seq.scalar_array().chunks(base) {
                b.s.extend_from_slice(row);
                b.s.extend(std::iter::repeat(0.0).take(in_scalars - base));
            }
            b.link_rows.push(start + seq.tokens.iter().position(|t| t.kind == TokenKind::Link).unwrap_or(0));
            b.segments.push((start, seq.len()));
        }
        Ok(b)
    }

    pub fn num_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    /// Appends the grade-involuted copy of every sequence.
    pub fn with_involution(&self) -> Batch {
        let mut out = self.clone();
        let n = self.num_tokens();
        let mut inv = self.mv.clone();
        involute_in_place(&mut inv);
        out.mv.extend(inv);
        out.s.extend_from_slice(&self.s);
        out.segments.extend(self.segments.iter().map(|&(s, l)| (s + n, l)));
        out.link_rows.extend(self.link_rows.iter().map(|&r| r + n));
        out
    }

    /// Registers the batch as constants on `tape`.
    pub fn input<T: Real>(&self, tape: &mut Tape<T>) -> Result<NetInput> {
        let n = self.num_tokens();
        let mv = tape.constant(Tensor::from_f64(vec![DIM, n, MV_CHANNELS], &component_major(&self.mv))?);
        let s = tape.constant(Tensor::from_f64(vec![n, self.in_scalars], &self.s)?);
        Ok(NetInput { mv, s, refs: reference_values(&self.mv, &self.segments, MV_CHANNELS)?, segments: self.segments.clone() })
    }
}

/// Reorders a token-major `[N, C, 16]` buffer into `[16, N, C]`.
pub fn component_major(mv: &[f64]) -> Vec<f64> {
    let rows = mv.len() / DIM;
    let mut out = vec![0.0; mv.len()];
    for (r, x) in mv.chunks_exact(DIM).enumerate() {
        for (i, &v) in x.iter().enumerate() {
            out[i * rows + r] = v;
        }
    }
    out
}

/// Reorders a component-major `[16, N, C]` buffer into `[N, C, 16]`.
pub fn token_major(mv: &[f64]) -> Vec<f64> {
    let rows = mv.len() / DIM;
    let mut out = vec![0.0; mv.len()];
    for (i, comp) in mv.chunks_exact(rows.max(1)).enumerate() {
        for (r, &v) in comp.iter().enumerate() {
            out[r * DIM + i] = v;
        }
    }
    out
}

/// Grade involution of a flat buffer of multivectors.
pub fn involute_in_place(mv: &mut [f64]) {
    for (i, x) in mv.iter_mut().enumerate() {
        if crate::ga::GRADES[i % DIM] % 2 == 1 {
            *x = -*x;
        }
    }
}

/// Applies a versor to a flat buffer of multivectors.
pub fn transform_in_place(mv: &mut [f64], g: &Versor) {
    for chunk in mv.chunks_mut(DIM) {
        let mut m = crate::ga::Multivector::ZERO;
        m.0.copy_from_slice(chunk);
        chunk.copy_from_slice(g.sandwich(&m).components());
    }
}
