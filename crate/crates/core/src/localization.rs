//! Receiver localization by gradient descent on the squared mismatch between
//! surrogate-predicted and measured received power.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::ga::{E01, E012, E013, E02, E023, E03};
use crate::io::{scene_rng, Measurement};
use crate::net::{component_major, Batch, Model, NetInput, Task, Variant};
use crate::raysim::{friis_gain, TraceOptions, Tracer};
use crate::scene::{generate_scene, Antenna, GeneratorSpec, Scene, Vec3};
use crate::tokenizer::{tokenize_link, Mode, TokenKind, TokenSequence, RX_FLAG};
use crate::training::{cosine_lr, Adam};

/// Surrogate power with its derivatives for one transmitter/receiver pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerEval {
    pub power_db: f64,
    pub d_pos: [f64; 3],
    pub d_ori: [f64; 3],
}

/// A differentiable model of received power as a function of the receiver.
pub trait PowerSurrogate: Sync {
    /// Power from each transmitter in `tx` at each receiver in `rx`, indexed
    /// `[receiver][transmitter]`.
    fn evaluate(&self, tx: &[usize], rx: &[Antenna]) -> Result<Vec<Vec<PowerEval>>>;
}

/// `h(x) = −‖x − x*‖²` for every transmitter.
pub struct QuadraticSurrogate {
    pub center: [f64; 3],
}

impl PowerSurrogate for QuadraticSurrogate {
    fn evaluate(&self, tx: &[usize], rx: &[Antenna]) -> Result<Vec<Vec<PowerEval>>> {
        Ok(rx
            .iter()
            .map(|a| {
                let d = [0, 1, 2].map(|k| a.pos[k] - self.center[k]);
                let e = PowerEval {
                    power_db: -(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]),
                    d_pos: d.map(|x| -2.0 * x),
                    d_ori: [0.0; 3],
                };
                vec![e; tx.len()]
            })
            .collect())
    }
}

/// Line-of-sight Friis power from each transmitter, ignoring the mesh.
pub struct FreeSpaceSurrogate {
    pub tx: Vec<[f64; 3]>,
    pub frequency_hz: f64,
}

impl FreeSpaceSurrogate {
    pub fn for_scene(scene: &Scene) -> Self {
        Self { tx: scene.tx.iter().map(|a| a.pos).collect(), frequency_hz: scene.frequency_hz }
    }
}

impl PowerSurrogate for FreeSpaceSurrogate {
    fn evaluate(&self, tx: &[usize], rx: &[Antenna]) -> Result<Vec<Vec<PowerEval>>> {
        rx.iter()
            .map(|a| {
                tx.iter()
                    .map(|&t| {
                        let p = self.tx.get(t).ok_or_else(|| Error::Argument(format!("tx index {t} out of range")))?;
                        let d = [0, 1, 2].map(|k| a.pos[k] - p[k]);
                        let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).max(1e-12);
                        let c = -20.0 / std::f64::consts::LN_10 / r2;
                        Ok(PowerEval {
                            power_db: 10.0 * friis_gain(r2.sqrt(), self.frequency_hz).log10(),
                            d_pos: d.map(|x| c * x),
                            d_ori: [0.0; 3],
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// The ray tracer itself. Gradients differentiate the gains of the retained
/// paths with their interaction lists held fixed.
pub struct OracleSurrogate<'a> {
    tracers: Vec<Tracer<'a>>,
}

/// Power assigned to receivers without any path, so the objective stays finite.
pub const NO_PATH_DB: f64 = -250.0;
const ORACLE_FD_STEP_M: f64 = 1e-5;
const LOCALIZE_BETA2: f64 = 0.9;

impl<'a> OracleSurrogate<'a> {
    pub fn new(scene: &'a Scene, opts: TraceOptions) -> Result<Self> {
        let tracers = scene.tx.iter().map(|t| Tracer::new(scene, t.position(), opts)).collect::<Result<_>>()?;
        Ok(Self { tracers })
    }
}

impl PowerSurrogate for OracleSurrogate<'_> {
    fn evaluate(&self, tx: &[usize], rx: &[Antenna]) -> Result<Vec<Vec<PowerEval>>> {
        rx.iter()
            .map(|a| {
                tx.iter()
                    .map(|&t| {
                        let tracer =
                            self.tracers.get(t).ok_or_else(|| Error::Argument(format!("tx index {t} out of range")))?;
                        let x = a.position();
                        let link = tracer.link(x)?;
                        if !link.power_db.is_finite() {
                            return Ok(PowerEval { power_db: NO_PATH_DB, d_pos: [0.0; 3], d_ori: [0.0; 3] });
                        }
                        let total: f64 = link.paths.iter().map(|p| p.gain).sum();
                        let mut d_pos = [0.0; 3];
                        for (k, d) in d_pos.iter_mut().enumerate() {
                            let mut e = Vec3::zeros();
                            e[k] = ORACLE_FD_STEP_M;
                            let mut dg = 0.0;
                            for p in &link.paths {
                                let (hi, lo) = (tracer.path_gain_at(&p.interactions, x + e), tracer.path_gain_at(&p.interactions, x - e));
                                if let (Some(hi), Some(lo)) = (hi, lo) {
                                    dg += (hi - lo) / (2.0 * ORACLE_FD_STEP_M);
                                }
                            }
                            *d = 10.0 / std::f64::consts::LN_10 * dg / total;
                        }
                        Ok(PowerEval { power_db: link.power_db, d_pos, d_ori: [0.0; 3] })
                    })
                    .collect()
            })
            .collect()
    }
}

/// A trained predictive network. Input multivectors depend linearly on the
/// receiver position and orientation, so derivatives follow from the
/// gradient with respect to the network input.
pub struct NetworkSurrogate<'a> {
    pub model: &'a Model,
    pub scene: &'a Scene,
    /// Run the network in `f64` instead of `f32`.
    pub double: bool,
}

impl<'a> NetworkSurrogate<'a> {
    pub fn new(model: &'a Model, scene: &'a Scene) -> Result<Self> {
        if model.config.task != Task::Predictive {
            return Err(Error::Configuration("localization needs a predictive model".into()));
        }
        Ok(Self { model, scene, double: false })
    }

    fn run<T: Real>(&self, seqs: &[TokenSequence]) -> Result<Vec<PowerEval>> {
        let symmetrize = self.model.config.variant == Variant::Gatr;
        let mut batch = Batch::from_sequences(seqs, self.model.config.in_scalars())?;
        if symmetrize {
            batch = batch.with_involution();
        }
        let n = batch.num_tokens();
        let c = crate::tokenizer::MV_CHANNELS;
        let mut tape = Tape::<T>::new();
        let pv = self.model.param_vars(&mut tape, false);
        let mv = tape.param(Tensor::from_f64(vec![crate::ga::DIM, n, c], &component_major(&batch.mv))?);
        let s = tape.constant(Tensor::from_f64(vec![n, batch.in_scalars], &batch.s)?);
        let refs = crate::net::reference_values(&batch.mv, &batch.segments, c)?;
        let input = NetInput { mv, s, refs, segments: batch.segments.clone() };
        let (_, out_s) = self.model.forward(&mut tape, &pv, &input)?;
        let width = self.model.config.out_scalars();
        let rows: Vec<usize> = batch.link_rows.iter().map(|&r| r * width).collect();
        let flat = tape.reshape(out_s, vec![n * width, 1])?;
        let y = tape.gather(flat, &rows)?;
        let total = tape.sum(y);
        let yv: Vec<f64> = tape.data(y).iter().map(|v| v.f64()).collect();
        let g: Vec<f64> = tape.backward(total)?.wrt(mv).iter().map(|v| v.f64()).collect();
        let at = |comp: usize, tok: usize, ch: usize| g[comp * n * c + tok * c + ch];
        let b = seqs.len();
        let copies = if symmetrize { 2 } else { 1 };
        let weight = 1.0 / copies as f64;
        let std = self.model.norm.std;
        let mut out = Vec::with_capacity(b);
        for (j, seq) in seqs.iter().enumerate() {
            let rx_tok = seq
                .tokens
                .iter()
                .position(|t| t.kind == TokenKind::Antenna && t.scalars[RX_FLAG] == 1.0)
                .ok_or_else(|| Error::Argument("sequence has no receiver token".into()))?;
            let link_tok = seq.link_index()?;
            let mut e = PowerEval { power_db: 0.0, d_pos: [0.0; 3], d_ori: [0.0; 3] };
            let mut y_norm = 0.0;
            for copy in 0..copies {
                let k = copy * b + j;
                let start = batch.segments[k].0;
                // odd grades flip sign in the involuted copy
                let odd = if copy == 1 { -1.0 } else { 1.0 };
                let (r, l) = (start + rx_tok, start + link_tok);
                let point = |tok: usize, ch: usize| [-at(E023, tok, ch), at(E013, tok, ch), -at(E012, tok, ch)];
                let dir = |tok: usize, ch: usize| [at(E01, tok, ch), at(E02, tok, ch), at(E03, tok, ch)];
                let (pr, pl, dl, dr) = (point(r, 0), point(l, 1), dir(l, 2), dir(r, 1));
                for q in 0..3 {
                    e.d_pos[q] += weight * std * (odd * (pr[q] + pl[q]) + dl[q]);
                    e.d_ori[q] += weight * std * dr[q];
                }
                y_norm += weight * yv[k];
            }
            e.power_db = self.model.norm.denormalize(y_norm);
            out.push(e);
        }
        Ok(out)
    }
}

impl PowerSurrogate for NetworkSurrogate<'_> {
    fn evaluate(&self, tx: &[usize], rx: &[Antenna]) -> Result<Vec<Vec<PowerEval>>> {
        let mut seqs = Vec::with_capacity(tx.len() * rx.len());
        for a in rx {
            for &t in tx {
                seqs.push(tokenize_link(self.scene, t, *a, None, Mode::Predictive, &self.model.norm)?);
            }
        }
        let flat = if self.double { self.run::<f64>(&seqs)? } else { self.run::<f32>(&seqs)? };
        Ok(flat.chunks(tx.len().max(1)).map(|c| c.to_vec()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOptions {
    pub restarts: usize,
    pub steps: usize,
    /// Initial Adam learning rate in metres; annealed to zero over `steps`.
    pub lr: f64,
    pub optimize_orientation: bool,
    /// Residual margin in dB² within which restart minima are reported as
    /// ambiguous alternatives.
    pub ambiguity_db2: f64,
    /// When positive, this many uniform candidates are scored and the best
    /// `restarts` of them start the descent.
    pub screen: usize,
    pub seed: u64,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self { restarts: 16, steps: 500, lr: 0.05, optimize_orientation: false, ambiguity_db2: 1.0, screen: 0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub restart: usize,
    pub position: [f64; 3],
    pub orientation: [f64; 3],
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeResult {
    pub position: [f64; 3],
    pub orientation: [f64; 3],
    /// `Σᵢ (h_θ(x) − hᵢ)²` in dB² at the returned position.
    pub residual: f64,
    pub restart: usize,
    /// All restart minima within the ambiguity margin, best first.
    pub ambiguous: Vec<Candidate>,
    /// Objective value at every step of the winning restart.
    pub trace: Vec<f64>,
}

/// Objective and its gradient for each receiver hypothesis.
pub fn objective(
    surrogate: &dyn PowerSurrogate,
    measurements: &[Measurement],
    rx: &[Antenna],
) -> Result<Vec<(f64, [f64; 3], [f64; 3])>> {
    let tx: Vec<usize> = measurements.iter().map(|m| m.tx).collect();
    let evals = surrogate.evaluate(&tx, rx)?;
    Ok(evals
        .iter()
        .map(|row| {
            let (mut f, mut gp, mut go) = (0.0, [0.0; 3], [0.0; 3]);
            for (e, m) in row.iter().zip(measurements) {
                let r = e.power_db - m.power_db;
                f += r * r;
                for k in 0..3 {
                    gp[k] += 2.0 * r * e.d_pos[k];
                    go[k] += 2.0 * r * e.d_ori[k];
                }
            }
            (f, gp, go)
        })
        .collect())
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 1e-12 {
        v.map(|x| x / n)
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Minimizes the power mismatch over the receiver position inside
/// `bounds`, starting from `init` if given or from random restarts.
pub fn localize(
    surrogate: &dyn PowerSurrogate,
    measurements: &[Measurement],
    bounds: (Vec3, Vec3),
    init: Option<&[Antenna]>,
    opts: &LocalizeOptions,
) -> Result<LocalizeResult> {
    if measurements.is_empty() {
        return Err(Error::Argument("localization needs at least one measurement".into()));
    }
    let (lo, hi) = bounds;
    let clamp = |p: [f64; 3]| [0, 1, 2].map(|k| p[k].clamp(lo[k], hi[k]));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let uniform = |rng: &mut ChaCha8Rng| Antenna {
        pos: [0, 1, 2].map(|k| if hi[k] > lo[k] { rng.gen_range(lo[k]..=hi[k]) } else { lo[k] }),
        ori: [0.0, 0.0, 1.0],
    };
    let mut starts: Vec<Antenna> = match init {
        Some(a) if !a.is_empty() => a.to_vec(),
        _ if opts.screen > opts.restarts => {
            let cands: Vec<Antenna> = (0..opts.screen).map(|_| uniform(&mut rng)).collect();
            let scores = objective(surrogate, measurements, &cands)?;
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0).then(a.cmp(&b)));
            order.iter().take(opts.restarts).map(|&i| cands[i]).collect()
        }
        _ => (0..opts.restarts.max(1)).map(|_| uniform(&mut rng)).collect(),
    };
    for s in &mut starts {
        s.pos = clamp(s.pos);
    }
    let r = starts.len();
    let mut cur = starts;
    let mut adam: Vec<Adam> = (0..r).map(|_| Adam::with_betas(6, 0.9, LOCALIZE_BETA2)).collect();
    let mut best: Vec<Option<Candidate>> = vec![None; r];
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); r];
    let mut alive = vec![true; r];
    for step in 0..=opts.steps {
        let active: Vec<usize> = (0..r).filter(|&i| alive[i]).collect();
        if active.is_empty() {
            break;
        }
        let hyp: Vec<Antenna> = active.iter().map(|&i| cur[i]).collect();
        let vals = objective(surrogate, measurements, &hyp)?;
        for (&i, (f, gp, go)) in active.iter().zip(vals) {
            if !f.is_finite() || gp.iter().chain(&go).any(|g| !g.is_finite()) {
                alive[i] = false;
                continue;
            }
            traces[i].push(f);
            if best[i].as_ref().map_or(true, |b| f < b.residual) {
                best[i] = Some(Candidate { restart: i, position: cur[i].pos, orientation: cur[i].ori, residual: f });
            }
            if step == opts.steps {
                continue;
            }
            let lr = cosine_lr(opts.lr, step, opts.steps);
            let mut x = [cur[i].pos[0], cur[i].pos[1], cur[i].pos[2], cur[i].ori[0], cur[i].ori[1], cur[i].ori[2]];
            let mut g = [gp[0], gp[1], gp[2], 0.0, 0.0, 0.0];
            if opts.optimize_orientation {
                g[3..].copy_from_slice(&go);
            }
            adam[i].step_f64(&mut x, &g, lr);
            cur[i].pos = clamp([x[0], x[1], x[2]]);
            if opts.optimize_orientation {
                cur[i].ori = normalized([x[3], x[4], x[5]]);
            }
        }
    }
    let mut cands: Vec<Candidate> = best.into_iter().flatten().collect();
    if cands.is_empty() {
        return Err(Error::Numeric("every localization restart diverged".into()));
    }
    cands.sort_by(|a, b| a.residual.total_cmp(&b.residual).then(a.restart.cmp(&b.restart)));
    let win = cands[0].clone();
    let ambiguous = cands.iter().filter(|c| c.residual <= win.residual + opts.ambiguity_db2).cloned().collect();
    Ok(LocalizeResult {
        position: win.position,
        orientation: win.orientation,
        residual: win.residual,
        restart: win.restart,
        ambiguous,
        trace: std::mem::take(&mut traces[win.restart]),
    })
}

/// Which power model the sweep localizes with.
#[derive(Clone, Copy, Debug)]
pub enum SurrogateKind<'m> {
    Oracle(TraceOptions),
    FreeSpace,
    Network(&'m Model),
}

pub fn make_surrogate<'a>(kind: SurrogateKind<'a>, scene: &'a Scene) -> Result<Box<dyn PowerSurrogate + 'a>> {
    Ok(match kind {
        SurrogateKind::Oracle(opts) => Box::new(OracleSurrogate::new(scene, opts)?),
        SurrogateKind::FreeSpace => Box::new(FreeSpaceSurrogate::for_scene(scene)),
        SurrogateKind::Network(m) => Box::new(NetworkSurrogate::new(m, scene)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub trials: usize,
    pub tx_counts: Vec<usize>,
    pub seed: u64,
    /// Scene generator; every scene gets `max(tx_counts)` transmitters.
    pub generator: GeneratorSpec,
    /// Oracle settings used to synthesize the measurements.
    pub measurement_trace: TraceOptions,
    pub localize: LocalizeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tx_count: usize,
    pub trials: usize,
    pub mean_error_m: f64,
    pub stderr_m: f64,
    pub median_error_m: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["tx_count", "trials", "mean_error_m", "stderr_m", "median_error_m"];

impl SweepRow {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.tx_count.to_string(),
            self.trials.to_string(),
            format!("{:.6}", self.mean_error_m),
            format!("{:.6}", self.stderr_m),
            format!("{:.6}", self.median_error_m),
        ]
    }
}

/// Localization error against the number of transmitters. Every trial draws
/// a fresh scene with one receiver; each Tx count uses the first `k`
/// transmitters of the same trial, so counts are compared on paired data.
/// Returns the summary rows and the raw `[trial][count]` errors.
pub fn localization_sweep(cfg: &SweepConfig, kind: SurrogateKind<'_>) -> Result<(Vec<SweepRow>, Vec<Vec<f64>>)> {
    let max_tx = *cfg.tx_counts.iter().max().ok_or_else(|| Error::Argument("no Tx counts given".into()))?;
    if cfg.tx_counts.contains(&0) {
        return Err(Error::Argument("Tx counts must be positive".into()));
    }
    let spec = GeneratorSpec { tx_per_scene: max_tx, rx_per_scene: 1, ..cfg.generator.clone() };
    let errors: Vec<Result<Vec<f64>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let scene = generate_scene(&mut scene_rng(cfg.seed, trial), &spec)?;
            let truth = scene.rx[0];
            let surrogate = make_surrogate(kind, &scene)?;
            let mut row = Vec::with_capacity(cfg.tx_counts.len());
            for &k in &cfg.tx_counts {
                let mut meas = Vec::with_capacity(k);
                for t in 0..k {
                    let h = Tracer::new(&scene, scene.tx[t].position(), cfg.measurement_trace)?.link(truth.position())?;
                    meas.push(Measurement { tx: t, power_db: if h.power_db.is_finite() { h.power_db } else { NO_PATH_DB } });
                }
                let opts = LocalizeOptions { seed: cfg.seed ^ (trial as u64) << 8 ^ k as u64, ..cfg.localize.clone() };
                let res = localize(surrogate.as_ref(), &meas, scene.bounding_box(), None, &opts)?;
                row.push((Vec3::from(res.position) - truth.position()).norm());
            }
            Ok(row)
        })
        .collect();
    let errors: Vec<Vec<f64>> = errors.into_iter().collect::<Result<_>>()?;
    let rows = cfg
        .tx_counts
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut e: Vec<f64> = errors.iter().map(|r| r[j]).collect();
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let var = if e.len() > 1 { e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            e.sort_by(f64::total_cmp);
            let median = if e.is_empty() {
                f64::NAN
            } else if e.len() % 2 == 1 {
                e[e.len() / 2]
            } else {
                0.5 * (e[e.len() / 2 - 1] + e[e.len() / 2])
            };
            SweepRow { tx_count: k, trials: e.len(), mean_error_m: mean, stderr_m: (var / n).sqrt(), median_error_m: median }
        })
        .collect();
    Ok((rows, errors))
}
