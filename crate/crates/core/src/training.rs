//! Surrogate training with Adam and a cosine learning-rate schedule,
//! evaluation under symmetry transforms, and data-efficiency sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::ga::Versor;
use crate::io::Dataset;
use crate::net::{Batch, Model, ModelConfig, Task, Variant};
use crate::scene::Scene;
use crate::tokenizer::{reciprocity_flip, tokenize_scene, Mode, PowerNorm, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    /// Probability of exchanging Tx and Rx roles per sample.
    pub flip_prob: f64,
    /// Probability of grade-involuting a sample (equivariant variant only).
    pub involution_prob: f64,
    /// Fraction of scenes held out for validation.
    pub val_fraction: f64,
    /// Validation interval in steps; the final step is always evaluated.
    pub eval_every: usize,
    /// Upper bound on validation links used for the periodic log (0 = all).
    pub eval_links: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            clip_norm: 10.0,
            flip_prob: 0.5,
            involution_prob: 0.5,
            val_fraction: 0.1,
            eval_every: 500,
            eval_links: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Argument("steps and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Argument("learning rate and clip norm must be positive".into()));
        }
        for p in [self.flip_prob, self.involution_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Argument(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to exactly 0 at step `total - 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let u = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * u).cos())
}

/// Adam over a flat `f32` parameter vector with `f64` moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self::with_betas(n, 0.9, 0.999)
    }

    pub fn with_betas(n: usize, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = (*p as f64 - upd) as f32;
        }
    }

    /// Adam update of `f64` values, used for input-space optimization.
    pub fn step_f64(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (((p, &g), m), v) in x.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grad` so its Euclidean norm does not exceed `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Mean squared error between predicted and target normalized power, and its
/// gradient with respect to the flat parameter vector.
pub fn loss_and_gradient(model: &Model, seqs: &[TokenSequence], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if seqs.len() != targets.len() || seqs.is_empty() {
        return Err(Error::Argument(format!("{} sequences for {} targets", seqs.len(), targets.len())));
    }
    let batch = Batch::from_sequences(seqs, model.config.in_scalars())?;
    let mut tape = Tape::<f32>::new();
    let pv = model.param_vars(&mut tape, true);
    let input = batch.input(&mut tape)?;
    let (_, out_s) = model.forward(&mut tape, &pv, &input)?;
    let width = model.config.out_scalars();
    let rows: Vec<usize> = batch.link_rows.iter().map(|&r| r * width).collect();
    let flat = tape.reshape(out_s, vec![batch.num_tokens() * width, 1])?;
    let pred = tape.gather(flat, &rows)?;
    let target = tape.constant(Tensor::from_f64(vec![targets.len(), 1], targets)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    Ok((value, model.flat_gradient(&pv, &grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row, in normalized units.
    pub train_loss: f64,
    pub val_mae_db: f64,
}

pub const LOG_HEADER: [&str; 3] = ["step", "train_loss", "val_mae_db"];

impl LogRow {
    pub fn csv_fields(&self) -> Vec<String> {
        vec![self.step.to_string(), format!("{:.6}", self.train_loss), format!("{:.6}", self.val_mae_db)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Validation MAE over every validation link after the final step.
    pub final_val_mae_db: f64,
    pub train_links: Vec<usize>,
    pub val_links: Vec<usize>,
}

fn sample_sequence<R: Rng>(
    data: &Dataset,
    link: usize,
    norm: &PowerNorm,
    flip_prob: f64,
    involution_prob: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    let mut seq = tokenize_scene(&data.link_scene(link)?, None, Mode::Predictive, norm)?;
    if flip_prob > 0.0 && rng.gen_bool(flip_prob) {
        seq = reciprocity_flip(&seq)?;
    }
    if involution_prob > 0.0 && rng.gen_bool(involution_prob) {
        seq = seq.involuted();
    }
    Ok(seq)
}

/// Trains `model` on the links `train` and reports validation MAE on `val`.
/// The model's power normalization is refitted to the training targets.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config.task != Task::Predictive {
        return Err(Error::Configuration("power training needs a predictive model".into()));
    }
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let powers: Vec<f64> = train.iter().map(|&i| data.links[i].channel.power_db).collect();
    model.norm = PowerNorm::fit(&powers)?;
    let involution_prob = if model.config.variant == Variant::Gatr { cfg.involution_prob } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = train.to_vec();
    let mut cursor = order.len();
    let mut adam = Adam::new(model.num_params());
    let mut log = Vec::new();
    let mut acc = (0.0, 0usize);
    let periodic_val: Vec<usize> = if cfg.eval_links > 0 && val.len() > cfg.eval_links {
        let mut v = val.to_vec();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
        v.truncate(cfg.eval_links);
        v.sort_unstable();
        v
    } else {
        val.to_vec()
    };
    let mut final_val = f64::NAN;
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut seqs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in &idx {
            seqs.push(sample_sequence(data, i, &model.norm, cfg.flip_prob, involution_prob, &mut rng)?);
            targets.push(model.norm.normalize(data.links[i].channel.power_db));
        }
        let (loss, mut grad) = loss_and_gradient(model, &seqs, &targets)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}; batch links {idx:?}")));
        }
        clip_gradient(&mut grad, cfg.clip_norm);
        adam.step(&mut model.params, &grad, cosine_lr(cfg.lr, step, cfg.steps));
        acc.0 += loss;
        acc.1 += 1;
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let links = if last { val } else { &periodic_val[..] };
            let mae = if links.is_empty() { f64::NAN } else { evaluate(model, data, links, Transform::None, 0)?.mae_db };
            if last {
                final_val = mae;
            }
            let row = LogRow { step: step + 1, train_loss: acc.0 / acc.1 as f64, val_mae_db: mae };
            on_log(&row);
            log.push(row);
            acc = (0.0, 0);
        }
    }
    Ok(TrainReport { log, final_val_mae_db: final_val, train_links: train.to_vec(), val_links: val.to_vec() })
}

/// Splits `data` by scene, initializes a model from `config` and trains it.
pub fn train_model(config: ModelConfig, data: &Dataset, cfg: &TrainConfig, on_log: impl FnMut(&LogRow)) -> Result<(Model, TrainReport)> {
    let (train_idx, val_idx) = data.split_by_scene(cfg.val_fraction, cfg.seed);
    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let report = train(&mut model, data, &train_idx, &val_idx, cfg, on_log)?;
    Ok((model, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    None,
    Rotation,
    Translation,
    Reflection,
    Permutation,
    Reciprocity,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::None,
        Transform::Rotation,
        Transform::Translation,
        Transform::Reflection,
        Transform::Permutation,
        Transform::Reciprocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::Rotation => "rotation",
            Transform::Translation => "translation",
            Transform::Reflection => "reflection",
            Transform::Permutation => "permutation",
            Transform::Reciprocity => "reciprocity",
        }
    }

    /// A random instance of this symmetry applied to a single-link scene.
    pub fn apply<R: Rng + ?Sized>(self, scene: &Scene, rng: &mut R) -> Scene {
        const TRANSLATION_RANGE_M: f64 = 10.0;
        match self {
            Transform::None => scene.clone(),
            Transform::Rotation => scene.transformed(&Versor::random_rotation(rng)),
            Transform::Translation => {
                let t = [0; 3].map(|_| rng.gen_range(-TRANSLATION_RANGE_M..=TRANSLATION_RANGE_M));
                scene.transformed(&Versor::translator(t))
            }
            Transform::Reflection => {
                let g = Versor::random_rigid(rng, TRANSLATION_RANGE_M).compose(&Versor::random_reflection(rng));
                scene.transformed(&g)
            }
            Transform::Permutation => {
                let mut s = scene.clone();
                s.faces.shuffle(rng);
                s
            }
            Transform::Reciprocity => Scene { tx: scene.rx.clone(), rx: scene.tx.clone(), ..scene.clone() },
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown transform {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub transform: Transform,
    pub links: usize,
    pub mae_db: f64,
    pub predictions_db: Vec<f64>,
    pub targets_db: Vec<f64>,
}

/// Links evaluated per forward pass.
pub const EVAL_CHUNK: usize = 64;

/// Mean absolute power error in dB over `links`, each under a fresh random
/// instance of `transform`.
pub fn evaluate(model: &Model, data: &Dataset, links: &[usize], transform: Transform, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(links.len());
    let mut targets = Vec::with_capacity(links.len());
    for &i in links {
        let scene = transform.apply(&data.link_scene(i)?, &mut rng);
        seqs.push(tokenize_scene(&scene, None, Mode::Predictive, &model.norm)?);
        targets.push(data.links[i].channel.power_db);
    }
    let mut preds = Vec::with_capacity(links.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        preds.extend(model.predict_power_db(chunk)?);
    }
    let mae = if links.is_empty() {
        f64::NAN
    } else {
        preds.iter().zip(&targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / links.len() as f64
    };
    Ok(EvalReport { transform, links: links.len(), mae_db: mae, predictions_db: preds, targets_db: targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
    pub train_links: usize,
    pub val_mae_db: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["variant", "fraction", "seed", "train_links", "val_mae_db"];

impl SweepRow {
    pub fn csv_fields(&self) -> Vec<String> {
        let variant = match self.variant {
            Variant::Gatr => "gatr",
            Variant::Transformer => "transformer",
        };
        vec![
            variant.into(),
            format!("{}", self.fraction),
            self.seed.to_string(),
            self.train_links.to_string(),
            format!("{:.6}", self.val_mae_db),
        ]
    }
}

/// Trains every configuration on every fraction of the training links and
/// every seed. The scene split is fixed by `cfg.seed`; subsets and
/// initializations depend on the run seed.
pub fn data_efficiency_sweep(
    data: &Dataset,
    configs: &[ModelConfig],
    fractions: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Argument(format!("fraction {f} outside (0, 1]")));
    }
    let (train_all, val) = data.split_by_scene(cfg.val_fraction, cfg.seed);
    let mut rows = Vec::new();
    for config in configs {
        for &fraction in fractions {
            for &seed in seeds {
                let mut subset = train_all.clone();
                subset.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                subset.truncate(((subset.len() as f64 * fraction).round() as usize).max(1));
                subset.sort_unstable();
                let mut model = Model::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
                let run = TrainConfig { seed, ..cfg.clone() };
                let report = train(&mut model, data, &subset, &val, &run, |_| {})?;
                let row = SweepRow {
                    variant: config.variant,
                    fraction,
                    seed,
                    train_links: subset.len(),
                    val_mae_db: report.final_val_mae_db,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 99, 100) < 1e-6);
        assert!((cosine_lr(1e-3, 50, 101) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut p = vec![0.5f32, -1.25];
        let mut adam = Adam::new(2);
        adam.step(&mut p, &[0.0, 0.0], 1e-3);
        assert_eq!(p, vec![0.5, -1.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut x = vec![1.0];
        Adam::new(1).step_f64(&mut x, &[3.0], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_gradient(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn transform_names_parse() {
        for t in Transform::ALL {
            assert_eq!(t.name().parse::<Transform>().unwrap(), t);
        }
        assert!("shear".parse::<Transform>().is_err());
    }
}
