//! `wgatr` command-line interface: scene and dataset generation, surrogate
//! training and evaluation, heatmaps, receiver localization, diffusion
//! workflows and the benchmark sweeps.
//!
//! Exit codes: 1 usage or configuration, 2 io, 3 format, 4 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wgatr::diffusion::{
    dataset_example, sample, train_diffusion, vlb, DiffusionConfig, DiffusionTrainConfig, Example, MaskKind, Sampler,
    DIFFUSION_LOG_HEADER,
};
use wgatr::error::{Error, Result};
use wgatr::io::{
    append_line, read_measurements, read_scene, to_json_string, write_csv, write_json, write_ppm, write_scene, Checkpoint,
    Dataset,
};
use wgatr::localization::{
    localization_sweep, localize, make_surrogate, LocalizeOptions, SurrogateKind, SweepConfig, SWEEP_HEADER as LOC_HEADER,
};
use wgatr::net::{Model, ModelConfig, Task, Variant};
use wgatr::raysim::{simulate_link, TraceOptions};
use wgatr::scene::{Antenna, GeneratorSpec, Scene};
use wgatr::tokenizer::{tokenize_scene, Channel, Mode};
use wgatr::training::{
    data_efficiency_sweep, evaluate, train_model, TrainConfig, Transform, EVAL_CHUNK, LOG_HEADER, SWEEP_HEADER,
};

#[derive(Parser, Debug)]
#[command(name = "wgatr", version, about = "Equivariant wireless channel surrogates")]
struct Cli {
    /// Worker threads; falls back to WGATR_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate random floor plans and simulate their links.
    Genscenes(GenscenesArgs),
    /// Train a received-power surrogate.
    Train(TrainArgs),
    /// Evaluate a surrogate on a dataset, optionally under a transformation.
    Eval(EvalArgs),
    /// Predicted power over a horizontal grid of receiver positions.
    Heatmap(HeatmapArgs),
    /// Recover a receiver position from power measurements.
    Localize(LocalizeArgs),
    /// Train a diffusion model over scenes and channels.
    DiffuseTrain(DiffuseTrainArgs),
    /// Sample from a diffusion model with inpainting.
    DiffuseSample(DiffuseSampleArgs),
    /// Variational bound of a diffusion model on held-out links.
    Vlb(VlbArgs),
    /// Validation error against training-set size for both architectures.
    SweepDataEfficiency(SweepDataArgs),
    /// Localization error against the number of transmitters.
    SweepLocalization(SweepLocArgs),
}

#[derive(Args, Debug)]
struct GenscenesArgs {
    #[arg(long)]
    n: usize,
    /// Rooms per scene, as `N` or `MIN-MAX`.
    #[arg(long, default_value = "1-3")]
    rooms: String,
    #[arg(long)]
    tx: Option<usize>,
    #[arg(long)]
    rx: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "gatr")]
    variant: String,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    mv_channels: Option<usize>,
    #[arg(long)]
    scalar_channels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

impl ModelArgs {
    fn config(&self, task: Task) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            variant: self.variant.parse::<Variant>()?,
            task,
            blocks: self.blocks.unwrap_or(d.blocks),
            mv_channels: self.mv_channels.unwrap_or(d.mv_channels),
            scalar_channels: self.scalar_channels.unwrap_or(d.scalar_channels),
            heads: self.heads.unwrap_or(d.heads),
            transformer_width: self.width.unwrap_or(d.transformer_width),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    /// Checkpoint path; the log goes next to it with a `.csv` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "none")]
    transform: String,
    /// Links to evaluate: `val` or `train` (scene split by `--seed`) or `all`.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Surrogate checkpoint; the ray tracer is used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    tx_index: usize,
    #[arg(long, default_value_t = 1.5)]
    z: f64,
    /// Cell size in metres.
    #[arg(long, default_value_t = 0.25)]
    res: f64,
    /// Output prefix; writes `<out>.csv` and `<out>.ppm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    /// Surrogate checkpoint; the ray tracer is used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    screen: usize,
    #[arg(long)]
    optimize_orientation: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiffuseTrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50_000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    log_every: usize,
    /// Checkpoint path; the log goes next to it with a `.csv` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiffuseSampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Conditioning scene with one tx and one rx. Alternatively use
    /// `--dataset` with `--link`.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    power_db: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    delay_spread_s: f64,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    link: Option<usize>,
    #[arg(long, default_value = "signal")]
    mask: String,
    #[arg(long, default_value = "ddim")]
    sampler: String,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Output directory for sample scenes and `samples.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VlbArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate one mask only; default is signal, rx and mesh.
    #[arg(long)]
    mask: Option<String>,
    /// Cap on validation links (0 = all).
    #[arg(long, default_value_t = 0)]
    links: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepDataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1.0")]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "gatr,transformer")]
    variants: Vec<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepLocArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    tx_counts: Vec<usize>,
    /// `oracle`, `freespace`, or a checkpoint path.
    #[arg(long, default_value = "oracle")]
    surrogate: String,
    /// Rooms per scene, as `N` or `MIN-MAX`.
    #[arg(long, default_value = "1")]
    rooms: String,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    screen: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("WGATR_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| Error::Argument(format!("WGATR_THREADS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Configuration(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Genscenes(a) => genscenes(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Heatmap(a) => heatmap(a),
        Command::Localize(a) => localize_cmd(a, seed),
        Command::DiffuseTrain(a) => diffuse_train(a, seed),
        Command::DiffuseSample(a) => diffuse_sample(a, seed),
        Command::Vlb(a) => vlb_cmd(a, seed),
        Command::SweepDataEfficiency(a) => sweep_data(a, seed),
        Command::SweepLocalization(a) => sweep_loc(a, seed),
    }
}

fn parse_rooms(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("rooms must be N or MIN-MAX, got {s:?}"));
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => {
            let n = s.parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    Ok((lo, hi))
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

fn genscenes(a: GenscenesArgs, seed: u64) -> Result<()> {
    let (rooms_min, rooms_max) = parse_rooms(&a.rooms)?;
    let d = GeneratorSpec::default();
    let spec = GeneratorSpec {
        rooms_min,
        rooms_max,
        tx_per_scene: a.tx.unwrap_or(d.tx_per_scene),
        rx_per_scene: a.rx.unwrap_or(d.rx_per_scene),
        ..d
    };
    let data = wgatr::io::generate_dataset(seed, a.n, &spec, TraceOptions::default())?;
    data.write(&a.out)?;
    println!("wrote {} scenes and {} links to {}", data.scenes.len(), data.links.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let data = Dataset::read(&a.dataset)?;
    let config = a.model.config(Task::Predictive)?;
    let cfg = TrainConfig { steps: a.steps, batch_size: a.batch_size, lr: a.lr, eval_every: a.eval_every, seed, ..Default::default() };
    cfg.validate()?;
    let log = log_path(&a.out);
    let mut rows = Vec::new();
    let (model, report) = train_model(config, &data, &cfg, |r| {
        eprintln!("step {} train_loss {:.5} val_mae_db {:.4}", r.step, r.train_loss, r.val_mae_db);
        rows.push(r.csv_fields());
    })?;
    write_csv(&log, &LOG_HEADER, &rows)?;
    Checkpoint { model, diffusion: None }.save(&a.out)?;
    println!("final validation MAE {:.4} dB", report.final_val_mae_db);
    Ok(())
}

fn split_links(data: &Dataset, split: &str, seed: u64) -> Result<Vec<usize>> {
    let (train, val) = data.split_by_scene(TrainConfig::default().val_fraction, seed);
    match split {
        "train" => Ok(train),
        "val" => Ok(val),
        "all" => Ok((0..data.links.len()).collect()),
        _ => Err(Error::Argument(format!("unknown split {split:?}"))),
    }
}

fn load_model(path: &Path, task: Task) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.model.config.task != task {
        return Err(Error::Configuration(format!("{} holds a {:?} model", path.display(), ck.model.config.task)));
    }
    Ok(ck)
}

fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.ckpt, Task::Predictive)?.model;
    let data = Dataset::read(&a.dataset)?;
    let transform: Transform = a.transform.parse()?;
    let links = split_links(&data, &a.split, seed)?;
    let report = evaluate(&model, &data, &links, transform, seed)?;
    println!("{:.6}", report.mae_db);
    if let Some(p) = a.report {
        write_json(&p, &report)?;
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    if !(a.res > 0.0) {
        return Err(Error::Argument("--res must be positive".into()));
    }
    let scene = read_scene(&a.scene)?;
    let tx = *scene
        .tx
        .get(a.tx_index)
        .ok_or_else(|| Error::Argument(format!("tx index {} out of range", a.tx_index)))?;
    let (lo, hi) = if scene.faces.is_empty() {
        ([tx.pos[0] - 5.0, tx.pos[1] - 5.0], [tx.pos[0] + 5.0, tx.pos[1] + 5.0])
    } else {
        let (lo, hi) = scene.bounding_box();
        ([lo.x, lo.y], [hi.x, hi.y])
    };
    let nx = (((hi[0] - lo[0]) / a.res).ceil() as usize).max(1);
    let ny = (((hi[1] - lo[1]) / a.res).ceil() as usize).max(1);
    let mut points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            points.push([lo[0] + (i as f64 + 0.5) * a.res, lo[1] + (j as f64 + 0.5) * a.res, a.z]);
        }
    }
    let rx_ori = scene.rx.first().map(|r| r.ori).unwrap_or([0.0, 0.0, 1.0]);
    let link = |p: [f64; 3]| scene.link(a.tx_index, Antenna { pos: p, ori: rx_ori });
    let values: Vec<f64> = match &a.ckpt {
        Some(path) => {
            let model = load_model(path, Task::Predictive)?.model;
            let mut out = Vec::with_capacity(points.len());
            for chunk in points.chunks(EVAL_CHUNK) {
                let seqs = chunk
                    .iter()
                    .map(|&p| tokenize_scene(&link(p)?, None, Mode::Predictive, &model.norm))
                    .collect::<Result<Vec<_>>>()?;
                out.extend(model.predict_power_db(&seqs)?);
            }
            out
        }
        None => {
            use rayon::prelude::*;
            points
                .par_iter()
                .map(|&p| simulate_link(&scene, tx.position(), p.into(), TraceOptions::default()).map(|l| l.power_db))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let rows: Vec<Vec<String>> = points
        .iter()
        .zip(&values)
        .map(|(p, v)| vec![format!("{:.6}", p[0]), format!("{:.6}", p[1]), format!("{v:.6}")])
        .collect();
    let prefix = a.out.as_os_str().to_string_lossy().into_owned();
    write_csv(Path::new(&format!("{prefix}.csv")), &["x", "y", "power_db"], &rows)?;
    write_ppm(Path::new(&format!("{prefix}.ppm")), nx, ny, &values)?;
    println!("{nx}x{ny} grid written to {prefix}.csv and {prefix}.ppm");
    Ok(())
}

fn localize_cmd(a: LocalizeArgs, seed: u64) -> Result<()> {
    let scene = read_scene(&a.scene)?;
    let measurements = read_measurements(&a.measurements)?;
    if let Some(m) = measurements.iter().find(|m| m.tx >= scene.tx.len()) {
        return Err(Error::Argument(format!("measurement references tx {} of {}", m.tx, scene.tx.len())));
    }
    let ck = a.ckpt.as_deref().map(|p| load_model(p, Task::Predictive)).transpose()?;
    let kind = match &ck {
        Some(c) => SurrogateKind::Network(&c.model),
        None => SurrogateKind::Oracle(TraceOptions::default()),
    };
    let surrogate = make_surrogate(kind, &scene)?;
    let opts = LocalizeOptions {
        restarts: a.restarts,
        steps: a.steps,
        screen: a.screen,
        optimize_orientation: a.optimize_orientation,
        seed,
        ..Default::default()
    };
    let result = localize(surrogate.as_ref(), &measurements, scene.bounding_box(), None, &opts)?;
    let text = to_json_string(&result)?;
    match a.out {
        Some(p) => wgatr::io::write_text(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn diffuse_train(a: DiffuseTrainArgs, seed: u64) -> Result<()> {
    let data = Dataset::read(&a.dataset)?;
    let config = a.model.config(Task::Diffusion)?;
    let dcfg = DiffusionConfig::default();
    let cfg = DiffusionTrainConfig { steps: a.steps, batch_size: a.batch_size, lr: a.lr, log_every: a.log_every, seed, ..Default::default() };
    let (train_links, _) = data.split_by_scene(TrainConfig::default().val_fraction, seed);
    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rows = Vec::new();
    train_diffusion(&mut model, &dcfg, &data, &train_links, &cfg, |r| {
        eprintln!("step {} loss {:.5}", r.step, r.loss);
        rows.push(vec![r.step.to_string(), format!("{:.6}", r.loss)]);
    })?;
    write_csv(&log_path(&a.out), &DIFFUSION_LOG_HEADER, &rows)?;
    Checkpoint { model, diffusion: Some(dcfg) }.save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord {
    index: usize,
    scene: String,
    power_db: f64,
    delay_spread_s: f64,
    rx: Antenna,
}

#[derive(Serialize)]
struct SampleReport {
    mask: MaskKind,
    sampler: Sampler,
    seed: u64,
    conditioning: Channel,
    samples: Vec<SampleRecord>,
}

fn diffusion_checkpoint(path: &Path) -> Result<(Model, DiffusionConfig)> {
    let ck = load_model(path, Task::Diffusion)?;
    let dcfg = ck.diffusion.ok_or_else(|| Error::Format("diffusion checkpoint lacks its schedule".into()))?;
    Ok((ck.model, dcfg))
}

fn diffuse_sample(a: DiffuseSampleArgs, seed: u64) -> Result<()> {
    let (model, dcfg) = diffusion_checkpoint(&a.ckpt)?;
    let mask_kind: MaskKind = a.mask.parse()?;
    let sampler: Sampler = a.sampler.parse()?;
    let conditioning = match (&a.scene, &a.dataset, a.link) {
        (Some(path), None, None) => {
            let scene: Scene = read_scene(path)?;
            let power_db = match (a.power_db, mask_kind) {
                (Some(p), _) => p,
                (None, MaskKind::Signal | MaskKind::None) => 0.0,
                (None, _) => return Err(Error::Argument("--power-db is required for this mask".into())),
            };
            Example::new(scene, Channel { power_db, delay_spread_s: a.delay_spread_s })?
        }
        (None, Some(path), Some(link)) => {
            let data = Dataset::read(path)?;
            if link >= data.links.len() {
                return Err(Error::Argument(format!("link {link} out of range")));
            }
            let mut ex = dataset_example(&data, link)?;
            if let Some(p) = a.power_db {
                ex.channel.power_db = p;
            }
            ex
        }
        _ => return Err(Error::Argument("give either --scene or both --dataset and --link".into())),
    };
    let mask = conditioning.mask(mask_kind);
    let samples = sample(&model, &dcfg, &conditioning, &mask, sampler, a.samples, seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.json");
        write_scene(&a.out.join(&name), &s.scene)?;
        records.push(SampleRecord {
            index: i,
            scene: name,
            power_db: s.channel.power_db,
            delay_spread_s: s.channel.delay_spread_s,
            rx: s.scene.rx[0],
        });
    }
    let report = SampleReport { mask: mask_kind, sampler, seed, conditioning: conditioning.channel, samples: records };
    write_json(&a.out.join("samples.json"), &report)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct VlbSummary {
    mask: MaskKind,
    links: usize,
    finite: bool,
    mean_nats_per_dim: f64,
}

fn vlb_cmd(a: VlbArgs, seed: u64) -> Result<()> {
    let (model, dcfg) = diffusion_checkpoint(&a.ckpt)?;
    let data = Dataset::read(&a.dataset)?;
    let masks = match &a.mask {
        Some(m) => vec![m.parse::<MaskKind>()?],
        None => vec![MaskKind::Signal, MaskKind::Rx, MaskKind::Mesh],
    };
    let (_, mut val) = data.split_by_scene(TrainConfig::default().val_fraction, seed);
    if a.links > 0 {
        val.truncate(a.links);
    }
    let mut out = Vec::new();
    for mask_kind in masks {
        let mut total = 0.0;
        let mut finite = true;
        for &l in &val {
            let ex = dataset_example(&data, l)?;
            let r = vlb(&model, &dcfg, &ex, &ex.mask(mask_kind), seed ^ l as u64)?;
            finite &= r.nats_per_dim.is_finite();
            total += r.nats_per_dim;
        }
        let s = VlbSummary { mask: mask_kind, links: val.len(), finite, mean_nats_per_dim: total / val.len().max(1) as f64 };
        println!("{} {:.6} nats/dim over {} links", mask_kind.name(), s.mean_nats_per_dim, s.links);
        out.push(s);
    }
    if let Some(p) = a.out {
        write_json(&p, &out)?;
    }
    Ok(())
}

fn sweep_data(a: SweepDataArgs, seed: u64) -> Result<()> {
    let data = Dataset::read(&a.dataset)?;
    let configs = a
        .variants
        .iter()
        .map(|v| ModelArgs { variant: v.clone(), ..a.model.clone() }.config(Task::Predictive))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig { steps: a.steps, batch_size: a.batch_size, eval_every: 0, seed, ..Default::default() };
    std::fs::write(&a.out, SWEEP_HEADER.join(",") + "\n").map_err(|e| Error::io(&a.out, e))?;
    let mut failed = None;
    data_efficiency_sweep(&data, &configs, &a.fractions, &a.seeds, &cfg, |row| {
        if let Err(e) = append_line(&a.out, &row.csv_fields().join(",")) {
            failed.get_or_insert(e);
        }
        eprintln!("{}", row.csv_fields().join(","));
    })?;
    failed.map_or(Ok(()), Err)
}

fn sweep_loc(a: SweepLocArgs, seed: u64) -> Result<()> {
    let (rooms_min, rooms_max) = parse_rooms(&a.rooms)?;
    let cfg = SweepConfig {
        trials: a.trials,
        tx_counts: a.tx_counts.clone(),
        seed,
        generator: GeneratorSpec { rooms_min, rooms_max, ..Default::default() },
        measurement_trace: TraceOptions::default(),
        localize: LocalizeOptions { restarts: a.restarts, steps: a.steps, screen: a.screen, seed, ..Default::default() },
    };
    let ck = match a.surrogate.as_str() {
        "oracle" | "freespace" => None,
        path => Some(load_model(Path::new(path), Task::Predictive)?),
    };
    let kind = match (a.surrogate.as_str(), &ck) {
        (_, Some(c)) => SurrogateKind::Network(&c.model),
        ("freespace", None) => SurrogateKind::FreeSpace,
        _ => SurrogateKind::Oracle(TraceOptions::default()),
    };
    let (rows, _) = localization_sweep(&cfg, kind)?;
    let fields: Vec<Vec<String>> = rows.iter().map(|r| r.csv_fields()).collect();
    write_csv(&a.out, &LOC_HEADER, &fields)?;
    for r in &fields {
        println!("{}", r.join(","));
    }
    Ok(())
}
