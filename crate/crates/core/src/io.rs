//! File formats: scene JSON, JSON-lines datasets, binary checkpoints, CSV
//! tables and PPM heatmaps.
//!
//! A dataset directory holds `dataset.jsonl` and one JSON file per scene
//! under `scenes/`. The first line of `dataset.jsonl` is a header; every
//! following line is one link and parses on its own.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::raysim::{TraceOptions, Tracer};
use crate::scene::{generate_scene, Antenna, GeneratorSpec, Scene};
use crate::tokenizer::{Channel, PowerNorm};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DATASET_FORMAT: &str = "wgatr-dataset";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WGTR";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON followed by a newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_string(value)?.as_bytes())
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let scene: Scene = serde_json::from_str(text)?;
    scene.validate()?;
    Ok(scene)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    scene_from_json(&read_to_string(path)?)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scenes: usize,
    pub generator: GeneratorSpec,
    pub trace: TraceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LinkRecord {
    scene: String,
    tx: usize,
    rx: Antenna,
    power_db: f64,
    delay_spread_s: f64,
}

/// One simulated link of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Link {
    /// Index into [`Dataset::scenes`].
    pub scene: usize,
    /// Index into the scene's transmitters.
    pub tx: usize,
    pub rx: Antenna,
    pub channel: Channel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
    /// Scene file paths relative to the dataset directory.
    pub scene_files: Vec<String>,
    pub links: Vec<Link>,
}

pub fn scene_file_name(index: usize) -> String {
    format!("scenes/scene_{index:05}.json")
}

/// Scene-specific random stream derived from the dataset seed.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `n_scenes` floor plans and traces every tx/rx pair of each.
/// Links without any path are dropped. Scenes are processed in parallel on
/// the current rayon pool; the output does not depend on the thread count.
pub fn generate_dataset(seed: u64, n_scenes: usize, spec: &GeneratorSpec, trace: TraceOptions) -> Result<Dataset> {
    spec.validate()?;
    let per_scene: Vec<Result<(Scene, Vec<Link>)>> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(&mut scene_rng(seed, i), spec)?;
            let mut links = Vec::new();
            for (t, tx) in scene.tx.iter().enumerate() {
                let tracer = Tracer::new(&scene, tx.position(), trace)?;
                for rx in &scene.rx {
                    let r = tracer.link(rx.position())?;
                    if r.power_db.is_finite() {
                        links.push(Link {
                            scene: i,
                            tx: t,
                            rx: *rx,
                            channel: Channel { power_db: r.power_db, delay_spread_s: r.delay_spread_s },
                        });
                    }
                }
            }
            Ok((scene, links))
        })
        .collect();
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut links = Vec::new();
    for r in per_scene {
        let (s, l) = r?;
        scenes.push(s);
        links.extend(l);
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: 1,
            seed,
            scenes: n_scenes,
            generator: spec.clone(),
            trace,
        },
        scene_files: (0..n_scenes).map(scene_file_name).collect(),
        scenes,
        links,
    })
}

impl Dataset {
    /// The JSON-lines text of `dataset.jsonl`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for l in &self.links {
            let rec = LinkRecord {
                scene: self.scene_files[l.scene].clone(),
                tx: l.tx,
                rx: l.rx,
                power_db: l.channel.power_db,
                delay_spread_s: l.channel.delay_spread_s,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `dataset.jsonl` and the scene files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (scene, file) in self.scenes.iter().zip(&self.scene_files) {
            write_scene(&dir.join(file), scene)?;
        }
        write_bytes(&dir.join(DATASET_FILE), self.to_jsonl()?.as_bytes())
    }

    /// Reads a dataset from its directory or from the path of its
    /// `dataset.jsonl`. Scene paths resolve relative to that file.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
        let base = file.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} is empty", file.display())))?
            .map_err(|e| Error::io(&file, e))?;
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("{} header: {e}", file.display())))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", header.format)));
        }
        if header.version != 1 {
            return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut scenes = Vec::new();
        let mut scene_files = Vec::new();
        let mut links = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LinkRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", file.display(), lineno + 2)))?;
            let scene = match index.get(&rec.scene) {
                Some(&i) => i,
                None => {
                    scenes.push(read_scene(&base.join(&rec.scene))?);
                    scene_files.push(rec.scene.clone());
                    index.insert(rec.scene.clone(), scenes.len() - 1);
                    scenes.len() - 1
                }
            };
            if rec.tx >= scenes[scene].tx.len() {
                return Err(Error::Format(format!("line {}: tx index {} out of range", lineno + 2, rec.tx)));
            }
            links.push(Link {
                scene,
                tx: rec.tx,
                rx: rec.rx,
                channel: Channel { power_db: rec.power_db, delay_spread_s: rec.delay_spread_s },
            });
        }
        Ok(Dataset { header, scenes, scene_files, links })
    }

    /// The single-tx, single-rx scene of link `i`.
    pub fn link_scene(&self, i: usize) -> Result<Scene> {
        let l = &self.links[i];
        self.scenes[l.scene].link(l.tx, l.rx)
    }

    /// Splits link indices by scene: every `1/fraction`-th scene (by a
    /// seeded shuffle) goes to validation.
    pub fn split_by_scene(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.scenes.len() as f64 * val_fraction).round() as usize).min(self.scenes.len());
        let mut is_val = vec![false; self.scenes.len()];
        for &s in &order[..n_val] {
            is_val[s] = true;
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, l) in self.links.iter().enumerate() {
            if is_val[l.scene] {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Configuration stored in a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diffusion: Option<DiffusionConfig>,
}

/// A model with the optional diffusion settings it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub diffusion: Option<DiffusionConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&CheckpointConfig {
            model: self.model.config.clone(),
            diffusion: self.diffusion.clone(),
        })?;
        let mut out = Vec::with_capacity(40 + cfg.len() + 4 * self.model.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.model.norm.mean.to_le_bytes());
        out.extend_from_slice(&self.model.norm.std.to_le_bytes());
        out.extend_from_slice(&(self.model.params.len() as u64).to_le_bytes());
        for p in &self.model.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(r.array()?) as usize;
        let cfg: CheckpointConfig = serde_json::from_slice(r.take(len)?)?;
        let norm = PowerNorm { mean: f64::from_le_bytes(r.array()?), std: f64::from_le_bytes(r.array()?) };
        let count = u64::from_le_bytes(r.array()?) as usize;
        let expected = Model::zeros(cfg.model.clone()).map_err(|e| Error::Format(e.to_string()))?.num_params();
        if count != expected {
            return Err(Error::Format(format!("checkpoint holds {count} parameters, configuration needs {expected}")));
        }
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("parameter count overflows".into()))?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
        }
        let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut model = Model::from_params(cfg.model, params)?;
        model.norm = norm;
        if let Some(d) = &cfg.diffusion {
            d.validate()?;
        }
        Ok(Checkpoint { model, diffusion: cfg.diffusion })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }
}

/// Writes rows of a CSV table with a header line.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    write_bytes(path, &csv_bytes(header, rows)?)
}

pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref())).map_err(fmt)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// One power measurement from a known transmitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub tx: usize,
    pub power_db: f64,
}

/// Reads a `tx,power_db` CSV.
pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Format(e.to_string()),
    })?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let m: Measurement = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !m.power_db.is_finite() {
            return Err(Error::Format(format!("{}: non-finite power", path.display())));
        }
        out.push(m);
    }
    Ok(out)
}

/// Anchors of the fixed heatmap palette, evenly spaced from low to high.
pub const PALETTE: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Palette colour of `u ∈ [0, 1]` by linear interpolation between anchors.
pub fn palette_color(u: f64) -> [u8; 3] {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let x = u * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        let v = PALETTE[i][k] as f64 * (1.0 - f) + PALETTE[i + 1][k] as f64 * f;
        c[k] = v.round() as u8;
    }
    c
}

/// Binary PPM (P6) of a row-major grid; row 0 is drawn at the bottom.
/// Values map linearly from the finite minimum to the finite maximum;
/// non-finite values take the lowest colour.
pub fn ppm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Argument(format!("grid {width}×{height} does not match {} values", values.len())));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for row in (0..height).rev() {
        for col in 0..width {
            let v = values[row * width + col];
            out.extend_from_slice(&palette_color(if v.is_finite() { (v - lo) / span } else { 0.0 }));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_bytes(path, &ppm_bytes(width, height, values)?)
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Appends one line to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
