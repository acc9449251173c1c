//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! Budgets are sized for a single CPU core: the learning criteria train
//! small configurations for a few thousand steps rather than the full
//! default schedules.

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;
use wgatr::autodiff::{gradcheck, Tape, Tensor, Var, EQUI_COEFFS};
use wgatr::diffusion::*;
use wgatr::ga::*;
use wgatr::io::{csv_bytes, generate_dataset, Dataset, Measurement};
use wgatr::localization::*;
use wgatr::net::*;
use wgatr::raysim::{simulate_link, trace_paths, InteractionKind, Tracer, TraceOptions, SPEED_OF_LIGHT};
use wgatr::scene::{generate_scene, standard_materials, Antenna, GeneratorSpec, Scene, Vec3};
use wgatr::tokenizer::{tokenize_scene, Channel, Mode, PowerNorm};
use wgatr::training::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Dataset and predictive surrogate shared by several criteria.
struct Trained {
    data: Dataset,
    val: Vec<usize>,
    gatr: Model,
    val_mae_db: f64,
}

fn small_config(variant: Variant, task: Task) -> ModelConfig {
    ModelConfig { variant, task, blocks: 4, mv_channels: 8, scalar_channels: 16, heads: 4, transformer_width: 64 }
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- 1

fn blades() -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    out.extend((0..4).map(|i| vec![i]));
    out.extend([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]].map(|b| b.to_vec()));
    out.extend([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]].map(|b| b.to_vec()));
    out.push(vec![0, 1, 2, 3]);
    out
}

/// Product of two blades by concatenating generators, bubble-sorting with a
/// sign flip per swap and contracting equal neighbours with the metric.
fn symbolic_product(a: &[u8], b: &[u8]) -> (f64, Vec<u8>) {
    let mut word: Vec<u8> = a.iter().chain(b).copied().collect();
    let mut sign = 1.0;
    loop {
        let mut changed = false;
        let mut i = 0;
        while i + 1 < word.len() {
            if word[i] > word[i + 1] {
                word.swap(i, i + 1);
                sign = -sign;
                changed = true;
            } else if word[i] == word[i + 1] {
                if word[i] == 0 {
                    return (0.0, vec![]);
                }
                word.drain(i..i + 2);
                changed = true;
                continue;
            }
            i += 1;
        }
        if !changed {
            return (sign, word);
        }
    }
}

fn ga_correctness() -> Outcome {
    let start = Instant::now();
    let names = blades();
    for (i, a) in names.iter().enumerate() {
        for (j, b) in names.iter().enumerate() {
            let (sign, blade) = symbolic_product(a, b);
            let mut expected = Multivector::ZERO;
            if sign != 0.0 {
                expected.0[names.iter().position(|n| *n == blade).unwrap()] = sign;
            }
            let got = Multivector::basis(i).geometric_product(&Multivector::basis(j));
            ensure!(got == expected, "product e[{i}] e[{j}] = {got:?}, oracle {expected:?}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = || Multivector::new([0; DIM].map(|_| rng.gen_range(-1.0..1.0)));
    let rel = |x: &Multivector, y: &Multivector| {
        let scale = x.components().iter().chain(y.components()).fold(1.0f64, |m, v| m.max(v.abs()));
        x.max_abs_diff(y) / scale
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b, c) = (random(), random(), random());
        worst = worst.max(rel(&((a * b) * c), &(a * (b * c))));
        worst = worst.max(rel(&(a * (b + c)), &(a * b + a * c)));
        worst = worst.max(rel(&((a + b) * c), &(a * c + b * c)));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-10, "associativity/distributivity relative error {worst:e}");
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("table exact, worst triple error {worst:.1e}, {secs:.2} s"))
}

// ---------------------------------------------------------------- 2

fn reflection_matrix(n: Vector3<f64>, d: f64) -> Matrix4<f64> {
    let (len, mut m) = (n.norm(), Matrix4::identity());
    let (n, d) = (n / len, d / len);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(nalgebra::Matrix3::identity() - 2.0 * n * n.transpose()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(2.0 * d * n));
    m
}

fn random_motion(rng: &mut ChaCha8Rng) -> (Versor, Matrix4<f64>) {
    let (mut v, mut m) = (Versor::identity(), Matrix4::identity());
    for _ in 0..rng.gen_range(1..5) {
        let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let (pv, pm) = match rng.gen_range(0..3) {
            0 => {
                let angle = rng.gen_range(-3.0..3.0);
                let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(dir), angle);
                (Versor::rotor(dir.into(), angle).unwrap(), r.to_homogeneous())
            }
            1 => {
                let t = dir * 5.0;
                (Versor::translator(t.into()), Matrix4::new_translation(&t))
            }
            _ => {
                let d = rng.gen_range(-3.0..3.0);
                (Versor::reflection(dir.into(), d).unwrap(), reflection_matrix(dir, d))
            }
        };
        v = pv.compose(&v);
        m = pm * m;
    }
    (v, m)
}

fn versor_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (v, m) = random_motion(&mut rng);
        let p = [0; 3].map(|_| rng.gen_range(-10.0..10.0));
        let got = ok(extract_point(&v.sandwich(&embed_point(p))))?;
        let want = m * Vector4::new(p[0], p[1], p[2], 1.0);
        worst = worst.max((Vector3::from(got) - want.xyz()).norm());
    }
    ensure!(worst < 1e-9, "largest point error {worst:e} m");
    Ok(format!("1000 pairs, largest error {worst:.1e} m"))
}

// ---------------------------------------------------------------- 3

const N: usize = 5;
const C: usize = 3;

fn mv_tensor(mv: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(vec![DIM, N, C], &component_major(mv)).unwrap()
}

fn moved(mv: &[f64], g: &Versor) -> Vec<f64> {
    let mut out = mv.to_vec();
    transform_in_place(&mut out, g);
    out
}

/// Largest relative deviation of `f(g·x)` from `g·f(x)` over 50 random motions.
fn layer_error(seed: u64, inputs: usize, f: &dyn Fn(&mut Tape<f64>, &[Var], &Versor) -> Var, out_transform: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |xs: &[Vec<f64>], g: &Versor| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(mv_tensor(x))).collect();
        let y = f(&mut tape, &vars, g);
        let data = tape.data(y).to_vec();
        if out_transform {
            token_major(&data)
        } else {
            data
        }
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = Versor::random(&mut rng, 5.0);
        let xs: Vec<Vec<f64>> = (0..inputs).map(|_| (0..N * C * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let gx: Vec<Vec<f64>> = xs.iter().map(|x| moved(x, &g)).collect();
        let lhs = run(&gx, &g);
        let base = run(&xs, &Versor::identity());
        let rhs = if out_transform { moved(&base, &g) } else { base };
        let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }
    worst
}

fn invariant_features(tape: &mut Tape<f64>, x: Var) -> Var {
    let data = token_major(tape.data(x));
    let mut f = Vec::with_capacity(N * C * C);
    for t in 0..N {
        for c in 0..C {
            for d in 0..C {
                f.push(NON_DEGENERATE.iter().map(|&k| data[(t * C + c) * DIM + k] * data[(t * C + d) * DIM + k]).sum::<f64>());
            }
        }
    }
    tape.constant(Tensor::from_f64(vec![N, C * C], &f).unwrap())
}

fn equivariance(trained: Option<&Trained>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..C * C * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layers: Vec<(&str, usize, Box<dyn Fn(&mut Tape<f64>, &[Var], &Versor) -> Var>, bool)> = vec![
        (
            "linear",
            1,
            Box::new(move |t, v, _| {
                let w = t.constant(Tensor::from_f64(vec![C, C, 9], &w).unwrap());
                t.equi_linear(v[0], w).unwrap()
            }),
            true,
        ),
        ("geometric product", 2, Box::new(|t, v, _| t.geometric_product(v[0], v[1]).unwrap()), true),
        ("gate", 1, Box::new(|t, v, _| t.mv_gate(v[0]).unwrap()), true),
        ("norm", 1, Box::new(|t, v, _| t.mv_norm(v[0]).unwrap()), true),
        (
            "join",
            2,
            // the reference point's homogeneous coordinate flips under odd versors
            Box::new(|t, v, g| {
                let r = t.constant(Tensor::from_f64(vec![1], &[if g.is_odd() { -1.3 } else { 1.3 }]).unwrap());
                t.join(v[0], v[1], r).unwrap()
            }),
            true,
        ),
        (
            "attention",
            1,
            Box::new(|t, v, _| {
                let f = invariant_features(t, v[0]);
                let q = t.reshape(f, vec![N, 1, C * C]).unwrap();
                t.attention(q, f, f, &[(0, N)]).unwrap()
            }),
            false,
        ),
    ];
    let mut details = Vec::new();
    for (i, (name, inputs, f, out_transform)) in layers.iter().enumerate() {
        let err = layer_error(30 + i as u64, *inputs, f.as_ref(), *out_transform);
        ensure!(err < 1e-9, "{name} layer relative error {err:e}");
        details.push(format!("{name} {err:.0e}"));
    }
    let t = trained.ok_or("predictive surrogate unavailable")?;
    let model = &t.gatr;
    let mut worst = 0.0f64;
    for (k, &link) in t.val.iter().take(50).enumerate() {
        let scene = ok(t.data.link_scene(link))?;
        let g = Versor::random(&mut rng, 10.0);
        let predict = |s: &Scene| -> Result<f64, String> {
            let seq = ok(tokenize_scene(s, None, Mode::Predictive, &model.norm))?;
            Ok(ok(model.predict_power_db(&[seq]))?[0])
        };
        let d = (predict(&scene.transformed(&g))? - predict(&scene)?).abs();
        worst = worst.max(d);
        ensure!(d < 1e-3, "transform {k} (odd: {}) moved the gatr prediction by {d} dB", g.is_odd());
    }
    let cfg = TrainConfig { steps: 500, batch_size: 32, eval_every: 0, ..Default::default() };
    let (transformer, _) = ok(train_model(small_config(Variant::Transformer, Task::Predictive), &t.data, &cfg, |_| {}))?;
    let links: Vec<usize> = t.val.iter().take(200).copied().collect();
    let base = ok(evaluate(&transformer, &t.data, &links, Transform::None, 0))?;
    let rotated = ok(evaluate(&transformer, &t.data, &links, Transform::Rotation, 1))?;
    let shift = base.predictions_db.iter().zip(&rotated.predictions_db).map(|(a, b)| (a - b).abs()).sum::<f64>() / links.len() as f64;
    ensure!(shift > 1.0, "trained transformer moved only {shift:.3} dB on average under rotation");
    Ok(format!(
        "layers [{}]; gatr worst {worst:.1e} dB over 50 motions; trained transformer shifts {shift:.2} dB under rotation",
        details.join(", ")
    ))
}

// ---------------------------------------------------------------- 4

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn network_gradcheck(variant: Variant, data: &Dataset) -> Result<f64, String> {
    let config = ModelConfig { variant, task: Task::Predictive, blocks: 1, mv_channels: 2, scalar_channels: 4, heads: 2, transformer_width: 8 };
    let model = ok(Model::new(config, &mut ChaCha8Rng::seed_from_u64(9)))?;
    let norm = PowerNorm { mean: -80.0, std: 15.0 };
    let seqs = (0..2).map(|i| tokenize_scene(&data.link_scene(i)?, None, Mode::Predictive, &norm)).collect::<Result<Vec<_>, _>>();
    let batch = ok(Batch::from_sequences(&ok(seqs)?, model.config.in_scalars()))?;
    let inputs: Vec<Tensor<f64>> = model
        .layout()
        .iter()
        .map(|e| {
            let vals: Vec<f64> = model.params[e.offset..e.offset + e.len()].iter().map(|&p| p as f64).collect();
            Tensor::from_f64(e.shape.clone(), &vals).unwrap()
        })
        .collect();
    let width = model.config.out_scalars();
    let report = ok(gradcheck(
        |tape, vars| {
            let pv = ParamVars { vars: vars.to_vec() };
            let input = batch.input(tape)?;
            let (_, out_s) = model.forward(tape, &pv, &input)?;
            let flat = tape.reshape(out_s, vec![batch.num_tokens() * width, 1])?;
            let rows: Vec<usize> = batch.link_rows.iter().map(|&r| r * width).collect();
            let y = tape.gather(flat, &rows)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        },
        &inputs,
        1e-6,
        1e-4,
    ))?;
    ensure!(report.passed, "{variant:?} network: {report:?}");
    Ok(report.max_rel_error)
}

fn objective_error(surrogate: &dyn PowerSurrogate, meas: &[Measurement], a: Antenna, orientation: bool) -> Result<f64, String> {
    let (_, gp, go) = ok(objective(surrogate, meas, &[a]))?[0];
    let f = |x: Antenna| -> Result<f64, String> { Ok(ok(objective(surrogate, meas, &[x]))?[0].0) };
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for k in 0..if orientation { 6 } else { 3 } {
        let (mut p, mut m) = (a, a);
        if k < 3 {
            p.pos[k] += h;
            m.pos[k] -= h;
        } else {
            p.ori[k - 3] += h;
            m.ori[k - 3] -= h;
        }
        numeric.push((f(p)? - f(m)?) / (2.0 * h));
        analytic.push(if k < 3 { gp[k] } else { go[k - 3] });
    }
    let floor = 1e-3 * numeric.iter().fold(1e-9f64, |m, x| m.max(x.abs()));
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut check = |name: &str, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> wgatr::Result<Var>, inputs: Vec<Tensor<f64>>| -> Result<(), String> {
        let r = ok(gradcheck(f, &inputs, 1e-5, 1e-4))?;
        ensure!(r.passed, "{name}: {r:?}");
        worst = worst.max(r.max_rel_error);
        Ok(())
    };
    let mv = |rng: &mut ChaCha8Rng| random_tensor(rng, vec![DIM, 3, 2]);
    let (x, y, probe) = (mv(&mut rng), mv(&mut rng), mv(&mut rng));
    let w = random_tensor(&mut rng, vec![2, 2, EQUI_COEFFS]);
    let weighted = |t: &mut Tape<f64>, y: Var, p: Var| -> wgatr::Result<Var> {
        let m = t.mul(y, p)?;
        Ok(t.sum(m))
    };
    check("equivariant linear", &|t, v| { let y = t.equi_linear(v[0], v[1])?; weighted(t, y, v[2]) }, vec![x.clone(), w, probe.clone()])?;
    check("geometric product", &|t, v| { let y = t.geometric_product(v[0], v[1])?; weighted(t, y, v[2]) }, vec![x.clone(), y.clone(), probe.clone()])?;
    let r = random_tensor(&mut rng, vec![3]);
    check("join", &|t, v| { let y = t.join(v[0], v[1], v[3])?; weighted(t, y, v[2]) }, vec![x.clone(), y.clone(), probe.clone(), r])?;
    check("gate", &|t, v| { let y = t.mv_gate(v[0])?; weighted(t, y, v[1]) }, vec![x.clone(), probe.clone()])?;
    check("norm", &|t, v| { let y = t.mv_norm(v[0])?; weighted(t, y, v[1]) }, vec![x, probe])?;
    let (q, k, v, p) = (
        random_tensor(&mut rng, vec![5, 2, 3]),
        random_tensor(&mut rng, vec![5, 3]),
        random_tensor(&mut rng, vec![5, 4]),
        random_tensor(&mut rng, vec![5, 2, 4]),
    );
    check("attention", &|t, x| { let y = t.attention(x[0], x[1], x[2], &[(0, 2), (2, 3)])?; weighted(t, y, x[3]) }, vec![q, k, v, p])?;
    let (a, b, p) = (random_tensor(&mut rng, vec![3, 4]), random_tensor(&mut rng, vec![4, 5]), random_tensor(&mut rng, vec![3, 5]));
    check(
        "dense layers",
        &|t, x| {
            let m = t.matmul(x[0], x[1])?;
            let n = t.layer_norm(m)?;
            let g = t.gelu(n);
            let s = t.softmax(g, 1)?;
            weighted(t, s, x[2])
        },
        vec![a, b, p],
    )?;
    let data = ok(generate_dataset(4, 4, &GeneratorSpec { tx_per_scene: 2, rx_per_scene: 3, ..Default::default() }, Default::default()))?;
    let gatr = network_gradcheck(Variant::Gatr, &data)?;
    let transformer = network_gradcheck(Variant::Transformer, &data)?;
    worst = worst.max(gatr).max(transformer);

    let cfg = TrainConfig { steps: 60, batch_size: 8, val_fraction: 0.0, ..Default::default() };
    let (model, _) = ok(train_model(small_config(Variant::Gatr, Task::Predictive), &data, &cfg, |_| {}))?;
    let spec = GeneratorSpec { tx_per_scene: 3, rx_per_scene: 1, ..Default::default() };
    let scene = ok(generate_scene(&mut ChaCha8Rng::seed_from_u64(3), &spec))?;
    let mut network = ok(NetworkSurrogate::new(&model, &scene))?;
    network.double = true;
    let oracle = ok(OracleSurrogate::new(&scene, TraceOptions::default()))?;
    let meas: Vec<Measurement> = (0..3).map(|t| Measurement { tx: t, power_db: -60.0 - 5.0 * t as f64 }).collect();
    let (lo, hi) = scene.bounding_box();
    let mut loc_worst = 0.0f64;
    for _ in 0..5 {
        let ori = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let a = Antenna { pos: [0, 1, 2].map(|k| rng.gen_range(lo[k] + 0.2..hi[k] - 0.2)), ori: ori.into() };
        loc_worst = loc_worst.max(objective_error(&network, &meas, a, true)?);
        loc_worst = loc_worst.max(objective_error(&oracle, &meas, a, false)?);
    }
    ensure!(loc_worst < 1e-4, "localization objective relative error {loc_worst:e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("layers and networks {worst:.1e}, localization objective {loc_worst:.1e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 5

fn oracle_physics() -> Outcome {
    let mut scene = Scene {
        frequency_hz: 3.5e9,
        materials: standard_materials(),
        faces: vec![],
        tx: vec![Antenna { pos: [0.0; 3], ori: [0.0, 0.0, 1.0] }],
        rx: vec![Antenna { pos: [0.0, 1.0, 0.0], ori: [0.0, 0.0, 1.0] }],
    };
    let h = ok(simulate_link(&scene, scene.tx[0].position(), scene.rx[0].position(), TraceOptions::default()))?;
    let closed_form = 20.0 * (SPEED_OF_LIGHT / 3.5e9 / (4.0 * std::f64::consts::PI)).log10();
    ensure!((h.power_db + 43.33).abs() <= 0.01, "free space at 1 m: {} dB", h.power_db);
    ensure!((h.power_db - closed_form).abs() < 1e-12, "free space {} vs closed form {closed_form}", h.power_db);

    let room = GeneratorSpec { rooms_min: 1, rooms_max: 1, tx_per_scene: 1, rx_per_scene: 1, ..Default::default() };
    let mut mirror_worst = 0.0f64;
    let mut reflections = 0;
    for seed in 0..10 {
        scene = ok(generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &room))?;
        let (tx, rx) = (scene.tx[0].position(), scene.rx[0].position());
        for p in ok(trace_paths(&scene, 0, 0, 1, 0))? {
            if let [i] = p.interactions[..] {
                ensure!(i.kind == InteractionKind::Reflect, "unexpected interaction {i:?}");
                let (n, d) = scene.faces[i.face].plane();
                let image = tx - 2.0 * (n.dot(&tx) - d) * n;
                mirror_worst = mirror_worst.max(((image - rx).norm() - p.length_m).abs());
                reflections += 1;
            }
        }
    }
    ensure!(reflections > 0, "no single reflections found");
    ensure!(mirror_worst < 1e-12, "mirror-image length off by {mirror_worst:e} m");

    let multi = GeneratorSpec { rooms_min: 2, rooms_max: 3, tx_per_scene: 1, rx_per_scene: 1, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut recip, mut motion) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let s = ok(generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &multi))?;
        let (a, b) = (s.tx[0].position(), s.rx[0].position());
        let fwd = ok(simulate_link(&s, a, b, TraceOptions::default()))?;
        let rev = ok(simulate_link(&s, b, a, TraceOptions::default()))?;
        let (p, q) = (10f64.powf(fwd.power_db / 10.0), 10f64.powf(rev.power_db / 10.0));
        recip = recip.max((p - q).abs() / p);
        for _ in 0..3 {
            let m = s.transformed(&Versor::random(&mut rng, 20.0));
            let h = ok(simulate_link(&m, m.tx[0].position(), m.rx[0].position(), TraceOptions::default()))?;
            motion = motion.max((h.power_db - fwd.power_db).abs());
        }
    }
    ensure!(recip <= 1e-12, "reciprocity relative error {recip:e}");
    ensure!(motion < 1e-9, "motion changed the power by {motion:e} dB");
    Ok(format!(
        "1 m free space {:.4} dB; {reflections} mirror paths within {mirror_worst:.0e} m; reciprocity {recip:.0e}; motions {motion:.0e} dB",
        h.power_db
    ))
}

// ---------------------------------------------------------------- 6

fn learning(slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let data = ok(generate_dataset(1, 200, &GeneratorSpec::default(), TraceOptions::default()))?;
    let generated = start.elapsed().as_secs_f64();
    let cfg = TrainConfig { steps: 1000, batch_size: 32, eval_every: 250, ..Default::default() };
    let (gatr, report) = ok(train_model(small_config(Variant::Gatr, Task::Predictive), &data, &cfg, |r| {
        eprintln!("    step {} val MAE {:.3} dB", r.step, r.val_mae_db)
    }))?;
    let secs = start.elapsed().as_secs_f64();
    let (_, val) = data.split_by_scene(cfg.val_fraction, cfg.seed);
    let mae = report.final_val_mae_db;
    let links = data.links.len();
    *slot = Some(Trained { data, val, gatr, val_mae_db: mae });
    ensure!(links >= 9000, "only {links} links");
    ensure!(mae <= 3.0, "held-out MAE {mae:.3} dB after {} steps", cfg.steps);
    ensure!(secs < 7200.0, "took {secs:.0} s");

    let small = ok(generate_dataset(4, 4, &GeneratorSpec { tx_per_scene: 2, rx_per_scene: 3, ..Default::default() }, Default::default()))?;
    let ten: Vec<usize> = (0..10).collect();
    let config = ModelConfig { blocks: 2, mv_channels: 8, scalar_channels: 16, heads: 4, ..small_config(Variant::Gatr, Task::Predictive) };
    let mut model = ok(Model::new(config, &mut ChaCha8Rng::seed_from_u64(0)))?;
    let powers: Vec<f64> = ten.iter().map(|&i| small.links[i].channel.power_db).collect();
    model.norm = ok(PowerNorm::fit(&powers))?;
    let seqs = ten.iter().map(|&i| tokenize_scene(&small.link_scene(i)?, None, Mode::Predictive, &model.norm)).collect::<Result<Vec<_>, _>>();
    let seqs = ok(seqs)?;
    let targets: Vec<f64> = powers.iter().map(|&p| model.norm.normalize(p)).collect();
    let before = ok(loss_and_gradient(&model, &seqs, &targets))?.0;
    let overfit = TrainConfig { steps: 400, batch_size: 10, lr: 3e-3, flip_prob: 0.0, involution_prob: 0.0, eval_every: 0, ..Default::default() };
    ok(train(&mut model, &small, &ten, &[], &overfit, |_| {}))?;
    let after = ok(loss_and_gradient(&model, &seqs, &targets))?.0;
    ensure!(after * 10.0 <= before, "ten-link loss only fell from {before:.4} to {after:.4}");
    Ok(format!(
        "{links} links generated in {generated:.1} s; held-out MAE {mae:.3} dB after 1000 steps ({secs:.0} s); ten-link loss {before:.3} -> {after:.4}"
    ))
}

// ---------------------------------------------------------------- 7

fn sample_efficiency(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("dataset unavailable")?;
    let configs = [small_config(Variant::Gatr, Task::Predictive), small_config(Variant::Transformer, Task::Predictive)];
    let cfg = TrainConfig { steps: 500, batch_size: 32, eval_every: 0, ..Default::default() };
    let rows = ok(data_efficiency_sweep(&t.data, &configs, &[0.1], &[0, 1, 2], &cfg, |r| {
        eprintln!("    {}", r.csv_fields().join(","))
    }))?;
    let fields: Vec<Vec<String>> = rows.iter().map(|r| r.csv_fields()).collect();
    let path = artifacts().join("data_efficiency.csv");
    std::fs::write(&path, ok(csv_bytes(&wgatr::training::SWEEP_HEADER, &fields))?).map_err(|e| e.to_string())?;
    let mean = |v: Variant| {
        let m: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.val_mae_db).collect();
        m.iter().sum::<f64>() / m.len() as f64
    };
    let (g, tr) = (mean(Variant::Gatr), mean(Variant::Transformer));
    ensure!(g <= tr, "gatr {g:.3} dB vs transformer {tr:.3} dB");
    Ok(format!("10% of the data, 3 seeds: gatr {g:.3} dB, transformer {tr:.3} dB; CSV at {}", path.display()))
}

// ---------------------------------------------------------------- 8

fn localization_trend() -> Outcome {
    let cfg = SweepConfig {
        trials: 100,
        tx_counts: vec![1, 4, 8],
        seed: 3,
        generator: GeneratorSpec { rooms_min: 1, rooms_max: 1, ..Default::default() },
        measurement_trace: TraceOptions::default(),
        localize: LocalizeOptions { restarts: 4, steps: 150, screen: 64, ..Default::default() },
    };
    let (rows, _) = ok(localization_sweep(&cfg, SurrogateKind::Oracle(TraceOptions::default())))?;
    let summary: Vec<String> =
        rows.iter().map(|r| format!("{} Tx mean {:.2} m median {:.2} m", r.tx_count, r.mean_error_m, r.median_error_m)).collect();
    for w in rows.windows(2) {
        ensure!(w[1].mean_error_m <= w[0].mean_error_m, "mean error rises from {} to {} Tx: {}", w[0].tx_count, w[1].tx_count, summary.join("; "));
    }
    let eight = rows.iter().find(|r| r.tx_count == 8).unwrap();
    ensure!(eight.median_error_m < 0.6, "8 Tx median {:.3} m", eight.median_error_m);
    Ok(format!("100 single-room trials: {}", summary.join("; ")))
}

// ---------------------------------------------------------------- 9

fn conditioned_rows_equal(model: &Model, cond: &Example, sample: &Example, mask: &[bool]) -> bool {
    let (a, _) = cond.encode(&model.norm);
    let (b, _) = sample.encode(&model.norm);
    mask.iter().enumerate().filter(|(_, m)| !**m).all(|(i, _)| {
        a[i * RAW_WIDTH..(i + 1) * RAW_WIDTH].iter().zip(&b[i * RAW_WIDTH..(i + 1) * RAW_WIDTH]).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn rx_cloud(model: &Model, dcfg: &DiffusionConfig, ex: &Example, power_db: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, String> {
    let mut e = ex.clone();
    e.channel.power_db = power_db;
    let samples = ok(sample(model, dcfg, &e, &e.mask(MaskKind::Rx), Sampler::Ddim, n, seed))?;
    Ok(samples.iter().map(|s| s.scene.rx[0].pos.to_vec()).collect())
}

/// One room with its transmitter at the centre and many receivers, so a
/// single power reading constrains the receiver to a shell around it.
fn ambiguous_room() -> Result<Dataset, String> {
    let spec = GeneratorSpec { rooms_min: 1, rooms_max: 1, tx_per_scene: 1, rx_per_scene: 400, ..Default::default() };
    let mut data = ok(generate_dataset(2, 1, &spec, TraceOptions::default()))?;
    let (lo, hi) = data.scenes[0].bounding_box();
    data.scenes[0].tx[0].pos = ((lo + hi) / 2.0).into();
    let tracer = ok(Tracer::new(&data.scenes[0], data.scenes[0].tx[0].position(), TraceOptions::default()))?;
    for link in &mut data.links {
        let h = ok(tracer.link(link.rx.position()))?;
        link.channel = Channel { power_db: h.power_db, delay_spread_s: h.delay_spread_s };
    }
    Ok(data)
}

fn diffusion(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("dataset and predictive surrogate unavailable")?;
    let dcfg = DiffusionConfig::default();
    let (train_links, _) = t.data.split_by_scene(TrainConfig::default().val_fraction, 0);
    let mut model = ok(Model::new(small_config(Variant::Gatr, Task::Diffusion), &mut ChaCha8Rng::seed_from_u64(0)))?;
    let tc = DiffusionTrainConfig { steps: 3000, batch_size: 32, log_every: 500, ..Default::default() };
    ok(train_diffusion(&mut model, &dcfg, &t.data, &train_links, &tc, |r| eprintln!("    step {} loss {:.4}", r.step, r.loss)))?;

    let links: Vec<usize> = t.val.iter().step_by(t.val.len() / 20).take(20).copied().collect();
    let schedule = ok(Schedule::new(&dcfg))?;
    let mut prior = 0.0f64;
    let mut diff_err = 0.0;
    for (k, &l) in links.iter().enumerate() {
        let ex = ok(dataset_example(&t.data, l))?;
        let (x0, valid) = ex.encode(&model.norm);
        let kl = prior_kl(&schedule, &x0);
        prior = prior.max(kl.iter().zip(&valid).filter(|(_, v)| **v).map(|(k, _)| *k).fold(0.0, f64::max));
        let mask = ex.mask(MaskKind::Signal);
        let samples = ok(sample(&model, &dcfg, &ex, &mask, Sampler::Ddim, 32, l as u64))?;
        ensure!(samples.iter().all(|s| conditioned_rows_equal(&model, &ex, s, &mask)), "signal inpainting altered conditioning at link {l}");
        let mean = samples.iter().map(|s| s.channel.power_db).sum::<f64>() / samples.len() as f64;
        diff_err += (mean - ex.channel.power_db).abs();
        if k < 2 {
            for kind in [MaskKind::Rx, MaskKind::Mesh] {
                let m = ex.mask(kind);
                let s = ok(sample(&model, &dcfg, &ex, &m, Sampler::Ddim, 4, l as u64))?;
                ensure!(s.iter().all(|s| conditioned_rows_equal(&model, &ex, s, &m)), "{} inpainting altered conditioning", kind.name());
            }
        }
    }
    ensure!(prior < 1e-3, "prior KL {prior:e} nats per value");
    let diff_mae = diff_err / links.len() as f64;
    let pred = ok(evaluate(&t.gatr, &t.data, &links, Transform::None, 0))?.mae_db;
    ensure!(diff_mae <= 2.0 * pred, "diffusion signal MAE {diff_mae:.3} dB vs predictive {pred:.3} dB");

    let room = ambiguous_room()?;
    let room_links: Vec<usize> = (0..room.links.len()).collect();
    let room_cfg = DiffusionConfig { mask_probs: [0.0, 0.0, 1.0, 0.0], ..Default::default() };
    let mut rx_model = ok(Model::new(small_config(Variant::Gatr, Task::Diffusion), &mut ChaCha8Rng::seed_from_u64(1)))?;
    let rx_tc = DiffusionTrainConfig { steps: 2000, batch_size: 16, lr: 3e-3, log_every: 0, ..Default::default() };
    ok(train_diffusion(&mut rx_model, &room_cfg, &room, &room_links, &rx_tc, |_| {}))?;
    let mut powers: Vec<f64> = room.links.iter().map(|l| l.channel.power_db).collect();
    powers.sort_by(f64::total_cmp);
    let (weak, strong) = (powers[powers.len() / 5], powers[4 * powers.len() / 5]);
    let ex = ok(dataset_example(&room, 0))?;
    let a = rx_cloud(&rx_model, &room_cfg, &ex, weak, 64, 1)?;
    let b = rx_cloud(&rx_model, &room_cfg, &ex, strong, 64, 2)?;
    let (dist, p) = permutation_test(&a, &b, 999, 0);
    ensure!(p < 0.01, "receiver clouds for {weak:.1} and {strong:.1} dB are not distinguishable (p = {p:.3})");

    // the multi-scene model at this budget, for reference
    let ex = ok(dataset_example(&t.data, links[0]))?;
    let h = ex.channel.power_db;
    let (_, p_multi) = permutation_test(&rx_cloud(&model, &dcfg, &ex, h - 15.0, 32, 1)?, &rx_cloud(&model, &dcfg, &ex, h + 15.0, 32, 2)?, 999, 0);
    Ok(format!(
        "conditioning bit-exact; prior KL {prior:.1e} nats; signal MAE {diff_mae:.3} dB vs predictive {pred:.3} dB (held-out {:.3}); \
         receiver clouds at {weak:.1}/{strong:.1} dB: energy distance {dist:.3}, p = {p:.3} (multi-scene model at ±15 dB: p = {p_multi:.3})",
        t.val_mae_db
    ))
}

// ---------------------------------------------------------------- 10

fn digest_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), Sha256::digest(std::fs::read(&p).unwrap()).to_vec()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 8] = ["--blocks", "1", "--mv-channels", "4", "--scalar-channels", "8", "--heads", "2"];

fn cli_commands() -> Vec<Vec<String>> {
    let cmds: Vec<Vec<&str>> = vec![
        vec!["genscenes", "--n", "6", "--tx", "2", "--rx", "3", "--out", "data"],
        [&["train", "--dataset", "data", "--steps", "30", "--batch-size", "8", "--eval-every", "10", "--out", "model.ckpt"][..], &SMALL].concat(),
        vec!["eval", "--ckpt", "model.ckpt", "--dataset", "data", "--transform", "rotation", "--report", "eval.json"],
        vec!["heatmap", "--scene", "data/scenes/scene_00000.json", "--res", "0.5", "--out", "oracle_map"],
        vec!["heatmap", "--ckpt", "model.ckpt", "--scene", "data/scenes/scene_00000.json", "--res", "0.5", "--out", "net_map"],
        vec!["localize", "--scene", "data/scenes/scene_00000.json", "--measurements", "meas.csv", "--restarts", "2", "--steps", "40", "--out", "loc_oracle.json"],
        vec!["localize", "--ckpt", "model.ckpt", "--scene", "data/scenes/scene_00000.json", "--measurements", "meas.csv", "--restarts", "2", "--steps", "40", "--out", "loc_net.json"],
        [&["diffuse-train", "--dataset", "data", "--steps", "10", "--batch-size", "4", "--log-every", "5", "--out", "diff.ckpt"][..], &SMALL].concat(),
        vec!["diffuse-sample", "--ckpt", "diff.ckpt", "--dataset", "data", "--link", "0", "--mask", "rx", "--samples", "3", "--out", "samples"],
        vec!["vlb", "--ckpt", "diff.ckpt", "--dataset", "data", "--mask", "signal", "--links", "1", "--out", "vlb.json"],
        [&["sweep-data-efficiency", "--dataset", "data", "--fractions", "0.5", "--seeds", "0,1", "--steps", "5", "--batch-size", "4", "--out", "sweep.csv"][..], &SMALL]
            .concat(),
        vec!["sweep-localization", "--trials", "3", "--tx-counts", "1,2", "--steps", "20", "--restarts", "2", "--screen", "8", "--out", "loc.csv"],
    ];
    cmds.into_iter().map(|c| c.into_iter().map(String::from).collect()).collect()
}

/// Runs every command in a fresh directory; returns stdout per command and the digests.
fn cli_run(dir: &Path) -> Result<(Vec<Vec<u8>>, Vec<(String, Vec<u8>)>), String> {
    let mut stdout = Vec::new();
    for (i, cmd) in cli_commands().iter().enumerate() {
        if i == 5 {
            std::fs::write(dir.join("meas.csv"), "tx,power_db\n0,-62.5\n1,-70.25\n").map_err(|e| e.to_string())?;
        }
        let out = Command::new(env!("CARGO_BIN_EXE_wgatr"))
            .current_dir(dir)
            .args(["--threads", "1", "--seed", "5"])
            .args(cmd)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "`{}` failed: {}", cmd.join(" "), String::from_utf8_lossy(&out.stderr));
        stdout.push(out.stdout);
    }
    Ok((stdout, digest_tree(dir)))
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (out_a, files_a) = cli_run(a.path())?;
    let (out_b, files_b) = cli_run(b.path())?;
    let cmds = cli_commands();
    for (i, (x, y)) in out_a.iter().zip(&out_b).enumerate() {
        ensure!(x == y, "stdout of `{}` differs", cmds[i][0]);
    }
    ensure!(files_a.len() == files_b.len(), "runs wrote {} and {} files", files_a.len(), files_b.len());
    for (x, y) in files_a.iter().zip(&files_b) {
        ensure!(x == y, "{} differs between runs", x.0);
    }
    Ok(format!("{} invocations of all 10 commands, {} output files byte-identical", cmds.len(), files_a.len()))
}

// ----------------------------------------------------------------

fn run(label: &str, f: impl FnOnce() -> Outcome) -> (String, Outcome, f64) {
    eprintln!("[{label}] running");
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => eprintln!("[{label}] PASS in {secs:.0} s: {d}"),
        Err(d) => eprintln!("[{label}] FAIL in {secs:.0} s: {d}"),
    }
    (label.to_string(), outcome, secs)
}

fn main() {
    let mut trained = None;
    let mut results = vec![
        run("1 GA correctness", ga_correctness),
        run("2 versor action", versor_fidelity),
        run("4 gradients", gradients),
        run("5 oracle physics", oracle_physics),
        run("6 learning sanity", || learning(&mut trained)),
    ];
    let t = trained.as_ref();
    results.push(run("3 equivariance", || equivariance(t)));
    results.push(run("7 sample efficiency", || sample_efficiency(t)));
    results.push(run("8 localization trend", localization_trend));
    results.push(run("9 diffusion", || diffusion(t)));
    results.push(run("10 reproducibility", reproducibility));
    results.sort_by_key(|r| r.0.split(' ').next().unwrap().parse::<u32>().unwrap());

    println!();
    let mut failed = 0;
    for (label, outcome, secs) in &results {
        match outcome {
            Ok(detail) => println!("PASS  criterion {label} ({secs:.0} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {label} ({secs:.0} s): {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
