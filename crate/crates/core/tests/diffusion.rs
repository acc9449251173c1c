//! Forward-process statistics, masked training, inpainting, sampler
//! determinism, rotation behaviour of the denoiser and the variational bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wgatr::diffusion::*;
use wgatr::ga::Versor;
use wgatr::io::{generate_dataset, Dataset};
use wgatr::net::{Model, ModelConfig, Task, Variant};
use wgatr::scene::GeneratorSpec;
use wgatr::tokenizer::PowerNorm;

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn forward_process_variance_matches_schedule() {
    let s = Schedule::new(&DiffusionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 10, 250, 1000] {
        let draws: Vec<f64> = (0..100_000).map(|_| q_sample(&s, &[0.7], t, &normals(1, &mut rng)).unwrap()[0]).collect();
        let (m, v) = mean_var(&draws);
        let ab = s.alpha_bar(t);
        assert!((v / (1.0 - ab) - 1.0).abs() < 0.02, "t={t}: variance {v} vs {}", 1.0 - ab);
        assert!((m - ab.sqrt() * 0.7).abs() < 0.02 * (1.0 - ab).sqrt().max(0.1));
    }
}

/// Runs the forward chain step by step and regresses `x_{t−1}` on `x_t`.
#[test]
fn posterior_matches_the_simulated_chain() {
    let cfg = DiffusionConfig { steps: 5, beta_start: 0.1, beta_end: 0.3, ddim_steps: 5, ..Default::default() };
    let s = Schedule::new(&cfg).unwrap();
    let x0 = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    for t in 2..=5 {
        let mut prev = Vec::with_capacity(n);
        let mut cur = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = x0;
            for k in 1..=t {
                let b = s.beta(k);
                let e: f64 = StandardNormal.sample(&mut rng);
                let next = (1.0 - b).sqrt() * x + b.sqrt() * e;
                if k == t {
                    prev.push(x);
                }
                x = next;
            }
            cur.push(x);
        }
        let (mc, vc) = mean_var(&cur);
        let (mp, _) = mean_var(&prev);
        let cov = cur.iter().zip(&prev).map(|(a, b)| (a - mc) * (b - mp)).sum::<f64>() / (n as f64 - 1.0);
        let slope = cov / vc;
        let intercept = mp - slope * mc;
        let resid: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| b - intercept - slope * a).collect();
        let (_, vr) = mean_var(&resid);
        let (c0, ct, var) = s.posterior(t);
        assert!((slope / ct - 1.0).abs() < 0.02, "t={t}: slope {slope} vs {ct}");
        assert!((intercept / (c0 * x0) - 1.0).abs() < 0.02, "t={t}: intercept {intercept} vs {}", c0 * x0);
        assert!((vr / var - 1.0).abs() < 0.02, "t={t}: variance {vr} vs {var}");
    }
}

#[test]
fn prior_term_vanishes_at_the_end_of_the_chain() {
    let s = Schedule::new(&DiffusionConfig::default()).unwrap();
    assert!(prior_kl(&s, &[0.0])[0] < 1e-3);
    assert!(q_sample(&s, &[0.0], 1001, &[0.0]).is_err());
}

fn small_config() -> ModelConfig {
    ModelConfig { variant: Variant::Gatr, task: Task::Diffusion, blocks: 2, mv_channels: 4, scalar_channels: 8, heads: 2, transformer_width: 16 }
}

fn fast_diffusion() -> DiffusionConfig {
    DiffusionConfig { steps: 50, ddim_steps: 10, ..Default::default() }
}

fn dataset(scenes: usize) -> Dataset {
    generate_dataset(3, scenes, &GeneratorSpec { tx_per_scene: 1, rx_per_scene: 2, ..Default::default() }, Default::default()).unwrap()
}

fn model() -> Model {
    let mut m = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.norm = PowerNorm { mean: -80.0, std: 15.0 };
    m
}

#[test]
fn loss_ignores_noise_at_conditioned_tokens() {
    let data = dataset(2);
    let ex = dataset_example(&data, 0).unwrap();
    let m = model();
    let s = Schedule::new(&fast_diffusion()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in MaskKind::ALL {
        let mask = ex.mask(kind);
        let a = normals(ex.num_tokens() * RAW_WIDTH, &mut rng);
        let mut b = normals(ex.num_tokens() * RAW_WIDTH, &mut rng);
        for (i, &gen) in mask.iter().enumerate() {
            if gen {
                b[i * RAW_WIDTH..(i + 1) * RAW_WIDTH].copy_from_slice(&a[i * RAW_WIDTH..(i + 1) * RAW_WIDTH]);
            }
        }
        let na = noised_example(&s, &ex, &m.norm, &mask, 20, &a).unwrap();
        let nb = noised_example(&s, &ex, &m.norm, &mask, 20, &b).unwrap();
        assert_eq!(na.item.x, nb.item.x);
        let la = masked_loss(&m, &s, &[na]).unwrap();
        let lb = masked_loss(&m, &s, &[nb]).unwrap();
        assert_eq!(la, lb, "{}", kind.name());
    }
}

#[test]
fn empty_and_origin_masks_are_rejected() {
    let data = dataset(1);
    let ex = dataset_example(&data, 0).unwrap();
    let s = Schedule::new(&fast_diffusion()).unwrap();
    let noise = vec![0.0; ex.num_tokens() * RAW_WIDTH];
    let none = vec![false; ex.num_tokens()];
    assert!(matches!(noised_example(&s, &ex, &PowerNorm::default(), &none, 3, &noise), Err(wgatr::Error::Argument(_))));
    let all = vec![true; ex.num_tokens()];
    assert!(noised_example(&s, &ex, &PowerNorm::default(), &all, 3, &noise).is_err());
    assert!(sample(&model(), &fast_diffusion(), &ex, &none, Sampler::Ddim, 1, 0).is_err());
}

#[test]
fn predictive_checkpoints_cannot_sample() {
    let data = dataset(1);
    let ex = dataset_example(&data, 0).unwrap();
    let pred = Model::new(ModelConfig { task: Task::Predictive, ..small_config() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mask = ex.mask(MaskKind::Signal);
    let err = sample(&pred, &fast_diffusion(), &ex, &mask, Sampler::Ddpm, 1, 0);
    assert!(matches!(err, Err(wgatr::Error::Configuration(_))));
}

#[test]
fn inpainting_reproduces_conditioning_exactly() {
    let data = dataset(2);
    let m = model();
    for link in [0, 3] {
        let ex = dataset_example(&data, link).unwrap();
        for kind in MaskKind::ALL {
            let mask = ex.mask(kind);
            if !mask.iter().any(|&g| g) {
                continue;
            }
            for sampler in [Sampler::Ddpm, Sampler::Ddim] {
                for out in sample(&m, &fast_diffusion(), &ex, &mask, sampler, 3, 7).unwrap() {
                    let nf = ex.scene.faces.len();
                    for (i, f) in out.scene.faces.iter().enumerate() {
                        if !mask[i] {
                            assert_eq!(f, &ex.scene.faces[i]);
                        }
                    }
                    if !mask[nf] {
                        assert_eq!(out.scene.tx, ex.scene.tx);
                    }
                    if !mask[nf + 1] {
                        assert_eq!(out.scene.rx, ex.scene.rx);
                    }
                    if !mask[nf + 2] {
                        assert_eq!(out.channel, ex.channel);
                    }
                    assert_eq!(out.scene.materials, ex.scene.materials);
                }
            }
        }
    }
}

#[test]
fn mesh_mask_keeps_floor_and_ceiling() {
    let data = dataset(1);
    let ex = dataset_example(&data, 0).unwrap();
    let mask = ex.mask(MaskKind::Mesh);
    let kept = mask.iter().filter(|&&g| !g).count();
    // floor and ceiling of one room (two triangles each) plus the antennas, link and origin
    assert!(kept >= 4 + 4, "{kept} conditioned tokens");
    for (f, &gen) in ex.scene.faces.iter().zip(&mask) {
        let c = f.cross();
        assert_eq!(!gen, c.z.abs() > 0.99 * c.norm());
    }
}

#[test]
fn full_length_ddim_is_deterministic() {
    let data = dataset(1);
    let ex = dataset_example(&data, 0).unwrap();
    let cfg = DiffusionConfig { steps: 30, ddim_steps: 30, ..Default::default() };
    let mask = ex.mask(MaskKind::Rx);
    let m = model();
    let a = sample(&m, &cfg, &ex, &mask, Sampler::Ddim, 4, 11).unwrap();
    let b = sample(&m, &cfg, &ex, &mask, Sampler::Ddim, 4, 11).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.scene.rx, y.scene.rx);
    }
    let c = sample(&m, &cfg, &ex, &mask, Sampler::Ddim, 4, 12).unwrap();
    assert_ne!(a[0].scene.rx, c[0].scene.rx);
}

/// Rotates raw token rows about the vertical axis through the origin.
fn rotate_rows(x: &[f64], n_faces: usize, g: &Versor) -> Vec<f64> {
    let mut out = x.to_vec();
    let n = x.len() / RAW_WIDTH;
    for i in 0..n {
        let row = &mut out[i * RAW_WIDTH..(i + 1) * RAW_WIDTH];
        let mut rot = |slot: usize| {
            let v = g.transform_direction([row[slot], row[slot + 1], row[slot + 2]]);
            row[slot..slot + 3].copy_from_slice(&v);
        };
        if i < n_faces {
            (0..3).for_each(|v| rot(3 * v));
        } else if i < n_faces + 2 {
            rot(0);
            rot(3);
        }
    }
    out
}

#[test]
fn denoiser_commutes_with_vertical_rotations() {
    let data = dataset(2);
    let ex = dataset_example(&data, 1).unwrap();
    let m = model();
    let nf = ex.scene.faces.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x0, _) = ex.encode(&m.norm);
    let s = Schedule::new(&fast_diffusion()).unwrap();
    let mask = ex.mask(MaskKind::None);
    for angle in [0.3, 1.9, -2.5] {
        let g = Versor::rotor([0.0, 0.0, 1.0], angle).unwrap();
        let noisy = q_sample(&s, &x0, 25, &normals(x0.len(), &mut rng)).unwrap();
        let item = |x: Vec<f64>| DenoiseItem { n_faces: nf, x, mask: mask.clone(), t: 25 };
        let p = predict_x0(&m, &[item(noisy.clone()), item(rotate_rows(&noisy, nf, &g))], 50).unwrap();
        let expect = rotate_rows(&p[0], nf, &g);
        let scale = expect.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (a, b) in p[1].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn rotated_conditioning_rotates_the_sample_distribution() {
    let data = dataset(2);
    let ex = dataset_example(&data, 2).unwrap();
    let m = model();
    let g = Versor::rotor([0.0, 0.0, 1.0], 1.1).unwrap();
    let moved = Example::new(ex.scene.transformed(&g), ex.channel).unwrap();
    let mask = ex.mask(MaskKind::Rx);
    let a: Vec<Vec<f64>> = sample(&m, &fast_diffusion(), &ex, &mask, Sampler::Ddpm, 48, 1)
        .unwrap()
        .iter()
        .map(|e| g.transform_point(e.scene.rx[0].pos).to_vec())
        .collect();
    let b: Vec<Vec<f64>> =
        sample(&m, &fast_diffusion(), &moved, &mask, Sampler::Ddpm, 48, 2).unwrap().iter().map(|e| e.scene.rx[0].pos.to_vec()).collect();
    let (_, p) = permutation_test(&a, &b, 199, 0);
    assert!(p > 0.01, "rotated samples differ from samples of the rotated input (p = {p})");
    let shifted: Vec<Vec<f64>> = b.iter().map(|v| vec![v[0] + 2.0, v[1], v[2]]).collect();
    let (_, p) = permutation_test(&a, &shifted, 199, 0);
    assert!(p <= 0.01, "a shifted cloud went undetected (p = {p})");
}

#[test]
fn bound_is_finite_for_every_task_mask() {
    let data = dataset(2);
    let m = model();
    for link in 0..data.links.len() {
        let ex = dataset_example(&data, link).unwrap();
        for kind in [MaskKind::Signal, MaskKind::Rx, MaskKind::Mesh] {
            let r = vlb(&m, &fast_diffusion(), &ex, &ex.mask(kind), 0).unwrap();
            assert!(r.total_nats.is_finite() && r.nats_per_dim.is_finite(), "{}: {r:?}", kind.name());
            assert!(r.prior_nats >= 0.0 && r.diffusion_nats >= 0.0);
        }
    }
}

#[test]
fn denoising_terms_shrink_while_fitting_a_single_example() {
    let data = generate_dataset(4, 1, &GeneratorSpec { tx_per_scene: 1, rx_per_scene: 1, ..Default::default() }, Default::default()).unwrap();
    let ex = dataset_example(&data, 0).unwrap();
    let dcfg = DiffusionConfig { steps: 100, ddim_steps: 10, ..Default::default() };
    let mut m = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = DiffusionTrainConfig { steps: 100, batch_size: 8, lr: 2e-3, log_every: 0, ..Default::default() };
    let mask = ex.mask(MaskKind::None);
    let mut terms = Vec::new();
    for stage in 0..4 {
        if stage > 0 {
            train_diffusion(&mut m, &dcfg, &data, &[0], &DiffusionTrainConfig { seed: stage, ..cfg.clone() }, |_| {}).unwrap();
        } else {
            m.norm = PowerNorm::fit(&[data.links[0].channel.power_db]).unwrap();
        }
        terms.push(vlb(&m, &dcfg, &ex, &mask, 9).unwrap().diffusion_nats);
    }
    assert!(terms.windows(2).all(|w| w[1] < w[0]), "L_(t-1) sums over checkpoints: {terms:?}");
}

#[test]
fn training_is_deterministic() {
    let data = dataset(2);
    let links: Vec<usize> = (0..data.links.len()).collect();
    let cfg = DiffusionTrainConfig { steps: 4, batch_size: 4, log_every: 2, ..Default::default() };
    let run = || {
        let mut m = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let log = train_diffusion(&mut m, &fast_diffusion(), &data, &links, &cfg, |_| {}).unwrap();
        (m.params, log)
    };
    assert_eq!(run(), run());
}
