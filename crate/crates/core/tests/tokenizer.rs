//! Tokenizer round trips and covariance under Euclidean motions.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wgatr::ga::Versor;
use wgatr::io::Dataset;
use wgatr::scene::{generate_scene, GeneratorSpec, Scene};
use wgatr::tokenizer::*;

fn scene(seed: u64) -> Scene {
    let spec = GeneratorSpec { tx_per_scene: 1, rx_per_scene: 1, ..Default::default() };
    generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &spec).unwrap()
}

fn max_diff(a: &TokenSequence, b: &TokenSequence) -> f64 {
    a.mv_array().iter().zip(b.mv_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tokenizing_commutes_with_proper_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let norm = PowerNorm::default();
    for seed in 0..20 {
        let s = scene(seed);
        let g = Versor::random_rigid(&mut rng, 10.0);
        let a = tokenize_scene(&s.transformed(&g), None, Mode::Predictive, &norm).unwrap();
        let b = tokenize_scene(&s, None, Mode::Predictive, &norm).unwrap().transformed(&g);
        assert!(max_diff(&a, &b) < 1e-9);
        assert_eq!(a.scalar_array(), b.scalar_array());
    }
}

#[test]
fn improper_motions_commute_up_to_grade_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let norm = PowerNorm::default();
    for seed in 0..20 {
        let s = scene(seed);
        let g = Versor::random_rigid(&mut rng, 10.0).compose(&Versor::random_reflection(&mut rng));
        let a = tokenize_scene(&s.transformed(&g), None, Mode::Predictive, &norm).unwrap();
        let b = tokenize_scene(&s, None, Mode::Predictive, &norm).unwrap().transformed(&g).involuted();
        assert!(max_diff(&a, &b) < 1e-9, "seed {seed}: {}", max_diff(&a, &b));
    }
}

#[test]
fn reciprocity_flip_matches_swapped_scene() {
    let norm = PowerNorm::default();
    for seed in 0..10 {
        let s = scene(seed);
        let swapped = Scene { tx: s.rx.clone(), rx: s.tx.clone(), ..s.clone() };
        let mut a = reciprocity_flip(&tokenize_scene(&s, None, Mode::Predictive, &norm).unwrap()).unwrap();
        // the flip relabels antennas in place; the swapped scene lists them in the other order
        let nf = s.faces.len();
        a.tokens.swap(nf, nf + 1);
        let b = tokenize_scene(&swapped, None, Mode::Predictive, &norm).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
        assert_eq!(a.scalar_array(), b.scalar_array());
    }
}

#[test]
fn dataset_links_round_trip_through_tokens() {
    let data = wgatr::io::generate_dataset(3, 3, &GeneratorSpec::default(), Default::default()).unwrap();
    let norm = PowerNorm::fit(&data.links.iter().map(|l| l.channel.power_db).collect::<Vec<_>>()).unwrap();
    check_links(&data, &norm);
}

fn check_links(data: &Dataset, norm: &PowerNorm) {
    for (i, link) in data.links.iter().enumerate().step_by(7) {
        let s = data.link_scene(i).unwrap();
        let seq = tokenize_scene(&s, Some(&link.channel), Mode::Diffusion, norm).unwrap();
        assert_eq!(seq.len(), s.faces.len() + 4);
        let (back, ch) = detokenize(&seq).unwrap();
        let ch = ch.unwrap();
        assert!((ch.power_db - link.channel.power_db).abs() < 1e-9);
        assert!((ch.delay_spread_s - link.channel.delay_spread_s).abs() < 1e-20);
        assert_eq!(back.faces.len(), s.faces.len());
        for (f, g) in back.faces.iter().zip(&s.faces) {
            assert_eq!(f.material, g.material);
            for k in 0..3 {
                for c in 0..3 {
                    assert!((f.v[k][c] - g.v[k][c]).abs() < 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_recovers_the_scene(seed in 0u64..10_000, power in -150.0f64..-20.0, delay in 0.0f64..1e-7) {
        let s = scene(seed);
        let norm = PowerNorm { mean: -80.0, std: 12.0 };
        let ch = Channel { power_db: power, delay_spread_s: delay };
        let (back, got) = detokenize(&tokenize_scene(&s, Some(&ch), Mode::Predictive, &norm).unwrap()).unwrap();
        let got = got.unwrap();
        prop_assert!((got.power_db - power).abs() < 1e-9);
        prop_assert!((got.delay_spread_s - delay).abs() < 1e-20);
        prop_assert_eq!(back.tx.len(), 1);
        prop_assert_eq!(back.rx.len(), 1);
        for k in 0..3 {
            prop_assert!((back.tx[0].pos[k] - s.tx[0].pos[k]).abs() < 1e-12);
            prop_assert!((back.rx[0].ori[k] - s.rx[0].ori[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_twice_is_identity(seed in 0u64..10_000) {
        let seq = tokenize_scene(&scene(seed), None, Mode::Predictive, &PowerNorm::default()).unwrap();
        let back = reciprocity_flip(&reciprocity_flip(&seq).unwrap()).unwrap();
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn token_count_is_faces_plus_fixed_tokens(seed in 0u64..10_000) {
        let s = scene(seed);
        let p = tokenize_scene(&s, None, Mode::Predictive, &PowerNorm::default()).unwrap();
        let d = tokenize_scene(&s, None, Mode::Diffusion, &PowerNorm::default()).unwrap();
        prop_assert_eq!(p.len(), s.faces.len() + 3);
        prop_assert_eq!(d.len(), s.faces.len() + 4);
        prop_assert_eq!(d.origin, Some(d.len() - 1));
    }
}
