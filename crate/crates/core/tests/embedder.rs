use emobank::embedder::{batch_loss, info_nce, train_embedder, EmbedderConfig, EmbedderModel, EmotionPrior};
use emobank::numerics::{grad_check_params, Tape, Tensor};
use emobank::rng::{self, normal_vec};
use emobank::synthdata::{generate_corpus, sample_pairs, ClipRecord, CorpusConfig};
use emobank::Error;
use proptest::prelude::*;

fn small_corpus(seed: u64) -> Vec<ClipRecord> {
    let cfg = CorpusConfig {
        identities: 2,
        emotions: 2,
        intensities: 1,
        clips_per_cell: 3,
        frames: 3,
        d_raw: 4,
        ..Default::default()
    };
    generate_corpus(&cfg, seed).unwrap()
}

fn small_cfg() -> EmbedderConfig {
    EmbedderConfig { d_s: 4, ffn_hidden: 5, audio_layers: 1, fusion_layers: 2, ..Default::default() }
}

fn model(d_raw: usize, cfg: &EmbedderConfig, seed: u64) -> EmbedderModel {
    EmbedderModel::new(d_raw, cfg, &mut rng::seeded(seed)).unwrap()
}

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng::seeded(seed))
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

#[test]
fn encode_shapes_are_frames_by_d_s_for_random_clips() {
    let corpus = generate_corpus(&CorpusConfig::default(), 3).unwrap();
    let cfg = EmbedderConfig::default();
    let m = model(24, &cfg, 1);
    let mut r = rng::seeded(8);
    for _ in 0..100 {
        let clip = &corpus[rand::Rng::random_range(&mut r, 0..corpus.len())];
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, clip).unwrap();
        assert_eq!(tape.value(enc.s_alpha).shape(), &[16, 32]);
        assert_eq!(tape.value(enc.s_beta).shape(), &[16, 32]);
        let fused = m.fuse(&mut tape, enc.s_alpha, enc.s_beta);
        assert_eq!(tape.value(fused).shape(), &[16, 32]);
    }
}

#[test]
fn dropped_visual_encodes_to_zeros() {
    let mut clip = small_corpus(1)[0].clone();
    clip.visual.drop_out();
    let m = model(4, &small_cfg(), 2);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &clip).unwrap();
    assert!(tape.value(enc.s_beta).data().iter().all(|&x| x == 0.0));
    assert!(tape.value(enc.s_alpha).data().iter().any(|&x| x != 0.0));
}

#[test]
fn identity_visual_projection_passes_frames_through() {
    let clip = small_corpus(1)[0].clone();
    let mut m = model(4, &small_cfg(), 2);
    m.set_visual_identity().unwrap();
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &clip).unwrap();
    assert_eq!(tape.value(enc.s_beta), &clip.visual.frames);
    let wide = model(5, &small_cfg(), 2);
    assert!(wide.clone().set_visual_identity().is_err());
}

#[test]
fn frame_count_mismatch_is_a_data_error() {
    let mut clip = small_corpus(1)[0].clone();
    clip.audio.frames = matrix(2, 4, 0);
    let m = model(4, &small_cfg(), 2);
    assert!(matches!(m.encode(&mut Tape::new(), &clip), Err(Error::Data(_))));
}

#[test]
fn zero_lambda_fusion_is_bit_exact_identity() {
    let mut m = model(4, &small_cfg(), 5);
    m.set_lambda(0.0);
    let mut tape = Tape::new();
    let a = tape.leaf(matrix(3, 4, 1));
    let b = tape.leaf(matrix(3, 4, 2));
    let fused = m.fuse(&mut tape, a, b);
    assert_eq!(tape.value(fused), tape.value(a));
}

#[test]
fn single_frame_fusion_adds_projected_value() {
    let cfg = EmbedderConfig { fusion_layers: 1, ..small_cfg() };
    let mut m = model(4, &cfg, 5);
    m.set_lambda(1.0);
    let (sa, sb) = (matrix(1, 4, 3), matrix(1, 4, 4));
    let wv = m.params.value(m.params.id("fuse.0.wv").unwrap()).data().to_vec();
    let proj = mat_mul(sb.data(), &wv, 1, 4, 4);
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(sa.clone()), tape.leaf(sb));
    let fused = m.fuse(&mut tape, a, b);
    for j in 0..4 {
        assert!((tape.value(fused).data()[j] - (sa.data()[j] + proj[j])).abs() <= 1e-14);
    }
}

#[test]
fn two_frame_fusion_matches_hand_rolled_attention() {
    let cfg = EmbedderConfig { fusion_layers: 2, ..small_cfg() };
    let mut m = model(4, &cfg, 9);
    m.set_lambda(0.7);
    let (sa, sb) = (matrix(2, 4, 10), matrix(2, 4, 11));
    let d = 4;
    let get = |name: &str| m.params.value(m.params.id(name).unwrap()).data().to_vec();
    let mut s = sa.data().to_vec();
    for l in 0..2 {
        let q = mat_mul(&s, &get(&format!("fuse.{l}.wq")), 2, d, d);
        let k = mat_mul(sb.data(), &get(&format!("fuse.{l}.wk")), 2, d, d);
        let v = mat_mul(sb.data(), &get(&format!("fuse.{l}.wv")), 2, d, d);
        let lambda = get(&format!("fuse.{l}.lambda"))[0];
        let mut next = s.clone();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            for c in 0..d {
                let ca: f64 = (0..2).map(|j| logits[j].exp() / z * v[j * d + c]).sum();
                next[i * d + c] += lambda * ca;
            }
        }
        s = next;
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(sa), tape.leaf(sb));
    let fused = m.fuse(&mut tape, a, b);
    for (x, y) in tape.value(fused).data().iter().zip(&s) {
        assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn identical_frames_have_zero_variance() {
    let m = model(4, &small_cfg(), 1);
    let r = vec![0.3, -1.2, 2.0, 0.5];
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::from_rows(&vec![r.clone(); 5]).unwrap());
    let eps = [1.0, -2.0, 0.5, 3.0];
    let p = m.aggregate(&mut tape, s, Some(&eps)).unwrap();
    let (mu, s2, sample) = (tape.value(p.mu).data(), tape.value(p.sigma2).data(), tape.value(p.sample).data());
    for j in 0..4 {
        assert!(s2[j] >= 0.0 && s2[j] < 1e-24);
        assert!((mu[j] - r[j]).abs() < 1e-15);
        assert!((sample[j] - r[j]).abs() < 1e-11);
    }
}

#[test]
fn zero_pool_weights_give_frame_mean() {
    let mut m = model(4, &small_cfg(), 1);
    m.set_pool(&[0.0; 4]);
    let frames = matrix(3, 4, 6);
    let mut tape = Tape::new();
    let s = tape.leaf(frames.clone());
    let p = m.aggregate(&mut tape, s, None).unwrap();
    for j in 0..4 {
        let mean = (0..3).map(|i| frames.row(i)[j]).sum::<f64>() / 3.0;
        assert!((tape.value(p.mu).data()[j] - mean).abs() <= 1e-15);
    }
    assert!(tape.value(p.weights).data().iter().all(|w| (w - 1.0 / 3.0).abs() <= 1e-15));
}

#[test]
fn weighted_two_frame_moments() {
    let cfg = EmbedderConfig { d_s: 2, ..small_cfg() };
    let mut m = model(2, &cfg, 1);
    // softmax([ln 3, 0]) = [0.75, 0.25]
    m.set_pool(&[3f64.ln(), 0.0]);
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::eye(2));
    let p = m.aggregate(&mut tape, s, None).unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    assert!(close(tape.value(p.weights).data(), &[0.75, 0.25]));
    assert!(close(tape.value(p.mu).data(), &[0.75, 0.25]));
    assert!(close(tape.value(p.sigma2).data(), &[0.1875, 0.1875]));
}

#[test]
fn wrong_width_sequence_cannot_be_aggregated() {
    let m = model(4, &small_cfg(), 1);
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(m.aggregate(&mut tape, s, None), Err(Error::Data(_))));
}

#[test]
fn reparameterised_samples_match_prior_moments() {
    let mu = vec![0.5, -1.0, 2.0, 0.0];
    let sigma2 = vec![0.01, 0.25, 1.0, 4.0];
    let n = 10_000;
    let mut r = rng::seeded(21);
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| EmotionPrior::from_moments(mu.clone(), sigma2.clone(), &normal_vec(&mut r, 4)).sample)
        .collect();
    for j in 0..4 {
        let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu[j]).abs() <= 3.0 * (sigma2[j] / n as f64).sqrt(), "coord {j}: mean {mean}");
        assert!((var - sigma2[j]).abs() <= 0.1 * sigma2[j], "coord {j}: var {var}");
    }
    let exact = EmotionPrior::from_moments(mu.clone(), vec![0.0; 4], &[9.0; 4]);
    assert_eq!(exact.sample, mu);
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let corpus = small_corpus(4);
    let cfg = EmbedderConfig { negatives: 2, tau: 0.5, ..small_cfg() };
    let mut m = model(4, &cfg, 3);
    let batch = sample_pairs(&corpus, 2, 2, &mut rng::seeded(1)).unwrap();
    let mut params = m.params.clone();
    let report = grad_check_params(
        |tape, p| {
            m.params = p.clone();
            batch_loss(tape, &m, &batch, &cfg, true, &mut rng::seeded(77)).unwrap()
        },
        &mut params,
        None,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
    assert_eq!(report.coordinates, params.numel());
}

#[test]
fn info_nce_closed_forms() {
    let a = [1.0, 0.0];
    let loss = info_nce(&a, &[2.0, 0.0], &[vec![0.0, 3.0]], 1.0).unwrap();
    let e = 1f64.exp();
    assert!((loss - (-(e / (e + 1.0)).ln())).abs() <= 1e-9);
    assert!((loss - 0.313262).abs() <= 1e-6);
    let sym = info_nce(&a, &[1.0, 1.0], &[vec![1.0, -1.0]], 0.3).unwrap();
    assert!((sym - 2f64.ln()).abs() <= 1e-9);
    // three negatives at cosine 0, tau 0.5: -log(e²/(e²+3))
    let negs = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 0.5]];
    let l3 = info_nce(&a, &a, &negs, 0.5).unwrap();
    let e2 = 2f64.exp();
    assert!((l3 - (-(e2 / (e2 + 3.0)).ln())).abs() <= 1e-9);
}

#[test]
fn info_nce_rejects_zero_vectors_and_bad_arguments() {
    let a = [1.0, 0.0];
    assert!(matches!(info_nce(&[0.0, 0.0], &a, &[a.to_vec()], 1.0), Err(Error::Numeric(_))));
    assert!(info_nce(&a, &a, &[], 1.0).is_err());
    assert!(info_nce(&a, &a, &[a.to_vec()], 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_is_positive_and_falls_as_positive_aligns(theta1 in 0.0f64..3.0, dtheta in 0.01f64..0.1, tau in 0.05f64..2.0) {
        let a = [1.0, 0.0];
        let negs = vec![vec![0.3, 1.0], vec![-1.0, 0.2]];
        let at = |t: f64| info_nce(&a, &[t.cos(), t.sin()], &negs, tau).unwrap();
        let (far, near) = (at(theta1 + dtheta), at(theta1));
        prop_assert!(near > 0.0);
        prop_assert!(near < far);
    }

    #[test]
    fn aggregation_weights_sum_to_one_and_variance_is_nonnegative(seed in any::<u64>(), n in 1usize..6) {
        let m = model(4, &small_cfg(), seed);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::randn(&[n, 4], 3.0, &mut rng::seeded(seed ^ 1)));
        let p = m.aggregate(&mut tape, s, None).unwrap();
        let total: f64 = tape.value(p.weights).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(tape.value(p.sigma2).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn zero_step_training_keeps_initialisation_and_runs_are_deterministic() {
    let corpus = small_corpus(2);
    let cfg = EmbedderConfig { steps: 0, eval_pairs: 4, batch_size: 4, negatives: 2, ..small_cfg() };
    let a = train_embedder(&corpus, &cfg, 5).unwrap();
    assert!(a.losses.is_empty());
    assert_eq!(a.initial_eval_loss, a.final_eval_loss);
    let cfg = EmbedderConfig { steps: 15, ..cfg };
    let (x, y) = (train_embedder(&corpus, &cfg, 5).unwrap(), train_embedder(&corpus, &cfg, 5).unwrap());
    assert_eq!(x.losses, y.losses);
    assert_eq!(x.losses.len(), 15);
    for (p, q) in x.model.params.iter().zip(y.model.params.iter()) {
        assert_eq!(p.1.value, q.1.value);
    }
    // training moves the parameters away from the zero-step model
    let moved = a.model.params.iter().zip(x.model.params.iter()).any(|(p, q)| p.1.value != q.1.value);
    assert!(moved);
}

#[test]
fn checkpoint_round_trip_preserves_parameters_to_f32() {
    let m = model(4, &small_cfg(), 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.dceb");
    m.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DCEB");
    let back = EmbedderModel::load(&path).unwrap();
    assert_eq!(back.d_s(), 4);
    assert_eq!(back.fusion_layers(), 2);
    for ((_, p), (_, q)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(p.name, q.name);
        for (x, y) in p.value.data().iter().zip(q.value.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn invalid_config_is_rejected() {
    let corpus = small_corpus(2);
    for cfg in [
        EmbedderConfig { tau: 0.0, ..small_cfg() },
        EmbedderConfig { d_s: 0, ..small_cfg() },
        EmbedderConfig { p_visual_drop: 1.0, ..small_cfg() },
    ] {
        assert!(matches!(train_embedder(&corpus, &cfg, 0), Err(Error::Config(_))));
    }
}
