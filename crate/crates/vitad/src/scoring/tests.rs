use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Tokens `[h·w, C]` to `[C, h, w]`.
fn chw(t: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    t.transpose().unwrap().reshape([t.cols(), h, w]).unwrap()
}

fn loss_of(f: &[Tensor<f64>], g: &[Tensor<f64>], kind: LossKind) -> f64 {
    let mut tape = Tape::new();
    let pairs: Vec<(Var, Var)> = f
        .iter()
        .zip(g)
        .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
        .collect();
    let l = training_loss(&mut tape, &pairs, kind).unwrap();
    tape.value(l).item()
}

#[test]
fn identical_orthogonal_antipodal_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random(&[8, 3, 4], &mut rng);
    let same = stage_anomaly_map(&f, &f).unwrap();
    assert_eq!(same.shape(), &[3, 4]);
    assert!(same.data().iter().all(|&v| v.abs() < 1e-7));
    let neg = stage_anomaly_map(&f, &f.map(|v| -v)).unwrap();
    assert!(neg.data().iter().all(|&v| (v - 2.0).abs() < 1e-7));

    // Two channels: (x, y) against (−y, x) is orthogonal everywhere.
    let a = random(&[2, 2, 3], &mut rng);
    let d = a.data();
    let mut rot = vec![0.0; 12];
    rot[..6].copy_from_slice(&d[6..].iter().map(|v| -v).collect::<Vec<_>>());
    rot[6..].copy_from_slice(&d[..6]);
    let b = Tensor::new([2, 2, 3], rot).unwrap();
    let orth = stage_anomaly_map(&a, &b).unwrap();
    assert!(orth.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(stage_anomaly_map(&a, &f).is_err());
}

#[test]
fn token_and_chw_maps_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random(&[12, 5], &mut rng);
    let g = random(&[12, 5], &mut rng);
    let tok = token_anomaly_map(&f, &g, (3, 4)).unwrap();
    let img = stage_anomaly_map(&chw(&f, 3, 4), &chw(&g, 3, 4)).unwrap();
    assert!(tok.max_abs_diff(&img) < 1e-12);
}

#[test]
fn loss_matches_scalar_oracle() {
    // 2 channels on a 2×2 grid, three stages, evaluated by hand.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let f: Vec<_> = (0..3).map(|_| random(&[4, 2], &mut rng)).collect();
        let g: Vec<_> = (0..3).map(|_| random(&[4, 2], &mut rng)).collect();
        let mut pixel = 0.0;
        let mut flat = 0.0;
        for (a, b) in f.iter().zip(&g) {
            let (a, b) = (a.data(), b.data());
            let mut stage = 0.0;
            for p in 0..4 {
                let (x0, x1, y0, y1) = (a[2 * p], a[2 * p + 1], b[2 * p], b[2 * p + 1]);
                let cos = (x0 * y0 + x1 * y1) / ((x0 * x0 + x1 * x1).sqrt() * (y0 * y0 + y1 * y1).sqrt() + 1e-8);
                stage += (1.0 - cos) / 4.0;
            }
            pixel += stage;
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            flat += 1.0 - dot / (na * nb + 1e-8);
        }
        assert!((loss_of(&f, &g, LossKind::CosinePixel) - pixel).abs() < 1e-12);
        assert!((loss_of(&f, &g, LossKind::CosineFlat) - flat).abs() < 1e-12);
    }
}

#[test]
fn loss_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<_> = (0..3).map(|_| random(&[6, 4], &mut rng)).collect();
    for kind in [LossKind::L1, LossKind::Mse] {
        assert_eq!(loss_of(&f, &f, kind), 0.0);
    }
    for kind in [LossKind::CosineFlat, LossKind::CosinePixel] {
        assert!(loss_of(&f, &f, kind).abs() < 1e-7);
    }
    // Orthogonal at every position: (x, y, 0, 0) against (0, 0, x, y).
    let orth = |t: &Tensor<f64>| {
        let mut d = t.data().to_vec();
        for row in d.chunks_exact_mut(4) {
            row[2] = row[0];
            row[3] = row[1];
            row[0] = 0.0;
            row[1] = 0.0;
        }
        Tensor::new([6, 4], d).unwrap()
    };
    let base: Vec<_> = f
        .iter()
        .map(|t| {
            let mut d = t.data().to_vec();
            for row in d.chunks_exact_mut(4) {
                row[2] = 0.0;
                row[3] = 0.0;
            }
            Tensor::new([6, 4], d).unwrap()
        })
        .collect();
    let g: Vec<_> = base.iter().map(orth).collect();
    assert!((loss_of(&base, &g, LossKind::CosinePixel) - 3.0).abs() < 1e-12);
}

#[test]
fn constrained_pairs_validation() {
    assert_eq!(constrained_pairs(&[3, 2, 1], &[1, 2, 3]).unwrap(), vec![(1, 2), (2, 1), (3, 0)]);
    assert!(matches!(constrained_pairs(&[3, 2, 1], &[]), Err(Error::Config(_))));
    assert!(constrained_pairs(&[3, 2, 1], &[4]).is_err());
}

#[test]
fn final_map_examples() {
    let m = Tensor::<f64>::full([4, 4], 0.2);
    let f = final_anomaly_map(&[m.clone(), m.clone(), m.clone()], 16, 16).unwrap();
    assert!(f.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    let r = Tensor::<f64>::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(final_anomaly_map(std::slice::from_ref(&r), 2, 2).unwrap(), r);
    let up = final_anomaly_map(&[r], 4, 4).unwrap();
    assert!((up.data()[5] - 0.375).abs() < 1e-12);
    assert!(final_anomaly_map(&[m, Tensor::zeros([2, 2])], 4, 4).is_err());
}

#[test]
fn image_score_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random(&[9, 7], &mut rng);
    let max = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(image_score(&m, 1).unwrap(), max);
    assert!((image_score(&Tensor::<f64>::full([8, 8], 0.3), 5).unwrap() - 0.3).abs() < 1e-12);
    for k in 1..=5 {
        let mut hot = Tensor::<f64>::zeros([9, 9]);
        hot.data_mut()[4 * 9 + 4] = 1.0;
        let s = image_score(&hot, k).unwrap();
        assert!((s - 1.0 / (k * k) as f64).abs() < 1e-12);
    }
    assert!(image_score(&m, 8).is_err());
    assert!(image_score(&m, 0).is_err());
}

#[test]
fn smoothing_preserves_constants() {
    let m = Tensor::<f64>::full([6, 5], 1.5);
    let s = gaussian_smooth(&m, 1.2).unwrap();
    assert!(s.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    assert!(gaussian_smooth(&m, 0.0).is_err());
}

#[test]
fn loss_names_round_trip() {
    for k in [LossKind::CosineFlat, LossKind::CosinePixel, LossKind::L1, LossKind::Mse] {
        assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
    }
    assert!("huber".parse::<LossKind>().is_err());
}

proptest! {
    #[test]
    fn raising_a_pixel_never_lowers_the_score(
        vals in prop::collection::vec(0.0f64..2.0, 36),
        idx in 0usize..36,
        bump in 0.0f64..3.0,
        k in 1usize..=6,
    ) {
        let m = Tensor::new([6, 6], vals.clone()).unwrap();
        let mut raised = vals;
        raised[idx] += bump;
        let r = Tensor::new([6, 6], raised).unwrap();
        prop_assert!(image_score(&r, k).unwrap() >= image_score(&m, k).unwrap());
        let max = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(image_score(&m, k).unwrap() <= max + 1e-12);
    }

    #[test]
    fn cosine_maps_ignore_decoder_scale(seed in 0u64..1000, s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&[6, 3, 3], &mut rng);
        let g = random(&[6, 3, 3], &mut rng);
        let a = stage_anomaly_map(&f, &g).unwrap();
        let b = stage_anomaly_map(&f, &g.map(|v| v * s)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
        prop_assert!(a.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn losses_within_bounds(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<_> = (0..3).map(|_| random(&[4, 3], &mut rng)).collect();
        let g: Vec<_> = (0..3).map(|_| random(&[4, 3], &mut rng)).collect();
        for kind in [LossKind::CosineFlat, LossKind::CosinePixel] {
            let l = loss_of(&f, &g, kind);
            prop_assert!((0.0..=6.0).contains(&l));
        }
        prop_assert!(loss_of(&f, &g, LossKind::L1) >= 0.0);
        prop_assert!(loss_of(&f, &g, LossKind::Mse) >= 0.0);
    }
}
