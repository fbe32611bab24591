use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn ls(scores: &[f64], labels: &[u8]) -> LabeledScores {
    LabeledScores::from_binary(scores.to_vec(), labels).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

// Brute-force oracles straight from the definitions.

fn auroc_pairs(s: &LabeledScores) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in s.labels().iter().enumerate() {
        for (j, &lj) in s.labels().iter().enumerate() {
            if li && !lj {
                den += 1.0;
                let (a, b) = (s.scores()[i], s.scores()[j]);
                num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn counts_at(s: &LabeledScores, t: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (&x, &l) in s.scores().iter().zip(s.labels()) {
        if x >= t {
            if l {
                tp += 1.0
            } else {
                fp += 1.0
            }
        }
    }
    (tp, fp)
}

fn ap_rank_walk(s: &LabeledScores) -> f64 {
    let mut total = 0.0;
    for (&x, &l) in s.scores().iter().zip(s.labels()) {
        if l {
            let (tp, fp) = counts_at(s, x);
            total += tp / (tp + fp);
        }
    }
    total / s.positives() as f64
}

fn f1_exhaustive(s: &LabeledScores) -> f64 {
    let pos = s.positives() as f64;
    s.scores()
        .iter()
        .map(|&t| {
            let (tp, fp) = counts_at(s, t);
            let (p, r) = (tp / (tp + fp), tp / pos);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .fold(0.0, f64::max)
}

/// Region labels by repeated min-propagation; deliberately unlike the BFS.
fn regions_by_propagation(mask: &PixelMask) -> Vec<usize> {
    let (h, w) = (mask.height, mask.width);
    let mut label: Vec<usize> = (0..h * w).map(|i| if mask.data[i] { i + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = (y * w as isize + x) as usize;
                if label[p] == 0 {
                    continue;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = (ny * w as isize + nx) as usize;
                        if label[q] != 0 && label[q] < label[p] {
                            label[p] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

fn aupro_brute(maps: &[Tensor], masks: &[PixelMask], cap: f64) -> f64 {
    let labels: Vec<Vec<usize>> = masks.iter().map(regions_by_propagation).collect();
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().map(|&v| f64::from(v))).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let (mut fp, mut neg) = (0.0, 0.0);
        let mut overlaps = Vec::new();
        for (img, (map, lab)) in maps.iter().zip(&labels).enumerate() {
            let _ = img;
            let mut ids: Vec<usize> = lab.iter().copied().filter(|&l| l != 0).collect();
            ids.sort();
            ids.dedup();
            for id in ids {
                let members: Vec<usize> = (0..lab.len()).filter(|&p| lab[p] == id).collect();
                let hit = members.iter().filter(|&&p| f64::from(map.data()[p]) >= t).count();
                overlaps.push(hit as f64 / members.len() as f64);
            }
            for (p, &l) in lab.iter().enumerate() {
                if l == 0 {
                    neg += 1.0;
                    if f64::from(map.data()[p]) >= t {
                        fp += 1.0;
                    }
                }
            }
        }
        curve.push((fp / neg, overlaps.iter().sum::<f64>() / overlaps.len() as f64));
    }
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= cap {
            break;
        }
        if x1 > cap {
            let y = y0 + (cap - x0) / (x1 - x0) * (y1 - y0);
            area += (cap - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area / cap
}

fn map(h: usize, w: usize, v: &[f32]) -> Tensor {
    Tensor::new([h, w], v.to_vec()).unwrap()
}

fn mask(h: usize, w: usize, bits: &[u8]) -> PixelMask {
    PixelMask::new(h, w, bits.iter().map(|&b| b == 1).collect()).unwrap()
}

fn random_labeled(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> LabeledScores {
    loop {
        let scores = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let s = LabeledScores::new(scores, labels).unwrap();
        if s.positives() > 0 && s.negatives() > 0 {
            return s;
        }
    }
}

#[test]
fn auroc_examples() {
    assert!(close(auroc(&ls(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75));
    assert!(close(auroc(&ls(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0));
    assert!(close(auroc(&ls(&[0.3; 5], &[0, 1, 0, 1, 1])).unwrap(), 0.5));
    assert!(matches!(auroc(&ls(&[0.1, 0.2], &[1, 1])), Err(MetricError::Undefined { .. })));
}

#[test]
fn ap_examples() {
    assert!(close(average_precision(&ls(&[0.9, 0.8, 0.1], &[1, 0, 1])).unwrap(), 5.0 / 6.0));
    assert!(close(average_precision(&ls(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0));
    assert!(close(average_precision(&ls(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap(), 0.25));
    assert!(average_precision(&ls(&[0.9], &[0])).is_err());
}

#[test]
fn f1_examples() {
    assert!(close(f1_max(&ls(&[0.9, 0.8, 0.1], &[1, 0, 1])).unwrap(), 0.8));
    assert!(close(f1_max(&ls(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0));
    assert!(f1_max(&ls(&[0.9, 0.1], &[1, 0])).unwrap() > 0.0);
    assert!(f1_max(&ls(&[0.9, 0.1], &[0, 0])).is_err());
}

#[test]
fn labeled_scores_contract() {
    assert!(LabeledScores::new(vec![0.1], vec![]).is_err());
    assert!(LabeledScores::new(vec![f64::NAN], vec![true]).is_err());
    assert!(LabeledScores::from_binary(vec![0.1], &[2]).is_err());
}

#[test]
fn curves_match_oracles_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..200 {
        let s = random_labeled(&mut rng, 2 + i % 40, 3 + (i % 9) as u32);
        assert!(close(auroc(&s).unwrap(), auroc_pairs(&s)), "auroc {i}");
        assert!(close(average_precision(&s).unwrap(), ap_rank_walk(&s)), "ap {i}");
        assert!(close(f1_max(&s).unwrap(), f1_exhaustive(&s)), "f1 {i}");
    }
}

#[test]
fn region_labelling_is_eight_connected() {
    #[rustfmt::skip]
    let m = mask(4, 4, &[
        1, 0, 0, 0,
        0, 1, 0, 1,
        0, 0, 0, 1,
        1, 0, 0, 0,
    ]);
    let (_, count) = m.regions();
    assert_eq!(count, 3);
    assert_eq!(PixelMask::from_gray(1, 3, &[0, 127, 128]).unwrap().data, vec![false, false, true]);
}

#[test]
fn aupro_perfect_detector() {
    #[rustfmt::skip]
    let bits = [
        0, 0, 0, 0,
        0, 1, 1, 0,
        0, 1, 0, 0,
        0, 0, 0, 1,
    ];
    let m = mask(4, 4, &bits);
    let pred = map(4, 4, &bits.map(f32::from));
    for cap in [0.05, 0.3, 1.0] {
        assert!(close(aupro(std::slice::from_ref(&pred), std::slice::from_ref(&m), cap, AuproSweep::Exact).unwrap(), 1.0));
    }
}

#[test]
fn aupro_constant_map_follows_diagonal() {
    let m = mask(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
    let pred = map(3, 3, &[0.4; 9]);
    let at = |cap| aupro(std::slice::from_ref(&pred), std::slice::from_ref(&m), cap, AuproSweep::Exact).unwrap();
    assert!(close(at(1.0), 0.5));
    // Under a cap the normalized area of the diagonal is cap / 2.
    assert!(close(at(0.3), 0.15));
}

#[test]
fn aupro_half_detected_regions() {
    // Region A is scored above every normal pixel, region B below all of them.
    let mut bits = [0u8; 36];
    let mut scores = [0.5f32; 36];
    for p in [0, 1, 6, 7] {
        bits[p] = 1;
        scores[p] = 1.0;
    }
    for p in [28, 29, 34, 35] {
        bits[p] = 1;
        scores[p] = 0.0;
    }
    let m = mask(6, 6, &bits);
    let pred = map(6, 6, &scores);
    assert_eq!(m.regions().1, 2);
    let v = aupro(std::slice::from_ref(&pred), std::slice::from_ref(&m), 0.3, AuproSweep::Exact).unwrap();
    assert!(close(v, 0.5), "{v}");
    assert!(close(v, aupro_brute(&[pred], &[m], 0.3)));
}

#[test]
fn aupro_errors() {
    let m = PixelMask::empty(2, 2);
    let pred = map(2, 2, &[0.1, 0.2, 0.3, 0.4]);
    assert!(matches!(
        aupro(std::slice::from_ref(&pred), std::slice::from_ref(&m), 0.3, AuproSweep::Exact),
        Err(MetricError::Undefined { .. })
    ));
    assert!(aupro(std::slice::from_ref(&pred), std::slice::from_ref(&m), 0.0, AuproSweep::Exact).is_err());
    assert!(aupro(&[pred], &[], 0.3, AuproSweep::Exact).is_err());
}

fn random_pro_instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<PixelMask>) {
    loop {
        let images = rng.random_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..images {
            let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
            let mut bits = vec![false; h * w];
            for _ in 0..rng.random_range(0..=2) {
                let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
                let (bh, bw) = (rng.random_range(1..=3), rng.random_range(1..=3));
                for yy in y..(y + bh).min(h) {
                    for xx in x..(x + bw).min(w) {
                        bits[yy * w + xx] = true;
                    }
                }
            }
            let levels = rng.random_range(2..12);
            let scores = (0..h * w)
                .map(|p| rng.random_range(0..levels) as f32 / levels as f32 + if bits[p] { 0.3 } else { 0.0 })
                .collect();
            maps.push(Tensor::new([h, w], scores).unwrap());
            masks.push(PixelMask::new(h, w, bits).unwrap());
        }
        let regions: usize = masks.iter().map(|m| m.regions().1).sum();
        let normals: usize = masks.iter().map(|m| m.data.len() - m.anomalous()).sum();
        if (1..=3).contains(&regions) && normals > 0 {
            return (maps, masks);
        }
    }
}

#[test]
fn aupro_matches_brute_force_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200 {
        let (maps, masks) = random_pro_instance(&mut rng);
        for cap in [0.3, 1.0] {
            let fast = aupro(&maps, &masks, cap, AuproSweep::Exact).unwrap();
            let slow = aupro_brute(&maps, &masks, cap);
            assert!(close(fast, slow), "instance {i} cap {cap}: {fast} vs {slow}");
        }
    }
}

#[test]
fn quantized_sweep_is_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let (maps, masks) = random_pro_instance(&mut rng);
        let exact = aupro(&maps, &masks, 0.3, AuproSweep::Exact).unwrap();
        // Scores sit on a coarse grid, so a fine quantization is lossless.
        let q = aupro(&maps, &masks, 0.3, AuproSweep::Quantized(100_000)).unwrap();
        assert!((exact - q).abs() < 1e-6, "{exact} vs {q}");
    }
}

#[test]
fn mad_examples() {
    let vitad = [98.3, 99.4, 97.3, 97.7, 55.3, 58.7, 91.4].map(Some);
    let mad = aggregate_mad(&vitad).unwrap();
    assert_eq!(format!("{mad:.1}"), "85.4");
    let draem = [88.8, 94.7, 92.0, 88.6, 52.6, 48.6, 71.1].map(Some);
    assert!((aggregate_mad(&draem).unwrap() - 76.6).abs() <= 0.15);
    assert!(close(aggregate_mad(&[Some(0.7); 7]).unwrap(), 0.7));
    let mut missing = vitad;
    missing[4] = None;
    assert!(matches!(aggregate_mad(&missing), Err(MetricError::Contract(_))));
}

#[test]
fn report_skips_undefined_metrics() {
    let image = ls(&[0.2, 0.9], &[0, 1]);
    let maps = vec![map(2, 2, &[0.1, 0.2, 0.3, 0.4]); 2];
    let masks = vec![PixelMask::empty(2, 2); 2];
    let r = MetricReport::compute(&image, &maps, &masks, &MetricConfig::default()).unwrap();
    assert_eq!(r.image_auroc, Some(1.0));
    assert!(r.pixel_auroc.is_none() && r.pixel_aupro.is_none());
    assert!(!r.warnings.is_empty());
    assert!(close(r.mad.unwrap(), 1.0));
}

#[test]
fn report_mad_is_mean_of_fields() {
    let image = ls(&[0.2, 0.9, 0.5, 0.4], &[0, 1, 1, 0]);
    let maps = vec![map(2, 2, &[0.1, 0.8, 0.3, 0.4]), map(2, 2, &[0.9, 0.2, 0.3, 0.1])];
    let masks = vec![mask(2, 2, &[0, 1, 0, 0]), mask(2, 2, &[1, 0, 0, 0])];
    let r = MetricReport::compute(&image, &maps, &masks, &MetricConfig::default()).unwrap();
    let vals: Vec<f64> = r.values().into_iter().map(Option::unwrap).collect();
    assert!(close(r.mad.unwrap(), vals.iter().sum::<f64>() / 7.0));
    assert!(close(r.mad.unwrap(), aggregate_mad(&r.values()).unwrap()));
}

#[test]
fn class_mean_matches_mean_of_class_mads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reports: Vec<MetricReport> = (0..5)
        .map(|_| {
            let image = random_labeled(&mut rng, 12, 6);
            let (maps, masks) = random_pro_instance(&mut rng);
            MetricReport::compute(&image, &maps, &masks, &MetricConfig::default()).unwrap()
        })
        .collect();
    let mean = MetricReport::mean(&reports);
    let mean_of_mads = reports.iter().map(|r| r.mad.unwrap()).sum::<f64>() / 5.0;
    assert!(close(mean.mad.unwrap(), mean_of_mads));
}

proptest! {
    #[test]
    fn auroc_invariant_under_monotone_maps(
        scores in prop::collection::vec(-5.0f64..5.0, 2..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let labels: Vec<bool> = flips[..scores.len()].to_vec();
        let s = LabeledScores::new(scores.clone(), labels.clone()).unwrap();
        prop_assume!(s.positives() > 0 && s.negatives() > 0);
        let t = LabeledScores::new(scores.iter().map(|x| x.exp() * 3.0 + 1.0).collect(), labels.clone()).unwrap();
        prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());

        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() == scores.len() {
            let c = LabeledScores::new(scores, labels.iter().map(|l| !l).collect()).unwrap();
            prop_assert!((auroc(&s).unwrap() + auroc(&c).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_bounded_and_f1_dominates(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        flips in prop::collection::vec(any::<bool>(), 40),
        t in 0.0f64..1.0,
    ) {
        let s = LabeledScores::new(scores.clone(), flips[..scores.len()].to_vec()).unwrap();
        prop_assume!(s.positives() > 0);
        let ap = average_precision(&s).unwrap();
        let f1 = f1_max(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&f1));
        let (tp, fp) = counts_at(&s, t);
        let fixed = 2.0 * tp / (tp + fp + s.positives() as f64);
        prop_assert!(f1 + 1e-12 >= fixed);
    }
}
