//! Brute-force metric definitions, written for clarity rather than speed and
//! sharing no code with the library.

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= t {
            if l {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

/// Probability a random positive outscores a random negative, ties half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

/// Mean, over positives, of the precision at that positive's score.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut total = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            let (tp, fp) = counts_at(scores, labels, s);
            total += tp / (tp + fp);
        }
    }
    total / pos
}

pub fn f1_max(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut best: f64 = 0.0;
    for &t in scores {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp > 0.0 {
            let (p, r) = (tp / (tp + fp), tp / pos);
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    best
}

/// 8-connected region ids (0 = background) by flood fill from each seed in
/// raster order, using an explicit stack.
pub fn regions(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut label = vec![0; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        label[start] = next;
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = (ny as usize) * w + nx as usize;
                    if mask[q] && label[q] == 0 {
                        label[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    label
}

/// Normalized area under the per-region-overlap curve up to `cap`, from a
/// full threshold sweep over every distinct map value.
pub fn aupro(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, cap: f64) -> f64 {
    let labels: Vec<Vec<usize>> = masks.iter().map(|m| regions(m, h, w)).collect();
    let mut ts: Vec<f64> = maps.iter().flatten().copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &ts {
        let (mut fp, mut neg) = (0.0, 0.0);
        let mut overlaps = Vec::new();
        for (map, lab) in maps.iter().zip(&labels) {
            let n_regions = lab.iter().copied().max().unwrap_or(0);
            for id in 1..=n_regions {
                let size = lab.iter().filter(|&&l| l == id).count() as f64;
                let hit = lab.iter().zip(map).filter(|(&l, &v)| l == id && v >= t).count() as f64;
                overlaps.push(hit / size);
            }
            for (&l, &v) in lab.iter().zip(map) {
                if l == 0 {
                    neg += 1.0;
                    if v >= t {
                        fp += 1.0;
                    }
                }
            }
        }
        let pro = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
        curve.push((fp / neg, pro));
    }
    let mut area = 0.0;
    for seg in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        if x0 >= cap {
            break;
        }
        if x1 > cap {
            let y = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area / cap
}
