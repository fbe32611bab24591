use super::{LabeledScores, MetricError};

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(s: &LabeledScores) -> Result<f64, MetricError> {
    let (pos, neg) = (s.positives(), s.negatives());
    if pos == 0 || neg == 0 {
        return Err(MetricError::undefined("auroc", "needs both classes"));
    }
    // Walking down the ranking, every positive already passed outscores the
    // current negatives.
    let mut wins = 0.0f64;
    let mut pos_above = 0usize;
    for (p, n) in s.descending_groups() {
        wins += n as f64 * (pos_above as f64 + 0.5 * p as f64);
        pos_above += p;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision with tied scores sharing one operating point.
pub fn average_precision(s: &LabeledScores) -> Result<f64, MetricError> {
    let pos = s.positives();
    if pos == 0 {
        return Err(MetricError::undefined("average_precision", "no positives"));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0f64);
    for (p, n) in s.descending_groups() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += p as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// Best F1 over thresholds at the distinct scores, predicting `score >= τ`.
pub fn f1_max(s: &LabeledScores) -> Result<f64, MetricError> {
    let pos = s.positives();
    if pos == 0 {
        return Err(MetricError::undefined("f1_max", "no positives"));
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (p, n) in s.descending_groups() {
        tp += p;
        fp += n;
        // F1 = 2PR/(P+R) simplifies to 2tp / (predicted + actual).
        let f1 = 2.0 * tp as f64 / (tp + fp + pos) as f64;
        best = best.max(f1);
    }
    Ok(best)
}
