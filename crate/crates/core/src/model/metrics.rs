//! Reconstruction and classification metrics.

use crate::error::{Error, Result};
use crate::phantom::LabelFrame;
use crate::N_LABELS;

/// Mean per-class Dice over the foreground classes present in either frame.
/// Two frames without any foreground agree perfectly.
pub fn dice_frame(a: &LabelFrame, b: &LabelFrame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Parameter(format!("dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut inter = [0usize; N_LABELS];
    let mut ca = [0usize; N_LABELS];
    let mut cb = [0usize; N_LABELS];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        ca[x as usize] += 1;
        cb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let scores: Vec<f64> = (1..N_LABELS)
        .filter(|&c| ca[c] + cb[c] > 0)
        .map(|c| 2.0 * inter[c] as f64 / (ca[c] + cb[c]) as f64)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Frame-averaged Dice between two sequences.
pub fn dice(a: &[LabelFrame], b: &[LabelFrame]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Parameter(format!("sequence lengths {} and {} differ or are empty", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += dice_frame(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// Mann-Whitney AUC: `P(s+ > s-) + 0.5 P(s+ = s-)`, computed from average
/// ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Parameter("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Ranks doubled so tied groups stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += twice_avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}
