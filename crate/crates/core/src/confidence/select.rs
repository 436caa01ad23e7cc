use crate::error::{Error, Result};

/// Mean of the token scores of one utterance.
pub fn utterance_confidence(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyUtterance);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Indices of the `ceil(percentile / 100 * n)` most confident items, in
/// their original order. Ties rank by id, lowest first.
pub fn select_top_percentile(confidences: &[Option<f64>], ids: &[&str], percentile: f64) -> Result<Vec<usize>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile} outside (0, 100]")));
    }
    assert_eq!(confidences.len(), ids.len(), "confidences and ids pair up");
    let conf: Vec<f64> = confidences.iter().map(|c| c.ok_or(Error::NoConfidences)).collect::<Result<_>>()?;
    let n = conf.len();
    // Guard against 80/100*10 landing a hair above 8.
    let keep = ((percentile / 100.0 * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.clamp(n.min(1), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then_with(|| ids[a].cmp(ids[b])));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
