use super::MetricError;

/// Average precision of `scores` against 0/1 `labels`.
///
/// Samples are ranked by descending score, ties keeping input order; AP is
/// the mean over positives of the precision at their rank.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Mean AP over the attribute columns in `attributes`, for row-major
/// `scores`/`labels` with one row per sample. Attributes without positives
/// are skipped with a warning; an error is returned if none remain.
pub fn mean_ap(scores: &[Vec<f64>], labels: &[Vec<f64>], attributes: &[usize]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Shape(format!("{} score rows vs {} label rows", scores.len(), labels.len())));
    }
    let mut aps = Vec::with_capacity(attributes.len());
    for &a in attributes {
        let s: Vec<f64> = scores.iter().map(|r| r[a]).collect();
        let l: Vec<f64> = labels.iter().map(|r| r[a]).collect();
        match average_precision(&s, &l) {
            Ok(ap) => aps.push(ap),
            Err(MetricError::NoPositives) => log::warn!("attribute {a} has no positives; excluded from mAP"),
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(MetricError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
