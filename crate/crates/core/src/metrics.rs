//! Pooled-cell average precision.

/// Average precision of `scores` against binary `labels`, pooling every cell
/// into one ranking. Tied scores enter the curve together as one step.
///
/// Returns 0 when there are no positives.
pub fn toy_ap(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let total_pos = labels.iter().filter(|&&l| l > 0.5).count();
    if total_pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] > 0.5 {
                tp += 1;
            }
            j += 1;
        }
        seen += j - i;
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    ap
}
