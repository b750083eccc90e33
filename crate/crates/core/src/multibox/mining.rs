//! Hard negative mining.

/// Background priors with the highest confidence loss, `ratio` per positive
/// (a single one when there are no positives). Returned in descending-loss
/// order; equal losses keep ascending prior order.
pub fn hard_negative_mine(conf_loss: &[f64], positive: &[bool], ratio: f64) -> Vec<usize> {
    debug_assert_eq!(conf_loss.len(), positive.len());
    let num_pos = positive.iter().filter(|&&p| p).count();
    let mut negatives: Vec<usize> = (0..conf_loss.len()).filter(|&i| !positive[i]).collect();
    let wanted = if num_pos == 0 {
        1
    } else {
        (ratio * num_pos as f64).floor() as usize
    };
    negatives.sort_by(|&a, &b| conf_loss[b].total_cmp(&conf_loss[a]));
    negatives.truncate(wanted);
    negatives
}
