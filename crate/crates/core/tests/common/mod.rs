//! Helpers shared by the integration test targets.

use psmi_core::glm::logit;

/// Greedy matching by exhaustive scan: nearest available control on the
/// logit scale, lowest index on ties, nothing beyond the caliper.
pub fn brute_force_match(ps: &[f64], t: &[f64], order: &[usize], width: f64) -> (Vec<(usize, usize)>, Vec<usize>) {
    let lg: Vec<f64> = ps.iter().map(|&p| logit(p)).collect();
    let mut used = vec![false; ps.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for &tr in order {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..ps.len() {
            if t[c] == 1.0 || used[c] {
                continue;
            }
            let d = (lg[c] - lg[tr]).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        match best {
            Some((d, c)) if d <= width => {
                used[c] = true;
                pairs.push((tr, c));
            }
            _ => unmatched.push(tr),
        }
    }
    (pairs, unmatched)
}
