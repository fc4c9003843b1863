use crate::error::{Error, Result};
use crate::videodata::Label;

fn counts(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == Label::Fake).count();
    (pos, labels.len() - pos)
}

fn check(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Validation("AUC needs at least one real and one fake video".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random fake outscores a random real, ties counting one
/// half, from the rank-sum statistic with midranks.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank keeps the statistic in integers.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        rank_sum2 += twice_mid * order[i..=j].iter().filter(|&&k| labels[k] == Label::Fake).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Pairwise count over every (fake, real) pair.
pub fn auc_brute_force(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut twice: u64 = 0;
    for (_, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i] == Label::Fake) {
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| labels[*j] == Label::Real) {
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Fraction of videos whose thresholded score (`score ≥ threshold` is fake) matches the label.
pub fn accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Validation(format!("accuracy over {} scores and {} labels", scores.len(), labels.len())));
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == (l == Label::Fake)).count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Midranks (1-based) with ties averaged.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mid;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// One-sided sign test p-value for `first < second` across pairs. Ties are dropped.
pub fn sign_test_less(pairs: &[(f64, f64)]) -> f64 {
    let wins = pairs.iter().filter(|(a, b)| a < b).count();
    let losses = pairs.iter().filter(|(a, b)| a > b).count();
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // P(X ≥ wins) for X ~ Binomial(n, 1/2).
    let ln_half_n = n as f64 * 0.5f64.ln();
    (wins..=n)
        .map(|k| (ln_choose(n, k) + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `1 − cos` between the mean real and mean fake embedding.
pub fn centroid_cosine_distance(rows: &[Vec<f32>], labels: &[Label]) -> Result<f64> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::Validation("no embeddings".into()))?;
    let mut centroids = [vec![0f64; d], vec![0f64; d]];
    let mut n = [0usize; 2];
    for (r, l) in rows.iter().zip(labels) {
        let c = l.class();
        n[c] += 1;
        for (a, &v) in centroids[c].iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    if n.contains(&0) {
        return Err(Error::Validation("centroid distance needs both classes".into()));
    }
    for c in 0..2 {
        centroids[c].iter_mut().for_each(|v| *v /= n[c] as f64);
    }
    Ok(1.0 - crate::numerics::cosine(&centroids[0], &centroids[1], 1e-12))
}
