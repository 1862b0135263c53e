//! Mock MoE router: balance-ratio schedules that realize target imbalance
//! statistics, and gating logits that reproduce prescribed routing counts
//! exactly under top-k selection.
//!
//! The balance ratio (br) of a rank is its routed data volume divided by
//! the volume under perfectly uniform dispatch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("infeasible balance-ratio profile: {0}")]
    InfeasibleProfile(String),
    #[error("schedule needs at least 8 samples, got {0}")]
    TooFewSamples(usize),
    #[error("infeasible routing counts: {0}")]
    InfeasibleCounts(String),
}

/// Pooled statistics of the balance ratio over one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceRatioProfile {
    pub br_min: f64,
    pub br_max: f64,
    pub br_avg: f64,
    pub br_std: f64,
    pub br_med: f64,
    pub br_skew: f64,
}

impl BalanceRatioProfile {
    pub fn balanced() -> BalanceRatioProfile {
        BalanceRatioProfile {
            br_min: 1.0,
            br_max: 1.0,
            br_avg: 1.0,
            br_std: 0.0,
            br_med: 1.0,
            br_skew: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        let fail = |msg: &str| Err(MoeError::InfeasibleProfile(msg.to_string()));
        if !(self.br_min <= self.br_med && self.br_med <= self.br_max) {
            return fail("median outside [min, max]");
        }
        if !(self.br_min <= self.br_avg && self.br_avg <= self.br_max) {
            return fail("mean outside [min, max]");
        }
        if self.br_std < 0.0 {
            return fail("negative std");
        }
        if self.br_min < 0.0 {
            return fail("negative balance ratio");
        }
        // Bhatia-Davis: the variance of values in [min, max] with the given
        // mean cannot exceed (max - avg)(avg - min).
        let bound = (self.br_max - self.br_avg) * (self.br_avg - self.br_min);
        if self.br_std * self.br_std > bound + 1e-12 {
            return fail("std impossible for the given min/max/avg");
        }
        Ok(())
    }
}

/// Per-gating-event, per-EP-rank balance ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrSchedule {
    pub values: Vec<Vec<f64>>,
    pub normalized: bool,
}

impl BrSchedule {
    pub fn events(&self) -> usize {
        self.values.len()
    }

    pub fn ranks(&self) -> usize {
        self.values.first().map(Vec::len).unwrap_or(0)
    }

    /// Value for a gating event and EP-group position; indices wrap so a
    /// schedule can drive arbitrarily long iterations.
    pub fn value(&self, event: usize, rank: usize) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        let row = &self.values[event % self.values.len()];
        row[rank % row.len()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pooled min/max/mean/population-std/median/Fisher-skewness of a schedule.
pub fn stats(schedule: &BrSchedule) -> BalanceRatioProfile {
    let flat: Vec<f64> = schedule.values.iter().flatten().copied().collect();
    stats_of(&flat)
}

fn stats_of(values: &[f64]) -> BalanceRatioProfile {
    assert!(!values.is_empty(), "stats of an empty schedule");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let std = m2.sqrt();
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    BalanceRatioProfile {
        br_min: sorted[0],
        br_max: sorted[sorted.len() - 1],
        br_avg: mean,
        br_std: std,
        br_med: med,
        br_skew: skew,
    }
}

/// Declared matching tolerances: avg/std/med within 5% relative, min/max
/// within 0.05 absolute, skew within 0.15.
pub fn profile_matches(target: &BalanceRatioProfile, got: &BalanceRatioProfile) -> bool {
    profile_distance(target, got) <= 1.0
}

fn profile_distance(target: &BalanceRatioProfile, got: &BalanceRatioProfile) -> f64 {
    let rel = |t: f64, g: f64| (g - t).abs() / t.abs().max(1e-9) / 0.05;
    let abs = |t: f64, g: f64| (g - t).abs() / 0.05;
    let mut score = abs(target.br_min, got.br_min).max(abs(target.br_max, got.br_max));
    score = score.max(rel(target.br_avg, got.br_avg));
    score = score.max(rel(target.br_med, got.br_med));
    if target.br_std > 1e-9 {
        score = score.max(rel(target.br_std, got.br_std));
    } else {
        score = score.max(got.br_std / 0.05);
    }
    score.max((got.br_skew - target.br_skew).abs() / 0.15)
}

/// Draws an `events x ranks` schedule whose pooled statistics match the
/// profile within the declared tolerances.
///
/// Sampling is stratified inverse-CDF over a log-normal fitted to
/// (avg, std), clipped to [min, max] and affine-corrected; the log-normal
/// scale is searched so the clipped sample also lands on the median and
/// skewness targets.
pub fn derive_schedule(
    profile: &BalanceRatioProfile,
    events: usize,
    ranks: usize,
    seed: u64,
    normalize_per_event: bool,
) -> Result<BrSchedule, MoeError> {
    let n = events * ranks;
    if n < 8 {
        return Err(MoeError::TooFewSamples(n));
    }
    profile.validate()?;

    let mut flat = if profile.br_max - profile.br_min < 1e-12 || profile.br_std < 1e-12 {
        vec![profile.br_avg; n]
    } else {
        if profile.br_avg <= 0.0 {
            return Err(MoeError::InfeasibleProfile(
                "mean must be positive for a spread profile".to_string(),
            ));
        }
        sample_matching(profile, n, seed)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    flat.shuffle(&mut rng);

    let mut values: Vec<Vec<f64>> = flat.chunks(ranks).map(|c| c.to_vec()).collect();
    if normalize_per_event {
        for row in &mut values {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            if mean > 0.0 {
                for v in row.iter_mut() {
                    *v /= mean;
                }
            }
        }
    }
    Ok(BrSchedule {
        values,
        normalized: normalize_per_event,
    })
}

fn sample_matching(profile: &BalanceRatioProfile, n: usize, seed: u64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let cv = profile.br_std / profile.br_avg;
    let base_sigma = (1.0 + cv * cv).ln().sqrt();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let scales = [1.0, 1.12, 1.25, 1.4, 1.6, 1.8, 0.9, 0.8, 0.7, 2.0, 2.3];
    for (trial, jitter_seed) in (0..6).map(|t| (t, seed.wrapping_add(t as u64 * 7919))) {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        for scale in scales {
            let sigma = base_sigma * scale;
            let mu = profile.br_avg.ln() - sigma * sigma / 2.0;
            let mut xs: Vec<f64> = (0..n)
                .map(|i| {
                    let offset = if trial == 0 { 0.5 } else { rng.random::<f64>() };
                    let p = (i as f64 + offset) / n as f64;
                    (mu + sigma * normal.inverse_cdf(p.clamp(1e-12, 1.0 - 1e-12))).exp()
                })
                .collect();
            for _ in 0..3 {
                clip(&mut xs, profile);
                affine_to(&mut xs, profile.br_avg, profile.br_std);
            }
            clip(&mut xs, profile);
            pin_extremes(&mut xs, profile);
            let score = profile_distance(profile, &stats_of(&xs));
            if best.as_ref().map(|(s, _)| score < *s).unwrap_or(true) {
                best = Some((score, xs));
            }
            if best.as_ref().unwrap().0 <= 1.0 {
                return best.unwrap().1;
            }
        }
    }
    best.unwrap().1
}

fn clip(xs: &mut [f64], profile: &BalanceRatioProfile) {
    for v in xs.iter_mut() {
        *v = v.clamp(profile.br_min, profile.br_max);
    }
}

fn affine_to(xs: &mut [f64], mean: f64, std: f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    if s < 1e-12 {
        return;
    }
    for v in xs.iter_mut() {
        *v = mean + (*v - m) * std / s;
    }
}

fn pin_extremes(xs: &mut [f64], profile: &BalanceRatioProfile) {
    if xs.len() < 2 {
        return;
    }
    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, v) in xs.iter().enumerate() {
        if *v < xs[lo] {
            lo = i;
        }
        if *v > xs[hi] {
            hi = i;
        }
    }
    xs[lo] = profile.br_min;
    xs[hi] = profile.br_max;
}

/// Token counts per rank from one br row. `count = round(br * total /
/// ranks)`; with `conserve` the rounding is largest-remainder so the counts
/// sum exactly to `total_tokens`.
pub fn br_to_counts(row: &[f64], total_tokens: u64, conserve: bool) -> Vec<u64> {
    let ranks = row.len();
    let uniform = total_tokens as f64 / ranks as f64;
    if !conserve {
        return row.iter().map(|br| (br * uniform).round().max(0.0) as u64).collect();
    }
    let raw: Vec<f64> = row.iter().map(|br| (br * uniform).max(0.0)).collect();
    let mut counts: Vec<u64> = raw.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut remaining = total_tokens.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..ranks).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    while remaining > 0 {
        for &i in &order {
            if remaining == 0 {
                break;
            }
            counts[i] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Distributes per-rank volumes evenly over each rank's local experts.
pub fn spread_counts(rank_counts: &[u64], experts_per_rank: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(rank_counts.len() * experts_per_rank);
    for &c in rank_counts {
        let base = c / experts_per_rank as u64;
        let rem = (c % experts_per_rank as u64) as usize;
        for e in 0..experts_per_rank {
            out.push(base + if e < rem { 1 } else { 0 });
        }
    }
    out
}

/// Gating logits whose top-k selection reproduces `counts` exactly: each
/// token's selected experts get a large margin. Assignment is greedy over
/// remaining counts, round-robin over tokens.
pub fn counts_to_logits(
    counts: &[u64],
    tokens: usize,
    experts: usize,
    top_k: usize,
) -> Result<Vec<Vec<f64>>, MoeError> {
    if counts.len() != experts {
        return Err(MoeError::InfeasibleCounts(format!(
            "{} counts for {experts} experts",
            counts.len()
        )));
    }
    if top_k > experts {
        return Err(MoeError::InfeasibleCounts(format!(
            "top_k {top_k} exceeds expert count {experts}"
        )));
    }
    let need: u64 = tokens as u64 * top_k as u64;
    let total: u64 = counts.iter().sum();
    if total > need {
        return Err(MoeError::InfeasibleCounts(format!(
            "counts sum {total} exceeds tokens x top_k = {need}"
        )));
    }
    if total != need {
        return Err(MoeError::InfeasibleCounts(format!(
            "counts sum {total} != tokens x top_k = {need}"
        )));
    }
    if let Some((e, &c)) = counts.iter().enumerate().find(|(_, &c)| c > tokens as u64) {
        return Err(MoeError::InfeasibleCounts(format!(
            "expert {e} count {c} exceeds token count {tokens}"
        )));
    }

    let mut remaining: Vec<u64> = counts.to_vec();
    let mut logits = vec![vec![0.0f64; experts]; tokens];
    for row in logits.iter_mut() {
        // Pick the top_k experts with the most remaining demand.
        let mut idx: Vec<usize> = (0..experts).collect();
        idx.sort_by(|&a, &b| remaining[b].cmp(&remaining[a]).then(a.cmp(&b)));
        for &e in idx.iter().take(top_k) {
            if remaining[e] == 0 {
                return Err(MoeError::InfeasibleCounts(
                    "counts not realizable with distinct experts per token".to_string(),
                ));
            }
            remaining[e] -= 1;
            row[e] = 10.0;
        }
    }
    debug_assert!(remaining.iter().all(|&r| r == 0));
    Ok(logits)
}

/// Re-executes top-k selection; ties resolve to the lower expert index.
pub fn top_k_select(logits: &[Vec<f64>], top_k: usize) -> Vec<Vec<usize>> {
    logits
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut sel: Vec<usize> = idx.into_iter().take(top_k).collect();
            sel.sort_unstable();
            sel
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_constant_and_pair() {
        let ones = BrSchedule {
            values: vec![vec![1.0; 4]; 2],
            normalized: false,
        };
        let p = stats(&ones);
        assert_eq!(
            (p.br_min, p.br_max, p.br_avg, p.br_std, p.br_med, p.br_skew),
            (1.0, 1.0, 1.0, 0.0, 1.0, 0.0)
        );

        let pair = BrSchedule {
            values: vec![vec![1.0, 3.0]],
            normalized: false,
        };
        let p = stats(&pair);
        assert_eq!((p.br_avg, p.br_std, p.br_med), (2.0, 1.0, 2.0));
    }

    #[test]
    fn degenerate_profile_gives_constant_schedule() {
        let s = derive_schedule(&BalanceRatioProfile::balanced(), 4, 4, 1, false).unwrap();
        assert!(s.values.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn impossible_std_rejected() {
        let p = BalanceRatioProfile {
            br_min: 1.0,
            br_max: 1.0,
            br_avg: 1.0,
            br_std: 0.5,
            br_med: 1.0,
            br_skew: 0.0,
        };
        assert!(matches!(
            derive_schedule(&p, 4, 4, 1, false),
            Err(MoeError::InfeasibleProfile(_))
        ));
    }

    #[test]
    fn counts_arithmetic() {
        assert_eq!(br_to_counts(&[1.0; 8], 128, false), vec![16; 8]);
        assert_eq!(br_to_counts(&[2.0, 0.0, 1.0, 1.0], 16, false), vec![8, 0, 4, 4]);
        assert_eq!(br_to_counts(&[2.0, 0.0, 1.0, 1.0], 16, true), vec![8, 0, 4, 4]);
    }

    #[test]
    fn conserving_counts_always_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let ranks = rng.random_range(2..12usize);
            let row: Vec<f64> = (0..ranks).map(|_| rng.random_range(0.0..3.0)).collect();
            let mean = row.iter().sum::<f64>() / ranks as f64;
            if mean <= 0.0 {
                continue;
            }
            let row: Vec<f64> = row.iter().map(|v| v / mean).collect();
            let total = rng.random_range(ranks as u64..4096);
            let counts = br_to_counts(&row, total, true);
            assert_eq!(counts.iter().sum::<u64>(), total);
        }
    }

    #[test]
    fn uniform_counts_top1() {
        let counts = vec![4u64; 4];
        let logits = counts_to_logits(&counts, 16, 4, 1).unwrap();
        let sel = top_k_select(&logits, 1);
        let mut seen = vec![0u64; 4];
        for s in sel {
            seen[s[0]] += 1;
        }
        assert_eq!(seen, counts);
    }

    #[test]
    fn overfull_counts_rejected() {
        // 5 tokens of demand on a single expert with only 4 tokens.
        let err = counts_to_logits(&[5, 3], 4, 2, 2).unwrap_err();
        assert!(matches!(err, MoeError::InfeasibleCounts(_)));
    }

    #[test]
    fn selection_reproduces_spread_counts() {
        let rank_counts = vec![30u64, 10, 20, 20];
        let per_expert = spread_counts(&rank_counts, 4);
        assert_eq!(per_expert.iter().sum::<u64>(), 80);
        let logits = counts_to_logits(&per_expert, 10, 16, 8).unwrap();
        let sel = top_k_select(&logits, 8);
        let mut seen = vec![0u64; 16];
        for row in sel {
            for e in row {
                seen[e] += 1;
            }
        }
        assert_eq!(seen, per_expert);
    }
}
