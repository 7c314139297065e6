//! Adaptive attack statistics and scenario-set construction.
//!
//! Each controller keeps a running mean and sample standard deviation of the
//! attack suspicions identified so far and rebuilds its finite attack
//! scenario set from them: three values per input channel (mean, mean plus
//! and minus one standard deviation), combined across channels.

/// Running per-channel statistics of identified attack suspicions.
///
/// The streaming update is Welford's recurrence; `mean` always equals the
/// arithmetic mean of `history` and `std` the (n-1)-denominator sample
/// standard deviation, with the undefined single-sample case reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackStats {
    pub count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    history: Vec<Vec<f64>>,
}

impl AttackStats {
    pub fn new(n_channels: usize) -> Self {
        AttackStats {
            count: 0,
            mean: vec![0.0; n_channels],
            m2: vec![0.0; n_channels],
            history: Vec::new(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sample standard deviation per channel (0 while fewer than 2 samples).
    pub fn std(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2
            .iter()
            .map(|m2| (m2 / (self.count - 1) as f64).sqrt())
            .collect()
    }

    /// Full history of accepted suspicions, for audit.
    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }
}

/// Fold one identified suspicion into the statistics. Failed identifications
/// are the caller's concern: skip the update and the stats stay put.
pub fn update_stats(stats: &mut AttackStats, a_star: &[f64]) {
    assert_eq!(a_star.len(), stats.mean.len());
    stats.count += 1;
    let n = stats.count as f64;
    for i in 0..a_star.len() {
        let delta = a_star[i] - stats.mean[i];
        stats.mean[i] += delta / n;
        stats.m2[i] += delta * (a_star[i] - stats.mean[i]);
    }
    stats.history.push(a_star.to_vec());
}

/// Build the finite attack scenario set: per channel `{mean, mean+std,
/// mean-std}`, then the cartesian product across channels, deduplicated.
/// Channels whose spread is at or below `sigma_tol` contribute their mean
/// only, which keeps the product (and the scenario tree built from it) small
/// without changing the represented value set beyond the tolerance.
pub fn attack_scenarios(stats: &AttackStats, sigma_tol: f64) -> Vec<Vec<f64>> {
    let n = stats.n_channels();
    if stats.count == 0 {
        return vec![vec![0.0; n]];
    }
    let mean = stats.mean();
    let std = stats.std();
    let per_channel: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if std[i] > sigma_tol {
                vec![mean[i], mean[i] + std[i], mean[i] - std[i]]
            } else {
                vec![mean[i]]
            }
        })
        .collect();

    let mut set: Vec<Vec<f64>> = vec![Vec::new()];
    for channel in &per_channel {
        let mut next = Vec::with_capacity(set.len() * channel.len());
        for prefix in &set {
            for &v in channel {
                let mut s = prefix.clone();
                s.push(v);
                next.push(s);
            }
        }
        set = next;
    }
    dedup_vectors(&mut set, 1e-9);
    set
}

fn dedup_vectors(set: &mut Vec<Vec<f64>>, tol: f64) {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(set.len());
    'outer: for cand in set.drain(..) {
        for kept in &out {
            if kept
                .iter()
                .zip(&cand)
                .all(|(a, b)| (a - b).abs() <= tol)
            {
                continue 'outer;
            }
        }
        out.push(cand);
    }
    *set = out;
}
