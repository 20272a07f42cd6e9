use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Balanced label-skewed split of a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    /// Per-client indices into the dataset.
    pub indices: Vec<Vec<usize>>,
    /// Realized class proportions, one row per client.
    pub proportions: Vec<Vec<f64>>,
    pub classes: usize,
}

impl DatasetPartition {
    pub fn clients(&self) -> usize {
        self.indices.len()
    }

    /// Every sample owned by exactly one client, all classes spread
    /// uniformly.
    pub fn iid(labels: &[usize], clients: usize, seed: u64) -> Result<Self> {
        dirichlet_partition(labels, clients, f64::INFINITY, seed)
    }
}

fn draw_proportions(classes: usize, concentration: f64, rng: &mut SimRng) -> Vec<f64> {
    if concentration.is_infinite() {
        return vec![1.0 / classes as f64; classes];
    }
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        // every gamma draw underflowed: the limit is a one-hot vector
        let mut one_hot = vec![0.0; classes];
        one_hot[rng.random_range(0..classes)] = 1.0;
        one_hot
    }
}

/// Largest-remainder rounding of `p * total` to integer counts.
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Balanced Dirichlet partition: every client receives the same number of
/// samples (within one) and a class mix drawn from `Dir(concentration)`.
/// Clients are filled in order; when a class runs out, the shortfall is
/// taken from the remaining classes the client favors most.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<DatasetPartition> {
    if !(concentration > 0.0) {
        return Err(Error::Config(format!(
            "Dirichlet concentration must be positive, got {concentration}"
        )));
    }
    if clients == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if labels.len() < clients {
        return Err(Error::Config(format!(
            "{} samples cannot cover {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut rng = crate::rng::seeded(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    let base = labels.len() / clients;
    let extra = labels.len() % clients;
    let mut indices = Vec::with_capacity(clients);
    let mut proportions = Vec::with_capacity(clients);
    for n in 0..clients {
        let size = base + usize::from(n < extra);
        let p = draw_proportions(classes, concentration, &mut rng);
        let wanted = apportion(&p, size);
        let mut counts = vec![0usize; classes];
        let mut owned = Vec::with_capacity(size);
        for k in 0..classes {
            let take = wanted[k].min(pools[k].len());
            let start = pools[k].len() - take;
            owned.extend(pools[k].drain(start..));
            counts[k] += take;
        }
        while owned.len() < size {
            let k = (0..classes)
                .filter(|&k| !pools[k].is_empty())
                .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                .expect("pool sizes cover all clients");
            let take = (size - owned.len()).min(pools[k].len());
            let start = pools[k].len() - take;
            owned.extend(pools[k].drain(start..));
            counts[k] += take;
        }
        proportions.push(counts.iter().map(|&c| c as f64 / size as f64).collect());
        indices.push(owned);
    }
    Ok(DatasetPartition { indices, proportions, classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    #[test]
    fn huge_concentration_is_uniform() {
        let labels = balanced_labels(10, 500);
        let part = dirichlet_partition(&labels, 10, 1e6, 3).unwrap();
        for row in &part.proportions {
            for p in row {
                assert!((p - 0.1).abs() <= 0.02, "{p}");
            }
        }
    }

    #[test]
    fn small_concentration_is_skewed() {
        // four classes: Dir(0.5) puts more than half the mass on one class
        // for roughly 73% of draws
        let labels = balanced_labels(4, 2000);
        let part = dirichlet_partition(&labels, 20, 0.5, 8).unwrap();
        let skewed = part
            .proportions
            .iter()
            .filter(|row| row.iter().cloned().fold(0.0, f64::max) > 0.5)
            .count();
        assert!(skewed > 10, "{skewed} of 20 clients skewed");
    }

    #[test]
    fn partition_is_disjoint_balanced_and_deterministic() {
        let labels = balanced_labels(5, 101);
        let part = dirichlet_partition(&labels, 7, 0.3, 1).unwrap();
        let mut seen = vec![false; labels.len()];
        for idx in &part.indices {
            for &i in idx {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
        let sizes: Vec<usize> = part.indices.iter().map(|v| v.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for row in &part.proportions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(part, dirichlet_partition(&labels, 7, 0.3, 1).unwrap());
    }

    #[test]
    fn nonpositive_concentration_is_rejected() {
        let labels = balanced_labels(3, 10);
        assert!(dirichlet_partition(&labels, 2, 0.0, 0).is_err());
        assert!(dirichlet_partition(&labels, 2, -1.0, 0).is_err());
    }

    #[test]
    fn apportion_preserves_total() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 7).iter().sum::<usize>(), 7);
        assert_eq!(apportion(&[1.0, 0.0], 3), vec![3, 0]);
    }
}
