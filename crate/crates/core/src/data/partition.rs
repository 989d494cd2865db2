//! Per-class Dirichlet label-skew partitioning.
//!
//! For each class, client proportions are drawn from Dirichlet(α·1_K) and
//! that class's samples are assigned categorically. Smaller α concentrates
//! each class on fewer clients.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// How to split one labeled dataset across simulated clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::Partition(format!(
                "need at least 2 clients, got {}",
                self.n_clients
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Partition(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

const MAX_REDRAWS: u64 = 100;

/// Split sample indices into one disjoint index set per client.
///
/// Classes are processed in ascending id and indices in ascending order, so
/// the result depends only on (labels, config). If any client comes up
/// empty, the whole draw is retried from a reseeded stream, up to 100
/// attempts.
pub fn dirichlet_partition(labels: &[u16], cfg: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Partition("no samples to partition".into()));
    }
    if labels.len() < cfg.n_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            cfg.n_clients
        )));
    }

    let max_label = *labels.iter().max().unwrap() as usize;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label as usize].push(i);
    }

    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::Partition(format!("invalid Dirichlet concentration: {e}")))?;

    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream(cfg.seed, "dirichlet-partition", &[attempt]);
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clients];

        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            // Dirichlet via normalized Gamma(α, 1) draws.
            let mut proportions: Vec<f64> =
                (0..cfg.n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = proportions.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                continue; // degenerate draw, counts as an empty-client retry
            }
            for p in &mut proportions {
                *p /= total;
            }
            let mut cumulative = proportions.clone();
            for k in 1..cumulative.len() {
                cumulative[k] += cumulative[k - 1];
            }

            for &sample in class_indices {
                let u: f64 = rng.random_range(0.0..1.0);
                let client = cumulative
                    .iter()
                    .position(|&edge| u < edge)
                    .unwrap_or(cfg.n_clients - 1);
                clients[client].push(sample);
            }
        }

        if clients.iter().all(|c| !c.is_empty()) {
            return Ok(clients);
        }
    }

    Err(Error::Partition(format!(
        "failed to produce nonempty clients after {MAX_REDRAWS} draws \
         (n_clients={}, alpha={}, samples={})",
        cfg.n_clients,
        cfg.alpha,
        labels.len()
    )))
}

/// Mean over clients of the Shannon entropy (nats) of each client's label
/// distribution. Lower values mean stronger label skew.
pub fn mean_label_entropy(partition: &[Vec<usize>], labels: &[u16]) -> f64 {
    let mut total = 0.0;
    for client in partition {
        let mut counts = std::collections::BTreeMap::new();
        for &i in client {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        let n = client.len() as f64;
        let entropy: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        total += entropy;
    }
    total / partition.len() as f64
}
