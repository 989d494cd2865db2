//! Frozen-encoder KNN evaluation: per-client accuracy and weighted F1,
//! summarized as an unweighted mean with population standard deviation.

use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::fed::ClientState;
use crate::model::{forward_features, stage, ArchitectureSpec, Phase};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Internal forward batch for feature extraction; the output is
/// batch-size-independent, so this only bounds peak memory.
pub const DEFAULT_EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 20,
            metric: Metric::Euclidean,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("knn k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's scores at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub client_id: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub n_eval: usize,
}

/// Cross-client location and spread, the "mean ± std" of a results row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Encoder features for the selected samples, eval-mode forward in
/// batches. Returns the `[N, feature_dim]` matrix and the matching labels.
pub fn extract_features(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    container: &DatasetContainer,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Tensor, Vec<u16>)> {
    if indices.is_empty() {
        return Err(Error::contract("extract_features", "no samples selected"));
    }
    if batch_size == 0 {
        return Err(Error::contract("extract_features", "batch_size must be >= 1"));
    }
    let mut rows = Vec::new();
    let mut dim = 0;
    for batch in indices.chunks(batch_size) {
        let images = container.image_batch(batch)?;
        let mut tape = Tape::new();
        let staged = stage(&mut tape, params);
        let x = tape.leaf(images);
        let mut phase = Phase::Eval(params);
        let feats = forward_features(spec, &mut tape, &staged, x, &mut phase)?;
        let value = tape.value(feats);
        dim = value.shape()[1];
        rows.extend_from_slice(value.data());
    }
    let features = Tensor::new(vec![indices.len(), dim], rows)?;
    Ok((features, container.label_batch(indices)))
}

/// Majority label among the k nearest reference rows by squared Euclidean
/// distance. Distance ties go to the lowest reference index; vote ties go
/// to the smallest class id.
pub fn knn_classify(
    reference: &Tensor,
    reference_labels: &[u16],
    queries: &Tensor,
    cfg: &KnnConfig,
) -> Result<Vec<u16>> {
    cfg.validate()?;
    let (m, dim) = reference.rank2("knn_classify")?;
    let (n, query_dim) = queries.rank2("knn_classify")?;
    if dim != query_dim {
        return Err(Error::ShapeMismatch {
            op: "knn_classify",
            lhs: reference.shape().to_vec(),
            rhs: queries.shape().to_vec(),
        });
    }
    if reference_labels.len() != m {
        return Err(Error::contract(
            "knn_classify",
            format!("{m} reference rows but {} labels", reference_labels.len()),
        ));
    }
    if m < cfg.k {
        return Err(Error::Config(format!(
            "reference set of {m} rows is smaller than k = {}",
            cfg.k
        )));
    }

    let ref_data = reference.data();
    let query_data = queries.data();
    let mut predictions = Vec::with_capacity(n);
    let mut distances: Vec<(f64, usize)> = Vec::with_capacity(m);
    for q in 0..n {
        let query = &query_data[q * dim..(q + 1) * dim];
        distances.clear();
        for r in 0..m {
            let row = &ref_data[r * dim..(r + 1) * dim];
            let d: f64 = query
                .iter()
                .zip(row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            distances.push((d, r));
        }
        distances.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
        for &(_, idx) in &distances[..cfg.k] {
            *votes.entry(reference_labels[idx]).or_insert(0) += 1;
        }
        let mut winner = 0u16;
        let mut best = 0usize;
        for (&class, &count) in &votes {
            if count > best {
                winner = class;
                best = count;
            }
        }
        predictions.push(winner);
    }
    Ok(predictions)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[u16], labels: &[u16]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "need equal nonempty sequences, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Support-weighted mean of per-class F1 = 2PR/(P+R), with every 0/0
/// ratio defined as 0.
pub fn weighted_f1(predictions: &[u16], labels: &[u16], n_classes: u16) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "need equal nonempty sequences, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= n_classes) {
        return Err(Error::Metric(format!(
            "class id {bad} out of range for {n_classes} classes"
        )));
    }

    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let total = labels.len() as f64;
    let mut score = 0.0;
    for class in 0..n_classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l == class)
            .count() as f64;
        let predicted = predictions.iter().filter(|&&p| p == class).count() as f64;
        let support = labels.iter().filter(|&&l| l == class).count() as f64;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        score += (support / total) * f1;
    }
    Ok(score)
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, variance.sqrt())
}

/// Unweighted mean and population std across a set of per-client records,
/// recomputable from any persisted metrics log.
pub fn summarize_records(records: &[MetricsRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::Metric("no records to summarize".into()));
    }
    let accuracies: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = records.iter().map(|r| r.weighted_f1).collect();
    let (mean_accuracy, std_accuracy) = mean_and_population_std(&accuracies);
    let (mean_f1, std_f1) = mean_and_population_std(&f1s);
    Ok(EvalSummary {
        mean_accuracy,
        std_accuracy,
        mean_f1,
        std_f1,
    })
}

/// Score every client: fit KNN on the client's own train-shard features,
/// predict the global test split, and summarize across clients with an
/// unweighted mean and population std. A shard smaller than k shrinks k
/// for that client, with a logged warning.
pub fn evaluate_all_clients(
    spec: &ArchitectureSpec,
    clients: &[ClientState],
    train: &DatasetContainer,
    test: &DatasetContainer,
    cfg: &KnnConfig,
    round: u64,
) -> Result<(Vec<MetricsRecord>, EvalSummary)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Metric("no clients to evaluate".into()));
    }
    if test.is_empty() {
        return Err(Error::Metric("empty test split".into()));
    }

    let test_indices: Vec<usize> = (0..test.len()).collect();
    let records: Result<Vec<MetricsRecord>> = clients
        .par_iter()
        .map(|client| {
            let k = cfg.k.min(client.shard.len());
            if k < cfg.k {
                log::warn!(
                    "client {}: shard of {} shrinks k from {} to {}",
                    client.id,
                    client.shard.len(),
                    cfg.k,
                    k
                );
            }
            let effective = KnnConfig { k, ..*cfg };
            let (reference, reference_labels) = extract_features(
                spec,
                &client.params,
                train,
                &client.shard,
                DEFAULT_EVAL_BATCH,
            )?;
            let (queries, query_labels) =
                extract_features(spec, &client.params, test, &test_indices, DEFAULT_EVAL_BATCH)?;
            let predictions = knn_classify(&reference, &reference_labels, &queries, &effective)?;
            Ok(MetricsRecord {
                round,
                client_id: client.id,
                accuracy: accuracy(&predictions, &query_labels)?,
                weighted_f1: weighted_f1(&predictions, &query_labels, test.n_classes())?,
                n_eval: query_labels.len(),
            })
        })
        .collect();
    let records = records?;
    let summary = summarize_records(&records)?;
    Ok((records, summary))
}
