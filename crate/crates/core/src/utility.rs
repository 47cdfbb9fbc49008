//! Latent utility estimation from pairwise preferences.
//!
//! Scores follow a Bradley-Terry model, `P(i beats j) = sigmoid(s_i - s_j)`,
//! fitted by L2-regularized maximum likelihood with fixed-step gradient
//! ascent. Scores are reported mean-centered.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArtifactId, ConstructionGraph, GraphError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreferenceSource {
    Human,
    Judge,
}

/// One observed preference `winner > loser`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub winner_id: ArtifactId,
    pub loser_id: ArtifactId,
    pub source: PreferenceSource,
    pub justification: Option<String>,
    pub event_index: u64,
}

impl PreferenceRecord {
    pub fn judge(winner_id: ArtifactId, loser_id: ArtifactId) -> Self {
        Self {
            winner_id,
            loser_id,
            source: PreferenceSource::Judge,
            justification: None,
            event_index: 0,
        }
    }

    pub fn human(winner_id: ArtifactId, loser_id: ArtifactId) -> Self {
        Self {
            source: PreferenceSource::Human,
            ..Self::judge(winner_id, loser_id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("no artifacts to fit")]
    EmptyIds,
    #[error("preference record references unknown artifact {0}")]
    UnknownId(ArtifactId),
    #[error("preference record compares artifact {0} with itself")]
    SelfComparison(ArtifactId),
    #[error("regularization must be positive and finite, got {0}")]
    BadRegularization(f64),
    #[error("utility undefined at {0}: no scored refinements")]
    UtilityUndefined(ArtifactId),
    #[error("empty utility vector")]
    EmptyVector,
    #[error("length mismatch: {values} values, {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("aggregation weights must be nonnegative and sum to 1")]
    BadWeights,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Likelihood multiplier for human-sourced records.
    pub human_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            max_iterations: 10_000,
            tolerance: 1e-8,
            human_weight: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate {
    pub scores: BTreeMap<ArtifactId, f64>,
    pub regularization: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

impl UtilityEstimate {
    pub fn score(&self, id: ArtifactId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    /// `(id, score)` rows by descending score, ties by ascending id.
    pub fn ranked(&self) -> Vec<(ArtifactId, f64)> {
        let mut rows: Vec<_> = self.scores.iter().map(|(id, s)| (*id, *s)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        rows
    }

    /// Two-column text table, highest score first.
    pub fn to_table(&self) -> String {
        let mut out = String::from("id\tscore\n");
        for (id, score) in self.ranked() {
            out.push_str(&format!("{id}\t{score:.6}\n"));
        }
        out
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits Bradley-Terry scores over `ids` from `records`.
pub fn fit_utilities(
    records: &[PreferenceRecord],
    ids: &[ArtifactId],
    config: &FitConfig,
) -> Result<UtilityEstimate, UtilityError> {
    if ids.is_empty() {
        return Err(UtilityError::EmptyIds);
    }
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        return Err(UtilityError::BadRegularization(config.lambda));
    }

    let mut index: HashMap<ArtifactId, usize> = HashMap::new();
    let mut order = Vec::new();
    for id in ids {
        index.entry(*id).or_insert_with(|| {
            order.push(*id);
            order.len() - 1
        });
    }
    let n = order.len();

    // Repeated comparisons of the same ordered pair collapse into one
    // weighted edge; the objective is unchanged.
    let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for record in records {
        if record.winner_id == record.loser_id {
            return Err(UtilityError::SelfComparison(record.winner_id));
        }
        let w = *index
            .get(&record.winner_id)
            .ok_or(UtilityError::UnknownId(record.winner_id))?;
        let l = *index
            .get(&record.loser_id)
            .ok_or(UtilityError::UnknownId(record.loser_id))?;
        let weight = match record.source {
            PreferenceSource::Human => config.human_weight,
            PreferenceSource::Judge => 1.0,
        };
        *merged.entry((w, l)).or_insert(0.0) += weight;
    }
    let edges: Vec<(usize, usize, f64)> = merged.into_iter().map(|((w, l), weight)| (w, l, weight)).collect();

    // Lipschitz bound of the gradient: a quarter of the weighted Laplacian
    // norm (at most twice the max weighted degree) plus the penalty curvature.
    let mut degree = vec![0.0f64; n];
    for &(w, l, weight) in &edges {
        degree[w] += weight;
        degree[l] += weight;
    }
    let max_degree = degree.iter().copied().fold(0.0, f64::max);
    let lipschitz = 0.5 * max_degree + 2.0 * config.lambda;
    let step = 1.0 / lipschitz;

    let mut theta = vec![0.0f64; n];
    let mut grad = vec![0.0f64; n];
    let mut iterations_used = 0;
    let mut converged = false;
    loop {
        grad.iter_mut()
            .zip(&theta)
            .for_each(|(g, t)| *g = -2.0 * config.lambda * t);
        for &(w, l, weight) in &edges {
            let push = weight * sigmoid(theta[l] - theta[w]);
            grad[w] += push;
            grad[l] -= push;
        }
        let max_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_norm <= config.tolerance {
            converged = true;
            break;
        }
        if iterations_used >= config.max_iterations {
            break;
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t += step * g);
        iterations_used += 1;
    }

    let mean = theta.iter().sum::<f64>() / n as f64;
    theta.iter_mut().for_each(|t| *t -= mean);
    let log_likelihood = edges
        .iter()
        .map(|&(w, l, weight)| weight * log_sigmoid(theta[w] - theta[l]))
        .sum();

    Ok(UtilityEstimate {
        scores: order.into_iter().zip(theta).collect(),
        regularization: config.lambda,
        iterations_used,
        converged,
        log_likelihood,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Mean,
    Max,
    Min,
}

impl Aggregation {
    fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub operator: Aggregation,
    pub weights: Option<Vec<f64>>,
}

impl AggregationSpec {
    pub fn new(operator: Aggregation) -> Self {
        Self { operator, weights: None }
    }

    pub fn weighted(weights: Vec<f64>) -> Result<Self, UtilityError> {
        let spec = Self {
            operator: Aggregation::Mean,
            weights: Some(weights),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), UtilityError> {
        if let Some(weights) = &self.weights {
            let sum: f64 = weights.iter().sum();
            if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(UtilityError::BadWeights);
            }
        }
        Ok(())
    }
}

/// Combines local utilities into one value: weighted mean when weights are
/// given, otherwise the unweighted operator.
pub fn scalarize(local_utilities: &[f64], spec: &AggregationSpec) -> Result<f64, UtilityError> {
    if local_utilities.is_empty() {
        return Err(UtilityError::EmptyVector);
    }
    match &spec.weights {
        Some(weights) => {
            if weights.len() != local_utilities.len() {
                return Err(UtilityError::LengthMismatch {
                    values: local_utilities.len(),
                    weights: weights.len(),
                });
            }
            spec.validate()?;
            Ok(weights.iter().zip(local_utilities).map(|(w, u)| w * u).sum())
        }
        None => Ok(spec.operator.apply(local_utilities)),
    }
}

/// Utility of `parent_id` as the aggregate of its scored refinements.
pub fn lift_utility(
    graph: &ConstructionGraph,
    parent_id: ArtifactId,
    estimate: &UtilityEstimate,
    spec: &AggregationSpec,
) -> Result<f64, UtilityError> {
    let scores: Vec<f64> = graph
        .refinements_of(parent_id)?
        .into_iter()
        .filter_map(|child| estimate.score(child))
        .collect();
    if scores.is_empty() {
        return Err(UtilityError::UtilityUndefined(parent_id));
    }
    Ok(spec.operator.apply(&scores))
}

/// Kendall rank correlation (tau-a); tied pairs count as neither
/// concordant nor discordant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "kendall_tau needs equal-length inputs");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut balance = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let sign = ((a[i] - a[j]) * (b[i] - b[j])).signum();
            if (a[i] - a[j]) != 0.0 && (b[i] - b[j]) != 0.0 {
                balance += sign as i64;
            }
        }
    }
    balance as f64 / (n * (n - 1) / 2) as f64
}
