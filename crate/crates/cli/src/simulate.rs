//! Monte-Carlo harness: seeded tournaments over mock candidates whose true
//! utilities are known.

use std::collections::HashMap;

use coconstruct_core::backends::{
    derive_stream, with_mock_utility, BackendError, Judge, JudgeRequest, MockJudge, Side, Verdict,
};
use coconstruct_core::tournament::{run_tournament, MatchResult, PairJudge, TournamentOptions};
use coconstruct_core::utility::{fit_utilities, kendall_tau, FitConfig};
use coconstruct_core::{ArtifactId, PreferenceRecord};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("judge correctness must lie in (0.5, 1], got {0}")]
    BadNoise(f64),
    #[error("need at least 1 trial")]
    NoTrials,
    #[error("need at least 1 comparison")]
    NoComparisons,
    #[error("tournament failed: {0}")]
    Tournament(String),
    #[error("utility fit failed: {0}")]
    Fit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationParams {
    pub n: usize,
    pub noise_p: f64,
    pub trials: usize,
    pub seed: u64,
}

impl SimulationParams {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.n < 2 {
            return Err(SimulationError::TooFewCandidates(self.n));
        }
        if !(self.noise_p > 0.5 && self.noise_p <= 1.0) {
            return Err(SimulationError::BadNoise(self.noise_p));
        }
        if self.trials == 0 {
            return Err(SimulationError::NoTrials);
        }
        Ok(())
    }
}

/// Candidate ids `1..=n` with distinct utilities drawn from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub ids: Vec<ArtifactId>,
    pub utilities: HashMap<ArtifactId, f64>,
    contents: HashMap<ArtifactId, String>,
}

impl SyntheticPool {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(&[seed, 0x5eed]));
        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.shuffle(&mut rng);
        let ids: Vec<ArtifactId> = (1..=n as u64).map(ArtifactId).collect();
        // Rank plus jitter below one keeps every value distinct.
        let utilities: HashMap<ArtifactId, f64> = ids
            .iter()
            .zip(ranks)
            .map(|(id, rank)| (*id, rank as f64 + 0.5 * rng.random::<f64>()))
            .collect();
        let contents = utilities
            .iter()
            .map(|(id, u)| (*id, with_mock_utility(&format!("candidate {id}"), *u)))
            .collect();
        Self { ids, utilities, contents }
    }

    pub fn argmax(&self) -> ArtifactId {
        *self
            .ids
            .iter()
            .max_by(|a, b| self.utilities[a].total_cmp(&self.utilities[b]))
            .expect("pool is non-empty")
    }

    pub fn true_utilities(&self) -> Vec<f64> {
        self.ids.iter().map(|id| self.utilities[id]).collect()
    }
}

/// The real mock judge, fed utility-tagged contents and a per-match stream.
pub struct PoolJudge<'a> {
    pool: &'a SyntheticPool,
    judge: MockJudge,
    stream: u64,
}

impl<'a> PoolJudge<'a> {
    pub fn new(pool: &'a SyntheticPool, noise_p: f64, stream: u64) -> Self {
        Self {
            pool,
            judge: MockJudge::with_noise("mock", noise_p),
            stream,
        }
    }
}

impl PairJudge for PoolJudge<'_> {
    fn name(&self) -> String {
        self.judge.name().to_string()
    }

    fn judge(&self, a: ArtifactId, b: ArtifactId, ordinal: usize) -> Result<Verdict, BackendError> {
        let request = JudgeRequest {
            specification: "synthetic".into(),
            candidate_a: self.pool.contents[&a].clone(),
            candidate_b: self.pool.contents[&b].clone(),
            rubric: None,
        };
        self.judge.judge(&request, derive_stream(&[self.stream, ordinal as u64]))
    }
}

/// Bracket seed used by trial `trial`; exposed so callers can rebuild the
/// exact brackets a run used.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_stream(&[seed, trial as u64, 1])
}

fn judge_stream(seed: u64, trial: usize) -> u64 {
    derive_stream(&[seed, trial as u64, 2])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub params: SimulationParams,
    pub argmax: ArtifactId,
    pub argmax_in_final: usize,
    pub argmax_in_final_frequency: f64,
    pub mean_matches: f64,
    pub min_matches: usize,
    pub max_matches: usize,
    pub comparisons: usize,
    pub kendall_tau: f64,
    pub fit_converged: bool,
}

impl SimulationReport {
    pub fn to_text(&self) -> String {
        format!(
            "candidates\t{}\nnoise_p\t{}\ntrials\t{}\nseed\t{}\nargmax_in_final_frequency\t{:.6}\nmean_matches\t{:.3}\nmatches_range\t{}..={}\ncomparisons\t{}\nkendall_tau\t{:.6}\nfit_converged\t{}\n",
            self.params.n,
            self.params.noise_p,
            self.params.trials,
            self.params.seed,
            self.argmax_in_final_frequency,
            self.mean_matches,
            self.min_matches,
            self.max_matches,
            self.comparisons,
            self.kendall_tau,
            self.fit_converged
        )
    }
}

fn tau_of_fit(pool: &SyntheticPool, records: &[PreferenceRecord]) -> Result<(f64, bool), SimulationError> {
    let estimate =
        fit_utilities(records, &pool.ids, &FitConfig::default()).map_err(|e| SimulationError::Fit(e.to_string()))?;
    let fitted: Vec<f64> = pool.ids.iter().map(|id| estimate.scores[id]).collect();
    Ok((kendall_tau(&fitted, &pool.true_utilities()), estimate.converged))
}

fn records_of(log: &[MatchResult]) -> impl Iterator<Item = PreferenceRecord> + '_ {
    log.iter().map(|m| PreferenceRecord::judge(m.winner, m.loser()))
}

/// Runs `trials` seeded tournaments over one synthetic pool. Bit-reproducible
/// for fixed parameters.
pub fn simulate(params: SimulationParams) -> Result<SimulationReport, SimulationError> {
    params.validate()?;
    let pool = SyntheticPool::new(params.n, params.seed);
    let argmax = pool.argmax();
    let mut in_final = 0usize;
    let mut total_matches = 0usize;
    let (mut min_matches, mut max_matches) = (usize::MAX, 0usize);
    let mut pooled = Vec::new();
    for trial in 0..params.trials {
        let options = TournamentOptions {
            parallelism: 1,
            ..TournamentOptions::seeded(trial_seed(params.seed, trial))
        };
        let judge = PoolJudge::new(&pool, params.noise_p, judge_stream(params.seed, trial));
        let outcome =
            run_tournament(&pool.ids, &judge, &options).map_err(|e| SimulationError::Tournament(e.to_string()))?;
        if outcome.finalists.0 == argmax || outcome.finalists.1 == argmax {
            in_final += 1;
        }
        let played = outcome.match_log.len();
        total_matches += played;
        min_matches = min_matches.min(played);
        max_matches = max_matches.max(played);
        pooled.extend(records_of(&outcome.match_log));
    }
    let (kendall_tau, fit_converged) = if pooled.is_empty() {
        (0.0, true)
    } else {
        tau_of_fit(&pool, &pooled)?
    };
    Ok(SimulationReport {
        params,
        argmax,
        argmax_in_final: in_final,
        argmax_in_final_frequency: in_final as f64 / params.trials as f64,
        mean_matches: total_matches as f64 / params.trials as f64,
        min_matches,
        max_matches,
        comparisons: pooled.len(),
        kendall_tau,
        fit_converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub n: usize,
    pub comparisons: usize,
    pub kendall_tau: f64,
    pub fit_converged: bool,
}

/// The synthetic pool and `comparisons` judged records over uniformly
/// sampled distinct pairs.
pub fn recovery_records(
    n: usize,
    comparisons: usize,
    noise_p: f64,
    seed: u64,
) -> Result<(SyntheticPool, Vec<PreferenceRecord>), SimulationError> {
    SimulationParams { n, noise_p, trials: 1, seed }.validate()?;
    if comparisons == 0 {
        return Err(SimulationError::NoComparisons);
    }
    let pool = SyntheticPool::new(n, seed);
    let judge = PoolJudge::new(&pool, noise_p, derive_stream(&[seed, 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(&[seed, 4]));
    let mut records = Vec::with_capacity(comparisons);
    for ordinal in 0..comparisons {
        let pair: Vec<&ArtifactId> = pool.ids.choose_multiple(&mut rng, 2).collect();
        let (a, b) = (*pair[0], *pair[1]);
        let verdict = judge
            .judge(a, b, ordinal)
            .map_err(|e| SimulationError::Tournament(e.to_string()))?;
        let (winner, loser) = match verdict.winner {
            Side::First => (a, b),
            Side::Second => (b, a),
        };
        records.push(PreferenceRecord::judge(winner, loser));
    }
    Ok((pool, records))
}

/// How well utilities fitted from random pairwise comparisons recover the
/// true order.
pub fn ranking_recovery(n: usize, comparisons: usize, noise_p: f64, seed: u64) -> Result<RecoveryReport, SimulationError> {
    let (pool, records) = recovery_records(n, comparisons, noise_p, seed)?;
    let (kendall_tau, fit_converged) = tau_of_fit(&pool, &records)?;
    Ok(RecoveryReport {
        n,
        comparisons,
        kendall_tau,
        fit_converged,
    })
}
