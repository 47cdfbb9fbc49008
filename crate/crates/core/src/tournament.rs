//! Single-elimination selection down to a finalist pair.
//!
//! Candidates are shuffled by a seeded permutation and paired in order. An
//! odd entrant out (the last one) gets a bye into the next round. Play stops
//! when two entrants remain; that final is left to the human.

use std::collections::HashSet;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{BackendError, Generator, Side, Verdict};
use crate::graph::ArtifactId;

#[derive(Debug, Error)]
pub enum TournamentError {
    #[error("a tournament needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("candidate {0} appears more than once")]
    DuplicateCandidate(ArtifactId),
    #[error("judge failed after {completed} completed matches: {source}")]
    JudgeFailed {
        completed: usize,
        partial: Vec<MatchResult>,
        source: BackendError,
    },
    #[error("no matches to summarize")]
    EmptyLog,
    #[error("summarizer failed: {0}")]
    Summarizer(BackendError),
}

/// A slot in the bracket: a seeded candidate or the winner of an earlier game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Entrant {
    Candidate(ArtifactId),
    WinnerOf { round: usize, game: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub seed: u64,
    /// Candidates after the seeded shuffle.
    pub order: Vec<ArtifactId>,
    /// Playable rounds; the final pair is not among them.
    pub rounds: Vec<Vec<(Entrant, Entrant)>>,
    pub byes: Vec<(usize, Entrant)>,
    pub final_pair: (Entrant, Entrant),
}

impl Bracket {
    /// Tree depth, counting the unplayed final as a level.
    pub fn depth(&self) -> usize {
        self.rounds.len() + 1
    }

    pub fn match_count(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    /// Entrants of round `round` (the final pair when `round == rounds.len()`).
    pub fn participants(&self, round: usize) -> Vec<Entrant> {
        if round == self.rounds.len() {
            return vec![self.final_pair.0, self.final_pair.1];
        }
        let mut out: Vec<Entrant> = self.rounds[round].iter().flat_map(|&(a, b)| [a, b]).collect();
        out.extend(self.byes.iter().filter(|(r, _)| *r == round).map(|(_, e)| *e));
        out
    }
}

pub fn seed_bracket(candidates: &[ArtifactId], seed: u64) -> Result<Bracket, TournamentError> {
    if candidates.len() < 2 {
        return Err(TournamentError::TooFewCandidates(candidates.len()));
    }
    let mut seen = HashSet::new();
    for id in candidates {
        if !seen.insert(*id) {
            return Err(TournamentError::DuplicateCandidate(*id));
        }
    }

    let mut order = candidates.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut entrants: Vec<Entrant> = order.iter().copied().map(Entrant::Candidate).collect();
    let mut rounds = Vec::new();
    let mut byes = Vec::new();
    while entrants.len() > 2 {
        let round = rounds.len();
        let mut games = Vec::with_capacity(entrants.len() / 2);
        let mut next = Vec::with_capacity(entrants.len() / 2 + 1);
        let mut pairs = entrants.chunks_exact(2);
        for pair in &mut pairs {
            next.push(Entrant::WinnerOf { round, game: games.len() });
            games.push((pair[0], pair[1]));
        }
        if let [bye] = pairs.remainder() {
            byes.push((round, *bye));
            next.push(*bye);
        }
        rounds.push(games);
        entrants = next;
    }

    Ok(Bracket {
        seed,
        order,
        rounds,
        byes,
        final_pair: (entrants[0], entrants[1]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub round: usize,
    #[serde(rename = "match")]
    pub pair: (ArtifactId, ArtifactId),
    pub winner: ArtifactId,
    pub justification: String,
    pub judge_name: String,
}

impl MatchResult {
    pub fn loser(&self) -> ArtifactId {
        if self.winner == self.pair.0 {
            self.pair.1
        } else {
            self.pair.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TournamentOutcome {
    pub finalists: (ArtifactId, ArtifactId),
    pub match_log: Vec<MatchResult>,
    pub summary: String,
    pub seed: u64,
}

impl TournamentOutcome {
    /// Line-delimited dump: round, pair ids, winner id, judge name.
    pub fn match_lines(&self) -> String {
        self.match_log
            .iter()
            .map(|m| format!("{}\t{}\t{}\t{}\t{}\n", m.round, m.pair.0, m.pair.1, m.winner, m.judge_name))
            .collect()
    }
}

/// Pairwise judgment over candidate ids. `ordinal` is the match's position
/// in bracket order, used to key any randomness.
pub trait PairJudge: Sync {
    fn name(&self) -> String;

    fn judge(&self, a: ArtifactId, b: ArtifactId, ordinal: usize) -> Result<Verdict, BackendError>;
}

#[derive(Debug, Clone)]
pub struct TournamentOptions {
    pub seed: u64,
    /// Concurrent judge calls within a round.
    pub parallelism: usize,
    pub retries: u32,
    pub retry_base: Duration,
}

impl TournamentOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

impl Default for TournamentOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            parallelism: 4,
            retries: 2,
            retry_base: Duration::from_millis(500),
        }
    }
}

fn judge_with_retries(
    judge: &dyn PairJudge,
    a: ArtifactId,
    b: ArtifactId,
    ordinal: usize,
    options: &TournamentOptions,
) -> Result<Verdict, BackendError> {
    let mut attempt = 0;
    loop {
        match judge.judge(a, b, ordinal) {
            Ok(verdict) => return Ok(verdict),
            Err(err) if err.is_transient() && attempt < options.retries => {
                let delay = options.retry_base * 2u32.pow(attempt);
                warn!(%err, ordinal, attempt, "retrying judge call");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Plays `bracket` round by round and returns the unplayed final pair.
pub fn play_bracket(
    bracket: &Bracket,
    judge: &dyn PairJudge,
    options: &TournamentOptions,
) -> Result<TournamentOutcome, TournamentError> {
    let judge_name = judge.name();
    let mut winners: Vec<Vec<ArtifactId>> = Vec::with_capacity(bracket.rounds.len());
    let mut log: Vec<MatchResult> = Vec::with_capacity(bracket.match_count());
    let resolve = |entrant: Entrant, winners: &[Vec<ArtifactId>]| match entrant {
        Entrant::Candidate(id) => id,
        Entrant::WinnerOf { round, game } => winners[round][game],
    };

    for (round, games) in bracket.rounds.iter().enumerate() {
        let pairs: Vec<(usize, ArtifactId, ArtifactId)> = games
            .iter()
            .map(|&(a, b)| (resolve(a, &winners), resolve(b, &winners)))
            .enumerate()
            .map(|(game, (a, b))| (log.len() + game, a, b))
            .collect();

        let verdicts: Vec<Result<Verdict, BackendError>> = if options.parallelism <= 1 || pairs.len() == 1 {
            pairs
                .iter()
                .map(|&(ordinal, a, b)| judge_with_retries(judge, a, b, ordinal, options))
                .collect()
        } else {
            let mut out = Vec::with_capacity(pairs.len());
            for chunk in pairs.chunks(options.parallelism) {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&(ordinal, a, b)| scope.spawn(move || judge_with_retries(judge, a, b, ordinal, options)))
                        .collect();
                    out.extend(handles.into_iter().map(|h| h.join().expect("judge thread panicked")));
                });
            }
            out
        };

        let mut round_winners = Vec::with_capacity(pairs.len());
        for (&(_, a, b), verdict) in pairs.iter().zip(verdicts) {
            let verdict = match verdict {
                Ok(v) => v,
                Err(source) => {
                    return Err(TournamentError::JudgeFailed {
                        completed: log.len(),
                        partial: log,
                        source,
                    })
                }
            };
            let winner = match verdict.winner {
                Side::First => a,
                Side::Second => b,
            };
            round_winners.push(winner);
            log.push(MatchResult {
                round,
                pair: (a, b),
                winner,
                justification: verdict.justification,
                judge_name: judge_name.clone(),
            });
        }
        winners.push(round_winners);
    }

    Ok(TournamentOutcome {
        finalists: (
            resolve(bracket.final_pair.0, &winners),
            resolve(bracket.final_pair.1, &winners),
        ),
        match_log: log,
        summary: String::new(),
        seed: bracket.seed,
    })
}

/// Seeds a bracket and plays it. The outcome's summary is left empty; see
/// [`summarize_justifications`].
pub fn run_tournament(
    candidates: &[ArtifactId],
    judge: &dyn PairJudge,
    options: &TournamentOptions,
) -> Result<TournamentOutcome, TournamentError> {
    let bracket = seed_bracket(candidates, options.seed)?;
    play_bracket(&bracket, judge, options)
}

/// Justifications with one header per match, in log order.
pub fn justification_digest(match_log: &[MatchResult]) -> String {
    match_log
        .iter()
        .enumerate()
        .map(|(i, m)| {
            format!(
                "Match {} (round {}): {} vs {}, winner {} [{}]\n{}\n",
                i + 1,
                m.round + 1,
                m.pair.0,
                m.pair.1,
                m.winner,
                m.judge_name,
                m.justification
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Summary of the match justifications, at most `budget` characters.
pub fn summarize_justifications(
    match_log: &[MatchResult],
    summarizer: &dyn Generator,
    budget: usize,
) -> Result<String, TournamentError> {
    if match_log.is_empty() {
        return Err(TournamentError::EmptyLog);
    }
    let summary = summarizer
        .summarize(&justification_digest(match_log), budget)
        .map_err(TournamentError::Summarizer)?;
    Ok(summary.chars().take(budget).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{derive_stream, MockGenerator, MockSettings};
    use crate::oracles::bracket_final_probability;
    use rand::Rng;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct UtilityJudge {
        utilities: HashMap<ArtifactId, f64>,
        p: f64,
        stream: u64,
    }

    impl UtilityJudge {
        fn perfect(utilities: &[f64]) -> Self {
            Self::noisy(utilities, 1.0, 0)
        }

        fn noisy(utilities: &[f64], p: f64, stream: u64) -> Self {
            Self {
                utilities: utilities
                    .iter()
                    .enumerate()
                    .map(|(i, u)| (ArtifactId(i as u64 + 1), *u))
                    .collect(),
                p,
                stream,
            }
        }
    }

    impl PairJudge for UtilityJudge {
        fn name(&self) -> String {
            "utility".into()
        }

        fn judge(&self, a: ArtifactId, b: ArtifactId, ordinal: usize) -> Result<Verdict, BackendError> {
            let mut first = self.utilities[&a] >= self.utilities[&b];
            if self.p < 1.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(&[self.stream, ordinal as u64]));
                if rng.random::<f64>() >= self.p {
                    first = !first;
                }
            }
            Ok(Verdict {
                winner: if first { Side::First } else { Side::Second },
                justification: format!("{a} vs {b}"),
            })
        }
    }

    fn ids(n: usize) -> Vec<ArtifactId> {
        (1..=n as u64).map(ArtifactId).collect()
    }

    fn quick(seed: u64) -> TournamentOptions {
        TournamentOptions {
            seed,
            parallelism: 1,
            retries: 2,
            retry_base: Duration::from_millis(1),
        }
    }

    #[test]
    fn two_candidates_are_already_a_final_pair() {
        let bracket = seed_bracket(&ids(2), 1).unwrap();
        assert!(bracket.rounds.is_empty());
        assert_eq!(bracket.depth(), 1);
        let outcome = run_tournament(&ids(2), &UtilityJudge::perfect(&[0.1, 0.2]), &quick(1)).unwrap();
        assert!(outcome.match_log.is_empty());
        let mut finalists = [outcome.finalists.0, outcome.finalists.1];
        finalists.sort();
        assert_eq!(finalists.to_vec(), ids(2));
    }

    #[test]
    fn sixteen_candidates_shape() {
        let bracket = seed_bracket(&ids(16), 9).unwrap();
        let sizes: Vec<_> = bracket.rounds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 4, 2]);
        assert_eq!(bracket.depth(), 4);
        assert!(bracket.byes.is_empty());
    }

    #[test]
    fn three_candidates_use_a_bye() {
        let bracket = seed_bracket(&ids(3), 5).unwrap();
        assert_eq!(bracket.rounds.len(), 1);
        assert_eq!(bracket.rounds[0].len(), 1);
        assert_eq!(bracket.byes, vec![(0, Entrant::Candidate(bracket.order[2]))]);
        assert_eq!(
            bracket.final_pair,
            (Entrant::WinnerOf { round: 0, game: 0 }, Entrant::Candidate(bracket.order[2]))
        );
    }

    #[test]
    fn seeding_errors() {
        assert!(matches!(seed_bracket(&ids(1), 0), Err(TournamentError::TooFewCandidates(1))));
        let dup = [ArtifactId(1), ArtifactId(2), ArtifactId(1)];
        assert!(matches!(seed_bracket(&dup, 0), Err(TournamentError::DuplicateCandidate(_))));
    }

    #[test]
    fn rounds_feed_forward() {
        for n in 2..=20 {
            let bracket = seed_bracket(&ids(n), n as u64).unwrap();
            assert_eq!(bracket.match_count(), n - 2);
            for round in 0..bracket.rounds.len() {
                let mut expected: Vec<Entrant> = (0..bracket.rounds[round].len())
                    .map(|game| Entrant::WinnerOf { round, game })
                    .collect();
                expected.extend(bracket.byes.iter().filter(|(r, _)| *r == round).map(|(_, e)| *e));
                assert_eq!(bracket.participants(round + 1), expected, "n={n} round={round}");
                let entrants = bracket.participants(round);
                let unique: HashSet<_> = entrants.iter().collect();
                assert_eq!(unique.len(), entrants.len());
            }
        }
    }

    #[test]
    fn perfect_judge_keeps_the_best() {
        let utilities: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let best = ArtifactId(utilities.iter().position(|u| *u == 15.0).unwrap() as u64 + 1);
        for seed in 0..50 {
            let outcome = run_tournament(&ids(16), &UtilityJudge::perfect(&utilities), &quick(seed)).unwrap();
            assert_eq!(outcome.match_log.len(), 14);
            assert!(outcome.finalists.0 == best || outcome.finalists.1 == best);
            let mut losses: HashMap<ArtifactId, usize> = HashMap::new();
            for m in &outcome.match_log {
                assert!(m.winner == m.pair.0 || m.winner == m.pair.1);
                *losses.entry(m.loser()).or_default() += 1;
            }
            assert_eq!(losses.len(), 14);
            assert!(losses.values().all(|&c| c == 1));
            assert!(!losses.contains_key(&outcome.finalists.0));
            assert!(!losses.contains_key(&outcome.finalists.1));
        }
    }

    #[test]
    fn identical_inputs_identical_outcomes() {
        let utilities: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin()).collect();
        let judge = UtilityJudge::noisy(&utilities, 0.8, 3);
        let serial = run_tournament(&ids(12), &judge, &quick(4)).unwrap();
        let parallel = run_tournament(
            &ids(12),
            &judge,
            &TournamentOptions {
                parallelism: 4,
                ..quick(4)
            },
        )
        .unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial, run_tournament(&ids(12), &judge, &quick(4)).unwrap());
    }

    #[test]
    fn noisy_judge_agrees_with_enumeration() {
        let utilities = [0.1, 0.5, 0.3, 0.9, 0.2, 0.8, 0.4, 0.6];
        let best = ArtifactId(4);
        let trials = 2_000u64;
        let mut reached = 0;
        let mut expected = 0.0;
        for trial in 0..trials {
            let judge = UtilityJudge::noisy(&utilities, 0.9, trial);
            let bracket = seed_bracket(&ids(8), trial).unwrap();
            let ordered: Vec<f64> = bracket.order.iter().map(|id| utilities[id.0 as usize - 1]).collect();
            expected += bracket_final_probability(&ordered, 0.9);
            let outcome = play_bracket(&bracket, &judge, &quick(trial)).unwrap();
            if outcome.finalists.0 == best || outcome.finalists.1 == best {
                reached += 1;
            }
        }
        let freq = reached as f64 / trials as f64;
        let expected = expected / trials as f64;
        assert!((expected - 0.81).abs() < 1e-9);
        assert!((freq - expected).abs() <= 0.03, "{freq} vs {expected}");
    }

    struct Flaky {
        failures_left: AtomicUsize,
        transient: bool,
    }

    impl PairJudge for Flaky {
        fn name(&self) -> String {
            "flaky".into()
        }

        fn judge(&self, _a: ArtifactId, _b: ArtifactId, _ordinal: usize) -> Result<Verdict, BackendError> {
            let left = self.failures_left.load(Ordering::SeqCst);
            if left > 0 {
                self.failures_left.store(left - 1, Ordering::SeqCst);
                return Err(if self.transient {
                    BackendError::Unreachable("down".into())
                } else {
                    BackendError::Config("bad key".into())
                });
            }
            Ok(Verdict {
                winner: Side::First,
                justification: "first".into(),
            })
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let judge = Flaky {
            failures_left: AtomicUsize::new(2),
            transient: true,
        };
        let outcome = run_tournament(&ids(4), &judge, &quick(0)).unwrap();
        assert_eq!(outcome.match_log.len(), 2);
    }

    #[test]
    fn exhausted_retries_keep_partial_log() {
        struct FailsLate;
        impl PairJudge for FailsLate {
            fn name(&self) -> String {
                "late".into()
            }
            fn judge(&self, _a: ArtifactId, _b: ArtifactId, ordinal: usize) -> Result<Verdict, BackendError> {
                if ordinal >= 5 {
                    Err(BackendError::Unreachable("gone".into()))
                } else {
                    Ok(Verdict {
                        winner: Side::Second,
                        justification: String::new(),
                    })
                }
            }
        }
        match run_tournament(&ids(8), &FailsLate, &quick(1)) {
            Err(TournamentError::JudgeFailed { partial, completed, .. }) => {
                // Round one (ordinals 0..4) plus ordinal 4 of round two.
                assert_eq!(completed, 5);
                assert_eq!(partial.len(), 5);
            }
            other => panic!("expected judge failure, got {other:?}"),
        }

        let permanent = Flaky {
            failures_left: AtomicUsize::new(1),
            transient: false,
        };
        assert!(matches!(
            run_tournament(&ids(4), &permanent, &quick(0)),
            Err(TournamentError::JudgeFailed { completed: 0, .. })
        ));
    }

    #[test]
    fn summaries() {
        let generator = MockGenerator::new("mock", MockSettings::default());
        let one = vec![MatchResult {
            round: 0,
            pair: (ArtifactId(1), ArtifactId(2)),
            winner: ArtifactId(2),
            justification: "B is more modular".into(),
            judge_name: "mock".into(),
        }];
        let summary = summarize_justifications(&one, &generator, 4000).unwrap();
        assert!(summary.contains("B is more modular"));
        assert!(summary.starts_with("Match 1"));

        let utilities: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let outcome = run_tournament(&ids(16), &UtilityJudge::perfect(&utilities), &quick(2)).unwrap();
        let capped = summarize_justifications(&outcome.match_log, &generator, 200).unwrap();
        assert!(!capped.is_empty());
        assert!(capped.chars().count() <= 200);

        assert!(matches!(
            summarize_justifications(&[], &generator, 100),
            Err(TournamentError::EmptyLog)
        ));
    }

    #[test]
    fn match_lines_format() {
        let utilities: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let outcome = run_tournament(&ids(4), &UtilityJudge::perfect(&utilities), &quick(2)).unwrap();
        let lines = outcome.match_lines();
        assert_eq!(lines.lines().count(), 2);
        assert!(lines.lines().all(|l| l.split('\t').count() == 5 && l.ends_with("utility")));
    }
}
