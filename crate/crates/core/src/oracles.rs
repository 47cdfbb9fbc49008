//! Independent reference computations used only by tests.
//!
//! Nothing here shares code with the production fitting or bracket paths.

/// Regularized Bradley-Terry optimum by brute force: a coarse grid over
/// `[-5, 5]^n` (for `n <= 4`) picks the start, then exact coordinate ascent
/// solves each one-dimensional stationarity condition by bisection.
///
/// `edges` are `(winner, loser, weight)` index triples.
pub fn bt_oracle(n: usize, edges: &[(usize, usize, f64)], lambda: f64) -> Vec<f64> {
    let objective = |theta: &[f64]| -> f64 {
        let ll: f64 = edges
            .iter()
            .map(|&(w, l, weight)| {
                let d = theta[w] - theta[l];
                weight * -(1.0 + (-d).exp()).ln()
            })
            .sum();
        ll - lambda * theta.iter().map(|t| t * t).sum::<f64>()
    };

    let mut theta = vec![0.0; n];
    if n <= 4 {
        let grid: Vec<f64> = (0..=10).map(|i| -5.0 + i as f64).collect();
        let mut best = f64::NEG_INFINITY;
        let mut cursor = vec![0usize; n];
        loop {
            let point: Vec<f64> = cursor.iter().map(|&c| grid[c]).collect();
            let value = objective(&point);
            if value > best {
                best = value;
                theta = point;
            }
            let mut k = 0;
            while k < n {
                cursor[k] += 1;
                if cursor[k] < grid.len() {
                    break;
                }
                cursor[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }

    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    for _sweep in 0..200_000 {
        let mut largest_move = 0.0f64;
        for i in 0..n {
            let derivative = |t: f64, theta: &[f64]| -> f64 {
                let mut d = -2.0 * lambda * t;
                for &(w, l, weight) in edges {
                    if w == i {
                        d += weight * logistic(theta[l] - t);
                    } else if l == i {
                        d -= weight * logistic(t - theta[w]);
                    }
                }
                d
            };
            let (mut lo, mut hi) = (-60.0f64, 60.0f64);
            while hi - lo > 1e-14 {
                let mid = 0.5 * (lo + hi);
                if derivative(mid, &theta) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let updated = 0.5 * (lo + hi);
            largest_move = largest_move.max((updated - theta[i]).abs());
            theta[i] = updated;
        }
        if largest_move < 1e-12 {
            break;
        }
    }
    let mean = theta.iter().sum::<f64>() / n.max(1) as f64;
    theta.iter().map(|t| t - mean).collect()
}

/// Exact probability that the best entrant reaches the final pair of a
/// single-elimination bracket, by enumerating every match-outcome vector.
///
/// `entrants` lists utilities in bracket order; adjacent entrants meet,
/// an odd entrant out waits for the next round, and play stops at two.
/// Each match goes to the higher utility with probability `p`.
pub fn bracket_final_probability(entrants: &[f64], p: f64) -> f64 {
    let n = entrants.len();
    assert!(n >= 2);
    let best = (0..n)
        .max_by(|&a, &b| entrants[a].total_cmp(&entrants[b]))
        .unwrap();
    let matches = n - 2;
    let mut total = 0.0;
    for outcome in 0u64..(1u64 << matches) {
        let mut weight = 1.0;
        let mut alive: Vec<usize> = (0..n).collect();
        let mut played = 0;
        while alive.len() > 2 {
            let mut next = Vec::new();
            let mut chunks = alive.chunks_exact(2);
            for pair in &mut chunks {
                let (a, b) = (pair[0], pair[1]);
                let (better, worse) = if entrants[a] >= entrants[b] { (a, b) } else { (b, a) };
                let correct = outcome >> played & 1 == 0;
                played += 1;
                if correct {
                    weight *= p;
                    next.push(better);
                } else {
                    weight *= 1.0 - p;
                    next.push(worse);
                }
            }
            next.extend_from_slice(chunks.remainder());
            alive = next;
        }
        if alive.contains(&best) {
            total += weight;
        }
    }
    total
}
