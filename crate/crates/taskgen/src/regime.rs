//! Regime construction: split-aware sampling and MC option assignment.

use crate::enumerate::{problem_at, problem_count};
use crate::rng::{mix, stream, STREAM_MC, STREAM_SAMPLING, STREAM_SHUFFLE};
use crate::{Dataset, Problem, RegimeSpec, Result, Split, TaskError, TaskMode};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Draw `k` distinct values from `0..pool`, uniformly, in random order.
/// Small pools use a partial Fisher-Yates shuffle; large pools use
/// rejection sampling (collisions are negligible at our ratios).
pub fn sample_distinct<R: Rng>(rng: &mut R, pool: u64, k: usize) -> Result<Vec<u64>> {
    if (k as u64) > pool {
        return Err(TaskError::PoolExhausted {
            requested: k as u64,
            available: pool,
        });
    }
    if pool <= (1 << 22) {
        let mut all: Vec<u64> = (0..pool).collect();
        let n = all.len();
        for i in 0..k.min(n.saturating_sub(1)) {
            let j = rng.gen_range(i..n);
            all.swap(i, j);
        }
        all.truncate(k);
        Ok(all)
    } else {
        let mut seen = HashSet::with_capacity(k * 2);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let v = rng.gen_range(0..pool);
            if seen.insert(v) {
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Attach the four MC options: row one's three fillers plus one filler drawn
/// uniformly from `pool` outside row one, all in uniformly random order.
pub fn attach_mc_options<R: Rng>(p: &Problem, pool: &[u16], rng: &mut R) -> Result<Problem> {
    let mut eligible: Vec<u16> = pool
        .iter()
        .copied()
        .filter(|v| !p.row1.contains(v))
        .collect();
    eligible.sort_unstable();
    eligible.dedup();
    if eligible.is_empty() {
        return Err(TaskError::McPoolTooSmall);
    }
    let fourth = eligible[rng.gen_range(0..eligible.len())];
    let mut options = [p.row1[0], p.row1[1], p.row1[2], fourth];
    // Fisher-Yates over the four slots
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        options.swap(i, j);
    }
    let answer_pos = options
        .iter()
        .position(|&v| v == p.target)
        .expect("target is always among row1 options") as u8;
    Ok(Problem {
        mc: Some(crate::McOptions {
            options,
            answer_pos: answer_pos as u8,
        }),
        ..*p
    })
}

/// Per-problem MC assignment rng: a pure function of the regime seed and the
/// problem's fields, so a problem repeated in an oversampled split keeps the
/// same options.
fn mc_rng(seed: u64, p: &Problem) -> ChaCha8Rng {
    let fields = [
        p.row1[0] as u64,
        p.row1[1] as u64,
        p.row1[2] as u64,
        p.row2_given[0] as u64,
        p.row2_given[1] as u64,
        p.target as u64,
        STREAM_MC,
    ];
    ChaCha8Rng::seed_from_u64(mix(seed, &fields))
}

fn attach_mc_all(problems: &mut [Problem], pool: &[u16], seed: u64) -> Result<()> {
    for p in problems.iter_mut() {
        let mut rng = mc_rng(seed, p);
        *p = attach_mc_options(p, pool, &mut rng)?;
    }
    Ok(())
}

/// Build the (train, test) dataset pair for a regime.
pub fn build_regime(spec: &RegimeSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut sampling = stream(spec.seed, STREAM_SAMPLING);

    let train_fillers = spec.train_fillers();
    let test_fillers = spec.test_fillers();

    let (train_problems, test_problems, repeated);
    if spec.m == 0 {
        let pool = problem_count(train_fillers.len());
        let picks = sample_distinct(&mut sampling, pool, spec.train_count + spec.test_count)?;
        let mut all: Vec<Problem> = picks
            .into_iter()
            .map(|i| problem_at(&train_fillers, i))
            .collect();
        test_problems = all.split_off(spec.train_count);
        train_problems = all;
        repeated = false;
    } else {
        let train_pool = problem_count(train_fillers.len());
        let picks = sample_distinct(&mut sampling, train_pool, spec.train_count)?;
        train_problems = picks
            .into_iter()
            .map(|i| problem_at(&train_fillers, i))
            .collect();

        let test_pool = problem_count(test_fillers.len());
        if spec.test_count as u64 <= test_pool {
            let picks = sample_distinct(&mut sampling, test_pool, spec.test_count)?;
            test_problems = picks
                .into_iter()
                .map(|i| problem_at(&test_fillers, i))
                .collect();
            repeated = false;
        } else {
            // Exhaust the pool once, then draw uniformly with repetition and
            // shuffle the combined sequence.
            let mut probs: Vec<Problem> = (0..test_pool)
                .map(|i| problem_at(&test_fillers, i))
                .collect();
            while probs.len() < spec.test_count {
                let i = sampling.gen_range(0..test_pool);
                probs.push(problem_at(&test_fillers, i));
            }
            let mut shuffle = stream(spec.seed, STREAM_SHUFFLE);
            for i in (1..probs.len()).rev() {
                let j = shuffle.gen_range(0..=i);
                probs.swap(i, j);
            }
            test_problems = probs;
            repeated = true;
        }
    }

    let mut train = Dataset {
        spec: *spec,
        split: Split::Train,
        problems: train_problems,
        sampled_with_repetition: false,
    };
    let mut test = Dataset {
        spec: *spec,
        split: Split::Test,
        problems: test_problems,
        sampled_with_repetition: repeated,
    };

    if spec.mode == TaskMode::Mc {
        attach_mc_all(&mut train.problems, &train_fillers, spec.seed)?;
        attach_mc_all(&mut test.problems, &test_fillers, spec.seed)?;
    }
    Ok((train, test))
}
