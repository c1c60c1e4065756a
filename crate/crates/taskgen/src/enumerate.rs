//! Canonical enumeration of all problems over a filler set.
//!
//! Order: triples of fillers in lexicographic order, then the 6 row-one
//! permutations, then the 6 row-two permutations. This fixed order is what
//! makes index sampling reproducible across platforms.

use crate::{Problem, Result, TaskError};

/// The 3! permutations of three positions, lexicographic.
pub(crate) const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// 36 * C(s, 3)
pub fn problem_count(s: usize) -> u64 {
    if s < 3 {
        return 0;
    }
    let s = s as u64;
    36 * s * (s - 1) * (s - 2) / 6
}

fn choose2(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

/// Lexicographic unranking of a 3-combination out of `s` items.
pub fn unrank_triple(s: usize, mut rank: u64) -> (usize, usize, usize) {
    debug_assert!(rank < problem_count(s) / 36);
    let mut a = 0;
    loop {
        let block = choose2(s - 1 - a);
        if rank < block {
            break;
        }
        rank -= block;
        a += 1;
    }
    let mut b = a + 1;
    loop {
        let block = (s - 1 - b) as u64;
        if rank < block {
            break;
        }
        rank -= block;
        b += 1;
    }
    let c = b + 1 + rank as usize;
    (a, b, c)
}

/// Problem at a canonical index over a sorted filler slice.
pub fn problem_at(fillers: &[u16], index: u64) -> Problem {
    let triple_rank = index / 36;
    let perm = (index % 36) as usize;
    let (p1, p2) = (perm / 6, perm % 6);
    let (a, b, c) = unrank_triple(fillers.len(), triple_rank);
    let triple = [fillers[a], fillers[b], fillers[c]];
    let row1 = [
        triple[PERMS[p1][0]],
        triple[PERMS[p1][1]],
        triple[PERMS[p1][2]],
    ];
    let row2 = [
        triple[PERMS[p2][0]],
        triple[PERMS[p2][1]],
        triple[PERMS[p2][2]],
    ];
    Problem {
        row1,
        row2_given: [row2[0], row2[1]],
        target: row2[2],
        mc: None,
    }
}

/// All 36 * C(|S|, 3) problems over a filler set in canonical order. MC
/// options are not assigned here.
pub fn enumerate_problems(filler_set: &[u16]) -> Result<Vec<Problem>> {
    let mut fillers = filler_set.to_vec();
    fillers.sort_unstable();
    fillers.dedup();
    if fillers.len() < 3 {
        return Err(TaskError::TooFewFillers {
            need: 3,
            got: fillers.len(),
        });
    }
    let total = problem_count(fillers.len());
    let mut out = Vec::with_capacity(total as usize);
    for idx in 0..total {
        out.push(problem_at(&fillers, idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_for_small_sets() {
        assert_eq!(enumerate_problems(&[0, 1, 2]).unwrap().len(), 36);
        assert_eq!(enumerate_problems(&[0, 1, 2, 3]).unwrap().len(), 144);
        assert_eq!(enumerate_problems(&[5, 9, 11, 2, 7]).unwrap().len(), 360);
        assert!(enumerate_problems(&[1, 2]).is_err());
    }

    #[test]
    fn matches_brute_force_enumeration() {
        // independent oracle: nested loops over all ordered row pairs that
        // share a 3-element set
        let fillers: Vec<u16> = vec![3, 8, 10, 21];
        let mut oracle = HashSet::new();
        for &x in &fillers {
            for &y in &fillers {
                for &z in &fillers {
                    if x == y || y == z || x == z {
                        continue;
                    }
                    let mut set1 = [x, y, z];
                    set1.sort_unstable();
                    for &p in &fillers {
                        for &q in &fillers {
                            for &r in &fillers {
                                if p == q || q == r || p == r {
                                    continue;
                                }
                                let mut set2 = [p, q, r];
                                set2.sort_unstable();
                                if set1 == set2 {
                                    oracle.insert(([x, y, z], [p, q], r));
                                }
                            }
                        }
                    }
                }
            }
        }
        let got = enumerate_problems(&fillers).unwrap();
        assert_eq!(got.len(), oracle.len());
        assert_eq!(got.len(), 144);
        let got_set: HashSet<_> = got
            .iter()
            .map(|p| (p.row1, p.row2_given, p.target))
            .collect();
        assert_eq!(got_set, oracle);
    }

    #[test]
    fn canonical_order_is_deterministic_and_valid() {
        let a = enumerate_problems(&[0, 1, 2, 3, 4]).unwrap();
        let b = enumerate_problems(&[4, 3, 2, 1, 0]).unwrap();
        assert_eq!(a, b);
        for p in &a {
            p.validate().unwrap();
        }
        // unranking agrees with enumeration order
        let fillers = [0u16, 1, 2, 3, 4];
        for (i, p) in a.iter().enumerate() {
            assert_eq!(*p, problem_at(&fillers, i as u64));
        }
    }
}
