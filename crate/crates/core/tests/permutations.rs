use cfsl::permutations::{hamming, PermutationSet};
use itertools::Itertools;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force greedy: recompute every candidate's minimum distance to the
/// whole chosen set at each step, ties to the lexicographically smallest.
fn oracle(n: usize, m_s: usize, seed: u64) -> Vec<Vec<usize>> {
    let all: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![all[rng.random_range(0..all.len())].clone()];
    while chosen.len() < m_s {
        let mut best: Option<(usize, &Vec<usize>)> = None;
        for cand in all.iter().filter(|c| !chosen.contains(c)) {
            let d = chosen.iter().map(|c| hamming(c, cand)).min().unwrap();
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, cand));
            }
        }
        chosen.push(best.unwrap().1.clone());
    }
    chosen
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

#[test]
fn greedy_matches_brute_force_for_every_feasible_size() {
    for n in 2..=4 {
        for m_s in 1..=factorial(n) {
            for seed in 0..4 {
                let set = PermutationSet::generate(n, m_s, seed).unwrap();
                assert_eq!(set.perms(), oracle(n, m_s, seed).as_slice(), "n={n} m_s={m_s} seed={seed}");
            }
        }
    }
}

#[test]
fn three_tiles_two_orderings_differ_everywhere() {
    for seed in 0..20 {
        let set = PermutationSet::generate(3, 2, seed).unwrap();
        assert_eq!(hamming(&set.perms()[0], &set.perms()[1]), 3);
        assert_eq!(set.min_pairwise_hamming(), 3);
    }
}

#[test]
fn single_ordering_reports_full_distance() {
    let set = PermutationSet::generate(4, 1, 0).unwrap();
    assert_eq!(set.min_pairwise_hamming(), 4);
}

#[test]
fn infeasible_sizes_are_rejected() {
    assert!(PermutationSet::generate(3, 7, 0).is_err());
    assert!(PermutationSet::generate(3, 0, 0).is_err());
    assert!(PermutationSet::generate(0, 1, 0).is_err());
    assert!(PermutationSet::generate(9, 1, 0).is_err());
}

#[test]
fn explicit_lists_are_validated() {
    assert!(PermutationSet::from_perms(vec![vec![0, 1], vec![0, 1]]).is_err());
    assert!(PermutationSet::from_perms(vec![vec![0, 0]]).is_err());
    assert!(PermutationSet::from_perms(vec![vec![0, 1], vec![1, 0, 2]]).is_err());
    let s = PermutationSet::from_perms(vec![vec![0, 1, 2], vec![1, 0, 2]]).unwrap();
    assert_eq!(s.min_pairwise_hamming(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn generated_sets_are_distinct_bijections(n in 2usize..=5, m in 1usize..=30, seed in any::<u64>()) {
        let m_s = m.min(factorial(n));
        let set = PermutationSet::generate(n, m_s, seed).unwrap();
        prop_assert_eq!(set.len(), m_s);
        let sorted: Vec<Vec<usize>> = set.perms().iter().cloned().sorted().dedup().collect();
        prop_assert_eq!(sorted.len(), m_s);
        for p in set.perms() {
            prop_assert!(cfsl::permutations::is_bijection(p));
        }
        let mut dmin = n;
        for (a, b) in set.perms().iter().tuple_combinations() {
            dmin = dmin.min(hamming(a, b));
        }
        prop_assert_eq!(set.min_pairwise_hamming(), dmin);
    }
}
