//! Sets of tile orderings chosen greedily for large pairwise Hamming distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest tile count for which all `n!` orderings are enumerated.
pub const MAX_TILES: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    perms: Vec<Vec<usize>>,
    min_pairwise_hamming: usize,
}

/// Number of positions at which two orderings differ.
pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&v| v < seen.len() && !std::mem::replace(&mut seen[v], true))
}

/// All permutations of `0..n` in lexicographic order.
pub(crate) fn lexicographic_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else { break };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

fn min_pairwise(perms: &[Vec<usize>], n: usize) -> usize {
    let mut best = n;
    for (i, a) in perms.iter().enumerate() {
        for b in &perms[i + 1..] {
            best = best.min(hamming(a, b));
        }
    }
    best
}

impl PermutationSet {
    /// Greedy max-min Hamming selection of `m_s` orderings of `n` tiles.
    ///
    /// The first ordering is drawn uniformly (from a ChaCha8 stream seeded
    /// with `seed`) out of the lexicographic enumeration. Each subsequent
    /// pick is the unchosen ordering whose minimum distance to the chosen
    /// set is largest, with ties going to the lexicographically smallest.
    pub fn generate(n: usize, m_s: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > MAX_TILES {
            return Err(Error::InvalidArgument(format!(
                "tile count {n} outside 1..={MAX_TILES}"
            )));
        }
        let all = lexicographic_permutations(n);
        if m_s == 0 || m_s > all.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot choose {m_s} orderings out of {n}! = {}",
                all.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..all.len());

        let mut chosen = vec![false; all.len()];
        let mut dmin = vec![usize::MAX; all.len()];
        let mut picked = Vec::with_capacity(m_s);
        let mut next = start;
        loop {
            chosen[next] = true;
            picked.push(next);
            if picked.len() == m_s {
                break;
            }
            let newest = &all[next];
            for (c, d) in dmin.iter_mut().enumerate() {
                *d = (*d).min(hamming(&all[c], newest));
            }
            next = (0..all.len())
                .filter(|&c| !chosen[c])
                .fold(None, |best: Option<usize>, c| match best {
                    Some(b) if dmin[b] >= dmin[c] => Some(b),
                    _ => Some(c),
                })
                .expect("m_s <= n! leaves a candidate");
        }
        let perms: Vec<Vec<usize>> = picked.into_iter().map(|i| all[i].clone()).collect();
        let min_pairwise_hamming = min_pairwise(&perms, n);
        Ok(Self {
            perms,
            min_pairwise_hamming,
        })
    }

    /// Wraps an explicit list, validating bijectivity and distinctness.
    pub fn from_perms(perms: Vec<Vec<usize>>) -> Result<Self> {
        let n = perms.first().map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidArgument("empty permutation set".into()));
        }
        for p in &perms {
            if p.len() != n || !is_bijection(p) {
                return Err(Error::InvalidArgument(format!("{p:?} is not a permutation of 0..{n}")));
            }
        }
        for (i, a) in perms.iter().enumerate() {
            if perms[i + 1..].contains(a) {
                return Err(Error::InvalidArgument(format!("duplicate ordering {a:?}")));
            }
        }
        let min_pairwise_hamming = min_pairwise(&perms, n);
        Ok(Self {
            perms,
            min_pairwise_hamming,
        })
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn get(&self, i: usize) -> Option<&[usize]> {
        self.perms.get(i).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn n_tiles(&self) -> usize {
        self.perms[0].len()
    }

    /// Minimum Hamming distance over all pairs; `n` for a single ordering.
    pub fn min_pairwise_hamming(&self) -> usize {
        self.min_pairwise_hamming
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_enumeration_counts() {
        assert_eq!(lexicographic_permutations(1), vec![vec![0]]);
        let p3 = lexicographic_permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[1], vec![0, 2, 1]);
        assert!(p3.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(lexicographic_permutations(5).len(), 120);
    }

    #[test]
    fn full_s4_has_min_distance_two() {
        let set = PermutationSet::generate(4, 24, 7).unwrap();
        assert_eq!(set.len(), 24);
        assert_eq!(set.min_pairwise_hamming(), 2);
    }

    #[test]
    fn two_tiles_gives_identity_and_swap() {
        let set = PermutationSet::generate(2, 2, 0).unwrap();
        let mut perms = set.perms().to_vec();
        perms.sort();
        assert_eq!(perms, vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(set.min_pairwise_hamming(), 2);
    }

    #[test]
    fn three_tiles_pair_is_at_distance_three() {
        for seed in 0..10 {
            let set = PermutationSet::generate(3, 2, seed).unwrap();
            assert_eq!(set.min_pairwise_hamming(), 3, "seed {seed}");
        }
    }

    #[test]
    fn guards() {
        assert!(PermutationSet::generate(9, 2, 0).is_err());
        assert!(PermutationSet::generate(3, 7, 0).is_err());
        assert!(PermutationSet::generate(3, 0, 0).is_err());
        assert!(PermutationSet::from_perms(vec![vec![0, 0]]).is_err());
        assert!(PermutationSet::from_perms(vec![vec![0, 1], vec![0, 1]]).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = PermutationSet::generate(5, 10, 42).unwrap();
        let b = PermutationSet::generate(5, 10, 42).unwrap();
        assert_eq!(a, b);
    }
}
