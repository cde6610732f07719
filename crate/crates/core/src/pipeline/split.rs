//! Stratified train/test split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Assign each sample (given by its cluster label) to train or test.
///
/// The train total is `⌊fraction·N⌋`. Singleton clusters go to train; the
/// remaining train quota is apportioned across the other clusters by largest
/// remainder (ties to the lower cluster id), and members are shuffled per cluster.
pub fn stratified_split(clusters: &[usize], train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    let n = clusters.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples to split, got {n}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let total_train = ((train_fraction * n as f64) + 1e-9).floor() as usize;
    let mut quota: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remaining = total_train;
    for (&c, m) in &groups {
        if m.len() == 1 {
            log::info!("cluster {c} has a single sample; assigned to train");
            quota.insert(c, 1);
            remaining = remaining.saturating_sub(1);
        }
    }
    let others: Vec<(usize, usize)> = groups.iter().filter(|(_, m)| m.len() > 1).map(|(&c, m)| (c, m.len())).collect();
    let pool: usize = others.iter().map(|(_, s)| s).sum();
    if pool > 0 {
        let exact: Vec<(usize, f64)> = others.iter().map(|&(c, s)| (c, remaining as f64 * s as f64 / pool as f64)).collect();
        let mut given = 0;
        for &(c, x) in &exact {
            let q = x.floor() as usize;
            quota.insert(c, q);
            given += q;
        }
        let mut order: Vec<(usize, f64)> = exact.iter().map(|&(c, x)| (c, x - x.floor())).collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        let size: BTreeMap<usize, usize> = others.iter().copied().collect();
        let mut left = remaining.saturating_sub(given);
        while left > 0 {
            let before = left;
            for &(c, _) in &order {
                if left == 0 {
                    break;
                }
                let q = quota.get_mut(&c).expect("quota set");
                if *q < size[&c] {
                    *q += 1;
                    left -= 1;
                }
            }
            if left == before {
                break;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Test; n];
    for (c, members) in &groups {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        for &i in m.iter().take(quota[c]) {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(s: &[Split]) -> usize {
        s.iter().filter(|&&x| x == Split::Train).count()
    }

    #[test]
    fn large_corpus_floor() {
        let clusters: Vec<usize> = (0..2955).map(|i| i % 33).collect();
        let s = stratified_split(&clusters, 0.9, 1).unwrap();
        assert_eq!(count(&s), 2659);
        assert_eq!(s.len() - count(&s), 296);
        assert_eq!(s, stratified_split(&clusters, 0.9, 1).unwrap());
    }

    #[test]
    fn all_train_and_singletons() {
        let s = stratified_split(&[0, 0, 1, 2, 2, 2], 1.0, 0).unwrap();
        assert_eq!(count(&s), 6);
        let s = stratified_split(&[0, 1, 1, 1, 1], 0.5, 0).unwrap();
        assert_eq!(s[0], Split::Train);
        assert_eq!(count(&s), 2);
        assert!(stratified_split(&[0], 0.9, 0).is_err());
    }

    #[test]
    fn per_cluster_within_one() {
        let clusters: Vec<usize> = (0..103).map(|i| if i < 50 { 0 } else if i < 90 { 1 } else { 2 }).collect();
        let s = stratified_split(&clusters, 0.9, 3).unwrap();
        assert_eq!(count(&s), 92);
        for (c, size) in [(0, 50.0), (1, 40.0), (2, 13.0)] {
            let t = clusters.iter().zip(&s).filter(|(&k, &x)| k == c && x == Split::Train).count() as f64;
            assert!((t - 0.9 * size).abs() <= 1.0, "cluster {c}: {t}");
        }
    }
}
