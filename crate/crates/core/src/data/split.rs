use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::rng::stream;

/// Number of water-fraction strata.
pub const STRATA: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Set when there were too few scenes to stratify.
    pub random_fallback: bool,
}

impl SplitManifest {
    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Per-stratum `(val, test)` counts: each is the floor or ceiling of the
/// proportional share, chosen so the totals match and the worst deviation
/// over all three splits is smallest.
fn apportion(strata: &[usize], n_val: usize, n_test: usize) -> Vec<(usize, usize)> {
    let n: usize = strata.iter().sum();
    let n_train = n - n_val - n_test;
    let share = |c: usize, k: usize| (c * k) as f64 / n as f64;
    let s = strata.len();
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for vbits in 0u32..(1 << s) {
        for tbits in 0u32..(1 << s) {
            let alloc: Vec<(usize, usize)> = (0..s)
                .map(|q| {
                    let v = share(strata[q], n_val).floor() as usize + ((vbits >> q) & 1) as usize;
                    let t = share(strata[q], n_test).floor() as usize + ((tbits >> q) & 1) as usize;
                    (v, t)
                })
                .collect();
            let sums = alloc.iter().fold((0, 0), |a, &(v, t)| (a.0 + v, a.1 + t));
            if sums != (n_val, n_test) || alloc.iter().zip(strata).any(|(&(v, t), &c)| v + t > c) {
                continue;
            }
            let worst = alloc
                .iter()
                .zip(strata)
                .map(|(&(v, t), &c)| {
                    let tr = (c - v - t) as f64 - share(c, n_train);
                    (v as f64 - share(c, n_val)).abs().max((t as f64 - share(c, n_test)).abs()).max(tr.abs())
                })
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, alloc));
            }
        }
    }
    best.expect("proportional floors always admit a feasible rounding").1
}

/// 6:2:2 split stratified on water-fraction quintile. Validation and test get
/// `floor(n / 5)` scenes each; training takes the remainder.
pub fn stratified_split(scenes: &[Scene], seed: u64) -> SplitManifest {
    let n = scenes.len();
    let (n_val, n_test) = (n / 5, n / 5);
    let mut rng = stream(seed, "split");
    let mut by_fraction: Vec<usize> = (0..n).collect();
    by_fraction.sort_by(|&a, &b| {
        scenes[a]
            .water_fraction()
            .total_cmp(&scenes[b].water_fraction())
            .then(a.cmp(&b))
    });
    let random_fallback = n < STRATA;
    let strata: Vec<Vec<usize>> = if random_fallback {
        vec![by_fraction]
    } else {
        (0..STRATA)
            .map(|q| by_fraction[q * n / STRATA..(q + 1) * n / STRATA].to_vec())
            .collect()
    };
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let alloc = apportion(&sizes, n_val, n_test);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (mut members, (v, t)) in strata.into_iter().zip(alloc) {
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..v]);
        test.extend_from_slice(&members[v..v + t]);
        train.extend_from_slice(&members[v + t..]);
    }
    let ids = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        idx.into_iter().map(|i| scenes[i].id.clone()).collect()
    };
    SplitManifest {
        seed,
        train: ids(train),
        val: ids(val),
        test: ids(test),
        random_fallback,
    }
}
