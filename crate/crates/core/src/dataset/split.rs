use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitManifest {
    /// `(n_train, n_val, n_test)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |s| self.assignments.values().filter(|&&v| v == s).count();
        (n(Split::Train), n(Split::Val), n(Split::Test))
    }

    /// Ids assigned to `split`, sorted.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &s)| s == split).map(|(id, _)| id.as_str()).collect()
    }

    /// `id,split` rows sorted by id, preceded by a `# seed=` comment.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed={}\nid,split\n", self.seed);
        for (id, s) in &self.assignments {
            out.push_str(&format!("{id},{s}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut assignments = BTreeMap::new();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    seed = Some(v.parse().map_err(|_| Error::Config(format!("bad seed on line {}", n + 1)))?);
                }
                continue;
            }
            if !header {
                if line != "id,split" {
                    return Err(Error::Config(format!("expected header `id,split`, got {line:?}")));
                }
                header = true;
                continue;
            }
            let (id, split) =
                line.rsplit_once(',').ok_or_else(|| Error::Config(format!("malformed row on line {}", n + 1)))?;
            if assignments.insert(id.to_string(), split.parse()?).is_some() {
                return Err(Error::Consistency(format!("id {id:?} assigned twice")));
            }
        }
        let seed = seed.ok_or_else(|| Error::Config("manifest has no `# seed=` header".into()))?;
        Ok(Self { seed, assignments })
    }
}

/// Split sizes for `n` samples: floor, floor, remainder. When `n` is small
/// enough for the floors to leave a split empty, one sample moves to it from
/// the largest split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let mut sizes = [train, val, n - train - val];
    for i in 0..3 {
        if sizes[i] == 0 {
            let largest = (0..3).max_by_key(|&j| sizes[j]).expect("three splits");
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Shuffles the sorted ids with a seeded generator and assigns them in
/// train, val, test order.
pub fn make_splits<S: AsRef<str>>(ids: &[S], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    if ids.len() < 3 {
        return Err(Error::Contract(format!("{} samples cannot populate three splits", ids.len())));
    }
    let mut sorted: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Consistency(format!("duplicate id {:?}", w[0])));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_sizes(sorted.len(), ratios);
    let assignments = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), s)
        })
        .collect();
    Ok(SplitManifest { seed, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_rule_sizes() {
        assert_eq!(split_sizes(10, DEFAULT_RATIOS), [6, 2, 2]);
        assert_eq!(split_sizes(2887, DEFAULT_RATIOS), [1732, 577, 578]);
        assert_eq!(split_sizes(3, DEFAULT_RATIOS), [1, 1, 1]);
        assert_eq!(split_sizes(4, DEFAULT_RATIOS), [2, 1, 1]);
    }

    #[test]
    fn refuses_tiny_corpora() {
        assert!(make_splits(&["a", "b"], DEFAULT_RATIOS, 0).is_err());
        assert!(make_splits(&["a", "b", "c"], [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let ids: Vec<String> = (0..25).map(|i| format!("img{i:03}")).collect();
        let a = make_splits(&ids, DEFAULT_RATIOS, 42).unwrap();
        let b = make_splits(&ids, DEFAULT_RATIOS, 42).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(SplitManifest::from_csv(&a.to_csv()).unwrap(), a);
        assert_eq!(a.counts(), (15, 5, 5));
        assert!(a.to_csv().starts_with("# seed=42\nid,split\n"));
    }
}
