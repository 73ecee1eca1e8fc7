//! Genuine/impostor comparison sets.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const DEFAULT_IMPOSTOR_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub probe: usize,
    pub reference: usize,
}

impl Pair {
    pub fn new(probe: usize, reference: usize) -> Self {
        Self { probe, reference }
    }

    /// Order-independent key.
    pub fn unordered(&self) -> (usize, usize) {
        (self.probe.min(self.reference), self.probe.max(self.reference))
    }

    pub fn involves(&self, image: usize) -> bool {
        self.probe == image || self.reference == image
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSet {
    pub genuine: Vec<Pair>,
    pub impostor: Vec<Pair>,
}

impl ComparisonSet {
    /// Checks the subject and self-comparison rules against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let n = dataset.len();
        let check = |pairs: &[Pair], genuine: bool| -> Result<()> {
            let mut seen = HashSet::with_capacity(pairs.len());
            for p in pairs {
                for idx in [p.probe, p.reference] {
                    if idx >= n {
                        return Err(Error::IndexOutOfRange { index: idx, len: n });
                    }
                }
                if p.probe == p.reference {
                    return Err(Error::InvalidArgument(format!(
                        "pair compares image {} with itself",
                        p.probe
                    )));
                }
                let same = dataset.record(p.probe).subject_id == dataset.record(p.reference).subject_id;
                if same != genuine {
                    return Err(Error::InvalidArgument(format!(
                        "{} pair ({}, {}) has {} subjects",
                        if genuine { "genuine" } else { "impostor" },
                        dataset.record(p.probe).image_id,
                        dataset.record(p.reference).image_id,
                        if same { "equal" } else { "different" },
                    )));
                }
                if !seen.insert(p.unordered()) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate pair ({}, {})",
                        p.probe, p.reference
                    )));
                }
            }
            Ok(())
        };
        check(&self.genuine, true)?;
        check(&self.impostor, false)
    }
}

fn subject_groups(dataset: &Dataset) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records().iter().enumerate() {
        by_subject.entry(&r.subject_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_subject.into_values().collect();
    let mut group_of = vec![0; dataset.len()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            group_of[i] = g;
        }
    }
    (group_of, groups)
}

/// All unordered within-subject pairs, sorted by `(probe, reference)`.
pub fn genuine_pairs(dataset: &Dataset) -> Vec<Pair> {
    let (_, groups) = subject_groups(dataset);
    let mut out: Vec<Pair> = groups
        .iter()
        .flat_map(|g| {
            g.iter()
                .enumerate()
                .flat_map(move |(a, &i)| g[a + 1..].iter().map(move |&j| Pair::new(i, j)))
        })
        .collect();
    out.sort();
    out
}

/// Impostor samples before unordered dedup: for every probe, up to `cap`
/// references drawn without replacement from other subjects. Probe `i`
/// draws from its own stream `(seed, i)`.
pub fn sample_impostors(dataset: &Dataset, cap: usize, seed: u64) -> Vec<Pair> {
    let (group_of, groups) = subject_groups(dataset);
    let n = dataset.len();
    (0..n)
        .into_par_iter()
        .map(|probe| {
            let own = &groups[group_of[probe]];
            let pool = n - own.len();
            let k = cap.min(pool);
            let mut rng = stream_rng(seed, probe as u64);
            let mut refs: Vec<usize> = index::sample(&mut rng, pool, k)
                .into_iter()
                .map(|pos| {
                    // position in the complement of `own` -> dataset index
                    let mut idx = pos;
                    for &o in own {
                        if o <= idx {
                            idx += 1;
                        } else {
                            break;
                        }
                    }
                    idx
                })
                .collect();
            refs.sort_unstable();
            refs.into_iter().map(|r| Pair::new(probe, r)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Keeps the first occurrence of every unordered pair.
pub fn dedup_unordered(pairs: Vec<Pair>) -> Vec<Pair> {
    let mut seen = HashSet::with_capacity(pairs.len());
    pairs.into_iter().filter(|p| seen.insert(p.unordered())).collect()
}

pub fn generate_pairs(dataset: &Dataset, impostor_cap_per_probe: usize, seed: u64) -> Result<ComparisonSet> {
    if impostor_cap_per_probe == 0 {
        return Err(Error::InvalidArgument("impostor cap must be positive".into()));
    }
    let genuine = genuine_pairs(dataset);
    if genuine.is_empty() {
        return Err(Error::NoGenuinePairs);
    }
    let impostor = dedup_unordered(sample_impostors(dataset, impostor_cap_per_probe, seed));
    if impostor.is_empty() {
        return Err(Error::NoImpostorPairs);
    }
    Ok(ComparisonSet { genuine, impostor })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: Pair,
    pub score: f64,
}

/// Comparison set with one cosine similarity per pair, in pair order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredComparisons {
    pub genuine: Vec<ScoredPair>,
    pub impostor: Vec<ScoredPair>,
}

impl ScoredComparisons {
    pub fn genuine_scores(&self) -> Vec<f64> {
        self.genuine.iter().map(|p| p.score).collect()
    }

    pub fn impostor_scores(&self) -> Vec<f64> {
        self.impostor.iter().map(|p| p.score).collect()
    }

    /// Keeps only pairs whose members both satisfy `keep`.
    pub fn filter_images(&self, keep: impl Fn(usize) -> bool) -> ScoredComparisons {
        let f = |v: &[ScoredPair]| {
            v.iter()
                .filter(|p| keep(p.pair.probe) && keep(p.pair.reference))
                .copied()
                .collect()
        };
        ScoredComparisons {
            genuine: f(&self.genuine),
            impostor: f(&self.impostor),
        }
    }
}

/// Writes `kind,probe,reference,score` rows with image ids.
pub fn write_pairs_csv(path: impl AsRef<Path>, dataset: &Dataset, scored: &ScoredComparisons) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
    w.write_record(["kind", "probe", "reference", "score"])
        .map_err(|e| Error::csv(path, &e))?;
    for (kind, list) in [("genuine", &scored.genuine), ("impostor", &scored.impostor)] {
        for p in list {
            w.write_record([
                kind,
                &dataset.record(p.pair.probe).image_id,
                &dataset.record(p.pair.reference).image_id,
                &p.score.to_string(),
            ])
            .map_err(|e| Error::csv(path, &e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<ScoredComparisons> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, &e))?;
    if headers.iter().collect::<Vec<_>>() != ["kind", "probe", "reference", "score"] {
        return Err(Error::format(path, "pairs CSV header must be kind,probe,reference,score"));
    }
    let index = dataset.id_index();
    let mut out = ScoredComparisons::default();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::csv(path, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Csv {
            path: path.into(),
            line,
            message,
        };
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| bad(format!("unknown image id `{id}`")))
        };
        let pair = Pair::new(lookup(&row[1])?, lookup(&row[2])?);
        let score: f64 = row[3]
            .parse()
            .map_err(|_| bad(format!("unparsable score `{}`", &row[3])))?;
        let sp = ScoredPair { pair, score };
        match &row[0] {
            "genuine" => out.genuine.push(sp),
            "impostor" => out.impostor.push(sp),
            other => return Err(bad(format!("unknown pair kind `{other}`"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleRecord;
    use crate::fqbe::Matrix;

    fn dataset(subjects: &[(&str, usize)]) -> Dataset {
        let mut recs = Vec::new();
        for (s, n) in subjects {
            for k in 0..*n {
                recs.push(SampleRecord::new(format!("{s}{}", k + 1), *s));
            }
        }
        let n = recs.len();
        Dataset::new(recs, Matrix::new(n, 1, vec![1.0; n]).unwrap(), None).unwrap()
    }

    #[test]
    fn exhaustive_small_case() {
        let ds = dataset(&[("a", 2), ("b", 1)]);
        let set = generate_pairs(&ds, 10, 0).unwrap();
        assert_eq!(set.genuine, vec![Pair::new(0, 1)]);
        let keys: HashSet<_> = set.impostor.iter().map(Pair::unordered).collect();
        assert!(keys.contains(&(0, 2)) && keys.contains(&(1, 2)));
        assert_eq!(set.impostor.len(), 2);
        set.validate(&ds).unwrap();
    }

    #[test]
    fn deterministic_for_same_seed() {
        let ds = dataset(&[("a", 3), ("b", 4), ("c", 2), ("d", 5)]);
        let x = generate_pairs(&ds, 3, 11).unwrap();
        let y = generate_pairs(&ds, 3, 11).unwrap();
        assert_eq!(x, y);
        let z = generate_pairs(&ds, 3, 12).unwrap();
        assert_ne!(x.impostor, z.impostor);
    }

    #[test]
    fn capped_count_before_and_after_dedup() {
        let ds = dataset(&[("a", 2), ("b", 2), ("c", 2), ("d", 2), ("e", 2)]);
        let raw = sample_impostors(&ds, 3, 7);
        assert_eq!(raw.len(), 30);
        // brute-force dedup oracle
        let mut kept: Vec<(usize, usize)> = Vec::new();
        for p in &raw {
            assert_ne!(ds.record(p.probe).subject_id, ds.record(p.reference).subject_id);
            let key = (p.probe.min(p.reference), p.probe.max(p.reference));
            if !kept.contains(&key) {
                kept.push(key);
            }
        }
        let set = generate_pairs(&ds, 3, 7).unwrap();
        let got: Vec<_> = set.impostor.iter().map(Pair::unordered).collect();
        assert_eq!(got, kept);
        set.validate(&ds).unwrap();
    }

    #[test]
    fn cap_larger_than_pool_takes_everything() {
        let ds = dataset(&[("a", 2), ("b", 3)]);
        let raw = sample_impostors(&ds, 100, 1);
        assert_eq!(raw.len(), 2 * 3 + 3 * 2);
        assert_eq!(dedup_unordered(raw).len(), 6);
    }

    #[test]
    fn impossible_pairings() {
        assert!(matches!(
            generate_pairs(&dataset(&[("a", 1), ("b", 1)]), 5, 0),
            Err(Error::NoGenuinePairs)
        ));
        assert!(matches!(
            generate_pairs(&dataset(&[("a", 3)]), 5, 0),
            Err(Error::NoImpostorPairs)
        ));
    }

    #[test]
    fn pairs_csv_roundtrip() {
        let ds = dataset(&[("a", 2), ("b", 2)]);
        let set = generate_pairs(&ds, 2, 3).unwrap();
        let scored = ScoredComparisons {
            genuine: set.genuine.iter().map(|&pair| ScoredPair { pair, score: 0.1 + 0.2 }).collect(),
            impostor: set.impostor.iter().map(|&pair| ScoredPair { pair, score: -1.0 / 3.0 }).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        write_pairs_csv(&p, &ds, &scored).unwrap();
        assert_eq!(read_pairs_csv(&p, &ds).unwrap(), scored);
    }
}
