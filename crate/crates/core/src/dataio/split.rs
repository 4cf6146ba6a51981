use serde::{Deserialize, Serialize};

use super::TrialRecord;
use crate::error::{Error, Result};
use crate::randdist::RngState;

const STRATA: usize = 10;
/// Below this many records per stratum the split is purely random.
const MIN_PER_STRATUM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Sizes in the proportions 9410 : 1000 : 1000, rounded to `n` records.
    pub fn proportional(n: usize) -> Self {
        let total = 11_410.0;
        let dev = (n as f64 * 1000.0 / total).round() as usize;
        let test = dev;
        Self {
            train: n.saturating_sub(dev + test),
            dev,
            test,
        }
    }

    fn as_array(self) -> [usize; 3] {
        [self.train, self.dev, self.test]
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<TrialRecord>,
    pub dev: Vec<TrialRecord>,
    pub test: Vec<TrialRecord>,
    /// False when the split fell back to uniform random assignment.
    pub stratified: bool,
}

/// Trial ids per split, as written next to a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub stratified: bool,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Rebuilds the split from `records`. Every listed id must be present.
    pub fn resolve(&self, records: &[TrialRecord]) -> Result<DatasetSplit> {
        let by_id: std::collections::HashMap<&str, &TrialRecord> =
            records.iter().map(|r| (r.trial_id.as_str(), r)).collect();
        let pick = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|r| (*r).clone())
                        .ok_or_else(|| Error::Data(format!("split lists trial {id}, which is not in the dataset")))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(DatasetSplit {
            train: pick(&self.train)?,
            dev: pick(&self.dev)?,
            test: pick(&self.test)?,
            stratified: self.stratified,
        })
    }
}

impl DatasetSplit {
    pub fn manifest(&self, seed: u64) -> SplitManifest {
        let ids = |v: &[TrialRecord]| v.iter().map(|r| r.trial_id.clone()).collect();
        SplitManifest {
            seed,
            stratified: self.stratified,
            train: ids(&self.train),
            dev: ids(&self.dev),
            test: ids(&self.test),
        }
    }
}

/// Disjoint train/dev/test split stratified by deciles of
/// `actual_enrollment`, so the three enrollment distributions match.
pub fn split_dataset(records: &[TrialRecord], sizes: SplitSizes, seed: u64) -> Result<DatasetSplit> {
    let want = sizes.as_array();
    let total: usize = want.iter().sum();
    if total > records.len() {
        return Err(Error::Usage(format!(
            "requested {total} records but only {} available",
            records.len()
        )));
    }
    let mut rng = RngState::new(seed);
    let can_stratify = records.iter().all(|r| r.actual_enrollment.is_some())
        && records.len() >= STRATA * MIN_PER_STRATUM;

    let assignment: Vec<Option<usize>> = if can_stratify {
        stratified_assignment(records, want, &mut rng)
    } else {
        log::warn!(
            "too few labeled records ({}) to stratify by decile; using a random split",
            records.len()
        );
        let mut order: Vec<usize> = (0..records.len()).collect();
        rng.shuffle(&mut order);
        let mut out = vec![None; records.len()];
        let mut it = order.into_iter();
        for (k, &n) in want.iter().enumerate() {
            for idx in it.by_ref().take(n) {
                out[idx] = Some(k);
            }
        }
        out
    };

    let mut split = DatasetSplit {
        stratified: can_stratify,
        ..Default::default()
    };
    for (r, a) in records.iter().zip(assignment) {
        match a {
            Some(0) => split.train.push(r.clone()),
            Some(1) => split.dev.push(r.clone()),
            Some(2) => split.test.push(r.clone()),
            _ => {}
        }
    }
    Ok(split)
}

/// Decile of each record by enrollment rank (ties broken by id).
pub fn enrollment_deciles(records: &[TrialRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .actual_enrollment
            .cmp(&records[b].actual_enrollment)
            .then_with(|| records[a].trial_id.cmp(&records[b].trial_id))
    });
    let n = records.len();
    let mut decile = vec![0; n];
    for (rank, &idx) in order.iter().enumerate() {
        decile[idx] = rank * STRATA / n;
    }
    decile
}

fn stratified_assignment(records: &[TrialRecord], want: [usize; 3], rng: &mut RngState) -> Vec<Option<usize>> {
    let n = records.len();
    let decile = enrollment_deciles(records);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); STRATA];
    for (i, &d) in decile.iter().enumerate() {
        members[d].push(i);
    }
    // Column 3 holds records left out of every split.
    let cols = [want[0], want[1], want[2], n - want.iter().sum::<usize>()];
    let mut counts = [[0usize; 4]; STRATA];
    let mut frac = [[0f64; 4]; STRATA];
    for s in 0..STRATA {
        for k in 0..4 {
            let q = cols[k] as f64 * members[s].len() as f64 / n as f64;
            counts[s][k] = q.floor() as usize;
            frac[s][k] = q - q.floor();
        }
    }
    // Largest-remainder rounding per split, respecting stratum sizes.
    for k in 0..4 {
        let assigned: usize = (0..STRATA).map(|s| counts[s][k]).sum();
        let mut need = cols[k] - assigned;
        let mut order: Vec<usize> = (0..STRATA).collect();
        order.sort_by(|&a, &b| frac[b][k].total_cmp(&frac[a][k]).then(a.cmp(&b)));
        while need > 0 {
            let pick = order
                .iter()
                .copied()
                .find(|&s| frac[s][k] > 0.0 && counts[s].iter().sum::<usize>() < members[s].len())
                .or_else(|| {
                    order
                        .iter()
                        .copied()
                        .find(|&s| counts[s].iter().sum::<usize>() < members[s].len())
                })
                .expect("capacity remains while records are unassigned");
            counts[pick][k] += 1;
            frac[pick][k] = 0.0;
            need -= 1;
        }
    }
    let mut out = vec![None; n];
    for s in 0..STRATA {
        let mut idx = members[s].clone();
        rng.shuffle(&mut idx);
        let mut it = idx.into_iter();
        for k in 0..3 {
            for i in it.by_ref().take(counts[s][k]) {
                out[i] = Some(k);
            }
        }
    }
    out
}
