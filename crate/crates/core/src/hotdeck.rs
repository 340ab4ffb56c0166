//! Random hot deck for the unmargined variables of unit nonrespondents.
//!
//! Donors are unit respondents whose (possibly imputed) margined values
//! match the nonrespondent's pattern. One donor supplies all unmargined
//! values jointly, preserving within-record associations.

use std::collections::HashMap;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MdamError, Result};
use crate::frame::{Provenance, SampleFrame, WorkingDataset};
use crate::rng::substream;

/// Respondent indices bucketed by margined-value pattern.
#[derive(Debug, Clone)]
pub struct DonorIndex {
    pub buckets: HashMap<Vec<usize>, Vec<usize>>,
}

impl DonorIndex {
    pub fn lookup(&self, pattern: &[usize]) -> Option<&[usize]> {
        self.buckets.get(pattern).map(Vec::as_slice)
    }

    pub fn donor_count(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }
}

fn pattern_of(dataset: &WorkingDataset, unit: usize, margined: &[usize]) -> Vec<usize> {
    margined
        .iter()
        .map(|&j| dataset.cat(unit, j).expect("margined value imputed"))
        .collect()
}

/// Partition the respondents by their margined-value pattern.
pub fn build_index(
    frame: &SampleFrame,
    dataset: &WorkingDataset,
    margined: &[usize],
) -> DonorIndex {
    let mut buckets: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for i in frame.respondents() {
        buckets
            .entry(pattern_of(dataset, i, margined))
            .or_default()
            .push(i);
    }
    DonorIndex { buckets }
}

/// Options for donor selection.
#[derive(Debug, Clone, Copy, Default)]
pub struct HotDeckOptions {
    /// Draw donors proportional to their design weight instead of uniformly.
    pub weighted_donors: bool,
}

/// Fallback counts for one dataset's hot deck pass.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DatasetHotDeckReport {
    pub dataset: usize,
    pub substream: String,
    /// Matches found only after dropping the last margined variable.
    pub fallback_drop_last: usize,
    /// Matches that fell through to the full respondent pool.
    pub fallback_any: usize,
}

/// Hot deck every unit nonrespondent in every dataset.
///
/// The donor search ladder: exact margined pattern, then the pattern with
/// its last variable dropped, then any respondent. Each fallback is counted
/// in the report.
pub fn hotdeck_impute(
    frame: &SampleFrame,
    datasets: &mut [WorkingDataset],
    margined: &[usize],
    options: HotDeckOptions,
    master_seed: u64,
    scope: &str,
) -> Result<Vec<DatasetHotDeckReport>> {
    let unmargined: Vec<usize> = (0..frame.n_vars())
        .filter(|j| !margined.contains(j))
        .collect();
    datasets
        .par_iter_mut()
        .enumerate()
        .map(|(l, dataset)| {
            let label = format!("{scope}/hotdeck/dataset/{l}");
            let mut rng = substream(master_seed, &label);
            let mut report = DatasetHotDeckReport {
                dataset: l,
                substream: label,
                ..DatasetHotDeckReport::default()
            };
            hotdeck_one(frame, dataset, margined, &unmargined, options, &mut rng, &mut report)?;
            Ok(report)
        })
        .collect()
}

fn hotdeck_one<R: Rng + ?Sized>(
    frame: &SampleFrame,
    dataset: &mut WorkingDataset,
    margined: &[usize],
    unmargined: &[usize],
    options: HotDeckOptions,
    rng: &mut R,
    report: &mut DatasetHotDeckReport,
) -> Result<()> {
    let index = build_index(frame, dataset, margined);
    let respondents: Vec<usize> = frame.respondents().collect();
    if respondents.is_empty() {
        return Err(MdamError::EmptyDonorPool);
    }
    // Secondary index on the pattern with its last variable dropped, built
    // lazily on first fallback.
    let mut prefix_index: Option<DonorIndex> = None;

    let nonrespondents: Vec<usize> = frame.unit_nonrespondents().collect();
    for i in nonrespondents {
        let pattern = pattern_of(dataset, i, margined);
        let donors: &[usize] = match index.lookup(&pattern) {
            Some(bucket) if !bucket.is_empty() => bucket,
            _ => {
                let prefix_bucket = if margined.len() > 1 {
                    let prefix = &pattern[..pattern.len() - 1];
                    let idx = prefix_index.get_or_insert_with(|| {
                        build_index(frame, dataset, &margined[..margined.len() - 1])
                    });
                    idx.buckets.get(prefix).map(Vec::as_slice)
                } else {
                    None
                };
                match prefix_bucket {
                    Some(bucket) if !bucket.is_empty() => {
                        report.fallback_drop_last += 1;
                        bucket
                    }
                    _ => {
                        report.fallback_any += 1;
                        &respondents
                    }
                }
            }
        };
        let donor = if options.weighted_donors {
            let weights: Vec<f64> = donors.iter().map(|&r| frame.units[r].weight).collect();
            let picker = WeightedIndex::new(&weights)
                .map_err(|e| MdamError::Validation(format!("donor weights: {e}")))?;
            donors[picker.sample(rng)]
        } else {
            donors[rng.gen_range(0..donors.len())]
        };
        for &j in unmargined {
            let value = dataset
                .value(donor, j)
                .ok_or_else(|| MdamError::Validation("donor cell missing in hot deck".into()))?;
            dataset.set(i, j, value, Provenance::UnitImputed);
        }
    }
    Ok(())
}
