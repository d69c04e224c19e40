use std::collections::HashSet;

use crate::model_zoo::InputBatch;
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Samples held by one party: ids, raw inputs and (for labelled data) labels.
///
/// `inputs` may have zero columns when the task is file-backed and heads
/// look features up by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<u32>,
    inputs: Matrix,
    labels: Option<Vec<u32>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(ids: Vec<u32>, inputs: Matrix, labels: Option<Vec<u32>>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != ids.len() {
            return Err(Error::shape(format!("{} ids for {} input rows", ids.len(), inputs.rows())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate sample id {dup}")));
        }
        if let Some(labels) = &labels {
            if labels.len() != ids.len() {
                return Err(Error::shape(format!("{} labels for {} samples", labels.len(), ids.len())));
            }
            if let Some(&label) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::InvalidLabel { label, num_classes });
            }
        }
        Ok(Self { ids, inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&[u32]> {
        self.labels.as_deref().ok_or(Error::LabelUnavailable)
    }

    pub fn as_batch(&self) -> InputBatch<'_> {
        InputBatch { ids: &self.ids, raw: (self.inputs.cols() > 0).then_some(&self.inputs) }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset { labels: None, ..self.clone() }
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Result<Vec<u32>> {
        let mut present = vec![false; self.num_classes];
        for &l in self.labels()? {
            present[l as usize] = true;
        }
        Ok((0..self.num_classes as u32).filter(|&c| present[c as usize]).collect())
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels()? {
            counts[l as usize] += 1;
        }
        Ok(counts)
    }

    /// Indices of each class, in dataset order.
    pub(crate) fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels()?.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        Ok(by_class)
    }
}

/// Result of [`holdout_shared`]. The oracle labels of the shared set are
/// kept apart so that only evaluation harnesses can reach them.
#[derive(Debug, Clone)]
pub struct SharedSplit {
    pub local_pool: Dataset,
    pub shared: Dataset,
    pub shared_oracle_labels: Vec<u32>,
}

/// Moves a random `fraction` of `dataset` into an unlabelled shared set.
pub fn holdout_shared(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SharedSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("shared fraction must lie in (0, 1), got {fraction}")));
    }
    let n = dataset.len();
    let n_shared = (fraction * n as f64).round() as usize;
    let perm = Rng::new(seed).permutation(n);
    let mut shared_idx = perm[..n_shared].to_vec();
    let mut local_idx = perm[n_shared..].to_vec();
    shared_idx.sort_unstable();
    local_idx.sort_unstable();

    let shared_labelled = dataset.select(&shared_idx);
    let shared_oracle_labels = shared_labelled.labels()?.to_vec();
    Ok(SharedSplit {
        local_pool: dataset.select(&local_idx),
        shared: shared_labelled.without_labels(),
        shared_oracle_labels,
    })
}
