use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::numerics::Rng;
use crate::{Error, Result};

pub const MAX_DIRICHLET_REDRAWS: usize = 100;

/// Serialised by name, e.g. `"skewed"` or `"dirichlet-0.5"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionScheme {
    Mild,
    Moderate,
    Skewed,
    Disjoint,
    Dirichlet(f64),
}

impl PartitionScheme {
    pub fn name(&self) -> String {
        match self {
            PartitionScheme::Mild => "mild".into(),
            PartitionScheme::Moderate => "moderate".into(),
            PartitionScheme::Skewed => "skewed".into(),
            PartitionScheme::Disjoint => "disjoint".into(),
            PartitionScheme::Dirichlet(a) => format!("dirichlet-{a}"),
        }
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Accepts `mild`, `moderate`, `skewed`, `disjoint`, `dirichlet-<alpha>`.
impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(PartitionScheme::Mild),
            "moderate" => Ok(PartitionScheme::Moderate),
            "skewed" => Ok(PartitionScheme::Skewed),
            "disjoint" => Ok(PartitionScheme::Disjoint),
            _ => s
                .strip_prefix("dirichlet-")
                .and_then(|a| a.parse::<f64>().ok())
                .map(PartitionScheme::Dirichlet)
                .ok_or_else(|| Error::config(format!("unknown partition scheme '{s}'"))),
        }
    }
}

impl TryFrom<String> for PartitionScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartitionScheme> for String {
    fn from(s: PartitionScheme) -> String {
        s.name()
    }
}

pub fn partition(pool: &Dataset, scheme: PartitionScheme, num_devices: usize, seed: u64) -> Result<Vec<Dataset>> {
    match scheme {
        PartitionScheme::Dirichlet(alpha) => partition_dirichlet(pool, alpha, num_devices, seed),
        manual => partition_manual(pool, manual, num_devices, seed),
    }
}

/// Fraction of class `c` given to each of the three devices.
///
/// The matrices are defined for ten classes and generalise by proportion:
/// near-equal contiguous blocks for Disjoint, the first 60% of classes for
/// the heavy slice of Skewed.
pub fn manual_allocation(scheme: PartitionScheme, num_classes: usize, num_devices: usize) -> Result<Vec<[f64; 3]>> {
    if num_devices != 3 {
        return Err(Error::config(format!(
            "manual scheme {scheme} is defined for 3 devices, got {num_devices}; use dirichlet"
        )));
    }
    if num_classes < 3 {
        return Err(Error::config("manual schemes need at least 3 classes"));
    }
    if matches!(scheme, PartitionScheme::Dirichlet(_)) {
        return Err(Error::config("dirichlet is not a manual scheme"));
    }
    let even = [1.0 / 3.0; 3];
    let rows = (0..num_classes)
        .map(|c| match scheme {
            PartitionScheme::Mild => {
                let mut row = even;
                if c < 3 {
                    row = [0.5; 3];
                    row[c] = 0.0;
                }
                row
            }
            PartitionScheme::Moderate => {
                let mut row = [0.0; 3];
                row[c % 3] = 0.5;
                row[(c + 1) % 3] = 0.5;
                row
            }
            PartitionScheme::Skewed => {
                if c < (6 * num_classes).div_ceil(10) {
                    let mut row = [0.9, 0.0, 0.0];
                    row[c % 2 + 1] = 0.1;
                    row
                } else {
                    even
                }
            }
            PartitionScheme::Disjoint => {
                // block sizes 4/3/3 for ten classes: the first C mod 3 blocks get one extra
                let base = num_classes / 3;
                let extra = num_classes % 3;
                let ends = [base + usize::from(extra > 0), 2 * base + extra.min(2), num_classes];
                let mut row = [0.0; 3];
                row[ends.iter().position(|&e| c < e).unwrap()] = 1.0;
                row
            }
            PartitionScheme::Dirichlet(_) => unreachable!("not a manual scheme"),
        })
        .collect();
    Ok(rows)
}

pub fn partition_manual(pool: &Dataset, scheme: PartitionScheme, num_devices: usize, seed: u64) -> Result<Vec<Dataset>> {
    let alloc = manual_allocation(scheme, pool.num_classes(), num_devices)?;
    let by_class = pool.indices_by_class()?;
    let rng = Rng::new(seed);
    let mut per_device = vec![Vec::new(); num_devices];
    for (c, members) in by_class.iter().enumerate() {
        let counts = largest_remainder(&alloc[c], members.len());
        deal(members, &counts, &mut rng.derive(c as u64), &mut per_device);
    }
    finish(pool, per_device)
}

/// Per class, device proportions drawn from `Dir(α·1)` and rounded by
/// largest remainder. The whole allocation is redrawn if any device ends up
/// empty.
pub fn partition_dirichlet(pool: &Dataset, alpha: f64, num_devices: usize, seed: u64) -> Result<Vec<Dataset>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if num_devices < 2 {
        return Err(Error::config("dirichlet partition needs at least 2 devices"));
    }
    let by_class = pool.indices_by_class()?;
    if pool.len() < num_devices {
        return Err(Error::PartitionFailed(format!("{} samples cannot cover {num_devices} devices", pool.len())));
    }
    let root = Rng::new(seed);
    for attempt in 0..=MAX_DIRICHLET_REDRAWS {
        let counts = dirichlet_counts(&by_class, alpha, num_devices, &mut root.derive(attempt as u64));
        let totals: Vec<usize> = (0..num_devices).map(|k| counts.iter().map(|c| c[k]).sum()).collect();
        if totals.contains(&0) {
            continue;
        }
        let mut per_device = vec![Vec::new(); num_devices];
        for (c, members) in by_class.iter().enumerate() {
            deal(members, &counts[c], &mut root.derive(1_000_000 + c as u64), &mut per_device);
        }
        return finish(pool, per_device);
    }
    Err(Error::PartitionFailed(format!(
        "some device stayed empty after {MAX_DIRICHLET_REDRAWS} dirichlet redraws (alpha {alpha})"
    )))
}

/// Per-class device counts for one Dirichlet draw.
pub(crate) fn dirichlet_counts(by_class: &[Vec<usize>], alpha: f64, k: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    by_class
        .iter()
        .map(|members| {
            let mut g: Vec<f64> = (0..k).map(|_| rng.gamma(alpha)).collect();
            let sum: f64 = g.iter().sum();
            if sum > 0.0 {
                g.iter_mut().for_each(|v| *v /= sum);
            } else {
                // every gamma draw underflowed; put the class on one device
                g = vec![0.0; k];
                g[rng.below(k)] = 1.0;
            }
            largest_remainder(&g, members.len())
        })
        .collect()
}

/// Rounds `n · p` to integers summing to `n`; remainders are granted in
/// decreasing order of fractional part, ties to the lower index.
pub fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn deal(members: &[usize], counts: &[usize], rng: &mut Rng, per_device: &mut [Vec<usize>]) {
    let mut shuffled = members.to_vec();
    rng.shuffle(&mut shuffled);
    let mut start = 0;
    for (k, &count) in counts.iter().enumerate() {
        per_device[k].extend_from_slice(&shuffled[start..start + count]);
        start += count;
    }
}

fn finish(pool: &Dataset, per_device: Vec<Vec<usize>>) -> Result<Vec<Dataset>> {
    per_device
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            if idx.is_empty() {
                return Err(Error::PartitionFailed(format!("device {k} received no samples")));
            }
            idx.sort_unstable();
            Ok(pool.select(&idx))
        })
        .collect()
}
