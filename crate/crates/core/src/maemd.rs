//! Frequency alignment of IMFs across channels.
//!
//! Each IMF is summarized by the distribution of spacings between its
//! consecutive extrema. Distributions are Laplace-smoothed onto a shared
//! support and every related-channel IMF joins the target IMF it is
//! closest to in Kullback-Leibler divergence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::emd::{find_extrema, ImfSet};
use crate::error::{Error, Result};
use crate::ingest::Channel;

pub const LAPLACE_EPSILON: f64 = 1e-6;

/// Probability of each spacing between consecutive (pooled) extrema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremaIntervalDistribution {
    pub probs: BTreeMap<usize, f64>,
    /// Occurrences of each spacing in the source IMF.
    pub counts: BTreeMap<usize, usize>,
    pub total_extrema: usize,
}

impl ExtremaIntervalDistribution {
    pub fn support(&self) -> BTreeSet<usize> {
        self.probs.keys().copied().collect()
    }

    pub fn prob(&self, interval: usize) -> f64 {
        self.probs.get(&interval).copied().unwrap_or(0.0)
    }
}

/// Raw distribution from already-located extrema indices (sorted).
pub fn interval_distribution_from_extrema(extrema: &[usize]) -> Result<ExtremaIntervalDistribution> {
    let n = extrema.len();
    if n < 3 {
        return Err(Error::InsufficientExtrema(format!("{n} extrema, need at least 3")));
    }
    let mut counts = BTreeMap::new();
    for w in extrema.windows(2) {
        *counts.entry(w[1] - w[0]).or_insert(0usize) += 1;
    }
    let denom = (n - 1) as f64;
    let probs = counts.iter().map(|(&k, &c)| (k, c as f64 / denom)).collect();
    Ok(ExtremaIntervalDistribution {
        probs,
        counts,
        total_extrema: n,
    })
}

pub fn interval_distribution(imf: &[f64]) -> Result<ExtremaIntervalDistribution> {
    interval_distribution_from_extrema(&find_extrema(imf)?.pooled())
}

/// Adds `LAPLACE_EPSILON` to every interval of `extended` (the raw
/// frequency for observed ones) and renormalizes.
pub fn laplace_smooth(
    dist: &ExtremaIntervalDistribution,
    extended: &BTreeSet<usize>,
) -> Result<ExtremaIntervalDistribution> {
    if let Some(k) = dist.counts.keys().find(|k| !extended.contains(k)) {
        return Err(Error::InvalidParameter(format!(
            "extended support is missing interval {k}"
        )));
    }
    let denom = (dist.total_extrema - 1) as f64;
    let raw: BTreeMap<usize, f64> = extended
        .iter()
        .map(|&x| {
            let base = dist.counts.get(&x).map_or(0.0, |&c| c as f64 / denom);
            (x, base + LAPLACE_EPSILON)
        })
        .collect();
    let total: f64 = raw.values().sum();
    Ok(ExtremaIntervalDistribution {
        probs: raw.into_iter().map(|(k, p)| (k, p / total)).collect(),
        counts: dist.counts.clone(),
        total_extrema: dist.total_extrema,
    })
}

/// `D(p || q)` in nats over a common support.
pub fn kld(p: &ExtremaIntervalDistribution, q: &ExtremaIntervalDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() || p.probs.keys().zip(q.probs.keys()).any(|(a, b)| a != b) {
        return Err(Error::SupportMismatch);
    }
    let d: f64 = p
        .probs
        .values()
        .zip(q.probs.values())
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum();
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(d.max(0.0))
}

/// Where one related-channel IMF was placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub imf_index: usize,
    /// Divergence to the chosen target IMF; `None` when the IMF had too few
    /// extrema to characterize and was sent to the lowest-frequency group.
    pub kld: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMember {
    pub channel: Channel,
    pub sources: Vec<Assignment>,
    /// Sum of the assigned IMFs, or zeros when none were assigned.
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImfGroup {
    pub target_index: usize,
    pub target: Vec<f64>,
    pub members: Vec<ChannelMember>,
}

impl ImfGroup {
    /// Target first, then related channels in member order.
    pub fn channels(&self) -> Vec<&[f64]> {
        std::iter::once(self.target.as_slice())
            .chain(self.members.iter().map(|m| m.series.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualGroup {
    pub target: Vec<f64>,
    pub related: Vec<(Channel, Vec<f64>)>,
}

impl ResidualGroup {
    pub fn channels(&self) -> Vec<&[f64]> {
        std::iter::once(self.target.as_slice())
            .chain(self.related.iter().map(|(_, s)| s.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedImfGroups {
    pub groups: Vec<ImfGroup>,
    pub residual: ResidualGroup,
}

impl AlignedImfGroups {
    /// Every group's channels, IMF groups first and the residual group last.
    pub fn all_channels(&self) -> Vec<Vec<&[f64]>> {
        self.groups
            .iter()
            .map(ImfGroup::channels)
            .chain(std::iter::once(self.residual.channels()))
            .collect()
    }
}

/// Assigns each related IMF to the target IMF minimizing
/// `D(related || target)`. Ties go to the lower-frequency target.
pub fn align(target: &ImfSet, related: &[(Channel, ImfSet)]) -> Result<AlignedImfGroups> {
    let k = target.imfs.len();
    if k == 0 {
        return Err(Error::InsufficientExtrema("target has no IMFs".into()));
    }
    let len = target.residual.len();
    if let Some((c, _)) = related.iter().find(|(_, s)| s.residual.len() != len) {
        return Err(Error::DimensionMismatch(format!("channel {c} length differs from target")));
    }

    let target_raw = target
        .imfs
        .iter()
        .map(|imf| interval_distribution(imf).ok())
        .collect::<Vec<_>>();
    let related_raw: Vec<Vec<Option<ExtremaIntervalDistribution>>> = related
        .iter()
        .map(|(_, set)| set.imfs.iter().map(|imf| interval_distribution(imf).ok()).collect())
        .collect();

    let extended: BTreeSet<usize> = target_raw
        .iter()
        .chain(related_raw.iter().flatten())
        .flatten()
        .flat_map(|d| d.counts.keys().copied())
        .collect();
    let smooth = |d: &Option<ExtremaIntervalDistribution>| -> Result<Option<ExtremaIntervalDistribution>> {
        d.as_ref().map(|d| laplace_smooth(d, &extended)).transpose()
    };
    let target_smooth = target_raw.iter().map(smooth).collect::<Result<Vec<_>>>()?;

    let mut groups: Vec<ImfGroup> = target
        .imfs
        .iter()
        .enumerate()
        .map(|(i, imf)| ImfGroup {
            target_index: i,
            target: imf.clone(),
            members: related
                .iter()
                .map(|(c, _)| ChannelMember {
                    channel: *c,
                    sources: Vec::new(),
                    series: vec![0.0; len],
                })
                .collect(),
        })
        .collect();

    for (ci, ((_, set), raws)) in related.iter().zip(&related_raw).enumerate() {
        for (j, (imf, raw)) in set.imfs.iter().zip(raws).enumerate() {
            let (best, score) = match smooth(raw)? {
                Some(p) => {
                    let mut best: Option<(usize, f64)> = None;
                    for (t, q) in target_smooth.iter().enumerate() {
                        let Some(q) = q else { continue };
                        let d = kld(&p, q)?;
                        if best.is_none_or(|(_, bd)| d <= bd) {
                            best = Some((t, d));
                        }
                    }
                    match best {
                        Some((t, d)) => (t, Some(d)),
                        None => (k - 1, None),
                    }
                }
                None => (k - 1, None),
            };
            let member = &mut groups[best].members[ci];
            member.sources.push(Assignment {
                imf_index: j,
                kld: score,
            });
            for (acc, v) in member.series.iter_mut().zip(imf) {
                *acc += v;
            }
        }
    }

    Ok(AlignedImfGroups {
        groups,
        residual: ResidualGroup {
            target: target.residual.clone(),
            related: related.iter().map(|(c, s)| (*c, s.residual.clone())).collect(),
        },
    })
}
