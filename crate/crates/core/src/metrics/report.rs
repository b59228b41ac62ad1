use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::distance::{class_distance, DistanceFlag};
use super::{dsc, jaccard};
use crate::engine::LabelMap;
use crate::error::{Error, Result};

/// DSC and Jaccard as fractions, distances in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl MetricSummary {
    fn mean_of(items: impl Iterator<Item = MetricSummary>) -> Self {
        let mut acc = Self::default();
        let mut n = 0usize;
        for m in items {
            acc.dsc += m.dsc;
            acc.jaccard += m.jaccard;
            acc.hd95 += m.hd95;
            acc.asd += m.asd;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            acc.dsc /= n;
            acc.jaccard /= n;
            acc.hd95 /= n;
            acc.asd /= n;
        }
        acc
    }
}

/// Sample means for one foreground class.
pub type ClassMetrics = MetricSummary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub samples: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes.
    pub mean: MetricSummary,
    /// Class-sample pairs whose distances are sentinels.
    pub flagged: usize,
}

/// Per-domain metrics and their unweighted mean across domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: usize,
    pub domains: Vec<DomainMetrics>,
    pub mean: MetricSummary,
}

/// Score predictions against ground truth, grouped by domain id.
pub fn evaluate_maps(
    preds: &[LabelMap],
    gts: &[LabelMap],
    domains: &[usize],
    classes: usize,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.len() != domains.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions, {} ground truths, {} domain ids",
            preds.len(),
            gts.len(),
            domains.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        if (preds[i].height, preds[i].width) != (gts[i].height, gts[i].width) {
            return Err(Error::shape("evaluate_maps", format!("sample {i} size mismatch")));
        }
        groups.entry(d).or_default().push(i);
    }
    let domains = groups
        .into_iter()
        .map(|(domain, idx)| {
            let mut flagged = 0;
            let mut sums = vec![MetricSummary::default(); classes];
            for &i in &idx {
                let d = dsc(&preds[i], &gts[i], classes);
                let j = jaccard(&preds[i], &gts[i], classes);
                for c in 0..classes {
                    let sd = class_distance(&preds[i], &gts[i], c as u8 + 1);
                    flagged += (sd.flag != DistanceFlag::Valid) as usize;
                    let s = &mut sums[c];
                    s.dsc += d[c];
                    s.jaccard += j[c];
                    s.hd95 += sd.hd95;
                    s.asd += sd.asd;
                }
            }
            let n = idx.len() as f64;
            let per_class: Vec<ClassMetrics> = sums
                .into_iter()
                .map(|s| MetricSummary {
                    dsc: s.dsc / n,
                    jaccard: s.jaccard / n,
                    hd95: s.hd95 / n,
                    asd: s.asd / n,
                })
                .collect();
            DomainMetrics {
                domain,
                samples: idx.len(),
                mean: MetricSummary::mean_of(per_class.iter().copied()),
                per_class,
                flagged,
            }
        })
        .collect::<Vec<_>>();
    Ok(MetricReport {
        classes,
        mean: MetricSummary::mean_of(domains.iter().map(|d| d.mean)),
        domains,
    })
}
