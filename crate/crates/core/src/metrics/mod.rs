//! Overlap and surface-distance segmentation metrics.

mod distance;
mod report;

pub use distance::{
    asd, distance_pair, hd95, percentile, surface_extract, DistanceFlag, SurfaceDistance,
};
pub use report::{evaluate_maps, ClassMetrics, DomainMetrics, MetricReport, MetricSummary};

use crate::engine::LabelMap;

/// Per-foreground-class `2|A∩B| / (|A|+|B|)`; empty-empty gives 1.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Vec<f64> {
    overlaps(pred, gt, classes)
        .into_iter()
        .map(|(a, b, both)| if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
        .collect()
}

/// Per-foreground-class `|A∩B| / |A∪B|`; empty-empty gives 1.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Vec<f64> {
    overlaps(pred, gt, classes)
        .into_iter()
        .map(|(a, b, both)| {
            let union = a + b - both;
            if union == 0 {
                1.0
            } else {
                both as f64 / union as f64
            }
        })
        .collect()
}

fn overlaps(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Vec<(usize, usize, usize)> {
    debug_assert_eq!(pred.data.len(), gt.data.len());
    let mut counts = vec![(0, 0, 0); classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p >= 1 && p as usize <= classes {
            counts[p as usize - 1].0 += 1;
        }
        if g >= 1 && g as usize <= classes {
            counts[g as usize - 1].1 += 1;
            if p == g {
                counts[g as usize - 1].2 += 1;
            }
        }
    }
    counts
}
