//! Evaluation framework: voxel-overlap metrics (DSC, sensitivity, precision,
//! FPR) and skeleton-based structural metrics (BD, TD, BR, TR) with branch
//! counts, tree lengths, and per-branch generation statistics.
//!
//! FPR follows the tight-bounding-box convention: true negatives are counted
//! only inside the axis-aligned box just fitting the reference mask. FPR is
//! reported for reference only; a prediction's extra voxels are not
//! necessarily noise, which is exactly what BR/TR exist to acknowledge.

mod edt;
mod skeleton;

pub use edt::squared_edt;
pub use skeleton::{skeletonize, thin, Branch, SkeletonConfig, TreeSkeleton};

use crate::error::{NvError, Result};
use crate::volume::BinaryMask;
use serde::Serialize;

/// Voxel-overlap counts. `tn` is restricted to the reference mask's tight
/// bounding box; the other counts are over the full grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Tight axis-aligned bounding box of the true voxels, as inclusive ranges.
pub fn tight_bbox(mask: &BinaryMask) -> Option<[[usize; 2]; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in mask.data.indexed_iter() {
        if v {
            any = true;
            let p = [z, y, x];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    any.then(|| [[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]])
}

/// Voxel-wise confusion counts of a prediction against a reference.
pub fn confusion(pred: &BinaryMask, reference: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != reference.shape() || pred.spacing != reference.spacing {
        return Err(NvError::Alignment(format!(
            "prediction {:?}/{:?} vs reference {:?}/{:?}",
            pred.shape(),
            pred.spacing,
            reference.shape(),
            reference.spacing
        )));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    let bbox = tight_bbox(reference);
    for ((z, y, x), &p) in pred.data.indexed_iter() {
        let r = reference.data[[z, y, x]];
        match (p, r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {
                if let Some(b) = &bbox {
                    let inside = (b[0][0]..=b[0][1]).contains(&z)
                        && (b[1][0]..=b[1][1]).contains(&y)
                        && (b[2][0]..=b[2][1]).contains(&x);
                    if inside {
                        c.tn += 1;
                    }
                }
            }
        }
    }
    Ok(c)
}

/// Voxel-overlap metric values; a metric with a zero denominator is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct OverallMetrics {
    pub dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    /// Tight-bounding-box convention; for reference only.
    pub fpr: Option<f64>,
}

pub fn overall_metrics(c: &ConfusionCounts) -> OverallMetrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    OverallMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        fpr: ratio(c.fp, c.fp + c.tn),
    }
}

/// Options for branch detection and skeletonization.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsConfig {
    /// A reference branch counts as detected when more than this fraction of
    /// its skeleton voxels lies inside the prediction.
    pub detection_fraction: f64,
    /// Spur-pruning threshold handed to skeletonization.
    pub prune_spur_voxels: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            detection_fraction: 0.5,
            prune_spur_voxels: SkeletonConfig::default().prune_spur_voxels,
        }
    }
}

impl MetricsConfig {
    pub fn skeleton_config(&self) -> SkeletonConfig {
        SkeletonConfig {
            prune_spur_voxels: self.prune_spur_voxels,
            ..SkeletonConfig::default()
        }
    }
}

/// Structural accuracy relative to the reference skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct StructuralMetrics {
    /// Detected fraction of reference branches.
    pub bd: Option<f64>,
    /// Detected fraction of reference tree length.
    pub td: Option<f64>,
    /// Predicted branch count over reference branch count (can exceed 1).
    pub br: Option<f64>,
    /// Predicted tree length over reference tree length (can exceed 1).
    pub tr: Option<f64>,
    pub n_tp: usize,
    pub n_ref: usize,
    pub n_pred: usize,
    pub l_tp_mm: f64,
    pub l_ref_mm: f64,
    pub l_pred_mm: f64,
}

/// Computes BD/TD/BR/TR. `N_TP` counts reference branches whose skeleton
/// voxels lie inside the prediction above the detection fraction; `L_TP`
/// accumulates reference skeleton edges with both ends inside the prediction.
pub fn structural_metrics(
    pred: &BinaryMask,
    ref_skel: &TreeSkeleton,
    pred_skel: &TreeSkeleton,
    cfg: &MetricsConfig,
) -> StructuralMetrics {
    let n_ref = ref_skel.branch_count();
    let n_pred = pred_skel.branch_count();
    let l_ref_mm = ref_skel.total_length_mm();
    let l_pred_mm = pred_skel.total_length_mm();
    let mut n_tp = 0usize;
    let mut l_tp_mm = 0.0f64;
    for b in &ref_skel.branches {
        let inside = b.voxels.iter().filter(|&&v| pred.data[v]).count();
        if inside as f64 > cfg.detection_fraction * b.voxels.len() as f64 {
            n_tp += 1;
        }
        for w in b.voxels.windows(2) {
            if pred.data[w[0]] && pred.data[w[1]] {
                let dz = (w[1][0] as f64 - w[0][0] as f64) * ref_skel.spacing[0];
                let dy = (w[1][1] as f64 - w[0][1] as f64) * ref_skel.spacing[1];
                let dx = (w[1][2] as f64 - w[0][2] as f64) * ref_skel.spacing[2];
                l_tp_mm += (dz * dz + dy * dy + dx * dx).sqrt();
            }
        }
    }
    let frac = |num: f64, den: f64| (den > 0.0).then_some(num / den);
    StructuralMetrics {
        bd: frac(n_tp as f64, n_ref as f64),
        td: frac(l_tp_mm, l_ref_mm),
        br: frac(n_pred as f64, n_ref as f64),
        tr: frac(l_pred_mm, l_ref_mm),
        n_tp,
        n_ref,
        n_pred,
        l_tp_mm,
        l_ref_mm,
        l_pred_mm,
    }
}

/// Per-branch generation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct GenerationStats {
    pub avg: f64,
    pub median: f64,
    pub max: usize,
}

pub fn generation_stats(skel: &TreeSkeleton) -> Option<GenerationStats> {
    if skel.branches.is_empty() {
        return None;
    }
    let mut gens: Vec<usize> = skel.branches.iter().map(|b| b.generation).collect();
    gens.sort_unstable();
    let n = gens.len();
    let avg = gens.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        gens[n / 2] as f64
    } else {
        (gens[n / 2 - 1] + gens[n / 2]) as f64 / 2.0
    };
    Some(GenerationStats {
        avg,
        median,
        max: gens[n - 1],
    })
}

/// The full per-case evaluation record.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub confusion: ConfusionCounts,
    #[serde(flatten)]
    pub overall: OverallMetrics,
    #[serde(flatten)]
    pub structural: StructuralMetrics,
    pub branch_count_pred: usize,
    pub branch_count_ref: usize,
    pub tree_length_pred_cm: f64,
    pub tree_length_ref_cm: f64,
    pub generations_pred: Option<GenerationStats>,
    pub generations_ref: Option<GenerationStats>,
    /// The FPR true-negative count is confined to the reference bounding box
    /// and is not comparable across conventions.
    pub fpr_reference_only: bool,
}

/// Evaluates a prediction against a reference, skeletonizing both masks.
pub fn evaluate(
    pred: &BinaryMask,
    reference: &BinaryMask,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    let ref_skel = skeletonize(reference, &cfg.skeleton_config());
    evaluate_with_ref_skeleton(pred, reference, &ref_skel, cfg)
}

/// Evaluates against a precomputed reference skeleton (for phantom cases the
/// generator's exact centerline).
pub fn evaluate_with_ref_skeleton(
    pred: &BinaryMask,
    reference: &BinaryMask,
    ref_skel: &TreeSkeleton,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    let c = confusion(pred, reference)?;
    let overall = overall_metrics(&c);
    let pred_skel = skeletonize(pred, &cfg.skeleton_config());
    let structural = structural_metrics(pred, ref_skel, &pred_skel, cfg);
    Ok(MetricReport {
        confusion: c,
        overall,
        structural,
        branch_count_pred: pred_skel.branch_count(),
        branch_count_ref: ref_skel.branch_count(),
        tree_length_pred_cm: pred_skel.total_length_mm() / 10.0,
        tree_length_ref_cm: ref_skel.total_length_mm() / 10.0,
        generations_pred: generation_stats(&pred_skel),
        generations_ref: generation_stats(ref_skel),
        fpr_reference_only: true,
    })
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}%", x * 100.0),
        None => "n/a".to_string(),
    }
}

fn pct3(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.3}%", x * 100.0),
        None => "n/a".to_string(),
    }
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "DSC",
    "Sensitivity",
    "Precision",
    "BD",
    "TD",
    "BR",
    "TR",
    "FPR*",
];

/// Renders labeled reports as an aligned text table, one row per case.
pub fn report_table(rows: &[(String, MetricReport)]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    for (label, r) in rows {
        cells.push(vec![
            label.clone(),
            pct(r.overall.dsc),
            pct(r.overall.sensitivity),
            pct(r.overall.precision),
            pct(r.structural.bd),
            pct(r.structural.td),
            pct(r.structural.br),
            pct(r.structural.tr),
            pct3(r.overall.fpr),
        ]);
    }
    let mut header = vec!["case".to_string()];
    header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    render_aligned(&header, &cells)
        + "* FPR counts true negatives inside the reference bounding box only; for reference.\n"
}

/// Generic fixed-width rendering used by the report and comparison tables.
pub fn render_aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for i in 0..cols {
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            if i == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[i]));
            } else {
                line.push_str(&format!("  {:>width$}", cell, width = widths[i]));
            }
        }
        line
    };
    let mut out = String::new();
    out.push_str(&fmt_row(header, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}
