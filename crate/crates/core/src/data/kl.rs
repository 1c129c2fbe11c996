//! Domain-shift diagnostics: per-feature KL divergence and the nested
//! circle groups evaluated under increasing shift.

use serde::{Deserialize, Serialize};

use super::dataset::DomainDataset;
use super::DataError;

/// Estimator knobs for [`kl_divergence_with`]. Defaults: add-one
/// smoothing, 16 equal-width histogram bins for numeric features.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlOptions {
    pub numeric_bins: usize,
    pub smoothing: f64,
}

impl Default for KlOptions {
    fn default() -> Self {
        KlOptions {
            numeric_bins: 16,
            smoothing: 1.0,
        }
    }
}

/// KL(target ‖ source) summed over per-feature marginals.
///
/// Categorical features use smoothed empirical frequencies over the
/// schema's category list; numeric features use histograms with shared
/// edges spanning the pooled range of both datasets.
pub fn kl_divergence(source: &DomainDataset, target: &DomainDataset) -> Result<f64, DataError> {
    kl_divergence_with(source, target, KlOptions::default())
}

pub fn kl_divergence_with(
    source: &DomainDataset,
    target: &DomainDataset,
    opts: KlOptions,
) -> Result<f64, DataError> {
    if source.schema().as_ref() != target.schema().as_ref() {
        return Err(DataError::SchemaMismatch);
    }
    if target.n_rows() == 0 || source.n_rows() == 0 {
        return Err(DataError::EmptySubset);
    }
    let schema = source.schema();
    let mut total = 0.0;
    for (f, spec) in schema.features.iter().enumerate() {
        if spec.is_categorical() {
            let cs = source.category_counts(f);
            let ct = target.category_counts(f);
            total += kl_from_counts(&ct, &cs, opts.smoothing);
        } else {
            let vs = source.numeric_column(f);
            let vt = target.numeric_column(f);
            total += kl_numeric(&vt, &vs, opts.numeric_bins, opts.smoothing);
        }
    }
    Ok(total)
}

/// KL(p ‖ q) from raw counts with additive smoothing. With zero
/// smoothing, zero p-mass cells contribute nothing and a zero q-mass
/// cell under positive p yields +inf.
pub fn kl_from_counts(p_counts: &[usize], q_counts: &[usize], smoothing: f64) -> f64 {
    debug_assert_eq!(p_counts.len(), q_counts.len());
    let k = p_counts.len() as f64;
    let np: f64 = p_counts.iter().sum::<usize>() as f64;
    let nq: f64 = q_counts.iter().sum::<usize>() as f64;
    let mut kl = 0.0;
    for (&pc, &qc) in p_counts.iter().zip(q_counts) {
        let p = (pc as f64 + smoothing) / (np + smoothing * k);
        let q = (qc as f64 + smoothing) / (nq + smoothing * k);
        if p > 0.0 {
            kl += p * (p / q).ln();
        }
    }
    kl
}

/// Histogram KL over shared equal-width bins spanning the pooled range.
fn kl_numeric(p_values: &[f64], q_values: &[f64], bins: usize, smoothing: f64) -> f64 {
    let lo = p_values
        .iter()
        .chain(q_values)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = p_values
        .iter()
        .chain(q_values)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        // Degenerate pooled range: both sides are a point mass in one bin.
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let index = |v: f64| -> usize { (((v - lo) / width) as usize).min(bins - 1) };
    let mut pc = vec![0usize; bins];
    let mut qc = vec![0usize; bins];
    for &v in p_values {
        pc[index(v)] += 1;
    }
    for &v in q_values {
        qc[index(v)] += 1;
    }
    kl_from_counts(&pc, &qc, smoothing)
}

/// An upper bound on KL(d ‖ d) introduced purely by the add-`s` smoothing
/// of two same-distribution samples of sizes `n_p`, `n_q` over `k` cells.
pub fn smoothing_floor(n_p: usize, n_q: usize, k: usize, s: f64) -> f64 {
    // Counts agree cell-wise in the self-comparison only when the samples
    // are literally the same set; for nested/self subsets the ratio
    // p/q ≤ (n_q + sk)/(n_p + sk) bounds each log term.
    let (n_p, n_q, k) = (n_p as f64, n_q as f64, k as f64);
    ((n_q + s * k) / (n_p + s * k)).ln().abs() + s * k / (n_p + s * k)
}

/// One circle with its KL divergence from the entire source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleKl {
    pub id: String,
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftGroup {
    pub size: usize,
    pub circle_ids: Vec<String>,
    pub mean_kl: f64,
}

/// Circles ranked by KL divergence plus the nested evaluation groups:
/// the group of size k holds the k circles with the largest KL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftGroups {
    /// All circles, ascending by KL.
    pub circles: Vec<CircleKl>,
    /// Groups in the requested size order (largest first by default).
    pub groups: Vec<ShiftGroup>,
}

pub const DEFAULT_GROUP_SIZES: [usize; 6] = [80, 60, 40, 30, 20, 10];

pub fn build_shift_groups(
    source: &DomainDataset,
    target: &DomainDataset,
    group_sizes: &[usize],
) -> Result<ShiftGroups, DataError> {
    build_shift_groups_with(source, target, group_sizes, KlOptions::default())
}

pub fn build_shift_groups_with(
    source: &DomainDataset,
    target: &DomainDataset,
    group_sizes: &[usize],
    opts: KlOptions,
) -> Result<ShiftGroups, DataError> {
    let circles = target.circles();
    if circles.is_empty() {
        return Err(DataError::EmptySubset);
    }
    if let Some(&too_big) = group_sizes.iter().find(|&&s| s > circles.len()) {
        return Err(DataError::GroupSizeExceedsCircles {
            size: too_big,
            circles: circles.len(),
        });
    }

    let mut ranked: Vec<CircleKl> = Vec::with_capacity(circles.len());
    for (id, rows) in &circles {
        let subset = target.subset(rows);
        let kl = kl_divergence_with(source, &subset, opts)?;
        ranked.push(CircleKl { id: id.clone(), kl });
    }
    // Ascending by KL; ties broken by id for a stable order.
    ranked.sort_by(|a, b| {
        a.kl.partial_cmp(&b.kl)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });

    let groups = group_sizes
        .iter()
        .map(|&size| {
            let tail = &ranked[ranked.len() - size..];
            let mean_kl = tail.iter().map(|c| c.kl).sum::<f64>() / size as f64;
            ShiftGroup {
                size,
                circle_ids: tail.iter().map(|c| c.id.clone()).collect(),
                mean_kl,
            }
        })
        .collect();

    Ok(ShiftGroups {
        circles: ranked,
        groups,
    })
}

impl ShiftGroups {
    /// Row indices of `dataset` belonging to the given group.
    pub fn group_rows(&self, group: &ShiftGroup, dataset: &DomainDataset) -> Vec<usize> {
        let member: std::collections::HashSet<&str> =
            group.circle_ids.iter().map(String::as_str).collect();
        dataset
            .circle_ids()
            .iter()
            .enumerate()
            .filter(|(_, id)| member.contains(id.as_str()))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Cell;
    use crate::data::schema::{FeatureSpec, TabularSchema};
    use std::sync::Arc;

    fn two_cat_schema() -> Arc<TabularSchema> {
        Arc::new(
            TabularSchema::new(
                vec![
                    FeatureSpec::categorical("x", &["a", "b"]),
                    FeatureSpec::numeric("y"),
                ],
                None,
                Some("circle_id".into()),
            )
            .unwrap(),
        )
    }

    fn dataset(cat_counts: (usize, usize), circle: &str) -> DomainDataset {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for i in 0..cat_counts.0 {
            rows.push(vec![Cell::Category(0), Cell::Number(i as f64 % 5.0)]);
            ids.push(circle.to_string());
        }
        for i in 0..cat_counts.1 {
            rows.push(vec![Cell::Category(1), Cell::Number(i as f64 % 5.0)]);
            ids.push(circle.to_string());
        }
        DomainDataset::from_rows(two_cat_schema(), rows, None, ids).unwrap()
    }

    #[test]
    fn closed_form_categorical_kl() {
        // target (0.9, 0.1) vs source (0.5, 0.5), no smoothing
        let kl = kl_from_counts(&[9, 1], &[5, 5], 0.0);
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((expect - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn self_kl_below_smoothing_floor() {
        let d = dataset((500, 500), "c");
        let kl = kl_divergence(&d, &d).unwrap();
        assert!(kl >= 0.0);
        let floor = smoothing_floor(1000, 1000, 2, 1.0) + smoothing_floor(1000, 1000, 16, 1.0);
        assert!(kl <= floor, "kl {kl} vs floor {floor}");
    }

    #[test]
    fn unseen_category_stays_finite_with_smoothing() {
        let source = dataset((100, 0), "s");
        let target = dataset((0, 50), "t");
        let kl = kl_divergence(&source, &target).unwrap();
        assert!(kl.is_finite());
        assert!(kl > 0.0);
    }

    #[test]
    fn empty_subset_is_an_error() {
        let source = dataset((5, 5), "s");
        let empty = source.subset(&[]);
        assert!(matches!(
            kl_divergence(&source, &empty),
            Err(DataError::EmptySubset)
        ));
    }

    fn multi_circle_target(n_circles: usize, skew_step: f64) -> DomainDataset {
        let schema = two_cat_schema();
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for c in 0..n_circles {
            // Later circles increasingly skew the categorical marginal.
            let p_b = (0.1 + skew_step * c as f64).min(0.95);
            for i in 0..40 {
                let cat = if (i as f64 / 40.0) < p_b { 1 } else { 0 };
                rows.push(vec![Cell::Category(cat), Cell::Number((i % 7) as f64)]);
                ids.push(format!("t{c:03}"));
            }
        }
        DomainDataset::from_rows(schema, rows, None, ids).unwrap()
    }

    #[test]
    fn groups_are_nested_with_non_decreasing_mean_kl() {
        let source = dataset((700, 300), "s");
        let target = multi_circle_target(12, 0.07);
        let groups = build_shift_groups(&source, &target, &[12, 8, 4, 2]).unwrap();
        assert_eq!(groups.groups.len(), 4);
        for w in groups.groups.windows(2) {
            let larger: std::collections::HashSet<_> = w[0].circle_ids.iter().collect();
            assert!(w[1].circle_ids.iter().all(|id| larger.contains(id)));
            assert!(w[1].mean_kl >= w[0].mean_kl);
        }
        assert_eq!(groups.groups[0].size, 12);
    }

    #[test]
    fn single_group_of_all_circles() {
        let source = dataset((50, 50), "s");
        let target = multi_circle_target(10, 0.05);
        let groups = build_shift_groups(&source, &target, &[10]).unwrap();
        assert_eq!(groups.groups[0].circle_ids.len(), 10);
    }

    #[test]
    fn oversized_group_is_an_error() {
        let source = dataset((50, 50), "s");
        let target = multi_circle_target(5, 0.05);
        assert!(matches!(
            build_shift_groups(&source, &target, &[10]),
            Err(DataError::GroupSizeExceedsCircles { size: 10, circles: 5 })
        ));
    }
}
