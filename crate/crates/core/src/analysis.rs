//! Selection overlap matrices and Lorenz-curve concentration of selected neurons
//! across clusters.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::moefication::ClusterAssignment;
use crate::scoring::{NeuronSelection, SelectionMode};

/// `values[i][j] = |N_i ∩ N_j| / |N_i|`. Not symmetric in general.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub intersections: Vec<Vec<usize>>,
}

pub fn overlap_matrix(labels: &[String], selections: &[NeuronSelection]) -> Result<OverlapMatrix> {
    ensure!(
        labels.len() == selections.len(),
        Validation,
        "{} labels for {} selections",
        labels.len(),
        selections.len()
    );
    ensure!(!selections.is_empty(), Validation, "no selections given");
    for (label, s) in labels.iter().zip(selections) {
        ensure!(!s.is_empty(), Validation, "selection '{label}' is empty");
        selections[0].geometry.ensure_compatible(&s.geometry)?;
    }
    let m = selections.len();
    let mut intersections = vec![vec![0usize; m]; m];
    for i in 0..m {
        for j in i..m {
            let n = sorted_intersection(&selections[i].members, &selections[j].members);
            intersections[i][j] = n;
            intersections[j][i] = n;
        }
    }
    let sizes: Vec<usize> = selections.iter().map(NeuronSelection::len).collect();
    let values = intersections
        .iter()
        .zip(&sizes)
        .map(|(row, &n)| row.iter().map(|&x| x as f64 / n as f64).collect())
        .collect();
    Ok(OverlapMatrix {
        labels: labels.to_vec(),
        values,
        sizes,
        intersections,
    })
}

fn sorted_intersection<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

impl OverlapMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.labels.len();
        ensure!(m > 0, Validation, "overlap matrix has no labels");
        ensure!(
            self.values.len() == m && self.values.iter().all(|r| r.len() == m),
            Validation,
            "overlap values must be {m}x{m}"
        );
        ensure!(
            self.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)),
            Validation,
            "overlap values must lie in [0, 1]"
        );
        Ok(())
    }

    /// Header row of labels, then one row per label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(&csv_field(l));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapDiff {
    pub from: String,
    pub to: String,
    pub trained: f64,
    pub random: f64,
    pub difference: f64,
}

/// Off-diagonal entries of both matrices, sorted by trained overlap descending
/// (ties by row, then column). `difference = trained - random`.
pub fn sorted_overlap_diff(trained: &OverlapMatrix, random: &OverlapMatrix) -> Result<Vec<OverlapDiff>> {
    ensure!(
        trained.labels == random.labels,
        Validation,
        "label mismatch between trained {:?} and random {:?}",
        trained.labels,
        random.labels
    );
    trained.validate()?;
    random.validate()?;
    let m = trained.len();
    let mut entries: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    entries.sort_by(|&(a, b), &(c, d)| {
        trained.values[c][d]
            .total_cmp(&trained.values[a][b])
            .then((a, b).cmp(&(c, d)))
    });
    Ok(entries
        .into_iter()
        .map(|(i, j)| OverlapDiff {
            from: trained.labels[i].clone(),
            to: trained.labels[j].clone(),
            trained: trained.values[i][j],
            random: random.values[i][j],
            difference: trained.values[i][j] - random.values[i][j],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzResult {
    pub layer: usize,
    /// Selected neurons per cluster, by cluster id.
    pub bin_counts: Vec<u64>,
    /// `bin_counts` sorted descending.
    pub sorted_counts: Vec<u64>,
    /// `k + 1` cumulative counts starting at 0.
    pub curve: Vec<u64>,
    /// `(n / k, c_n / c_k)` for `n = 0..=k`.
    pub curve_points: Vec<(f64, f64)>,
    pub raw_auc: f64,
    pub normalized_auc: f64,
}

/// Lorenz curve and AUC of a per-cluster count vector.
///
/// The trapezoid area under the curve through `(n/k, c_n/c_k)` is
/// `sum_n (c_{n-1} + c_n) / (2 k c_k)`, which is `1/2` for uniform counts and
/// `1 - 1/(2k)` when one bin holds everything. The normalized AUC maps that range
/// affinely onto `[1/2, 1]`. Both are computed from integer sums so the endpoints
/// come out exact.
pub fn lorenz_from_counts(layer: usize, bin_counts: &[u64]) -> Result<LorenzResult> {
    let k = bin_counts.len();
    ensure!(k >= 2, Degenerate, "Lorenz analysis needs at least 2 clusters, got {k}");
    let mut sorted = bin_counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut curve = Vec::with_capacity(k + 1);
    curve.push(0u64);
    for &b in &sorted {
        curve.push(curve.last().unwrap() + b);
    }
    let total = curve[k];
    ensure!(total > 0, Degenerate, "layer {layer} has no selected neurons");

    let area_sum: u128 = curve.windows(2).map(|w| (w[0] + w[1]) as u128).sum();
    let (k128, total128) = (k as u128, total as u128);
    let raw_auc = area_sum as f64 / (2 * k128 * total128) as f64;
    // (raw - 1/2) / (A_max - 1/2) = (S - k c_k) / ((k - 1) c_k)
    let excess = (area_sum - k128 * total128) as f64;
    let span = ((k128 - 1) * total128) as f64;
    let normalized_auc = 0.5 + 0.5 * (excess / span);

    let curve_points = curve
        .iter()
        .enumerate()
        .map(|(n, &c)| (n as f64 / k as f64, c as f64 / total as f64))
        .collect();
    Ok(LorenzResult {
        layer,
        bin_counts: bin_counts.to_vec(),
        sorted_counts: sorted,
        curve,
        curve_points,
        raw_auc,
        normalized_auc,
    })
}

fn check_lorenz_inputs(selection: &NeuronSelection, clustering: &ClusterAssignment) -> Result<()> {
    if selection.mode != SelectionMode::PerLayerEqual {
        return Err(Error::Mode(format!(
            "Lorenz analysis requires a per_layer_equal selection, got {:?}",
            selection.mode
        )));
    }
    selection.geometry.ensure_compatible(&clustering.geometry)?;
    clustering.geometry.ensure_shape(&clustering.assignment)?;
    Ok(())
}

fn layer_counts(selection: &NeuronSelection, clustering: &ClusterAssignment, layer: usize) -> Vec<u64> {
    let mut counts = vec![0u64; clustering.k];
    for m in selection.members.iter().filter(|m| m.layer == layer) {
        counts[clustering.assignment[layer][m.neuron]] += 1;
    }
    counts
}

pub fn lorenz_layer(
    selection: &NeuronSelection,
    clustering: &ClusterAssignment,
    layer: usize,
) -> Result<LorenzResult> {
    check_lorenz_inputs(selection, clustering)?;
    ensure!(
        layer < clustering.geometry.num_layers,
        Validation,
        "layer {layer} out of range for {} layers",
        clustering.geometry.num_layers
    );
    lorenz_from_counts(layer, &layer_counts(selection, clustering, layer))
}

/// Lorenz result per layer; `None` where the layer has no selected neurons.
pub fn lorenz_by_layer(
    selection: &NeuronSelection,
    clustering: &ClusterAssignment,
) -> Result<Vec<Option<LorenzResult>>> {
    check_lorenz_inputs(selection, clustering)?;
    (0..clustering.geometry.num_layers)
        .map(|l| {
            let counts = layer_counts(selection, clustering, l);
            if counts.iter().all(|&c| c == 0) {
                Ok(None)
            } else {
                lorenz_from_counts(l, &counts).map(Some)
            }
        })
        .collect()
}

/// Normalized AUC per layer; `None` where the layer has no selected neurons.
pub fn auc_by_layer(selection: &NeuronSelection, clustering: &ClusterAssignment) -> Result<Vec<Option<f64>>> {
    Ok(lorenz_by_layer(selection, clustering)?
        .into_iter()
        .map(|r| r.map(|r| r.normalized_auc))
        .collect())
}

/// Normalized AUC for every (label, layer) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucGrid {
    pub labels: Vec<String>,
    pub num_layers: usize,
    /// `values[class][layer]`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl AucGrid {
    /// One row of per-layer normalized AUCs per selection, against a shared clustering.
    pub fn from_selections(labels: &[String], selections: &[NeuronSelection], clustering: &ClusterAssignment) -> Result<Self> {
        ensure!(
            labels.len() == selections.len(),
            Validation,
            "{} labels for {} selections",
            labels.len(),
            selections.len()
        );
        let values = selections.iter().map(|s| auc_by_layer(s, clustering)).collect::<Result<_>>()?;
        Ok(Self { labels: labels.to_vec(), num_layers: clustering.geometry.num_layers, values })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.values.len() == self.labels.len(),
            Validation,
            "AUC grid has {} rows for {} labels",
            self.values.len(),
            self.labels.len()
        );
        ensure!(
            self.values.iter().all(|r| r.len() == self.num_layers),
            Validation,
            "every AUC row must have {} layers",
            self.num_layers
        );
        ensure!(
            self.values.iter().flatten().flatten().all(|v| (0.5..=1.0).contains(v)),
            Validation,
            "normalized AUC values must lie in [0.5, 1]"
        );
        Ok(())
    }

    /// Mean over all present entries.
    pub fn mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.values.iter().flatten().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ModelGeometry, NeuronRef};
    use crate::rng::SplitMix64;
    use crate::scoring::{Direction, SelectionSource};
    use proptest::prelude::*;

    fn selection(widths: Vec<usize>, members: &[(usize, usize)], mode: SelectionMode) -> NeuronSelection {
        let mut members: Vec<NeuronRef> = members.iter().map(|&p| p.into()).collect();
        members.sort_unstable();
        NeuronSelection {
            geometry: ModelGeometry::new("m", widths).unwrap(),
            fraction: 0.5,
            mode,
            direction: Direction::HighestScore,
            members,
            source: SelectionSource::default(),
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn overlap_examples() {
        let g = SelectionMode::GlobalTop;
        let a = selection(vec![8], &[(0, 0), (0, 1), (0, 2)], g);
        let b = selection(vec![8], &[(0, 1), (0, 2), (0, 3), (0, 4)], g);
        let d = selection(vec![8], &[(0, 6), (0, 7)], g);
        let m = overlap_matrix(&labels(3), &[a.clone(), b, d]).unwrap();
        assert_eq!(m.values[0][0], 1.0);
        assert_eq!(m.values[0][1], 2.0 / 3.0);
        assert_eq!(m.values[1][0], 0.5);
        assert_eq!(m.values[0][2], 0.0);
        assert_eq!(m.values[2][0], 0.0);
        let same = overlap_matrix(&labels(2), &[a.clone(), a]).unwrap();
        assert_eq!(same.values, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn overlap_errors() {
        let g = SelectionMode::GlobalTop;
        let a = selection(vec![8], &[(0, 0)], g);
        let empty = selection(vec![8], &[], g);
        let err = overlap_matrix(&["a".into(), "gone".into()], &[a.clone(), empty]).unwrap_err();
        assert!(err.to_string().contains("gone"));
        let other = selection(vec![9], &[(0, 0)], g);
        assert!(matches!(overlap_matrix(&labels(2), &[a, other]), Err(Error::Geometry(_))));
    }

    #[test]
    fn overlap_csv_layout() {
        let g = SelectionMode::GlobalTop;
        let a = selection(vec![4], &[(0, 0), (0, 1)], g);
        let b = selection(vec![4], &[(0, 1)], g);
        let csv = overlap_matrix(&["x".into(), "y,z".into()], &[a, b]).unwrap().to_csv();
        assert_eq!(csv, "label,x,\"y,z\"\nx,1,0.5\n\"y,z\",1,1\n");
    }

    #[test]
    fn diff_examples() {
        let mk = |v01: f64, v10: f64| OverlapMatrix {
            labels: labels(2),
            values: vec![vec![1.0, v01], vec![v10, 1.0]],
            sizes: vec![1, 1],
            intersections: vec![vec![1, 0], vec![0, 1]],
        };
        let same = sorted_overlap_diff(&mk(0.3, 0.7), &mk(0.3, 0.7)).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.iter().all(|d| d.difference == 0.0));
        assert_eq!(same[0].from, "c1");

        let d = sorted_overlap_diff(&mk(0.6, 0.1), &mk(0.4, 0.1)).unwrap();
        assert_eq!((d[0].from.as_str(), d[0].to.as_str()), ("c0", "c1"));
        assert!((d[0].difference - 0.2).abs() < 1e-15);

        let mut other = mk(0.6, 0.1);
        other.labels = vec!["a".into(), "b".into()];
        assert!(sorted_overlap_diff(&mk(0.6, 0.1), &other).is_err());
    }

    #[test]
    fn lorenz_examples() {
        let u = lorenz_from_counts(0, &[3, 3, 3, 3]).unwrap();
        assert_eq!(u.raw_auc, 0.5);
        assert_eq!(u.normalized_auc, 0.5);
        let one = lorenz_from_counts(0, &[0, 0, 7, 0]).unwrap();
        assert_eq!(one.raw_auc, 1.0 - 1.0 / 8.0);
        assert_eq!(one.normalized_auc, 1.0);
        let h = lorenz_from_counts(0, &[2, 1, 1, 0]).unwrap();
        assert_eq!(h.curve, vec![0, 2, 3, 4, 4]);
        assert!((h.raw_auc - 0.6875).abs() < 1e-15);
        assert!((h.normalized_auc - 0.75).abs() < 1e-12);
        assert!(matches!(lorenz_from_counts(0, &[0, 0]), Err(Error::Degenerate(_))));
        assert!(matches!(lorenz_from_counts(0, &[5]), Err(Error::Degenerate(_))));
    }

    fn clustering(k: usize, assignment: Vec<Vec<usize>>) -> ClusterAssignment {
        ClusterAssignment {
            geometry: ModelGeometry::new("m", assignment.iter().map(Vec::len).collect()).unwrap(),
            k,
            seed: 0,
            assignment,
            objective: vec![],
        }
    }

    #[test]
    fn auc_by_layer_composed_cases() {
        // layer 0: clusters {0,1},{2,3},{4,5},{6,7}; layer 1 the same
        let c = clustering(4, vec![vec![0, 0, 1, 1, 2, 2, 3, 3]; 2]);
        let p = SelectionMode::PerLayerEqual;
        let whole = selection(vec![8, 8], &[(0, 0), (0, 1), (1, 0), (1, 2), (1, 4), (1, 6)], p);
        // selection fills one whole cluster in layer 0 and is uniform in layer 1
        assert_eq!(auc_by_layer(&whole, &c).unwrap(), vec![Some(1.0), Some(0.5)]);

        let fill = selection(vec![8, 8], &[(0, 2), (0, 3), (1, 0), (1, 2)], p);
        let aucs = auc_by_layer(&fill, &c).unwrap();
        assert_eq!(aucs[0], Some(1.0));
        // counts [1, 1, 0, 0]: curve 0,1,2,2,2, area sum 12 vs k*c_k = 8, span 6
        assert!((aucs[1].unwrap() - (0.5 + 0.5 * 4.0 / 6.0)).abs() < 1e-15);

        let sparse = selection(vec![8, 8], &[(1, 0)], p);
        assert_eq!(auc_by_layer(&sparse, &c).unwrap()[0], None);
        assert!(matches!(lorenz_layer(&sparse, &c, 0), Err(Error::Degenerate(_))));

        let single = clustering(2, vec![vec![0, 1, 0, 1]]);
        let s = selection(vec![4], &[(0, 0), (0, 1)], p);
        assert_eq!(auc_by_layer(&s, &single).unwrap(), vec![Some(0.5)]);
    }

    #[test]
    fn lorenz_rejects_global_selection() {
        let c = clustering(2, vec![vec![0, 1, 0, 1]]);
        let s = selection(vec![4], &[(0, 0)], SelectionMode::GlobalTop);
        assert!(matches!(lorenz_layer(&s, &c, 0), Err(Error::Mode(_))));
        assert!(matches!(auc_by_layer(&s, &c), Err(Error::Mode(_))));
    }

    #[test]
    fn aligned_selection_beats_random_selection() {
        // 64 neurons, 8 clusters of 8; select 8 neurons
        let (n, k, take) = (64usize, 8usize, 8usize);
        let mut wins = 0;
        for trial in 0..100u64 {
            let mut rng = SplitMix64::new(trial);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let assignment: Vec<usize> = (0..n).map(|i| perm[i] % k).collect();
            let c = clustering(k, vec![assignment.clone()]);
            let target = rng.below(k);
            let aligned: Vec<(usize, usize)> = (0..n).filter(|&i| assignment[i] == target).map(|i| (0, i)).collect();
            let random: Vec<(usize, usize)> = perm[..take].iter().map(|&i| (0, i)).collect();
            let p = SelectionMode::PerLayerEqual;
            let a = auc_by_layer(&selection(vec![n], &aligned, p), &c).unwrap()[0].unwrap();
            let r = auc_by_layer(&selection(vec![n], &random, p), &c).unwrap()[0].unwrap();
            wins += usize::from(a > r);
        }
        assert!(wins >= 95, "aligned won {wins}/100");
    }

    proptest! {
        #[test]
        fn lorenz_invariants(counts in prop::collection::vec(0u64..20, 2..12), shift in 0usize..12) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let r = lorenz_from_counts(0, &counts).unwrap();
            let k = counts.len() as f64;
            prop_assert!(r.raw_auc >= 0.5 - 1e-15 && r.raw_auc <= 1.0 - 0.5 / k + 1e-15);
            prop_assert!((0.5..=1.0).contains(&r.normalized_auc));
            prop_assert_eq!(*r.curve.last().unwrap(), counts.iter().sum::<u64>());
            // concave: increments non-increasing
            let inc: Vec<u64> = r.curve.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(inc.windows(2).all(|w| w[0] >= w[1]));
            // relabeling invariance
            let mut rotated = counts.clone();
            rotated.rotate_left(shift % counts.len());
            prop_assert_eq!(lorenz_from_counts(0, &rotated).unwrap().normalized_auc, r.normalized_auc);
        }

        #[test]
        fn concentration_is_monotone(counts in prop::collection::vec(0u64..20, 2..12), a in 0usize..12, b in 0usize..12) {
            let (a, b) = (a % counts.len(), b % counts.len());
            prop_assume!(a != b && counts[a] > 0 && counts[b] >= counts[a]);
            let before = lorenz_from_counts(0, &counts).unwrap().normalized_auc;
            let mut moved = counts.clone();
            moved[a] -= 1;
            moved[b] += 1;
            let after = lorenz_from_counts(0, &moved).unwrap().normalized_auc;
            prop_assert!(after >= before);
        }
    }
}
