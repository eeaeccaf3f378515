use super::{check_len, DisplacementField, Mesh, VertexWeightTable};
use crate::error::Result;

fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// `(1/N) sum_i |D^g_i - D^gt_i|_1`
pub fn displacement_l1(pred: &DisplacementField, gt: &DisplacementField) -> Result<f64> {
    check_len(gt.len(), pred.len(), "predicted displacement")?;
    let n = pred.len() as f64;
    Ok(pred.values().iter().zip(gt.values()).map(|(a, b)| l1(a, b)).sum::<f64>() / n)
}

/// `(1/N) sum_i w_i |p^g_i - p^gt_i|_1`
pub fn weighted_point_l1(pred: &Mesh, gt: &Mesh, w: &VertexWeightTable) -> Result<f64> {
    pred.same_topology(gt)?;
    check_len(pred.vertex_count(), w.len(), "weight table")?;
    Ok(weighted_l1_rows(pred.positions(), gt.positions(), w.weights()))
}

pub(crate) fn weighted_l1_rows(pred: &[[f64; 3]], gt: &[[f64; 3]], w: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(gt).zip(w).map(|((a, b), wi)| wi * l1(a, b)).sum::<f64>() / n
}

/// Euclidean distance per vertex.
pub fn per_vertex_errors(pred: &Mesh, gt: &Mesh) -> Result<Vec<f64>> {
    pred.same_topology(gt)?;
    Ok(pred
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect())
}

/// Mean and (population) standard deviation of the per-vertex Euclidean error.
pub fn mean_pervertex_error(pred: &Mesh, gt: &Mesh) -> Result<(f64, f64)> {
    Ok(mean_std(&per_vertex_errors(pred, gt)?))
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of errors at or below each threshold.
pub fn cumulative_error_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::mesh::test_support::grid;
    use crate::mesh::MeshTopology;

    fn pair_mesh(a: [f64; 3], b: [f64; 3]) -> Mesh {
        let topo = Arc::new(MeshTopology::new(3, vec![[0, 1, 2]]).unwrap());
        Mesh::new(topo, vec![a, b, [0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn displacement_l1_toy() {
        let z = DisplacementField::zeros(2);
        let d = DisplacementField::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(displacement_l1(&d, &z).unwrap(), 1.5);
        assert_eq!(displacement_l1(&z, &d).unwrap(), 1.5);
        assert_eq!(displacement_l1(&d, &d).unwrap(), 0.0);
        assert!(displacement_l1(&d, &DisplacementField::zeros(3)).is_err());
    }

    #[test]
    fn weighted_l1_toy() {
        let v = weighted_l1_rows(&[[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]], &[[0.0; 3]; 2], &[1.0, 0.5]);
        assert_eq!(v, 1.5);
        let gt = pair_mesh([0.0; 3], [0.0; 3]);
        let w = VertexWeightTable::new(vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!(weighted_point_l1(&gt, &gt, &w).unwrap(), 0.0);
    }

    #[test]
    fn unit_weights_reduce_to_plain_l1() {
        let a = grid(5, 4);
        let field = DisplacementField::new((0..20).map(|i| [i as f64 * 0.1, -0.3, 0.7]).collect()).unwrap();
        let b = crate::mesh::apply_displacement(&a, &field).unwrap();
        let w = VertexWeightTable::uniform(20);
        let plain = displacement_l1(&b.displacement_from(&a).unwrap(), &DisplacementField::zeros(20)).unwrap();
        assert_eq!(weighted_point_l1(&b, &a, &w).unwrap(), plain);
    }

    #[test]
    fn pervertex_error_cases() {
        let a = grid(3, 3);
        assert_eq!(mean_pervertex_error(&a, &a).unwrap(), (0.0, 0.0));
        let b = a.translated([3.0, 4.0, 0.0]);
        let (m, s) = mean_pervertex_error(&b, &a).unwrap();
        assert!((m - 5.0).abs() < 1e-12 && s < 1e-12);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_error_curve(&[0.0, 0.0], &[0.1, 1.0]), vec![1.0, 1.0]);
        assert_eq!(cumulative_error_curve(&[0.5, 1.5], &[1.0]), vec![0.5]);
    }

    proptest! {
        #[test]
        fn cumulative_is_monotone(errors in prop::collection::vec(0.0f64..10.0, 1..50),
                                  mut ts in prop::collection::vec(0.0f64..12.0, 1..20)) {
            ts.sort_by(f64::total_cmp);
            let curve = cumulative_error_curve(&errors, &ts);
            for w in curve.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(curve.iter().all(|f| (0.0..=1.0).contains(f)));
        }
    }
}
