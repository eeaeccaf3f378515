//! Linear morphable-model baseline: PCA over dense displacements, fitted to
//! target landmarks by (ridge-regularized) least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::curve::LandmarkFrame;
use crate::decoder::{PairSource, S2dDecoder, TrainPair};
use crate::error::{Error, Result};
use crate::mesh::{
    apply_displacement, cumulative_error_curve, extract_landmarks, per_vertex_errors, DisplacementField,
    LandmarkIndexTable, Mesh,
};

pub const CHECKPOINT_KIND: &str = "pca-model";

/// Component counts used for comparison.
pub const PRESETS: [usize; 3] = [204, 220, 38];

/// Relative ridge applied when none is given: this factor times the largest
/// eigenvalue of the restricted normal matrix.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// Flattened `N x 3` mean displacement.
    mean: Vec<f64>,
    /// One orthonormal row per component.
    components: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    /// Fraction of total variance explained by each kept component.
    explained: Vec<f64>,
}

impl PcaModel {
    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.components.row(i).iter().copied().collect()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained
    }

    /// Keeps the leading `n` components.
    pub fn truncated(&self, n: usize) -> Result<PcaModel> {
        if n == 0 || n > self.n_components() {
            return Err(Error::InvalidInput(format!(
                "cannot keep {n} of {} components",
                self.n_components()
            )));
        }
        Ok(PcaModel {
            mean: self.mean.clone(),
            components: self.components.rows(0, n).into_owned(),
            eigenvalues: self.eigenvalues[..n].to_vec(),
            explained: self.explained[..n].to_vec(),
        })
    }

    /// `mean + sum_i c_i * component_i`.
    pub fn displacement(&self, coeffs: &[f64]) -> Result<DisplacementField> {
        if coeffs.len() != self.n_components() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} components",
                coeffs.len(),
                self.n_components()
            )));
        }
        let c = DVector::from_column_slice(coeffs);
        let flat = self.components.tr_mul(&c);
        let values: Vec<f64> = flat.iter().zip(&self.mean).map(|(a, m)| a + m).collect();
        DisplacementField::from_flat(&values)
    }

    /// Coefficients of the orthogonal projection of `d` onto the model.
    pub fn project(&self, d: &DisplacementField) -> Result<Vec<f64>> {
        let flat = d.flat();
        if flat.len() != self.mean.len() {
            return Err(Error::Shape("displacement size differs from the model".into()));
        }
        let centered = DVector::from_iterator(flat.len(), flat.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok((&self.components * centered).iter().copied().collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let n = self.n_components();
        let dim = self.mean.len();
        let comps: Vec<f64> = (0..n).flat_map(|i| self.components.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "components": n, "vertices": dim / 3 }),
            vec![
                ("mean".into(), Tensor::new(1, dim, self.mean.clone()).unwrap()),
                ("components".into(), Tensor::new(n, dim, comps).unwrap()),
                ("eigenvalues".into(), Tensor::row(self.eigenvalues.clone())),
                ("explained".into(), Tensor::row(self.explained.clone())),
            ],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mean = ck.tensor("mean")?;
        let comps = ck.tensor("components")?;
        let eig = ck.tensor("eigenvalues")?;
        let explained = ck.tensor("explained")?;
        if comps.cols() != mean.len() || eig.len() != comps.rows() || explained.len() != comps.rows() {
            return Err(Error::Checkpoint("inconsistent PCA tensor shapes".into()));
        }
        Ok(PcaModel {
            mean: mean.data().to_vec(),
            components: DMatrix::from_row_slice(comps.rows(), comps.cols(), comps.data()),
            eigenvalues: eig.data().to_vec(),
            explained: explained.data().to_vec(),
        })
    }
}

/// Principal components of the mean-centered flattened fields. Uses the
/// smaller of the sample Gram matrix and the covariance matrix.
pub fn build_pca(displacements: &[DisplacementField], n_components: usize) -> Result<PcaModel> {
    let m = displacements.len();
    if n_components == 0 || m < n_components {
        return Err(Error::InvalidInput(format!(
            "{n_components} components need at least as many samples, got {m}"
        )));
    }
    let dim = 3 * displacements[0].len();
    if displacements.iter().any(|d| 3 * d.len() != dim) {
        return Err(Error::Shape("displacement fields differ in vertex count".into()));
    }
    if n_components > dim {
        return Err(Error::InvalidInput(format!("{n_components} components exceed dimension {dim}")));
    }
    let mut mean = vec![0.0; dim];
    for d in displacements {
        for (a, v) in mean.iter_mut().zip(d.flat()) {
            *a += v / m as f64;
        }
    }
    // rows are centered samples
    let mut x = DMatrix::zeros(m, dim);
    for (i, d) in displacements.iter().enumerate() {
        for (j, v) in d.flat().into_iter().enumerate() {
            x[(i, j)] = v - mean[j];
        }
    }
    let denom = (m.max(2) - 1) as f64;
    let (values, vectors) = if m <= dim {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let mut comps = DMatrix::zeros(n_components, dim);
        let mut vals = Vec::with_capacity(n_components);
        for (r, &i) in order.iter().take(n_components).enumerate() {
            let lambda = eig.eigenvalues[i].max(0.0);
            let u = eig.eigenvectors.column(i);
            let v = x.tr_mul(&u);
            let norm = v.norm();
            if norm > 1e-12 * (1.0 + lambda.sqrt()) {
                comps.row_mut(r).copy_from(&(v / norm).transpose());
            }
            vals.push(lambda / denom);
        }
        (vals, comps)
    } else {
        let cov = x.tr_mul(&x);
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let mut comps = DMatrix::zeros(n_components, dim);
        let mut vals = Vec::with_capacity(n_components);
        for (r, &i) in order.iter().take(n_components).enumerate() {
            comps.row_mut(r).copy_from(&eig.eigenvectors.column(i).transpose());
            vals.push(eig.eigenvalues[i].max(0.0) / denom);
        }
        (vals, comps)
    };
    let vectors = complete_basis(vectors);
    let total = x.iter().map(|v| v * v).sum::<f64>() / denom;
    let explained = values.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(PcaModel {
        mean,
        components: vectors,
        eigenvalues: values,
        explained,
    })
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Replaces zero rows (null-variance directions) by unit vectors orthogonal
/// to the others, so every row stays orthonormal.
fn complete_basis(mut rows: DMatrix<f64>) -> DMatrix<f64> {
    let (n, dim) = rows.shape();
    let mut next = 0;
    for r in 0..n {
        if rows.row(r).norm() > 0.5 {
            continue;
        }
        while next < dim {
            let mut v = DVector::zeros(dim);
            v[next] = 1.0;
            next += 1;
            for q in 0..n {
                if q != r && rows.row(q).norm() > 0.5 {
                    let p = rows.row(q).transpose();
                    let d = p.dot(&v);
                    v -= p * d;
                }
            }
            let norm = v.norm();
            if norm > 1e-6 {
                rows.row_mut(r).copy_from(&(v / norm).transpose());
                break;
            }
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFit {
    pub coefficients: Vec<f64>,
    pub mesh: Mesh,
    /// Squared landmark residual of the fit.
    pub residual: f64,
    /// Ridge actually applied.
    pub ridge: f64,
    /// Set when the unregularized system was rank deficient and solved by
    /// pseudo-inverse.
    pub rank_deficient: bool,
}

/// How much regularization [`fit_landmarks`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    Absolute(f64),
    /// Multiple of the largest eigenvalue of the restricted normal matrix.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(DEFAULT_RELATIVE_RIDGE)
    }
}

/// Least-squares coefficients matching `target` at the landmark vertices,
/// with `ridge * |c|^2` added to the objective.
pub fn fit_landmarks(
    model: &PcaModel,
    neutral: &Mesh,
    target: &LandmarkFrame,
    table: &LandmarkIndexTable,
    ridge: Ridge,
) -> Result<LandmarkFit> {
    if neutral.vertex_count() != model.vertex_count() {
        return Err(Error::Topology(format!(
            "model has {} vertices, neutral has {}",
            model.vertex_count(),
            neutral.vertex_count()
        )));
    }
    if target.k() != table.k() {
        return Err(Error::Shape(format!("{} target landmarks for a {}-entry table", target.k(), table.k())));
    }
    let (a, b) = restricted_system(model, neutral, target, table)?;
    let ata = a.tr_mul(&a);
    let atb = a.tr_mul(&b);
    let n = model.n_components();
    let lam_max = SymmetricEigen::new(ata.clone()).eigenvalues.max().max(0.0);
    let r = match ridge {
        Ridge::Absolute(r) => r,
        Ridge::Relative(f) => f * lam_max,
    };
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidInput(format!("ridge must be finite and >= 0, got {r}")));
    }
    let mut rank_deficient = false;
    let coeffs = if r > 0.0 {
        let m = ata + DMatrix::identity(n, n) * r;
        m.cholesky()
            .ok_or_else(|| Error::Singularity("regularized normal matrix is not positive definite".into()))?
            .solve(&atb)
    } else {
        let svd = a.clone().svd(true, true);
        let tol = svd.singular_values.max() * 1e-10 * (a.nrows().max(a.ncols()) as f64);
        rank_deficient = svd.rank(tol) < n;
        svd.solve(&b, tol).map_err(|e| Error::Singularity(e.to_string()))?
    };
    let residual = (&a * &coeffs - &b).norm_squared();
    let coefficients: Vec<f64> = coeffs.iter().copied().collect();
    let mesh = apply_displacement(neutral, &model.displacement(&coefficients)?)?;
    Ok(LandmarkFit {
        coefficients,
        mesh,
        residual,
        ridge: r,
        rank_deficient,
    })
}

/// `A` holds the component columns at the landmark coordinates and `b` the
/// target minus neutral-plus-mean there.
fn restricted_system(
    model: &PcaModel,
    neutral: &Mesh,
    target: &LandmarkFrame,
    table: &LandmarkIndexTable,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = table.k();
    let n = model.n_components();
    let base = extract_landmarks(neutral, table)?;
    let mut a = DMatrix::zeros(3 * k, n);
    let mut b = DVector::zeros(3 * k);
    for (j, &v) in table.indices().iter().enumerate() {
        for c in 0..3 {
            let col = 3 * v + c;
            for i in 0..n {
                a[(3 * j + c, i)] = model.components[(i, col)];
            }
            b[3 * j + c] = target.points()[j][c] - base.points()[j][c] - model.mean[col];
        }
    }
    Ok((a, b))
}

/// Squared landmark residual of arbitrary coefficients.
pub fn landmark_residual(
    model: &PcaModel,
    neutral: &Mesh,
    target: &LandmarkFrame,
    table: &LandmarkIndexTable,
    coeffs: &[f64],
) -> Result<f64> {
    let (a, b) = restricted_system(model, neutral, target, table)?;
    Ok((a * DVector::from_column_slice(coeffs) - b).norm_squared())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub split: String,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub thresholds: Vec<f64>,
    /// `(method, split, fraction of vertices with error <= threshold)`.
    pub curves: Vec<(String, String, Vec<f64>)>,
}

impl ComparisonReport {
    pub fn row(&self, method: &str, split: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,split,mean,std,samples\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.method, r.split, r.mean, r.std, r.samples));
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("method,split");
        for t in &self.thresholds {
            s.push_str(&format!(",{t}"));
        }
        s.push('\n');
        for (m, sp, c) in &self.curves {
            s.push_str(&format!("{m},{sp}"));
            for v in c {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:<12} {:>10} {:>10} {:>8}\n", "method", "split", "mean", "std", "n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<12} {:>10.4} {:>10.4} {:>8}\n",
                r.method, r.split, r.mean, r.std, r.samples
            ));
        }
        s
    }

    /// Adds one method's per-vertex errors over a split.
    pub fn push(&mut self, method: &str, split: &str, errors: &[f64], samples: usize) {
        let (mean, std) = crate::mesh::mean_std(errors);
        self.rows.push(ReportRow {
            method: method.into(),
            split: split.into(),
            mean,
            std,
            samples,
        });
        self.curves.push((method.into(), split.into(), cumulative_error_curve(errors, &self.thresholds)));
    }
}

/// Default thresholds (mm) for the cumulative error curves.
pub fn default_thresholds() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.05).collect()
}

/// Per-vertex errors of decoder and PCA fits over `test`, pooled over all
/// pairs, added to `report` under `split`.
pub fn evaluate_comparison(
    report: &mut ComparisonReport,
    split: &str,
    test: &dyn PairSource,
    decoder: Option<&S2dDecoder>,
    models: &[(String, PcaModel)],
    ridge: Ridge,
) -> Result<()> {
    if report.thresholds.is_empty() {
        report.thresholds = default_thresholds();
    }
    let pairs: Vec<TrainPair> = (0..test.len()).map(|i| test.pair(i)).collect::<Result<_>>()?;
    if let Some(net) = decoder {
        let mut errors = Vec::new();
        for chunk in pairs.chunks(16) {
            let inputs = chunk.iter().map(TrainPair::input).collect::<Result<Vec<_>>>()?;
            let preds = net.forward_batch(&inputs.iter().collect::<Vec<_>>())?;
            for (p, d) in chunk.iter().zip(preds) {
                errors.extend(per_vertex_errors(&apply_displacement(&p.neutral, &d)?, &p.target)?);
            }
        }
        report.push("ours", split, &errors, pairs.len());
    }
    for (name, model) in models {
        let mut errors = Vec::new();
        for p in &pairs {
            let target = extract_landmarks(&p.target, &p.table)?;
            let fit = fit_landmarks(model, &p.neutral, &target, &p.table, ridge)?;
            errors.extend(per_vertex_errors(&fit.mesh, &p.target)?);
        }
        report.push(name, split, &errors, pairs.len());
    }
    Ok(())
}
