//! Part-level shape representation: per-part Gaussian extrinsics, intrinsic
//! latent codes, and the geometric operations on them.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EXTRINSIC_DIM: usize = 16;
/// Smallest eigenvalue kept after clipping.
pub const EIGVAL_FLOOR: f32 = 1e-4;
/// Points that vote for each part's label.
pub const LABEL_VOTERS: usize = 100;

/// Offsets of the fields inside the flat 16-float layout
/// `[c (3) | lambda (3) | u1 (3) | u2 (3) | u3 (3) | pi]`.
pub mod layout {
    pub const CENTER: usize = 0;
    pub const EIGVALS: usize = 3;
    pub const EIGVECS: usize = 6;
    pub const WEIGHT: usize = 15;
}

pub type Point = [f32; 3];

/// One part's Gaussian: center, covariance eigen-decomposition and mixture weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicVec {
    pub center: [f32; 3],
    pub eigvals: [f32; 3],
    /// Eigenvectors `u1, u2, u3`, i.e. the columns of `U`.
    pub eigvecs: [[f32; 3]; 3],
    pub weight: f32,
}

impl ExtrinsicVec {
    pub fn from_flat(v: &[f32]) -> Result<Self> {
        if v.len() != EXTRINSIC_DIM {
            return Err(Error::Param(format!("extrinsic vector has {} entries, expected 16", v.len())));
        }
        let mut e = ExtrinsicVec {
            center: [v[0], v[1], v[2]],
            eigvals: [v[3], v[4], v[5]],
            eigvecs: [[0.0; 3]; 3],
            weight: v[layout::WEIGHT],
        };
        for j in 0..3 {
            for r in 0..3 {
                e.eigvecs[j][r] = v[layout::EIGVECS + 3 * j + r];
            }
        }
        Ok(e)
    }

    pub fn to_flat(&self) -> [f32; EXTRINSIC_DIM] {
        let mut out = [0.0; EXTRINSIC_DIM];
        out[..3].copy_from_slice(&self.center);
        out[3..6].copy_from_slice(&self.eigvals);
        for j in 0..3 {
            out[layout::EIGVECS + 3 * j..layout::EIGVECS + 3 * j + 3].copy_from_slice(&self.eigvecs[j]);
        }
        out[layout::WEIGHT] = self.weight;
        out
    }

    /// `U` with the eigenvectors as columns.
    pub fn basis(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.eigvecs[c][r] as f64)
    }

    pub fn set_basis(&mut self, u: &Matrix3<f64>) {
        for c in 0..3 {
            for r in 0..3 {
                self.eigvecs[c][r] = u[(r, c)] as f32;
            }
        }
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::new(self.center[0] as f64, self.center[1] as f64, self.center[2] as f64)
    }

    /// `U diag(lambda) U^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let u = self.basis();
        let d = Matrix3::from_diagonal(&Vector3::new(
            self.eigvals[0] as f64,
            self.eigvals[1] as f64,
            self.eigvals[2] as f64,
        ));
        u * d * u.transpose()
    }

    /// Coordinates of `x` in the part frame, `U^T (x - c)`.
    pub fn local(&self, x: &Point) -> Vector3<f64> {
        let d = Vector3::new(x[0] as f64, x[1] as f64, x[2] as f64) - self.center_vec();
        self.basis().transpose() * d
    }

    /// Largest deviation of `U^T U` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let u = self.basis();
        (u.transpose() * u - Matrix3::identity()).abs().max()
    }

    /// Test-time fix-up: nearest orthogonal eigenvectors and floored eigenvalues.
    pub fn projected(&self) -> Self {
        let mut e = *self;
        e.set_basis(&project_o3(&self.basis()));
        e.eigvals = clip_eigvals(self.eigvals);
        e
    }
}

/// A part's geometry latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntrinsicVec(pub Vec<f32>);

impl IntrinsicVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub extrinsic: ExtrinsicVec,
    pub intrinsic: IntrinsicVec,
}

/// A shape: an unordered collection of parts, optionally labeled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSet {
    pub parts: Vec<Part>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl PartSet {
    pub fn new(parts: Vec<Part>, labels: Option<Vec<u32>>) -> Result<Self> {
        let set = PartSet { parts, labels };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.parts.first().ok_or(Error::Empty("part set"))?;
        let d = first.intrinsic.dim();
        if self.parts.iter().any(|p| p.intrinsic.dim() != d) {
            return Err(Error::Param("intrinsic dimensions differ between parts".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.parts.len() {
                return Err(Error::Param(format!(
                    "{} labels for {} parts",
                    labels.len(),
                    self.parts.len()
                )));
            }
        }
        let finite = self
            .parts
            .iter()
            .all(|p| p.extrinsic.to_flat().iter().chain(p.intrinsic.as_slice()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Param("part set contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.parts.first().map_or(0, |p| p.intrinsic.dim())
    }

    pub fn extrinsics(&self) -> Vec<ExtrinsicVec> {
        self.parts.iter().map(|p| p.extrinsic).collect()
    }

    /// Intrinsics stacked as `[N, d_s]`.
    pub fn intrinsics_tensor(&self) -> Tensor {
        let d = self.intrinsic_dim();
        let data: Vec<f32> = self.parts.iter().flat_map(|p| p.intrinsic.0.iter().copied()).collect();
        Tensor::from_parts(vec![self.len(), d], data)
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Indices of parts carrying `label`.
    pub fn indices_of(&self, label: u32) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == label).collect(),
            None => Vec::new(),
        }
    }

    /// Reorder parts (and labels) so that new part `k` is old part `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PartSet {
            parts: perm.iter().map(|&i| self.parts[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Per-element standardization statistics for `lambda1..3` and `pi`
/// (in that order). Centers and eigenvectors are left untouched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicStats {
    pub mean: [f32; 4],
    pub std: [f32; 4],
}

const STAT_SLOTS: [usize; 4] = [layout::EIGVALS, layout::EIGVALS + 1, layout::EIGVALS + 2, layout::WEIGHT];

impl ExtrinsicStats {
    pub fn identity() -> Self {
        ExtrinsicStats {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }

    pub fn new(mean: [f32; 4], std: [f32; 4]) -> Result<Self> {
        if std.iter().any(|&s| !s.is_finite() || s <= 0.0) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Param(format!("standard deviations must be positive, got {std:?}")));
        }
        Ok(ExtrinsicStats { mean, std })
    }

    /// Population mean and standard deviation over every part of every shape.
    pub fn from_shapes<'a>(shapes: impl IntoIterator<Item = &'a PartSet>) -> Result<Self> {
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        let mut n = 0usize;
        for shape in shapes {
            for p in &shape.parts {
                let flat = p.extrinsic.to_flat();
                for (k, &slot) in STAT_SLOTS.iter().enumerate() {
                    let v = flat[slot] as f64;
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("statistics need at least one part"));
        }
        let mut mean = [0.0f32; 4];
        let mut std = [0.0f32; 4];
        for k in 0..4 {
            let m = sum[k] / n as f64;
            mean[k] = m as f32;
            std[k] = (sq[k] / n as f64 - m * m).max(0.0).sqrt() as f32;
        }
        Self::new(mean, std)
    }

    pub fn normalize_flat(&self, flat: &mut [f32]) {
        for (k, &slot) in STAT_SLOTS.iter().enumerate() {
            flat[slot] = (flat[slot] - self.mean[k]) / self.std[k];
        }
    }

    pub fn denormalize_flat(&self, flat: &mut [f32]) {
        for (k, &slot) in STAT_SLOTS.iter().enumerate() {
            flat[slot] = flat[slot] * self.std[k] + self.mean[k];
        }
    }
}

/// Extrinsics of `parts` as a normalized `[N, 16]` tensor.
pub fn normalize_extrinsics(parts: &[ExtrinsicVec], stats: &ExtrinsicStats) -> Tensor {
    let mut data = Vec::with_capacity(parts.len() * EXTRINSIC_DIM);
    for e in parts {
        let mut flat = e.to_flat();
        stats.normalize_flat(&mut flat);
        data.extend_from_slice(&flat);
    }
    Tensor::from_parts(vec![parts.len(), EXTRINSIC_DIM], data)
}

/// Inverse of [`normalize_extrinsics`].
pub fn denormalize_extrinsics(flat: &Tensor, stats: &ExtrinsicStats) -> Result<Vec<ExtrinsicVec>> {
    let (_, cols) = flat.rows_cols();
    if cols != EXTRINSIC_DIM {
        return Err(Error::Param(format!("expected 16 columns, got {cols}")));
    }
    flat.data()
        .chunks(EXTRINSIC_DIM)
        .map(|row| {
            let mut row: [f32; EXTRINSIC_DIM] = row.try_into().expect("16 columns");
            stats.denormalize_flat(&mut row);
            ExtrinsicVec::from_flat(&row)
        })
        .collect()
}

/// Nearest orthogonal matrix in Frobenius norm: `A B^T` from `U = A S B^T`.
///
/// Rank-deficient inputs keep whatever singular vectors the decomposition
/// returns, so the result is orthogonal but its determinant may be -1.
pub fn project_o3(u: &Matrix3<f64>) -> Matrix3<f64> {
    if !u.iter().all(|v| v.is_finite()) {
        return Matrix3::identity();
    }
    match u.try_svd(true, true, f64::EPSILON, 0) {
        Some(svd) => match (svd.u, svd.v_t) {
            (Some(a), Some(bt)) => a * bt,
            _ => Matrix3::identity(),
        },
        None => Matrix3::identity(),
    }
}

pub fn clip_eigvals(l: [f32; 3]) -> [f32; 3] {
    l.map(|v| v.max(EIGVAL_FLOOR))
}

/// `sqrt((x - c)^T Sigma^-1 (x - c))` for an orthogonal `U`.
pub fn mahalanobis(x: &Point, e: &ExtrinsicVec) -> f64 {
    let y = e.local(x);
    (0..3).map(|j| y[j] * y[j] / e.eigvals[j] as f64).sum::<f64>().sqrt()
}

/// Density of the Gaussian mixture `sum_i pi_i N(x | c_i, Sigma_i)`, with the
/// weights renormalized to sum to one.
pub fn mixture_density(x: &Point, parts: &[ExtrinsicVec]) -> Result<f64> {
    let total: f64 = parts.iter().map(|e| e.weight as f64).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Param("mixture weights must have a positive sum".into()));
    }
    let norm = (2.0 * std::f64::consts::PI).powf(1.5);
    Ok(parts
        .iter()
        .map(|e| {
            let d = mahalanobis(x, e);
            let det: f64 = e.eigvals.iter().map(|&l| l as f64).product();
            e.weight as f64 / total * (-0.5 * d * d).exp() / (norm * det.sqrt())
        })
        .sum())
}

/// Assign each part the majority label of its closest labeled points under
/// Mahalanobis distance (at most [`LABEL_VOTERS`] voters; ties go to the
/// lowest label id).
pub fn transfer_labels(parts: &[ExtrinsicVec], points: &[(Point, u32)]) -> Result<Vec<u32>> {
    if points.is_empty() {
        return Err(Error::Empty("labeled point list"));
    }
    let k = LABEL_VOTERS.min(points.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    Ok(parts
        .iter()
        .map(|e| {
            scratch.clear();
            scratch.extend(points.iter().enumerate().map(|(j, (x, _))| (mahalanobis(x, e), j)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, cmp);
            }
            let mut votes: Vec<(u32, usize)> = Vec::new();
            for &(_, j) in &scratch[..k] {
                let l = points[j].1;
                match votes.iter_mut().find(|(lab, _)| *lab == l) {
                    Some(v) => v.1 += 1,
                    None => votes.push((l, 1)),
                }
            }
            votes
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .expect("k >= 1")
        })
        .collect())
}

/// Binary per-part mask: `true` (1) keeps a part, `false` (0) regenerates it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<u8>", into = "Vec<u8>")]
pub struct PartMask(Vec<bool>);

impl PartMask {
    pub fn keep_all(n: usize) -> Self {
        PartMask(vec![true; n])
    }

    pub fn regenerate_all(n: usize) -> Self {
        PartMask(vec![false; n])
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        PartMask(keep)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn values(&self) -> Vec<u8> {
        self.0.iter().map(|&k| k as u8).collect()
    }

    pub fn regenerated(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| !self.0[i]).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        PartMask(perm.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<Vec<u8>> for PartMask {
    fn from(v: Vec<u8>) -> Self {
        PartMask(v.into_iter().map(|x| x != 0).collect())
    }
}

impl From<PartMask> for Vec<u8> {
    fn from(m: PartMask) -> Self {
        m.values()
    }
}

/// Result of selecting parts by label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub mask: PartMask,
    /// Set when nothing matched and the mask keeps every part.
    pub unmatched: bool,
}

/// Mask that regenerates exactly the parts labeled `target`.
pub fn mask_for_label(labels: &[u32], target: u32) -> Selection {
    let keep: Vec<bool> = labels.iter().map(|&l| l != target).collect();
    let unmatched = keep.iter().all(|&k| k);
    Selection {
        mask: PartMask(keep),
        unmatched,
    }
}
