//! Point-cloud distances and set-level generative metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parts::{PartSet, Point};
use crate::toyworld::sample_points;

/// Points per cloud used for every metric computation.
pub const CLOUD_POINTS: usize = 512;

/// Decode each shape to `points` interior points; shape `i` uses seed `seed + i`.
pub fn shape_clouds<'a>(shapes: impl IntoIterator<Item = &'a PartSet>, points: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, s)| sample_points(s, points, seed.wrapping_add(i as u64)))
        .collect()
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

fn mean_nearest(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer needs two nonempty clouds"));
    }
    Ok(mean_nearest(a, b) + mean_nearest(b, a))
}

/// Minimum-cost perfect matching on a square row-major cost matrix.
/// Returns `assignment[row] = column` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    debug_assert_eq!(cost.len(), n * n);
    // potentials over rows (u) and columns (v); column 0 is a sentinel
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[(r0 - 1) * n + col - 1] - u[r0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
    (assignment, total)
}

/// Exact earth mover's distance: mean Euclidean length of the optimal bijection.
pub fn emd(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Param(format!("emd needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("emd needs nonempty clouds"));
    }
    let n = a.len();
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| sq_dist(p, q).sqrt())).collect();
    let (_, total) = hungarian(&cost, n);
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Chamfer,
    Emd,
}

impl DistanceKind {
    pub fn eval(self, a: &[Point], b: &[Point]) -> Result<f64> {
        match self {
            DistanceKind::Chamfer => chamfer(a, b),
            DistanceKind::Emd => emd(a, b),
        }
    }
}

/// COV, MMD and 1-NNA for one distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub cov: f64,
    pub mmd: f64,
    pub nna: f64,
}

/// Index of the smallest value; the first one on ties.
fn argmin(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

/// Symmetric distance matrix over `clouds`.
pub fn pairwise(clouds: &[&[Point]], dist: DistanceKind) -> Result<Vec<f64>> {
    let m = clouds.len();
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = dist.eval(clouds[i], clouds[j])?;
            d[i * m + j] = v;
            d[j * m + i] = v;
        }
    }
    Ok(d)
}

/// Set metrics between generated and reference clouds.
///
/// COV is the fraction of references that are the nearest reference of some
/// generated cloud. MMD averages, over references, the distance to the nearest
/// generated cloud; with `completion` the direction flips to the mean over
/// generated clouds of the distance to the nearest reference. 1-NNA is the
/// leave-one-out nearest-neighbour accuracy of telling the two sets apart.
/// Ties go to the first index (generated before reference).
pub fn cov_mmd_nna(generated: &[Vec<Point>], reference: &[Vec<Point>], dist: DistanceKind, completion: bool) -> Result<MetricValues> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("metric inputs must be nonempty"));
    }
    let pooled: Vec<&[Point]> = generated.iter().chain(reference).map(Vec::as_slice).collect();
    let d = pairwise(&pooled, dist)?;
    Ok(metrics_from_matrix(&d, generated.len(), reference.len(), completion))
}

/// [`cov_mmd_nna`] over a precomputed pooled matrix, generated rows first.
pub fn metrics_from_matrix(d: &[f64], g: usize, r: usize, completion: bool) -> MetricValues {
    let m = g + r;
    let at = |i: usize, j: usize| d[i * m + j];
    let mut covered = vec![false; r];
    for i in 0..g {
        if let Some((j, _)) = argmin((0..r).map(|j| at(i, g + j))) {
            covered[j] = true;
        }
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / r as f64;
    let mmd = if completion {
        (0..g).map(|i| (0..r).map(|j| at(i, g + j)).fold(f64::INFINITY, f64::min)).sum::<f64>() / g as f64
    } else {
        (0..r).map(|j| (0..g).map(|i| at(i, g + j)).fold(f64::INFINITY, f64::min)).sum::<f64>() / r as f64
    };
    let mut correct = 0usize;
    for i in 0..m {
        let mut nearest: Option<(usize, f64)> = None;
        for j in (0..m).filter(|&j| j != i) {
            if nearest.is_none_or(|(_, b)| at(i, j) < b) {
                nearest = Some((j, at(i, j)));
            }
        }
        if let Some((j, _)) = nearest {
            if (i < g) == (j < g) {
                correct += 1;
            }
        }
    }
    MetricValues {
        cov,
        mmd,
        nna: correct as f64 / m as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: MetricValues,
    #[serde(default)]
    pub emd: Option<MetricValues>,
    pub generated: usize,
    pub reference: usize,
    pub points: usize,
    pub seed: u64,
    #[serde(default)]
    pub completion: bool,
}

impl MetricReport {
    pub fn compute(
        generated: &[Vec<Point>],
        reference: &[Vec<Point>],
        with_emd: bool,
        completion: bool,
        seed: u64,
    ) -> Result<Self> {
        let cd = cov_mmd_nna(generated, reference, DistanceKind::Chamfer, completion)?;
        let emd = if with_emd {
            Some(cov_mmd_nna(generated, reference, DistanceKind::Emd, completion)?)
        } else {
            None
        };
        Ok(MetricReport {
            cd,
            emd,
            generated: generated.len(),
            reference: reference.len(),
            points: generated[0].len(),
            seed,
            completion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per distance kind.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,cov,mmd,nna,generated,reference,points,seed\n");
        let mut row = |name: &str, v: &MetricValues| {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{}\n",
                v.cov, v.mmd, v.nna, self.generated, self.reference, self.points, self.seed
            ));
        };
        row("cd", &self.cd);
        if let Some(e) = &self.emd {
            row("emd", e);
        }
        s
    }
}
