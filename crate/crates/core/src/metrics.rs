//! Evaluation metrics: joint errors (root-relative, Procrustes-aligned,
//! per-vertex) and the confidence/error correlation.
//!
//! World units are meters; every error is reported ×1000 as millimeters.
//! Means over samples use pairwise summation so the parallel and
//! sequential execution paths produce identical digits.
//!
//! Alignment conventions:
//!
//! * `mpjpe` subtracts the root joint (part 0) from both sets, then
//!   averages Euclidean joint distances.
//! * `pa_mpjpe` solves the similarity Procrustes problem — rotation,
//!   uniform scale, translation minimizing total squared error, via SVD
//!   with a det = +1 reflection guard — and averages the residual joint
//!   distances. The optimal transform already places the prediction, so
//!   no further root subtraction is applied.
//! * `pve` averages vertex distances with no alignment at all.

use nalgebra::{Matrix3, Vector3};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::body::{Skeleton, NUM_PARTS, NUM_VERTICES};
use crate::{exec, Error, Result};

/// Meters → millimeters.
const MM: f64 = 1000.0;

/// Sums in a fixed pairwise tree: deterministic and better conditioned
/// than a left fold, independent of how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Root-relative mean joint distance for one sample, in mm.
pub fn mpjpe_sample(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    assert!(!pred.is_empty());
    let (pr, gr) = (pred[0], gt[0]);
    let per: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            dist(
                [p[0] - pr[0], p[1] - pr[1], p[2] - pr[2]],
                [g[0] - gr[0], g[1] - gr[1], g[2] - gr[2]],
            )
        })
        .collect();
    mean(&per) * MM
}

/// Mean vertex distance for one sample, in mm. No alignment.
pub fn pve_sample(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let per: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).collect();
    mean(&per) * MM
}

/// The optimal similarity transform (s, R, t) mapping `pred` onto `gt`
/// in the least-squares sense, with R constrained to a proper rotation.
fn similarity_procrustes(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = pred.len();
    let mut mu_p = Vector3::zeros();
    let mut mu_g = Vector3::zeros();
    for j in 0..n {
        mu_p += Vector3::from(pred[j]);
        mu_g += Vector3::from(gt[j]);
    }
    mu_p /= n as f64;
    mu_g /= n as f64;

    // Cross-covariance (sum form) and source spread, plus a rank check:
    // with fewer than two independent directions in either cloud the
    // rotation is underdetermined.
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut cov_pp = Matrix3::zeros();
    let mut cov_gg = Matrix3::zeros();
    for j in 0..n {
        let p = Vector3::from(pred[j]) - mu_p;
        let g = Vector3::from(gt[j]) - mu_g;
        cov += g * p.transpose();
        cov_pp += p * p.transpose();
        cov_gg += g * g.transpose();
        var_p += p.norm_squared();
    }
    for (name, m) in [("prediction", &cov_pp), ("reference", &cov_gg)] {
        let sv = m.symmetric_eigen().eigenvalues;
        let mut ev: Vec<f64> = sv.iter().cloned().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if ev[1] <= 1e-18 + 1e-12 * ev[0].max(0.0) {
            return Err(Error::Degenerate(format!(
                "{name} joints are collinear or coincident; alignment is underdetermined"
            )));
        }
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut d: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .cloned()
        .zip(0..3)
        .map(|(s, i)| (s, i))
        .collect();
    d.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // Permute so singular values run descending; the reflection guard
    // flips the direction of least variance.
    let mut u_s = Matrix3::zeros();
    let mut v_t_s = Matrix3::zeros();
    for (k, (_, i)) in d.iter().enumerate() {
        u_s.set_column(k, &u.column(*i));
        v_t_s.set_row(k, &v_t.row(*i));
    }
    let sign = if (u_s.determinant() * v_t_s.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let guard = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u_s * guard * v_t_s;
    let trace_ds = d[0].0 + d[1].0 + sign * d[2].0;
    let s = trace_ds / var_p;
    let t = mu_g - r * mu_p * s;
    Ok((s, r, t))
}

/// Procrustes-aligned mean joint distance for one sample, in mm.
pub fn pa_mpjpe_sample(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    assert_eq!(pred.len(), gt.len());
    let (s, r, t) = similarity_procrustes(pred, gt)?;
    let per: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let aligned = r * Vector3::from(*p) * s + t;
            dist([aligned.x, aligned.y, aligned.z], *g)
        })
        .collect();
    Ok(mean(&per) * MM)
}

fn sample_rows(a: &ArrayD<f64>, i: usize) -> Vec<[f64; 3]> {
    let j = a.shape()[1];
    (0..j).map(|k| [a[[i, k, 0]], a[[i, k, 1]], a[[i, k, 2]]]).collect()
}

fn check_batch(op: &'static str, pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.ndim() != 3 || pred.shape()[2] != 3 {
        return Err(Error::Shape {
            op,
            detail: format!("expected matching [B, J, 3], got {:?} vs {:?}", pred.shape(), gt.shape()),
        });
    }
    Ok(())
}

/// Per-sample root-relative joint error over a `[B, J, 3]` batch, mm.
pub fn mpjpe(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<Vec<f64>> {
    check_batch("mpjpe", pred, gt)?;
    Ok(exec::map_indexed(pred.shape()[0], |i| {
        mpjpe_sample(&sample_rows(pred, i), &sample_rows(gt, i))
    }))
}

/// Per-sample Procrustes-aligned joint error over a `[B, J, 3]` batch, mm.
pub fn pa_mpjpe(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<Vec<f64>> {
    check_batch("pa_mpjpe", pred, gt)?;
    exec::map_indexed(pred.shape()[0], |i| {
        pa_mpjpe_sample(&sample_rows(pred, i), &sample_rows(gt, i))
    })
    .into_iter()
    .collect()
}

/// Per-sample vertex error over a `[B, V, 3]` batch, mm.
pub fn pve(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<Vec<f64>> {
    check_batch("pve", pred, gt)?;
    Ok(exec::map_indexed(pred.shape()[0], |i| {
        pve_sample(&sample_rows(pred, i), &sample_rows(gt, i))
    }))
}

/// Surface vertices for every sample of a `[B, 24, 3]` joint batch.
pub fn vertices_batch(skeleton: &Skeleton, j3d: &ArrayD<f64>) -> ArrayD<f64> {
    let b = j3d.shape()[0];
    let rows = exec::map_indexed(b, |i| {
        let mut joints = [[0.0; 3]; NUM_PARTS];
        for (j, joint) in joints.iter_mut().enumerate() {
            *joint = [j3d[[i, j, 0]], j3d[[i, j, 1]], j3d[[i, j, 2]]];
        }
        skeleton.vertices(&joints)
    });
    let mut out = ArrayD::zeros(IxDyn(&[b, NUM_VERTICES, 3]));
    for (i, verts) in rows.iter().enumerate() {
        for (v, vert) in verts.iter().enumerate() {
            for c in 0..3 {
                out[[i, v, c]] = vert[c];
            }
        }
    }
    out
}

/// Pearson correlation between confidence scores and errors. A
/// zero-variance input has no defined correlation: the result is 0 and
/// the returned flag is set.
pub fn pcc(u: &[f64], e: &[f64]) -> (f64, bool) {
    assert_eq!(u.len(), e.len());
    if u.len() < 2 {
        return (0.0, true);
    }
    let (mu, me) = (mean(u), mean(e));
    let du: Vec<f64> = u.iter().map(|x| x - mu).collect();
    let de: Vec<f64> = e.iter().map(|x| x - me).collect();
    let suu = pairwise_sum(&du.iter().map(|x| x * x).collect::<Vec<_>>());
    let see = pairwise_sum(&de.iter().map(|x| x * x).collect::<Vec<_>>());
    let sue = pairwise_sum(&du.iter().zip(&de).map(|(a, b)| a * b).collect::<Vec<_>>());
    if suu <= 0.0 || see <= 0.0 {
        return (0.0, true);
    }
    (sue / (suu * see).sqrt(), false)
}

/// Per-part correlation diagnostic over `[B, P]` confidence and error
/// arrays: one (pcc, degenerate) pair per part column.
pub fn pcc_per_part(u: &ArrayD<f64>, e: &ArrayD<f64>) -> Vec<(f64, bool)> {
    assert_eq!(u.shape(), e.shape());
    let (b, p) = (u.shape()[0], u.shape()[1]);
    (0..p)
        .map(|j| {
            let uc: Vec<f64> = (0..b).map(|i| u[[i, j]]).collect();
            let ec: Vec<f64> = (0..b).map(|i| e[[i, j]]).collect();
            pcc(&uc, &ec)
        })
        .collect()
}

/// Aggregate evaluation results with the per-sample arrays retained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Mean errors in mm.
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    /// Correlation between u and per-sample pose error.
    pub pcc: f64,
    /// True when the correlation was undefined (zero variance).
    pub pcc_degenerate: bool,
    pub per_sample_mpjpe: Vec<f64>,
    pub per_sample_pa_mpjpe: Vec<f64>,
    pub per_sample_pve: Vec<f64>,
    pub per_sample_u: Vec<f64>,
}

impl EvalReport {
    /// Assembles a report from per-sample metric arrays. The confidence
    /// score u pairs with root-relative error by default; `pair_with_pa`
    /// switches the correlation to the Procrustes-aligned error.
    pub fn new(
        per_mpjpe: Vec<f64>,
        per_pa: Vec<f64>,
        per_pve: Vec<f64>,
        u: Vec<f64>,
        pair_with_pa: bool,
    ) -> EvalReport {
        let e = if pair_with_pa { &per_pa } else { &per_mpjpe };
        let (pcc_value, degenerate) = pcc(&u, e);
        EvalReport {
            n: per_mpjpe.len(),
            mpjpe: mean(&per_mpjpe),
            pa_mpjpe: mean(&per_pa),
            pve: mean(&per_pve),
            pcc: pcc_value,
            pcc_degenerate: degenerate,
            per_sample_mpjpe: per_mpjpe,
            per_sample_pa_mpjpe: per_pa,
            per_sample_pve: per_pve,
            per_sample_u: u,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// (u, error) pairs as CSV for scatter plots, using the same error
    /// column the correlation used.
    pub fn scatter_csv(&self, pair_with_pa: bool) -> String {
        let e = if pair_with_pa {
            &self.per_sample_pa_mpjpe
        } else {
            &self.per_sample_mpjpe
        };
        let mut out = String::from("u,error_mm\n");
        for (u, e) in self.per_sample_u.iter().zip(e) {
            out.push_str(&format!("{u},{e}\n"));
        }
        out
    }
}
