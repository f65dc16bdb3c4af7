//! Training losses: three per-sample uncertainty formulations plus the
//! task terms that make up the full objective.
//!
//! All three uncertainty losses act on the scale-normalized pose
//! residual `(θ_g − θ)/σ`, with the per-part σ broadcast over that
//! part's 3 axis-angle components:
//!
//! * `loss_gauss` — heteroscedastic Gaussian NLL, `‖e‖²/(2σ²) + ½logσ²`.
//! * `loss_nflow` — flow NLL plus a standard-normal anchor `Q` on the
//!   residual and the `+ log σ` regularizer, all weighted 1.
//! * `loss_poco` — the same three terms under configurable weights
//!   (λ_nf, λ_q, λ_σ); `loss_nflow` is the λ=1 special case.
//!
//! `loss_total` adds shape, 3D-joint and visible-2D-keypoint MSEs and
//! returns a per-term breakdown whose parts sum to the total exactly.
//! Poses are compared as canonical axis-angle vectors (the body
//! module's convention) with a plain Euclidean norm.
//!
//! σ is floored at `sigma_min` by a soft clamp (zero gradient below the
//! floor, never an error); callers get back how many entries were
//! floored so training logs can surface near-collapse.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Value};
use crate::flow::{CondFlow, CondSource, LN_2PI};
use crate::{Error, Result};

/// Which uncertainty formulation a model trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No uncertainty head; plain pose MSE.
    Baseline,
    /// Gaussian NLL with a learned per-part σ.
    Gauss,
    /// Unconditional flow NLL (+ Q anchor + log σ).
    Nflow,
    /// Flow NLL with the σ head additionally conditioned on the
    /// predicted pose (rotation matrices).
    CondScale,
    /// Flow NLL with the flow conditioned on image features via the
    /// condition head; σ head sees image features only.
    CondBdf,
    /// Both conditioning paths: pose-conditioned σ head and
    /// image-conditioned flow, under the weighted objective.
    Poco,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Gauss,
        Variant::Nflow,
        Variant::CondScale,
        Variant::CondBdf,
        Variant::Poco,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gauss => "gauss",
            Variant::Nflow => "nflow",
            Variant::CondScale => "cond-scale",
            Variant::CondBdf => "cond-bdf",
            Variant::Poco => "poco",
        }
    }

    /// Does this variant produce a σ estimate at all?
    pub fn uses_sigma(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    /// Does this variant carry a normalizing flow?
    pub fn uses_flow(self) -> bool {
        matches!(
            self,
            Variant::Nflow | Variant::CondScale | Variant::CondBdf | Variant::Poco
        )
    }

    /// Does the σ head see the predicted rotations (pose conditioning)?
    pub fn sigma_sees_pose(self) -> bool {
        matches!(self, Variant::CondScale | Variant::Poco)
    }

    /// Is the flow conditioned on image features (condition head)?
    pub fn flow_sees_image(self) -> bool {
        matches!(self, Variant::CondBdf | Variant::Poco)
    }

    /// Does the weighted (λ) objective apply, rather than unit weights?
    pub fn weighted(self) -> bool {
        matches!(self, Variant::Poco)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}`; expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Weights for the loss terms, plus the σ floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the flow NLL term (weighted objective).
    pub lambda_nf: f64,
    /// Weight on the standard-normal anchor term.
    pub lambda_q: f64,
    /// Weight on the `log σ` regularizer.
    pub lambda_sigma: f64,
    /// Weight on the shape-coefficient MSE.
    pub lambda_beta: f64,
    /// Weight on the 3D joint MSE.
    pub lambda_3d: f64,
    /// Weight on the visible-2D keypoint MSE.
    pub lambda_2d: f64,
    /// Numerical floor applied to σ before any log or division.
    pub sigma_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_nf: 1e-4,
            lambda_q: 1e-2,
            lambda_sigma: 1e-4,
            lambda_beta: 1.0,
            lambda_3d: 1.0,
            lambda_2d: 1.0,
            sigma_min: 1e-6,
        }
    }
}

/// Everything the composed loss needs from a model forward pass.
pub struct Prediction<'a> {
    /// Predicted pose, `[B,72]` axis-angle.
    pub theta: Value,
    /// Predicted shape coefficients, `[B,10]`.
    pub betas: Value,
    /// Predicted camera `[B,3]` (s, tx, ty).
    pub camera: Value,
    /// FK joint positions from the prediction, `[B,24,3]`.
    pub j3d: Value,
    /// Projected keypoints from the prediction, `[B,24,2]`.
    pub j2d: Value,
    /// Per-part σ, `[B,24]`; `None` for the baseline.
    pub sigma: Option<Value>,
    /// The residual flow and its condition; `None` when the variant has
    /// no flow.
    pub flow: Option<(&'a CondFlow, CondSource)>,
}

/// Ground-truth arrays for one batch (host-side, turned into tape
/// constants internally).
pub struct Targets<'a> {
    pub pose: &'a ArrayD<f64>,
    pub betas: &'a ArrayD<f64>,
    pub j3d: &'a ArrayD<f64>,
    pub j2d: &'a ArrayD<f64>,
    /// 1.0 where the keypoint is visible, 0.0 where occluded, `[B,24]`.
    pub visibility: &'a ArrayD<f64>,
}

/// The composed loss and its λ-scaled contributions. The four term
/// nodes were added in order to build `total`, so their data sums to
/// the total to machine precision.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Value,
    /// Variant-specific pose term (unweighted by the task λs).
    pub pose: Value,
    /// λ_β-scaled shape MSE.
    pub beta: Value,
    /// λ_3D-scaled joint MSE.
    pub j3d: Value,
    /// λ_2D-scaled visible-keypoint MSE.
    pub j2d: Value,
    /// How many σ entries were below the floor this pass.
    pub sigma_clamped: usize,
}

/// Floors σ at `sigma_min` with a soft clamp: identity (unit gradient)
/// above the floor, constant (zero gradient) below it. Returns the
/// floored tensor and how many entries were clamped.
pub fn floor_sigma(tape: &mut Tape, sigma: Value, sigma_min: f64) -> (Value, usize) {
    let clamped = tape.data(sigma).iter().filter(|s| **s < sigma_min).count();
    let shape = tape.data(sigma).shape().to_vec();
    let floor = tape.constant(ArrayD::from_elem(IxDyn(&shape), sigma_min));
    let shifted = tape.sub(sigma, floor);
    let pos = tape.relu(shifted);
    let floored = tape.add(pos, floor);
    (floored, clamped)
}

/// `[B,72] → [B·24, 3]` part-major residual rows.
fn per_part_rows(tape: &mut Tape, v: Value) -> Value {
    let b = tape.data(v).shape()[0];
    tape.reshape(v, &[b * 24, 3])
}

/// Row sums of a `[N,k]` tensor as `[N,1]`.
fn row_sum(tape: &mut Tape, v: Value) -> Value {
    let k = tape.data(v).shape()[1];
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[k, 1]), 1.0));
    tape.matmul(v, ones)
}

fn scale_by(tape: &mut Tape, v: Value, c: f64) -> Value {
    let shape = tape.data(v).shape().to_vec();
    let k = tape.constant(ArrayD::from_elem(IxDyn(&shape), c));
    tape.mul(v, k)
}

/// σ as `[B·24, 1]` rows after flooring.
fn sigma_rows(tape: &mut Tape, sigma: Value, sigma_min: f64) -> (Value, usize) {
    let (floored, clamped) = floor_sigma(tape, sigma, sigma_min);
    let b = tape.data(floored).shape()[0];
    (tape.reshape(floored, &[b * 24, 1]), clamped)
}

/// Heteroscedastic Gaussian NLL: mean over samples and parts of
/// `‖θ_g − θ‖²/(2σ²) + ½·log σ²`.
pub fn loss_gauss(
    tape: &mut Tape,
    theta: Value,
    theta_g: Value,
    sigma: Value,
    sigma_min: f64,
) -> (Value, usize) {
    let d = tape.sub(theta_g, theta);
    let d2 = tape.square(d);
    let rows = per_part_rows(tape, d2);
    let ssq = row_sum(tape, rows);
    let (sig, clamped) = sigma_rows(tape, sigma, sigma_min);
    let sig2 = tape.square(sig);
    let denom = scale_by(tape, sig2, 2.0);
    let quad = tape.div(ssq, denom);
    let logsig = tape.log(sig); // ½·log σ² = log σ
    let per = tape.add(quad, logsig);
    (tape.mean(per), clamped)
}

/// Shared core of the flow-based losses:
/// `−λ_nf·log P_Φ(θ̄_g; cond) − λ_q·log Q(θ̄_g) + λ_σ·log σ`,
/// meaned over samples and parts.
///
/// With the default per-part flow (dim 3) every part contributes its
/// own row. With a full-pose flow (dim 72) the terms are per sample —
/// the log σ regularizer sums over parts — and the mean divides by the
/// part count so both layouts agree at the identity flow: θ = θ_g,
/// σ = 1 gives 3·ln 2π either way.
fn flow_family(
    tape: &mut Tape,
    theta: Value,
    theta_g: Value,
    sigma: Value,
    flow: &CondFlow,
    cond: CondSource,
    (l_nf, l_q, l_sigma): (f64, f64, f64),
    sigma_min: f64,
) -> (Value, usize) {
    let d = tape.sub(theta_g, theta);
    let per_part = flow.dim == 3;
    let b = tape.data(d).shape()[0];

    let (residual, log_sig_rows, clamped) = if per_part {
        let rows = per_part_rows(tape, d);
        let (sig, clamped) = sigma_rows(tape, sigma, sigma_min);
        let n = tape.data(sig).shape()[0];
        let sig3 = tape.broadcast_to(sig, &[n, 3]);
        (tape.div(rows, sig3), tape.log(sig), clamped)
    } else {
        let (floored, clamped) = floor_sigma(tape, sigma, sigma_min);
        let sig_col = tape.reshape(floored, &[b, 24, 1]);
        let sig_wide = tape.broadcast_to(sig_col, &[b, 24, 3]);
        let sig_flat = tape.reshape(sig_wide, &[b, 72]);
        let residual = tape.div(d, sig_flat);
        let logs = tape.log(floored);
        (residual, row_sum(tape, logs), clamped)
    };

    let log_p = flow.log_prob(tape, residual, cond);
    // Q: standard normal density of the residual.
    let r2 = tape.square(residual);
    let ssq = row_sum(tape, r2);
    let quad = scale_by(tape, ssq, -0.5);
    let log_q = {
        let n = tape.data(quad).shape()[0];
        let c = tape.constant(ArrayD::from_elem(
            IxDyn(&[n, 1]),
            -(flow.dim as f64) / 2.0 * LN_2PI,
        ));
        tape.add(quad, c)
    };

    let t_nf = scale_by(tape, log_p, -l_nf);
    let t_q = scale_by(tape, log_q, -l_q);
    let t_sig = scale_by(tape, log_sig_rows, l_sigma);
    let per = {
        let a = tape.add(t_nf, t_q);
        tape.add(a, t_sig)
    };
    let m = tape.mean(per);
    if per_part {
        (m, clamped)
    } else {
        (scale_by(tape, m, 1.0 / 24.0), clamped)
    }
}

/// Flow NLL with unit weights: mean over samples and parts of
/// `−log P_Φ(θ̄_g; cond) − log Q(θ̄_g) + log σ`. For the unconditional
/// variants pass [`CondSource::Zero`] (identical to a fixed zero
/// condition vector).
pub fn loss_nflow(
    tape: &mut Tape,
    theta: Value,
    theta_g: Value,
    sigma: Value,
    flow: &CondFlow,
    cond: CondSource,
    sigma_min: f64,
) -> (Value, usize) {
    flow_family(
        tape,
        theta,
        theta_g,
        sigma,
        flow,
        cond,
        (1.0, 1.0, 1.0),
        sigma_min,
    )
}

/// The weighted objective:
/// `−λ_nf·log P_Φ(θ̄_g; C_nf) − λ_q·log Q(θ̄_g) + λ_σ·log σ`.
pub fn loss_poco(
    tape: &mut Tape,
    theta: Value,
    theta_g: Value,
    sigma: Value,
    flow: &CondFlow,
    cond: CondSource,
    weights: &LossWeights,
) -> (Value, usize) {
    flow_family(
        tape,
        theta,
        theta_g,
        sigma,
        flow,
        cond,
        (weights.lambda_nf, weights.lambda_q, weights.lambda_sigma),
        weights.sigma_min,
    )
}

/// The variant-specific pose term on its own (what stage-2 uncertainty
/// training optimizes). Returns the scalar and the σ-floor count.
pub fn pose_term(
    tape: &mut Tape,
    variant: Variant,
    theta: Value,
    theta_g: Value,
    sigma: Option<Value>,
    flow: Option<(&CondFlow, CondSource)>,
    weights: &LossWeights,
) -> Result<(Value, usize)> {
    let need = |opt: Option<Value>, what: &str| {
        opt.ok_or_else(|| Error::Config(format!("variant {variant} requires {what}")))
    };
    match variant {
        Variant::Baseline => {
            let d = tape.sub(theta, theta_g);
            let d2 = tape.square(d);
            Ok((tape.mean(d2), 0))
        }
        Variant::Gauss => {
            let sigma = need(sigma, "a sigma estimate")?;
            Ok(loss_gauss(tape, theta, theta_g, sigma, weights.sigma_min))
        }
        Variant::Nflow | Variant::CondScale | Variant::CondBdf | Variant::Poco => {
            let sigma = need(sigma, "a sigma estimate")?;
            let (flow, cond) = flow.ok_or_else(|| {
                Error::Config(format!("variant {variant} requires a residual flow"))
            })?;
            let lam = if variant.weighted() {
                (weights.lambda_nf, weights.lambda_q, weights.lambda_sigma)
            } else {
                (1.0, 1.0, 1.0)
            };
            Ok(flow_family(
                tape,
                theta,
                theta_g,
                sigma,
                flow,
                cond,
                lam,
                weights.sigma_min,
            ))
        }
    }
}

/// Mean squared error over all elements of two same-shaped tensors.
fn mse(tape: &mut Tape, pred: Value, gt: &ArrayD<f64>) -> Value {
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g);
    let d2 = tape.square(d);
    tape.mean(d2)
}

/// The full training objective: variant pose term plus λ-weighted
/// shape, 3D-joint and visible-2D MSEs, with a per-term breakdown.
pub fn loss_total(
    tape: &mut Tape,
    pred: &Prediction,
    gt: &Targets,
    weights: &LossWeights,
    variant: Variant,
) -> Result<LossBreakdown> {
    let theta_g = tape.constant(gt.pose.clone());
    let (pose, sigma_clamped) =
        pose_term(tape, variant, pred.theta, theta_g, pred.sigma, pred.flow, weights)?;

    let beta_mse = mse(tape, pred.betas, gt.betas);
    let beta = scale_by(tape, beta_mse, weights.lambda_beta);

    let j3d_mse = mse(tape, pred.j3d, gt.j3d);
    let j3d = scale_by(tape, j3d_mse, weights.lambda_3d);

    // 2D term: per-element mean over visible keypoints only. With no
    // visible keypoints the masked sum is exactly zero.
    let b = gt.visibility.shape()[0];
    let g2d = tape.constant(gt.j2d.clone());
    let d2d = tape.sub(pred.j2d, g2d);
    let sq2d = tape.square(d2d);
    let vis = tape.constant(gt.visibility.clone());
    let vis3 = tape.reshape(vis, &[b, 24, 1]);
    let mask = tape.broadcast_to(vis3, &[b, 24, 2]);
    let masked = tape.mul(sq2d, mask);
    let total_masked = tape.sum(masked);
    let n_visible: f64 = gt.visibility.sum();
    let mean2d = scale_by(tape, total_masked, 1.0 / (2.0 * n_visible).max(1.0));
    let j2d = scale_by(tape, mean2d, weights.lambda_2d);

    let total = {
        let a = tape.add(pose, beta);
        let b = tape.add(a, j3d);
        tape.add(b, j2d)
    };
    Ok(LossBreakdown {
        total,
        pose,
        beta,
        j3d,
        j2d,
        sigma_clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ParamRegistry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const B: usize = 2;

    fn arr(shape: &[usize], f: impl FnMut() -> f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let mut f = f;
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| f()).collect()).unwrap()
    }

    fn identity_flow(tape: &mut Tape, rng: &mut ChaCha8Rng) -> CondFlow {
        let mut reg = ParamRegistry::new();
        CondFlow::new(tape, "flow", 3, 8, 16, rng, &mut reg)
    }

    fn random_flow(tape: &mut Tape, rng: &mut ChaCha8Rng) -> (CondFlow, ParamRegistry) {
        let mut reg = ParamRegistry::new();
        let f = CondFlow::new_random(tape, "flow", 3, 8, 16, rng, &mut reg);
        (f, reg)
    }

    #[test]
    fn gauss_frozen_values() {
        let mut tape = Tape::new();
        // Every part has error vector (2,0,0) and σ = 2:
        // per part 4/(2·4) + ½ln4 = ½ + ln 2.
        let mut tg = ArrayD::zeros(IxDyn(&[1, 72]));
        for j in 0..24 {
            tg[[0, 3 * j]] = 2.0;
        }
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let theta_g = tape.constant(tg);
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), 2.0));
        let (loss, clamped) = loss_gauss(&mut tape, theta, theta_g, sigma, 1e-6);
        let want = 0.5 + std::f64::consts::LN_2; // 1.193147…
        assert!((tape.data(loss)[[]] - want).abs() < 1e-12);
        assert_eq!(clamped, 0);

        // θ = θ_g, σ = e → ½·log e² = 1 exactly.
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), std::f64::consts::E));
        let (loss, _) = loss_gauss(&mut tape, theta, theta_g, sigma, 1e-6);
        assert!((tape.data(loss)[[]] - 1.0).abs() < 1e-12);

        // θ = θ_g, σ = 1 → 0.
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), 1.0));
        let (loss, _) = loss_gauss(&mut tape, theta, theta_g, sigma, 1e-6);
        assert_eq!(tape.data(loss)[[]], 0.0);
    }

    #[test]
    fn nflow_frozen_value_and_sigma_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut tape = Tape::new();
        let flow = identity_flow(&mut tape, &mut rng);
        let eval = |tape: &mut Tape, flow: &CondFlow, sig: f64| -> f64 {
            let theta = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
            let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
            let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[B, 24]), sig));
            let (loss, _) =
                loss_nflow(tape, theta, theta_g, sigma, flow, CondSource::Zero, 1e-6);
            tape.data(loss)[[]]
        };
        // Identity flow at zero residual: −2·log N(0; 0, I₃) = 3·ln 2π
        // per part (the spec sheet's 5.513630 is this value rounded).
        let at1 = eval(&mut tape, &flow, 1.0);
        assert!((at1 - 3.0 * LN_2PI).abs() < 1e-12, "got {at1}");
        // Doubling σ at zero residual adds exactly ln 2.
        let at2 = eval(&mut tape, &flow, 2.0);
        assert!((at2 - at1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// A full-pose (72-D) identity flow agrees with the per-part layout
    /// at the shared reference point.
    #[test]
    fn full_pose_flow_matches_per_part_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let flow72 = CondFlow::new(&mut tape, "flow", 72, 8, 16, &mut rng, &mut reg);
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
        let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[B, 24]), 1.0));
        let (loss, _) = loss_nflow(
            &mut tape,
            theta,
            theta_g,
            sigma,
            &flow72,
            CondSource::Zero,
            1e-6,
        );
        assert!((tape.data(loss)[[]] - 3.0 * LN_2PI).abs() < 1e-12);
        // σ doubled still adds exactly ln 2 (per part, after the 1/24).
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
        let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[B, 72])));
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[B, 24]), 2.0));
        let (l2, _) = loss_nflow(
            &mut tape,
            theta,
            theta_g,
            sigma,
            &flow72,
            CondSource::Zero,
            1e-6,
        );
        assert!((tape.data(l2)[[]] - 3.0 * LN_2PI - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn poco_frozen_value_and_unit_weight_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let flow = identity_flow(&mut tape, &mut rng);
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), 1.0));
        let w = LossWeights::default();
        let (loss, _) = loss_poco(
            &mut tape,
            theta,
            theta_g,
            sigma,
            &flow,
            CondSource::Zero,
            &w,
        );
        // (λ_nf + λ_q)·(3/2)·ln 2π ≈ 0.027844.
        let want = (1e-4 + 1e-2) * 1.5 * LN_2PI;
        assert!((tape.data(loss)[[]] - want).abs() < 1e-12);

        // Unit weights reproduce loss_nflow on arbitrary inputs.
        let t = arr(&[B, 72], || rng.gen_range(-1.0..1.0));
        let tg = arr(&[B, 72], || rng.gen_range(-1.0..1.0));
        let sg = arr(&[B, 24], || rng.gen_range(0.5..2.0));
        let unit = LossWeights {
            lambda_nf: 1.0,
            lambda_q: 1.0,
            lambda_sigma: 1.0,
            ..LossWeights::default()
        };
        let vt = tape.constant(t.clone());
        let vtg = tape.constant(tg.clone());
        let vs = tape.constant(sg.clone());
        let (a, _) = loss_poco(&mut tape, vt, vtg, vs, &flow, CondSource::Zero, &unit);
        let vt = tape.constant(t);
        let vtg = tape.constant(tg);
        let vs = tape.constant(sg);
        let (b, _) = loss_nflow(&mut tape, vt, vtg, vs, &flow, CondSource::Zero, 1e-6);
        assert!((tape.data(a)[[]] - tape.data(b)[[]]).abs() < 1e-15);
    }

    /// With the flow zeroed (identity), the flow NLL collapses to
    /// 2·GaussNLL(θ̄_g) + log σ — checked against a direct host-side
    /// evaluation of that formula.
    #[test]
    fn zero_flow_reduces_to_double_gauss_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut tape = Tape::new();
        let flow = identity_flow(&mut tape, &mut rng);
        let t = arr(&[B, 72], || rng.gen_range(-1.0..1.0));
        let tg = arr(&[B, 72], || rng.gen_range(-1.0..1.0));
        let sg = arr(&[B, 24], || rng.gen_range(0.5..2.0));
        let vt = tape.constant(t.clone());
        let vtg = tape.constant(tg.clone());
        let vs = tape.constant(sg.clone());
        let (loss, _) = loss_nflow(&mut tape, vt, vtg, vs, &flow, CondSource::Zero, 1e-6);

        let mut acc = 0.0;
        for s in 0..B {
            for j in 0..24 {
                let sig = sg[[s, j]];
                let mut ssq = 0.0;
                for k in 0..3 {
                    let r = (tg[[s, 3 * j + k]] - t[[s, 3 * j + k]]) / sig;
                    ssq += r * r;
                }
                let gauss_nll = 0.5 * ssq + 1.5 * LN_2PI;
                acc += 2.0 * gauss_nll + sig.ln();
            }
        }
        let want = acc / (B * 24) as f64;
        assert!((tape.data(loss)[[]] - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_reaches_theta_through_flow_and_q_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut tape = Tape::new();
        let (flow, _) = random_flow(&mut tape, &mut rng);
        let t = arr(&[B, 72], || rng.gen_range(-0.5..0.5));
        let tg = arr(&[B, 72], || rng.gen_range(-0.5..0.5));
        let sg = arr(&[B, 24], || rng.gen_range(0.8..1.2));
        let grad_theta = |tape: &mut Tape, l: (f64, f64, f64)| -> Vec<f64> {
            tape.reset();
            let vt = tape.constant(t.clone());
            let vtg = tape.constant(tg.clone());
            let vs = tape.constant(sg.clone());
            let w = LossWeights {
                lambda_nf: l.0,
                lambda_q: l.1,
                lambda_sigma: l.2,
                ..LossWeights::default()
            };
            let (loss, _) = loss_poco(tape, vt, vtg, vs, &flow, CondSource::Zero, &w);
            tape.backward(loss).unwrap();
            tape.grad(vt).unwrap().iter().copied().collect()
        };
        let full = grad_theta(&mut tape, (1.0, 1.0, 1.0));
        let p_only = grad_theta(&mut tape, (1.0, 0.0, 0.0));
        let q_only = grad_theta(&mut tape, (0.0, 1.0, 0.0));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&p_only) > 1e-9, "flow term contributes no θ gradient");
        assert!(norm(&q_only) > 1e-9, "Q term contributes no θ gradient");
        // Full gradient is the sum of the parts.
        for i in 0..full.len() {
            assert!((full[i] - p_only[i] - q_only[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn condition_is_live_with_a_nontrivial_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut tape = Tape::new();
        let (flow, _) = random_flow(&mut tape, &mut rng);
        let t = arr(&[1, 72], || rng.gen_range(-0.5..0.5));
        let tg = arr(&[1, 72], || rng.gen_range(-0.5..0.5));
        let sg = arr(&[1, 24], || 1.0);
        let w = LossWeights::default();
        let eval = |c: ArrayD<f64>, tape: &mut Tape| -> f64 {
            let vt = tape.constant(t.clone());
            let vtg = tape.constant(tg.clone());
            let vs = tape.constant(sg.clone());
            let vc = tape.constant(c);
            let (loss, _) = loss_poco(
                tape,
                vt,
                vtg,
                vs,
                &flow,
                CondSource::PerSample { cond: vc, parts: 24 },
                &w,
            );
            tape.data(loss)[[]]
        };
        let c1 = arr(&[1, 8], || rng.gen_range(-1.0..1.0));
        let c2 = arr(&[1, 8], || rng.gen_range(-1.0..1.0));
        let l1 = eval(c1, &mut tape);
        let l2 = eval(c2, &mut tape);
        assert!((l1 - l2).abs() > 1e-9, "condition vector has no effect");
    }

    #[test]
    fn gauss_minimum_sits_at_sigma_equals_error() {
        let mut tape = Tape::new();
        let e = 0.7;
        let mut tg = ArrayD::zeros(IxDyn(&[1, 72]));
        for j in 0..24 {
            tg[[0, 3 * j]] = e;
        }
        let dloss_dsigma = |tape: &mut Tape, sig: f64| -> f64 {
            tape.reset();
            let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
            let theta_g = tape.constant(tg.clone());
            let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), sig));
            let (loss, _) = loss_gauss(tape, theta, theta_g, sigma, 1e-6);
            tape.backward(loss).unwrap();
            tape.grad(sigma).unwrap()[[0, 0]]
        };
        // Derivative sign flips across σ = |e|.
        assert!(dloss_dsigma(&mut tape, e * 0.9) < 0.0);
        assert!(dloss_dsigma(&mut tape, e * 1.1) > 0.0);
        assert!(dloss_dsigma(&mut tape, e).abs() < 1e-9);
    }

    #[test]
    fn all_variants_increase_in_sigma_beyond_one_at_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut tape = Tape::new();
        let flow = identity_flow(&mut tape, &mut rng);
        let w = LossWeights::default();
        for variant in [Variant::Gauss, Variant::Nflow, Variant::Poco] {
            let eval = |tape: &mut Tape, s: f64| -> f64 {
                let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
                let theta_g = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
                let sigma = tape.constant(ArrayD::from_elem(IxDyn(&[1, 24]), s));
                let (loss, _) = pose_term(
                    tape,
                    variant,
                    theta,
                    theta_g,
                    Some(sigma),
                    Some((&flow, CondSource::Zero)),
                    &w,
                )
                .unwrap();
                tape.data(loss)[[]]
            };
            let mut prev = eval(&mut tape, 1.0);
            for s in [1.5, 2.5, 4.0, 8.0] {
                let cur = eval(&mut tape, s);
                assert!(cur > prev, "{variant}: loss not increasing at σ={s}");
                prev = cur;
            }
        }
    }

    #[test]
    fn sigma_floor_clamps_and_counts() {
        let mut tape = Tape::new();
        let mut s = ArrayD::from_elem(IxDyn(&[1, 24]), 1.0);
        s[[0, 0]] = 1e-9;
        s[[0, 5]] = -0.5;
        let sigma = tape.constant(s);
        let (floored, clamped) = floor_sigma(&mut tape, sigma, 1e-6);
        assert_eq!(clamped, 2);
        assert_eq!(tape.data(floored)[[0, 0]], 1e-6);
        assert_eq!(tape.data(floored)[[0, 5]], 1e-6);
        assert_eq!(tape.data(floored)[[0, 1]], 1.0);
        // Loss stays finite with a degenerate σ.
        let theta = tape.constant(ArrayD::zeros(IxDyn(&[1, 72])));
        let theta_g = tape.constant(ArrayD::from_elem(IxDyn(&[1, 72]), 0.3));
        let mut s = ArrayD::from_elem(IxDyn(&[1, 24]), 1.0);
        s[[0, 3]] = 0.0;
        let sigma = tape.constant(s);
        let (loss, clamped) = loss_gauss(&mut tape, theta, theta_g, sigma, 1e-6);
        assert_eq!(clamped, 1);
        assert!(tape.data(loss)[[]].is_finite());
    }

    struct GtArrays {
        pose: ArrayD<f64>,
        betas: ArrayD<f64>,
        j3d: ArrayD<f64>,
        j2d: ArrayD<f64>,
        visibility: ArrayD<f64>,
    }

    impl GtArrays {
        fn random(rng: &mut ChaCha8Rng) -> Self {
            GtArrays {
                pose: arr(&[B, 72], || rng.gen_range(-1.0..1.0)),
                betas: arr(&[B, 10], || rng.gen_range(-1.0..1.0)),
                j3d: arr(&[B, 24, 3], || rng.gen_range(-1.0..1.0)),
                j2d: arr(&[B, 24, 2], || rng.gen_range(-1.0..1.0)),
                visibility: arr(&[B, 24], || if rng.gen_bool(0.7) { 1.0 } else { 0.0 }),
            }
        }

        fn targets(&self) -> Targets<'_> {
            Targets {
                pose: &self.pose,
                betas: &self.betas,
                j3d: &self.j3d,
                j2d: &self.j2d,
                visibility: &self.visibility,
            }
        }

        /// A prediction offset from this ground truth by `jitter`
        /// (zero jitter = perfect prediction).
        fn prediction(
            &self,
            tape: &mut Tape,
            rng: &mut ChaCha8Rng,
            jitter: f64,
        ) -> Prediction<'static> {
            let mk = |tape: &mut Tape, a: &ArrayD<f64>, rng: &mut ChaCha8Rng| {
                let noisy = if jitter > 0.0 {
                    a.mapv(|x| x + rng.gen_range(-jitter..jitter))
                } else {
                    a.clone()
                };
                tape.constant(noisy)
            };
            Prediction {
                theta: mk(tape, &self.pose, rng),
                betas: mk(tape, &self.betas, rng),
                camera: tape.constant(arr(&[B, 3], || 1.0)),
                j3d: mk(tape, &self.j3d, rng),
                j2d: mk(tape, &self.j2d, rng),
                sigma: Some(tape.constant(arr(&[B, 24], || rng.gen_range(0.5..2.0)))),
                flow: None,
            }
        }
    }

    #[test]
    fn breakdown_sums_to_total_and_perfect_prediction_zeroes_task_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut tape = Tape::new();
        let w = LossWeights {
            lambda_beta: 0.7,
            lambda_3d: 1.3,
            lambda_2d: 0.4,
            ..LossWeights::default()
        };
        let gt = GtArrays::random(&mut rng);
        let pred = gt.prediction(&mut tape, &mut rng, 0.1);
        let bd = loss_total(&mut tape, &pred, &gt.targets(), &w, Variant::Gauss).unwrap();
        let sum = tape.data(bd.pose)[[]]
            + tape.data(bd.beta)[[]]
            + tape.data(bd.j3d)[[]]
            + tape.data(bd.j2d)[[]];
        assert!((sum - tape.data(bd.total)[[]]).abs() < 1e-12);
        assert!(tape.data(bd.beta)[[]] > 0.0);
        assert!(tape.data(bd.j3d)[[]] > 0.0);

        // Perfect prediction: task terms exactly zero.
        let pred = gt.prediction(&mut tape, &mut rng, 0.0);
        let bd = loss_total(&mut tape, &pred, &gt.targets(), &w, Variant::Gauss).unwrap();
        assert_eq!(tape.data(bd.beta)[[]], 0.0);
        assert_eq!(tape.data(bd.j3d)[[]], 0.0);
        assert_eq!(tape.data(bd.j2d)[[]], 0.0);
    }

    #[test]
    fn fully_occluded_batch_zeroes_2d_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut tape = Tape::new();
        let mut gt = GtArrays::random(&mut rng);
        gt.visibility = ArrayD::zeros(IxDyn(&[B, 24]));
        let pred = gt.prediction(&mut tape, &mut rng, 0.2);
        let w = LossWeights::default();
        let bd = loss_total(&mut tape, &pred, &gt.targets(), &w, Variant::Gauss).unwrap();
        assert_eq!(tape.data(bd.j2d)[[]], 0.0);
    }

    #[test]
    fn missing_heads_are_reported_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut tape = Tape::new();
        let gt = GtArrays::random(&mut rng);
        let mut pred = gt.prediction(&mut tape, &mut rng, 0.1);
        pred.sigma = None;
        let w = LossWeights::default();
        let err = loss_total(&mut tape, &pred, &gt.targets(), &w, Variant::Gauss).unwrap_err();
        assert!(err.to_string().contains("sigma"));
        let ok = loss_total(&mut tape, &pred, &gt.targets(), &w, Variant::Baseline);
        assert!(ok.is_ok(), "baseline needs no sigma");
    }

    #[test]
    fn variant_parsing_round_trips_and_rejects_unknown() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "gaussian".parse::<Variant>().unwrap_err().to_string();
        for v in Variant::ALL {
            assert!(err.contains(v.name()), "error should list {v}");
        }
    }
}
