//! The regression model: a shared feature extractor and up to five
//! heads — pose, shape, camera, the pose-conditioned scale network, and
//! the flow-condition mapper — all evaluated in one forward pass.
//!
//! Only the components a variant actually trains are constructed, so
//! parameter counts reflect what the variant pays for:
//!
//! * every variant: backbone + pose/shape/camera heads,
//! * σ-bearing variants: the scale network (features → 216, then
//!   `[216 features ⊕ 216 flattened rotation matrices] → 24` raw
//!   log-scales, soft-clamped to ±7 before exp),
//! * flow variants: the residual flow,
//! * image-conditioned variants: the condition head (features → C_nf).
//!
//! The rotation input to the scale network is detached by default —
//! σ observes the predicted pose without pushing gradients back into
//! the pose head (`scale_grad_through_pose` flips that). Variants whose
//! σ is not pose-conditioned feed zeros into the rotation slot instead.
//!
//! A forward pass increments an atomic counter: downstream code can
//! assert that confidence scores cost exactly one backbone evaluation.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Tape, Value};
use crate::body::{self, Skeleton, NUM_PARTS, NUM_SHAPE};
use crate::config::ModelConfig;
use crate::data::INPUT_DIM;
use crate::flow::{CondFlow, CondSource, ParamRegistry};
use crate::losses::{self, Variant};
use crate::{Error, Result};

/// Flattened 24×3×3 rotation matrices.
const ROT_DIM: usize = NUM_PARTS * 9;
/// Scale-network hidden width (feature downsample), fixed by design.
const SC_HIDDEN: usize = 216;

struct Linear {
    name: String,
    w: Value,
    b: Value,
    cols: usize,
}

impl Linear {
    fn new(
        tape: &mut Tape,
        registry: &mut ParamRegistry,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let w = tape.persistent(ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
            rng.gen_range(-a..a)
        }));
        let b = tape.persistent(ArrayD::zeros(IxDyn(&[1, cols])));
        registry.push((format!("{name}.w"), w));
        registry.push((format!("{name}.b"), b));
        Linear {
            name: name.to_string(),
            w,
            b,
            cols,
        }
    }

    fn apply(&self, tape: &mut Tape, x: Value) -> Value {
        let n = tape.data(x).shape()[0];
        let xw = tape.matmul(x, self.w);
        let b = tape.broadcast_to(self.b, &[n, self.cols]);
        tape.add(xw, b)
    }

}

/// One forward pass's outputs, as tape nodes.
#[derive(Debug)]
pub struct Forward {
    /// `[B, 74]` input constant (handy for probing).
    pub inputs: Value,
    /// `[B, F]` backbone features.
    pub features: Value,
    /// `[B, 72]` predicted pose.
    pub theta: Value,
    /// `[B, 10]` predicted shape.
    pub betas: Value,
    /// `[B, 3]` camera (s, tx, ty) with s = exp(raw) > 0.
    pub camera: Value,
    /// `[B, 24, 3, 3]` rotation matrices of the predicted pose.
    pub rotmats: Value,
    /// `[B, 24, 3]` joints from forward kinematics.
    pub j3d: Value,
    /// `[B, 24, 2]` projected keypoints.
    pub j2d: Value,
    /// `[B, 24]` per-part σ (absent for the baseline).
    pub sigma: Option<Value>,
    /// `[B, C_nf]` flow condition (image-conditioned variants only).
    pub cond: Option<Value>,
}

/// The model: parameter handles live on one tape; every forward must
/// run on that same tape.
pub struct PocoModel {
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub skeleton: Skeleton,
    backbone: Vec<Linear>,
    pose_head: Linear,
    shape_head: Linear,
    camera_head: Linear,
    sc1: Option<Linear>,
    sc2: Option<Linear>,
    nf_head: Option<Linear>,
    pub flow: Option<CondFlow>,
    params: ParamRegistry,
    backbone_evals: AtomicU64,
}

impl PocoModel {
    /// Builds a model for `variant`, registering parameters as
    /// persistent tape nodes. Construction is deterministic in `seed`.
    pub fn new(
        tape: &mut Tape,
        cfg: &ModelConfig,
        variant: Variant,
        skeleton: Skeleton,
        seed: u64,
    ) -> PocoModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let h = cfg.hidden_dim;
        let f = cfg.feature_dim;
        let backbone = vec![
            Linear::new(tape, &mut params, "backbone.l1", INPUT_DIM, h, &mut rng),
            Linear::new(tape, &mut params, "backbone.l2", h, h, &mut rng),
            Linear::new(tape, &mut params, "backbone.l3", h, f, &mut rng),
        ];
        let pose_head = Linear::new(tape, &mut params, "head.pose", f, NUM_PARTS * 3, &mut rng);
        let shape_head = Linear::new(tape, &mut params, "head.shape", f, NUM_SHAPE, &mut rng);
        let camera_head = Linear::new(tape, &mut params, "head.camera", f, 3, &mut rng);

        let (sc1, sc2) = if variant.uses_sigma() {
            (
                Some(Linear::new(tape, &mut params, "sc.l1", f, SC_HIDDEN, &mut rng)),
                Some(Linear::new(
                    tape,
                    &mut params,
                    "sc.l2",
                    SC_HIDDEN + ROT_DIM,
                    NUM_PARTS,
                    &mut rng,
                )),
            )
        } else {
            (None, None)
        };
        let nf_head = if variant.flow_sees_image() {
            Some(Linear::new(tape, &mut params, "nf", f, cfg.cond_dim, &mut rng))
        } else {
            None
        };
        let flow = if variant.uses_flow() {
            let dim = if cfg.full_pose_flow { NUM_PARTS * 3 } else { 3 };
            Some(CondFlow::new(
                tape,
                "flow",
                dim,
                cfg.cond_dim,
                cfg.flow_hidden,
                &mut rng,
                &mut params,
            ))
        } else {
            None
        };
        PocoModel {
            variant,
            cfg: cfg.clone(),
            skeleton,
            backbone,
            pose_head,
            shape_head,
            camera_head,
            sc1,
            sc2,
            nf_head,
            flow,
            params,
            backbone_evals: AtomicU64::new(0),
        }
    }

    /// Named parameter handles (checkpointing, optimizer masking,
    /// gradient certification).
    pub fn params(&self) -> &[(String, Value)] {
        &self.params
    }

    /// Parameters whose name starts with any of the given prefixes.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Value)> {
        self.params
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect()
    }

    /// How many forward passes the backbone has run.
    pub fn backbone_evals(&self) -> u64 {
        self.backbone_evals.load(Ordering::Relaxed)
    }

    fn check_finite(&self, tape: &Tape, v: Value, layer: &str) -> Result<()> {
        if tape.data(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: format!("model layer {layer}"),
            })
        }
    }

    /// Soft clamp to ±7: `-7 + relu(x+7) - relu(x-7)` (identity inside
    /// the band, constant outside).
    fn clamp7(tape: &mut Tape, x: Value) -> Value {
        let shape = tape.data(x).shape().to_vec();
        let seven = tape.constant(ArrayD::from_elem(IxDyn(&shape), 7.0));
        let lo = tape.add(x, seven);
        let lo = tape.relu(lo);
        let hi = tape.sub(x, seven);
        let hi = tape.relu(hi);
        let band = tape.sub(lo, hi);
        tape.sub(band, seven)
    }

    /// Runs the model on a batch of inputs (`[B, 74]` host array). One
    /// call = one backbone evaluation, whatever is read out afterwards.
    pub fn forward(&self, tape: &mut Tape, inputs: &ArrayD<f64>) -> Result<Forward> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != INPUT_DIM {
            return Err(Error::Shape {
                op: "model.forward",
                detail: format!("expected [B, {INPUT_DIM}] inputs, got {shape:?}"),
            });
        }
        let b = shape[0];
        self.backbone_evals.fetch_add(1, Ordering::Relaxed);

        let x = tape.constant(inputs.clone());
        let mut h = x;
        for (i, layer) in self.backbone.iter().enumerate() {
            let lin = layer.apply(tape, h);
            h = tape.tanh(lin);
            self.check_finite(tape, h, &format!("backbone.l{}", i + 1))?;
        }
        let features = h;

        let theta = self.pose_head.apply(tape, features);
        self.check_finite(tape, theta, &self.pose_head.name)?;
        let betas = self.shape_head.apply(tape, features);
        self.check_finite(tape, betas, &self.shape_head.name)?;
        let cam_raw = self.camera_head.apply(tape, features);
        self.check_finite(tape, cam_raw, &self.camera_head.name)?;
        // Positive scale: s = exp(raw s), translations pass through.
        let s_raw = tape.slice(cam_raw, 1, 0, 1);
        let s = tape.exp(s_raw);
        let t = tape.slice(cam_raw, 1, 1, 3);
        let camera = tape.concat(&[s, t], 1);

        let rotmats = body::rotmats_tape(tape, theta);
        let j3d = body::fk_tape(tape, &self.skeleton, rotmats, betas);
        let j2d = body::project_tape(tape, j3d, camera);
        self.check_finite(tape, j2d, "projection")?;

        let sigma = match (&self.sc1, &self.sc2) {
            (Some(sc1), Some(sc2)) => {
                let down = sc1.apply(tape, features);
                let down = tape.tanh(down);
                let rot_slot = if !self.variant.sigma_sees_pose() {
                    tape.constant(ArrayD::zeros(IxDyn(&[b, ROT_DIM])))
                } else if self.cfg.scale_grad_through_pose {
                    tape.reshape(rotmats, &[b, ROT_DIM])
                } else {
                    // Detached: σ sees the pose's value, the pose head
                    // sees none of σ's gradient.
                    let detached = tape.constant(tape.data(rotmats).clone());
                    tape.reshape(detached, &[b, ROT_DIM])
                };
                let joint = tape.concat(&[down, rot_slot], 1);
                let raw = sc2.apply(tape, joint);
                self.check_finite(tape, raw, &sc2.name)?;
                let clamped = Self::clamp7(tape, raw);
                Some(tape.exp(clamped))
            }
            _ => None,
        };

        let cond = match &self.nf_head {
            Some(nf) => {
                let c = nf.apply(tape, features);
                self.check_finite(tape, c, &nf.name)?;
                Some(c)
            }
            None => None,
        };

        Ok(Forward {
            inputs: x,
            features,
            theta,
            betas,
            camera,
            rotmats,
            j3d,
            j2d,
            sigma,
            cond,
        })
    }

    /// The flow condition source for a forward pass: image features for
    /// the conditioned variants (tiled per part for the 3-D flow), no
    /// conditioning otherwise.
    pub fn cond_source(&self, fwd: &Forward) -> CondSource {
        match (&self.flow, fwd.cond) {
            (Some(flow), Some(cond)) => {
                if flow.dim == 3 {
                    CondSource::PerSample {
                        cond,
                        parts: NUM_PARTS,
                    }
                } else {
                    CondSource::PerRow(cond)
                }
            }
            _ => CondSource::Zero,
        }
    }

    /// Packages a forward pass for the loss module.
    pub fn prediction<'m>(&'m self, fwd: &Forward) -> losses::Prediction<'m> {
        losses::Prediction {
            theta: fwd.theta,
            betas: fwd.betas,
            camera: fwd.camera,
            j3d: fwd.j3d,
            j2d: fwd.j2d,
            sigma: fwd.sigma,
            flow: self.flow.as_ref().map(|f| (f, self.cond_source(fwd))),
        }
    }

    /// Total parameter count.
    pub fn param_count(&self, tape: &Tape) -> usize {
        self.params.iter().map(|(_, v)| tape.data(*v).len()).sum()
    }

    /// Per-component parameter counts: (component, parameters).
    pub fn param_breakdown(&self, tape: &Tape) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, v) in &self.params {
            let comp = name.split('.').next().unwrap_or("other").to_string();
            let comp = match comp.as_str() {
                "backbone" => "backbone".to_string(),
                "head" => "task-heads".to_string(),
                "sc" => "scale-net".to_string(),
                "nf" => "condition-head".to_string(),
                "flow" => "flow".to_string(),
                other => other.to_string(),
            };
            let n = tape.data(*v).len();
            match groups.iter_mut().find(|(c, _)| *c == comp) {
                Some((_, total)) => *total += n,
                None => groups.push((comp, n)),
            }
        }
        groups
    }

    /// (baseline core, uncertainty additions, ratio) — the additions
    /// are everything beyond backbone + task heads.
    pub fn overhead_report(&self, tape: &Tape) -> (usize, usize, f64) {
        let mut core = 0;
        let mut added = 0;
        for (comp, n) in self.param_breakdown(tape) {
            match comp.as_str() {
                "backbone" | "task-heads" => core += n,
                _ => added += n,
            }
        }
        (core, added, added as f64 / core.max(1) as f64)
    }
}

/// Sums σ along each root→part chain, min-max normalizes the sums to
/// [0,1] per sample, and returns the per-part aggregate plus the mean
/// u. A degenerate sample (max = min) normalizes to all zeros, u = 0.
pub fn aggregate_uncertainty(
    sigma: &[f64],
    parents: &[Option<usize>],
) -> (Vec<f64>, f64) {
    assert_eq!(sigma.len(), parents.len());
    let n = sigma.len();
    let mut agg = vec![0.0; n];
    for j in 0..n {
        agg[j] = sigma[j]
            + match parents[j] {
                Some(p) => {
                    assert!(p < j, "parents must precede children");
                    agg[p]
                }
                None => 0.0,
            };
    }
    let lo = agg.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = agg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let normalized: Vec<f64> = if range <= 1e-12 {
        vec![0.0; n]
    } else {
        agg.iter().map(|a| (a - lo) / range).collect()
    };
    let u = normalized.iter().sum::<f64>() / n as f64;
    (normalized, u)
}

/// Per-sample u for a `[B, 24]` σ array under the body skeleton.
pub fn uncertainty_batch(sigma: &ArrayD<f64>, skeleton: &Skeleton) -> Vec<f64> {
    let b = sigma.shape()[0];
    (0..b)
        .map(|i| {
            let row: Vec<f64> = (0..NUM_PARTS).map(|j| sigma[[i, j]]).collect();
            aggregate_uncertainty(&row, &skeleton.parent).1
        })
        .collect()
}
