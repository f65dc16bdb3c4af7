//! The two downstream applications of per-sample confidence:
//! confidence-filtered self-training (curate → promote → finetune) and
//! confidence-gated sequence infilling (reject → interpolate).
//!
//! Both treat the confidence score u as a gate. Self-training keeps
//! predictions with u strictly below τ, promotes pose and shape to
//! training labels — the camera is instead re-fit per sample from the
//! visible 2D evidence, since it belongs to the view, not the body —
//! and finetunes on a pseudo/base mixture. Infilling rejects frames
//! with u strictly above τ_hi, re-synthesizes interior gaps by
//! per-part quaternion interpolation between the nearest accepted
//! frames (shape and camera linearly), and holds boundary runs from
//! the nearest accepted frame.
//!
//! Neither threshold is hard-coded: τ defaults to the grid value that
//! minimizes validation PVE, τ_hi to a percentile of validation u, and
//! both can be pinned to fixed values in the config.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape};
use crate::body::{self, BodyParams, Camera, NUM_PARTS};
use crate::checkpoint::Checkpoint;
use crate::config::{derive_seed, Config, ThresholdMode};
use crate::data::{BatchStream, SampleBatch};
use crate::losses::loss_total;
use crate::metrics;
use crate::model::PocoModel;
use crate::rot;
use crate::train::{evaluate, model_from_checkpoint, predict_u, Datasets};
use crate::{Error, Result};

const CHUNK: usize = 256;

/// Confidence-filtered predictions promoted to a training set.
pub struct PseudoGtPool {
    /// Accepted samples: original inputs/visibility, labels replaced by
    /// the model's own estimates (camera re-fit from 2D evidence).
    pub batch: SampleBatch,
    /// Confidence score of each accepted sample (all strictly < τ).
    pub u: Vec<f64>,
    pub rejected: usize,
    pub tau: f64,
}

/// Weak-perspective camera fit: least-squares (s, tx, ty) mapping
/// predicted joints onto the observed 2D keypoints over visible parts.
/// Needs at least two visible parts and a non-singular system.
pub fn fit_camera(
    j3d: &[[f64; 3]; NUM_PARTS],
    keypoints: &[[f64; 2]; NUM_PARTS],
    visibility: &[f64; NUM_PARTS],
) -> Option<Camera> {
    let visible: Vec<usize> = (0..NUM_PARTS).filter(|&j| visibility[j] != 0.0).collect();
    if visible.len() < 2 {
        return None;
    }
    let n = visible.len() as f64;
    let (mut a, mut b, mut c, mut d, mut e, mut f) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &j in &visible {
        let (x, y) = (j3d[j][0], j3d[j][1]);
        let (u, v) = (keypoints[j][0], keypoints[j][1]);
        a += x * x + y * y;
        b += x;
        c += y;
        d += x * u + y * v;
        e += u;
        f += v;
    }
    let m = Matrix3::new(a, b, c, b, n, 0.0, c, 0.0, n);
    let rhs = Vector3::new(d, e, f);
    let sol = m.lu().solve(&rhs)?;
    if !sol.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some(Camera {
        s: sol[0],
        tx: sol[1],
        ty: sol[2],
    })
}

fn input_keypoints(batch: &SampleBatch, i: usize) -> ([[f64; 2]; NUM_PARTS], [f64; NUM_PARTS]) {
    let mut kp = [[0.0; 2]; NUM_PARTS];
    let mut vis = [0.0; NUM_PARTS];
    for j in 0..NUM_PARTS {
        kp[j] = [batch.inputs[[i, 2 * j]], batch.inputs[[i, 2 * j + 1]]];
        vis[j] = batch.visibility[[i, j]];
    }
    (kp, vis)
}

/// Runs inference on an unlabeled pool and keeps predictions with
/// u strictly below τ, promoting them to labeled training samples.
pub fn curate(
    tape: &mut Tape,
    model: &PocoModel,
    pool: &SampleBatch,
    tau: f64,
) -> Result<PseudoGtPool> {
    let n = pool.len();
    let u_all = predict_u(tape, model, pool)?;
    let accepted_rows: Vec<usize> = (0..n).filter(|&i| u_all[i] < tau).collect();
    let mut batch = pool.select(&accepted_rows);

    // Re-run inference over the accepted rows to promote labels. The
    // extra pass costs one forward per chunk and keeps promotion
    // independent of how u was produced.
    let m = accepted_rows.len();
    let mut at = 0;
    while at < m {
        let hi = (at + CHUNK).min(m);
        let rows: Vec<usize> = (at..hi).collect();
        let chunk = batch.select(&rows);
        tape.reset();
        let fwd = model.forward(tape, &chunk.inputs)?;
        let theta = tape.data(fwd.theta).clone();
        let betas = tape.data(fwd.betas).clone();
        let camera = tape.data(fwd.camera).clone();
        for (local, dst) in (at..hi).enumerate() {
            let mut params = BodyParams::rest();
            for k in 0..NUM_PARTS * 3 {
                params.pose[k] = theta[[local, k]];
                batch.pose[[dst, k]] = theta[[local, k]];
            }
            for k in 0..crate::body::NUM_SHAPE {
                params.betas[k] = betas[[local, k]];
                batch.betas[[dst, k]] = betas[[local, k]];
            }
            let predicted_cam = Camera {
                s: camera[[local, 0]],
                tx: camera[[local, 1]],
                ty: camera[[local, 2]],
            };
            let (j3d, _) = model.skeleton.fk(&params);
            let (kp, vis) = input_keypoints(&batch, dst);
            // View evidence beats the regressed camera when available.
            let cam = fit_camera(&j3d, &kp, &vis).unwrap_or(predicted_cam);
            batch.camera[[dst, 0]] = cam.s;
            batch.camera[[dst, 1]] = cam.tx;
            batch.camera[[dst, 2]] = cam.ty;
            let j2d = body::project(&j3d, &cam);
            for j in 0..NUM_PARTS {
                for c in 0..3 {
                    batch.j3d[[dst, j, c]] = j3d[j][c];
                }
                batch.j2d[[dst, j, 0]] = j2d[j][0];
                batch.j2d[[dst, j, 1]] = j2d[j][1];
            }
        }
        at = hi;
    }
    tape.reset();

    Ok(PseudoGtPool {
        batch,
        u: accepted_rows.iter().map(|&i| u_all[i]).collect(),
        rejected: n - m,
        tau,
    })
}

/// Outcome of one self-training round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub tau: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub pve_before: f64,
    pub pve_after: f64,
    pub finetuned: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl BootstrapReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One self-training round: curate the pool at τ, mix the accepted
/// pseudo-labels with the base training data, finetune, and report
/// test PVE before and after. With nothing accepted the model is
/// returned untouched and the report carries a warning.
pub fn bootstrap(
    cfg: &Config,
    base: &Datasets,
    pool: &SampleBatch,
    tau: f64,
    ckpt: &Checkpoint,
) -> Result<(Checkpoint, BootstrapReport)> {
    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, cfg, ckpt)?;
    let pve_before = evaluate(&mut tape, &model, &base.test, false)?.report.pve;

    let pseudo = curate(&mut tape, &model, pool, tau)?;
    if pseudo.batch.is_empty() {
        let report = BootstrapReport {
            tau,
            accepted: 0,
            rejected: pseudo.rejected,
            pve_before,
            pve_after: pve_before,
            finetuned: false,
            warning: Some(format!(
                "no samples passed the confidence filter at tau = {tau}; finetune skipped"
            )),
        };
        return Ok((ckpt.clone(), report));
    }

    // Mixed stream: base sources keep their relative ratios inside the
    // (1 - pseudo_ratio) share; the pseudo pool takes the rest.
    let pseudo_share = cfg.pipeline.pseudo_ratio;
    let mut sources: Vec<&SampleBatch> = base.train.iter().collect();
    sources.push(&pseudo.batch);
    let mut ratios: Vec<f64> = cfg
        .mix_ratios()
        .iter()
        .map(|r| r * (1.0 - pseudo_share))
        .collect();
    ratios.push(pseudo_share);
    let mut stream = BatchStream::new(
        sources,
        &ratios,
        cfg.train.batch_size,
        derive_seed(cfg.seed, "bootstrap/stream"),
    )?;

    let mut adam = Adam::new(cfg.pipeline.finetune_lr);
    adam.beta1 = cfg.train.beta1;
    adam.beta2 = cfg.train.beta2;
    adam.eps = cfg.train.eps;
    let handles: Vec<_> = model.params().iter().map(|(_, v)| *v).collect();
    let variant = cfg.train.variant;
    for i in 0..cfg.pipeline.finetune_iters {
        let batch = stream.next_batch();
        tape.reset();
        let fwd = model.forward(&mut tape, &batch.inputs)?;
        let pred = model.prediction(&fwd);
        let bd = loss_total(&mut tape, &pred, &batch.targets(), &cfg.loss, variant)?;
        let loss = tape.data(bd.total)[[]];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finetune loss at iteration {}", i + 1),
            });
        }
        tape.backward(bd.total)?;
        adam.step(&mut tape, &handles);
    }

    let pve_after = evaluate(&mut tape, &model, &base.test, false)?.report.pve;
    let new_ckpt = Checkpoint::capture(
        &tape,
        model.params(),
        Some(&adam),
        &ckpt.config_hash,
        &ckpt.variant,
        &ckpt.model_toml,
        ckpt.iteration + cfg.pipeline.finetune_iters as u64,
        ckpt.stage,
        0,
    );
    let report = BootstrapReport {
        tau,
        accepted: pseudo.batch.len(),
        rejected: pseudo.rejected,
        pve_before,
        pve_after,
        finetuned: true,
        warning: None,
    };
    Ok((new_ckpt, report))
}

/// One point on the threshold sweep curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub accepted: usize,
    pub test_pve: f64,
}

/// Runs a bootstrap round per grid value and reports the resulting
/// test PVE curve.
pub fn sweep_threshold(
    cfg: &Config,
    base: &Datasets,
    pool: &SampleBatch,
    ckpt: &Checkpoint,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &tau in &cfg.pipeline.sweep_grid {
        let (_, report) = bootstrap(cfg, base, pool, tau, ckpt)?;
        rows.push(SweepRow {
            tau,
            accepted: report.accepted,
            test_pve: report.pve_after,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,accepted,test_pve\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.tau, r.accepted, r.test_pve));
    }
    out
}

/// The self-training threshold: the configured literal, or the grid
/// value whose bootstrap round minimizes validation PVE (ties go to
/// the smaller τ).
pub fn resolve_tau(
    cfg: &Config,
    base: &Datasets,
    pool: &SampleBatch,
    ckpt: &Checkpoint,
) -> Result<f64> {
    match cfg.pipeline.tau_mode {
        ThresholdMode::Fixed => Ok(cfg.pipeline.tau),
        ThresholdMode::Tuned => {
            let mut best = (f64::INFINITY, cfg.pipeline.sweep_grid[0]);
            for &tau in &cfg.pipeline.sweep_grid {
                let (new_ckpt, report) = bootstrap(cfg, base, pool, tau, ckpt)?;
                let mut tape = Tape::new();
                let model = model_from_checkpoint(&mut tape, cfg, &new_ckpt)?;
                let val_pve = evaluate(&mut tape, &model, &base.val, false)?.report.pve;
                let _ = report;
                if val_pve < best.0 {
                    best = (val_pve, tau);
                }
            }
            Ok(best.1)
        }
    }
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=100.0).contains(&p));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// The infilling rejection threshold: the configured literal, or a
/// percentile of the model's confidence scores on validation data.
pub fn resolve_tau_hi(
    cfg: &Config,
    tape: &mut Tape,
    model: &PocoModel,
    val: &SampleBatch,
) -> Result<f64> {
    match cfg.pipeline.tau_hi_mode {
        ThresholdMode::Fixed => Ok(cfg.pipeline.tau_hi),
        ThresholdMode::Tuned => {
            let u = predict_u(tape, model, val)?;
            Ok(percentile(&u, cfg.pipeline.tau_hi_percentile))
        }
    }
}

/// Raw per-frame inference over a sequence.
pub fn predict_frames(
    tape: &mut Tape,
    model: &PocoModel,
    seq: &SampleBatch,
) -> Result<Vec<(BodyParams, f64)>> {
    let n = seq.len();
    let u = predict_u(tape, model, seq)?;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    while at < n {
        let hi = (at + CHUNK).min(n);
        let rows: Vec<usize> = (at..hi).collect();
        let chunk = seq.select(&rows);
        tape.reset();
        let fwd = model.forward(tape, &chunk.inputs)?;
        let theta = tape.data(fwd.theta).clone();
        let betas = tape.data(fwd.betas).clone();
        let camera = tape.data(fwd.camera).clone();
        for local in 0..(hi - at) {
            let mut params = BodyParams::rest();
            for k in 0..NUM_PARTS * 3 {
                params.pose[k] = theta[[local, k]];
            }
            for k in 0..crate::body::NUM_SHAPE {
                params.betas[k] = betas[[local, k]];
            }
            params.camera = Camera {
                s: camera[[local, 0]],
                tx: camera[[local, 1]],
                ty: camera[[local, 2]],
            };
            out.push((params, u[at + local]));
        }
        at = hi;
    }
    tape.reset();
    Ok(out)
}

/// Applies the rejection gate and fills the gaps: interior rejected
/// frames get per-part quaternion interpolation between the nearest
/// accepted neighbors (shape/camera linear), leading and trailing
/// rejected runs hold the nearest accepted frame. Accepted frames pass
/// through untouched. Returns the final per-frame parameters and the
/// accepted mask.
pub fn infill_params(
    raw: &[(BodyParams, f64)],
    tau_hi: f64,
) -> Result<(Vec<BodyParams>, Vec<bool>)> {
    let n = raw.len();
    let accepted: Vec<bool> = raw.iter().map(|(_, u)| *u <= tau_hi).collect();
    if !accepted.iter().any(|&a| a) {
        return Err(Error::Degenerate(format!(
            "all {n} frames exceeded the rejection threshold {tau_hi}; nothing to anchor interpolation"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if accepted[t] {
            out.push(raw[t].0.clone());
            continue;
        }
        let prev = (0..t).rev().find(|&i| accepted[i]);
        let next = (t + 1..n).find(|&i| accepted[i]);
        let params = match (prev, next) {
            (Some(a), Some(b)) => {
                let s = (t - a) as f64 / (b - a) as f64;
                let pa = &raw[a].0;
                let pb = &raw[b].0;
                let mut p = BodyParams::rest();
                for j in 0..NUM_PARTS {
                    let wa = [pa.pose[3 * j], pa.pose[3 * j + 1], pa.pose[3 * j + 2]];
                    let wb = [pb.pose[3 * j], pb.pose[3 * j + 1], pb.pose[3 * j + 2]];
                    let w = rot::slerp_axis_angle(wa, wb, s);
                    p.pose[3 * j] = w[0];
                    p.pose[3 * j + 1] = w[1];
                    p.pose[3 * j + 2] = w[2];
                }
                for k in 0..crate::body::NUM_SHAPE {
                    p.betas[k] = (1.0 - s) * pa.betas[k] + s * pb.betas[k];
                }
                p.camera = Camera {
                    s: (1.0 - s) * pa.camera.s + s * pb.camera.s,
                    tx: (1.0 - s) * pa.camera.tx + s * pb.camera.tx,
                    ty: (1.0 - s) * pa.camera.ty + s * pb.camera.ty,
                };
                p
            }
            (None, Some(b)) => raw[b].0.clone(),
            (Some(a), None) => raw[a].0.clone(),
            (None, None) => unreachable!("at least one accepted frame exists"),
        };
        out.push(params);
    }
    Ok((out, accepted))
}

/// One frame of a gated-and-infilled sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub pose: Vec<f64>,
    pub betas: Vec<f64>,
    pub camera: Camera,
    pub u: f64,
    pub accepted: bool,
    pub infilled: bool,
    /// Root-relative joint error against the sequence's ground truth.
    pub mpjpe: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceResult {
    pub tau_hi: f64,
    pub frames: Vec<FrameRecord>,
}

impl SequenceResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean frame error over `[start, start+len)`.
    pub fn window_mpjpe(&self, start: usize, len: usize) -> f64 {
        let errs: Vec<f64> = self.frames[start..start + len]
            .iter()
            .map(|f| f.mpjpe)
            .collect();
        metrics::pairwise_sum(&errs) / errs.len() as f64
    }
}

/// Gated sequence inference: per-frame prediction, rejection at τ_hi,
/// gap infilling, and per-frame error against the sequence's ground
/// truth.
pub fn infill_sequence(
    tape: &mut Tape,
    model: &PocoModel,
    seq: &SampleBatch,
    tau_hi: f64,
) -> Result<SequenceResult> {
    let raw = predict_frames(tape, model, seq)?;
    let (params, accepted) = infill_params(&raw, tau_hi)?;
    let skeleton = &model.skeleton;
    let mut frames = Vec::with_capacity(raw.len());
    for (t, p) in params.iter().enumerate() {
        let (j3d, _) = skeleton.fk(p);
        let mut gt = [[0.0; 3]; NUM_PARTS];
        for j in 0..NUM_PARTS {
            for c in 0..3 {
                gt[j][c] = seq.j3d[[t, j, c]];
            }
        }
        frames.push(FrameRecord {
            frame: t,
            pose: p.pose.to_vec(),
            betas: p.betas.to_vec(),
            camera: p.camera,
            u: raw[t].1,
            accepted: accepted[t],
            infilled: !accepted[t],
            mpjpe: metrics::mpjpe_sample(&j3d, &gt),
        });
    }
    Ok(SequenceResult { tau_hi, frames })
}

/// Writes a report/curve pair (JSON + CSV) under a directory.
pub fn write_report(dir: &Path, stem: &str, json: &str, csv: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    if let Some(csv) = csv {
        std::fs::write(dir.join(format!("{stem}.csv")), csv)?;
    }
    Ok(())
}
