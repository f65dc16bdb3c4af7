//! Toy articulated body: a fixed 24-part kinematic tree with
//! shape-dependent bone lengths, surrogate vertices and a
//! weak-perspective camera.
//!
//! The skeleton is a crate constant ([`Skeleton::toy`]) so that every
//! run, test and dumped artifact agrees on the topology. Forward
//! kinematics exists twice with identical semantics: a plain `f64`
//! version used by the dataset generator and the evaluators, and a
//! tape version ([`fk_tape`] and friends) used inside training losses so
//! pose gradients flow through joint positions and projections.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Value};
use crate::rot;

/// Number of body parts (kinematic tree nodes).
pub const NUM_PARTS: usize = 24;
/// Number of surrogate vertices.
pub const NUM_VERTICES: usize = 64;
/// Dimension of the shape (bone-scale) coefficient vector.
pub const NUM_SHAPE: usize = 10;

/// Human-readable part names, index-aligned with the parent array.
pub const PART_NAMES: [&str; NUM_PARTS] = [
    "pelvis", "spine", "neck", "head", "l_hip", "l_knee", "l_ankle", "l_toe", "r_hip", "r_knee",
    "r_ankle", "r_toe", "l_collar", "l_shoulder", "l_elbow", "l_wrist", "l_hand", "r_collar",
    "r_shoulder", "r_elbow", "r_wrist", "r_hand", "l_foot", "r_foot",
];

/// Parent of each part; `None` marks the single root (index 0).
/// Chains: pelvis→spine trunk, spine→neck→head, two hip→knee→ankle→toe
/// legs, two collar→shoulder→elbow→wrist→hand arms, and one extra
/// foot part hanging off each ankle.
pub const PARENT: [Option<usize>; NUM_PARTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(6),
    Some(0),
    Some(8),
    Some(9),
    Some(10),
    Some(1),
    Some(12),
    Some(13),
    Some(14),
    Some(15),
    Some(1),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(6),
    Some(10),
];

/// Rest-pose offset of each part from its parent, in meters.
const REST_OFFSETS: [[f64; 3]; NUM_PARTS] = [
    [0.0, 0.0, 0.0],     // pelvis (root, at origin)
    [0.0, 0.25, 0.0],    // spine
    [0.0, 0.22, 0.0],    // neck
    [0.0, 0.15, 0.0],    // head
    [0.10, -0.05, 0.0],  // l_hip
    [0.02, -0.40, 0.0],  // l_knee
    [-0.01, -0.42, 0.0], // l_ankle
    [0.02, -0.06, 0.12], // l_toe
    [-0.10, -0.05, 0.0], // r_hip
    [-0.02, -0.40, 0.0], // r_knee
    [0.01, -0.42, 0.0],  // r_ankle
    [-0.02, -0.06, 0.12],// r_toe
    [0.07, 0.20, 0.0],   // l_collar
    [0.12, 0.02, 0.0],   // l_shoulder
    [0.26, 0.0, 0.0],    // l_elbow
    [0.25, 0.0, 0.0],    // l_wrist
    [0.08, 0.0, 0.0],    // l_hand
    [-0.07, 0.20, 0.0],  // r_collar
    [-0.12, 0.02, 0.0],  // r_shoulder
    [-0.26, 0.0, 0.0],   // r_elbow
    [-0.25, 0.0, 0.0],   // r_wrist
    [-0.08, 0.0, 0.0],   // r_hand
    [0.03, -0.03, 0.08], // l_foot
    [-0.03, -0.03, 0.08],// r_foot
];

/// Weak-perspective camera: `(x, y, z) ↦ (s·x + tx, s·y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Full pose/shape/camera description of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    /// 24 axis-angle rotations, flattened part-major. Canonical form
    /// keeps each ‖ω‖ in [0, π]; see [`BodyParams::canonicalize`].
    pub pose: [f64; NUM_PARTS * 3],
    /// Bone-scale basis coefficients.
    pub betas: [f64; NUM_SHAPE],
    pub camera: Camera,
}

impl BodyParams {
    pub fn rest() -> Self {
        BodyParams {
            pose: [0.0; NUM_PARTS * 3],
            betas: [0.0; NUM_SHAPE],
            camera: Camera {
                s: 1.0,
                tx: 0.0,
                ty: 0.0,
            },
        }
    }

    /// Wraps every per-part rotation into the canonical ‖ω‖ ∈ [0, π]
    /// encoding (same rotations, unique representation).
    pub fn canonicalize(&mut self) {
        for j in 0..NUM_PARTS {
            let w = rot::canonicalize([
                self.pose[3 * j],
                self.pose[3 * j + 1],
                self.pose[3 * j + 2],
            ]);
            self.pose[3 * j] = w[0];
            self.pose[3 * j + 1] = w[1];
            self.pose[3 * j + 2] = w[2];
        }
    }
}

/// The fixed kinematic tree plus its derived constants: rest offsets,
/// sparse vertex weights and the random bone-scale basis. Constructed
/// deterministically; every instance of [`Skeleton::toy`] is identical.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub parent: [Option<usize>; NUM_PARTS],
    pub rest_offsets: [[f64; 3]; NUM_PARTS],
    /// `[NUM_VERTICES, NUM_PARTS]`, each row nonnegative with ≤ 3
    /// nonzeros summing to 1.
    pub vertex_weights: Array2<f64>,
    /// `[NUM_PARTS, NUM_SHAPE]` bone-scale basis `B`; bone scale is
    /// `1 + Σ_i β_i·B[b,i]`, rows L1-normalized to 0.15 so scales stay
    /// positive for any plausible β.
    pub bone_basis: Array2<f64>,
}

impl Skeleton {
    /// The canonical toy skeleton (a crate-wide constant).
    pub fn toy() -> Self {
        // Fixed seeds make the "random" parts of the constant stable
        // across builds; they are part of the data-format contract.
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0D1);
        let mut vertex_weights = Array2::zeros((NUM_VERTICES, NUM_PARTS));
        for v in 0..NUM_VERTICES {
            let k = rng.gen_range(1..=3usize);
            let mut parts: Vec<usize> = Vec::with_capacity(k);
            while parts.len() < k {
                let p = rng.gen_range(0..NUM_PARTS);
                if !parts.contains(&p) {
                    parts.push(p);
                }
            }
            let mut weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            for (p, w) in parts.iter().zip(&weights) {
                vertex_weights[[v, *p]] = *w;
            }
        }
        let mut bone_basis = Array2::zeros((NUM_PARTS, NUM_SHAPE));
        for b in 0..NUM_PARTS {
            let mut row: Vec<f64> = (0..NUM_SHAPE).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l1: f64 = row.iter().map(|x| x.abs()).sum();
            for x in &mut row {
                *x *= 0.15 / l1;
            }
            for (i, x) in row.iter().enumerate() {
                bone_basis[[b, i]] = *x;
            }
        }
        Skeleton {
            parent: PARENT,
            rest_offsets: REST_OFFSETS,
            vertex_weights,
            bone_basis,
        }
    }

    /// Per-bone length multipliers `1 + Σ_i β_i·B[b,i]`.
    pub fn bone_scales(&self, betas: &[f64; NUM_SHAPE]) -> [f64; NUM_PARTS] {
        let mut scales = [1.0; NUM_PARTS];
        for b in 0..NUM_PARTS {
            for i in 0..NUM_SHAPE {
                scales[b] += betas[i] * self.bone_basis[[b, i]];
            }
        }
        scales
    }

    /// Forward kinematics. Returns global joint positions and global
    /// rotation matrices, both indexed by part.
    ///
    /// The root sits at the origin carrying its own rotation; every
    /// child's position is its parent's position plus the parent's
    /// global rotation applied to the β-scaled rest offset, and global
    /// rotations compose parent→child.
    pub fn fk(
        &self,
        params: &BodyParams,
    ) -> ([[f64; 3]; NUM_PARTS], [[[f64; 3]; 3]; NUM_PARTS]) {
        let scales = self.bone_scales(&params.betas);
        let mut pos = [[0.0; 3]; NUM_PARTS];
        let mut glob = [[[0.0; 3]; 3]; NUM_PARTS];
        for j in 0..NUM_PARTS {
            let local = rot::rodrigues([
                params.pose[3 * j],
                params.pose[3 * j + 1],
                params.pose[3 * j + 2],
            ]);
            match self.parent[j] {
                None => {
                    glob[j] = local;
                    pos[j] = [0.0; 3];
                }
                Some(p) => {
                    glob[j] = rot::matmul3(&glob[p], &local);
                    let off = [
                        scales[j] * self.rest_offsets[j][0],
                        scales[j] * self.rest_offsets[j][1],
                        scales[j] * self.rest_offsets[j][2],
                    ];
                    let rotated = rot::matvec3(&glob[p], off);
                    pos[j] = [
                        pos[p][0] + rotated[0],
                        pos[p][1] + rotated[1],
                        pos[p][2] + rotated[2],
                    ];
                }
            }
        }
        (pos, glob)
    }

    /// Surrogate vertices: fixed sparse blend of joint positions,
    /// `V = W · J3D`.
    pub fn vertices(&self, j3d: &[[f64; 3]; NUM_PARTS]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; NUM_VERTICES];
        for v in 0..NUM_VERTICES {
            for j in 0..NUM_PARTS {
                let w = self.vertex_weights[[v, j]];
                if w != 0.0 {
                    out[v][0] += w * j3d[j][0];
                    out[v][1] += w * j3d[j][1];
                    out[v][2] += w * j3d[j][2];
                }
            }
        }
        out
    }
}

/// Weak-perspective projection of joint (or vertex) positions.
pub fn project(points: &[[f64; 3]], camera: &Camera) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [camera.s * p[0] + camera.tx, camera.s * p[1] + camera.ty])
        .collect()
}

/// Per-part rotation matrices for a flattened 72D pose.
pub fn rotmats(pose: &[f64; NUM_PARTS * 3]) -> [[[f64; 3]; 3]; NUM_PARTS] {
    let mut out = [[[0.0; 3]; 3]; NUM_PARTS];
    for j in 0..NUM_PARTS {
        out[j] = rot::rodrigues([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]);
    }
    out
}

/// Flattens per-part rotation matrices to the 216D row-major layout used
/// as a network conditioning feature.
pub fn flatten_rotmats(mats: &[[[f64; 3]; 3]; NUM_PARTS]) -> [f64; NUM_PARTS * 9] {
    let mut out = [0.0; NUM_PARTS * 9];
    for j in 0..NUM_PARTS {
        for r in 0..3 {
            for c in 0..3 {
                out[9 * j + 3 * r + c] = mats[j][r][c];
            }
        }
    }
    out
}

// ---- tape (differentiable) versions --------------------------------------

/// Batched Rodrigues on the tape: `theta` is `[B, 72]`, result is
/// `[B, 24, 3, 3]`. Uses the branch-free form
/// `R = I + a·K + b·K²` with `a = sin θ̂/θ̂`, `b = (1−cos θ̂)/θ̂²` and
/// `θ̂ = sqrt(‖ω‖² + 1e-16)`, whose value and gradients agree with the
/// exact formula to well below 1e-10 over the canonical angle range.
pub fn rotmats_tape(tape: &mut Tape, theta: Value) -> Value {
    let b = tape.data(theta).shape()[0];
    let n = b * NUM_PARTS;
    let w = tape.reshape(theta, &[n, 3]);
    let wx = tape.slice(w, 1, 0, 1);
    let wy = tape.slice(w, 1, 1, 2);
    let wz = tape.slice(w, 1, 2, 3);
    let (sx, sy, sz) = (tape.square(wx), tape.square(wy), tape.square(wz));
    let t01 = tape.add(sx, sy);
    let t = tape.add(t01, sz); // ‖ω‖² per row, [n,1]
    let eps = tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), 1e-16));
    let t_eps = tape.add(t, eps);
    let theta_hat = tape.sqrt(t_eps);
    let sin_t = tape.sin(theta_hat);
    let cos_t = tape.cos(theta_hat);
    let a = tape.div(sin_t, theta_hat);
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), 1.0));
    let one_minus_cos = tape.sub(ones, cos_t);
    let bcoef = tape.div(one_minus_cos, t_eps);

    let axy = tape.mul(wx, wy);
    let axz = tape.mul(wx, wz);
    let ayz = tape.mul(wy, wz);
    let a_wx = tape.mul(a, wx);
    let a_wy = tape.mul(a, wy);
    let a_wz = tape.mul(a, wz);
    let b_xy = tape.mul(bcoef, axy);
    let b_xz = tape.mul(bcoef, axz);
    let b_yz = tape.mul(bcoef, ayz);

    // Diagonal entries: 1 - b·(sum of the two other squares).
    let syz = tape.add(sy, sz);
    let sxz = tape.add(sx, sz);
    let sxy = tape.add(sx, sy);
    let b_syz = tape.mul(bcoef, syz);
    let b_sxz = tape.mul(bcoef, sxz);
    let b_sxy = tape.mul(bcoef, sxy);
    let r00 = tape.sub(ones, b_syz);
    let r11 = tape.sub(ones, b_sxz);
    let r22 = tape.sub(ones, b_sxy);

    let r01 = tape.sub(b_xy, a_wz);
    let r02 = tape.add(b_xz, a_wy);
    let r10 = tape.add(b_xy, a_wz);
    let r12 = tape.sub(b_yz, a_wx);
    let r20 = tape.sub(b_xz, a_wy);
    let r21 = tape.add(b_yz, a_wx);

    let flat = tape.concat(&[r00, r01, r02, r10, r11, r12, r20, r21, r22], 1);
    tape.reshape(flat, &[b, NUM_PARTS, 3, 3])
}

/// Batched FK on the tape. `rotmats` is `[B, 24, 3, 3]` (from
/// [`rotmats_tape`]), `betas` is `[B, 10]`; returns joint positions
/// `[B, 24, 3]`. Semantics match [`Skeleton::fk`] exactly.
pub fn fk_tape(tape: &mut Tape, skeleton: &Skeleton, mats: Value, betas: Value) -> Value {
    let b = tape.data(mats).shape()[0];
    // scales = 1 + β · Bᵀ, shape [B, 24].
    let basis_t = tape.constant(skeleton.bone_basis.t().to_owned().into_dyn());
    let scaled = tape.matmul(betas, basis_t);
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[b, NUM_PARTS]), 1.0));
    let scales = tape.add(ones, scaled);
    let scales3 = tape.reshape(scales, &[b, NUM_PARTS, 1]);
    let scales3 = tape.broadcast_to(scales3, &[b, NUM_PARTS, 3]);
    let offsets_flat: Vec<f64> = skeleton
        .rest_offsets
        .iter()
        .flat_map(|o| o.iter().copied())
        .collect();
    let offs = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[NUM_PARTS, 3]), offsets_flat).expect("24x3"),
    );
    let offs = tape.broadcast_to(offs, &[b, NUM_PARTS, 3]);
    let scaled_offs = tape.mul(scales3, offs); // [B, 24, 3]

    let mut glob: Vec<Value> = Vec::with_capacity(NUM_PARTS);
    let mut pos: Vec<Value> = Vec::with_capacity(NUM_PARTS);
    let zero3 = tape.constant(ArrayD::zeros(IxDyn(&[b, 3, 1])));
    for j in 0..NUM_PARTS {
        let rj = tape.slice(mats, 1, j, j + 1);
        let rj = tape.reshape(rj, &[b, 3, 3]);
        match skeleton.parent[j] {
            None => {
                glob.push(rj);
                pos.push(zero3);
            }
            Some(p) => {
                let rg = tape.matmul(glob[p], rj);
                glob.push(rg);
                let oj = tape.slice(scaled_offs, 1, j, j + 1);
                let oj = tape.reshape(oj, &[b, 3, 1]);
                let rotated = tape.matmul(glob[p], oj);
                pos.push(tape.add(pos[p], rotated));
            }
        }
    }
    let rows: Vec<Value> = pos
        .iter()
        .map(|&p| tape.reshape(p, &[b, 1, 3]))
        .collect();
    tape.concat(&rows, 1)
}

/// Surrogate vertices on the tape: `[B, 24, 3] → [B, 64, 3]`.
pub fn vertices_tape(tape: &mut Tape, skeleton: &Skeleton, j3d: Value) -> Value {
    let b = tape.data(j3d).shape()[0];
    let w = tape.constant(skeleton.vertex_weights.clone().into_dyn());
    let w = tape.broadcast_to(w, &[b, NUM_VERTICES, NUM_PARTS]);
    tape.matmul(w, j3d)
}

/// Weak-perspective projection on the tape. `points` is `[B, P, 3]`,
/// `camera` is `[B, 3]` holding `(s, tx, ty)` with `s` already positive;
/// result is `[B, P, 2]`.
pub fn project_tape(tape: &mut Tape, points: Value, camera: Value) -> Value {
    let shape = tape.data(points).shape().to_vec();
    let (b, p) = (shape[0], shape[1]);
    let xy = tape.slice(points, 2, 0, 2);
    let s = tape.slice(camera, 1, 0, 1);
    let s = tape.reshape(s, &[b, 1, 1]);
    let s = tape.broadcast_to(s, &[b, p, 2]);
    let t = tape.slice(camera, 1, 1, 3);
    let t = tape.reshape(t, &[b, 1, 2]);
    let t = tape.broadcast_to(t, &[b, p, 2]);
    let scaled = tape.mul(xy, s);
    tape.add(scaled, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
        let mut p = BodyParams::rest();
        for k in 0..NUM_PARTS * 3 {
            p.pose[k] = rng.gen_range(-1.2..1.2);
        }
        for k in 0..NUM_SHAPE {
            p.betas[k] = rng.gen_range(-1.0..1.0);
        }
        p.camera = Camera {
            s: rng.gen_range(0.8..1.2),
            tx: rng.gen_range(-0.1..0.1),
            ty: rng.gen_range(-0.1..0.1),
        };
        p.canonicalize();
        p
    }

    #[test]
    fn skeleton_is_a_single_rooted_forest() {
        let sk = Skeleton::toy();
        assert!(sk.parent[0].is_none());
        for (j, p) in sk.parent.iter().enumerate().skip(1) {
            let mut cur = p.expect("only index 0 is a root");
            // Walk up; must reach the root without revisiting.
            let mut hops = 0;
            while let Some(next) = sk.parent[cur] {
                cur = next;
                hops += 1;
                assert!(hops <= NUM_PARTS, "cycle through part {j}");
            }
            assert_eq!(cur, 0);
            assert!(p.unwrap() < j, "parents precede children in index order");
        }
    }

    #[test]
    fn vertex_weight_rows_are_sparse_stochastic() {
        let sk = Skeleton::toy();
        for v in 0..NUM_VERTICES {
            let row = sk.vertex_weights.row(v);
            let nonzero = row.iter().filter(|w| **w != 0.0).count();
            assert!(nonzero >= 1 && nonzero <= 3);
            assert!(row.iter().all(|w| *w >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_pose_joints_are_cumulative_offsets() {
        let sk = Skeleton::toy();
        let (pos, glob) = sk.fk(&BodyParams::rest());
        for j in 0..NUM_PARTS {
            // Identity rotations everywhere.
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((glob[j][r][c] - want).abs() < 1e-15);
                }
            }
            let mut want = [0.0; 3];
            let mut cur = j;
            loop {
                want[0] += sk.rest_offsets[cur][0];
                want[1] += sk.rest_offsets[cur][1];
                want[2] += sk.rest_offsets[cur][2];
                match sk.parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            for k in 0..3 {
                assert!((pos[j][k] - want[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_turn_root_rotates_children() {
        let sk = Skeleton::toy();
        let mut params = BodyParams::rest();
        params.pose[2] = PI / 2.0; // root: 90° about z
        let (pos, _) = sk.fk(&params);
        // l_hip rest offset (0.10, -0.05, 0) maps to (0.05, 0.10, 0).
        assert!((pos[4][0] - 0.05).abs() < 1e-12);
        assert!((pos[4][1] - 0.10).abs() < 1e-12);
        assert!(pos[4][2].abs() < 1e-12);
    }

    /// Independent FK oracle: homogeneous 4x4 composition per joint.
    fn fk_homogeneous_oracle(sk: &Skeleton, params: &BodyParams) -> Vec<[f64; 3]> {
        let scales = sk.bone_scales(&params.betas);
        let mut mats: Vec<[[f64; 4]; 4]> = Vec::with_capacity(NUM_PARTS);
        for j in 0..NUM_PARTS {
            let r = rot::rodrigues([
                params.pose[3 * j],
                params.pose[3 * j + 1],
                params.pose[3 * j + 2],
            ]);
            let off = if sk.parent[j].is_none() {
                [0.0; 3]
            } else {
                [
                    scales[j] * sk.rest_offsets[j][0],
                    scales[j] * sk.rest_offsets[j][1],
                    scales[j] * sk.rest_offsets[j][2],
                ]
            };
            let mut h = [[0.0; 4]; 4];
            for a in 0..3 {
                for b in 0..3 {
                    h[a][b] = r[a][b];
                }
                h[a][3] = off[a];
            }
            h[3][3] = 1.0;
            let m = match sk.parent[j] {
                None => h,
                Some(p) => {
                    let pm = &mats[p];
                    let mut out = [[0.0; 4]; 4];
                    for a in 0..4 {
                        for b in 0..4 {
                            for k in 0..4 {
                                out[a][b] += pm[a][k] * h[k][b];
                            }
                        }
                    }
                    out
                }
            };
            mats.push(m);
        }
        mats.iter().map(|m| [m[0][3], m[1][3], m[2][3]]).collect()
    }

    #[test]
    fn fk_matches_homogeneous_matrix_oracle() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..25 {
            let params = random_params(&mut rng);
            let (pos, _) = sk.fk(&params);
            let want = fk_homogeneous_oracle(&sk, &params);
            for j in 0..NUM_PARTS {
                for k in 0..3 {
                    assert!(
                        (pos[j][k] - want[j][k]).abs() < 1e-10,
                        "joint {j} axis {k}: {} vs {}",
                        pos[j][k],
                        want[j][k]
                    );
                }
            }
        }
    }

    #[test]
    fn fk_global_rotations_stay_orthonormal() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = random_params(&mut rng);
        let (_, glob) = sk.fk(&params);
        for g in &glob {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| g[k][i] * g[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fk_is_rigidly_equivariant_under_root_rotation() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let params = random_params(&mut rng);
            let extra = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let mut rotated = params.clone();
            let root = [params.pose[0], params.pose[1], params.pose[2]];
            let composed = rot::quat_mul(
                rot::quat_from_axis_angle(extra),
                rot::quat_from_axis_angle(root),
            );
            let new_root = rot::axis_angle_from_quat(composed);
            rotated.pose[0] = new_root[0];
            rotated.pose[1] = new_root[1];
            rotated.pose[2] = new_root[2];
            let (pos, _) = sk.fk(&params);
            let (pos_rot, _) = sk.fk(&rotated);
            let r = rot::rodrigues(extra);
            for j in 0..NUM_PARTS {
                let want = rot::matvec3(&r, pos[j]);
                for k in 0..3 {
                    assert!(
                        (pos_rot[j][k] - want[k]).abs() < 1e-9,
                        "joint {j}: {:?} vs {:?}",
                        pos_rot[j],
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn bone_scale_is_linear_in_betas_and_identity_at_zero() {
        let sk = Skeleton::toy();
        assert!(sk.bone_scales(&[0.0; NUM_SHAPE]).iter().all(|s| *s == 1.0));
        let mut betas = [0.0; NUM_SHAPE];
        betas[3] = 0.5;
        let s1 = sk.bone_scales(&betas);
        betas[3] = 1.0;
        let s2 = sk.bone_scales(&betas);
        for b in 0..NUM_PARTS {
            assert!(((s2[b] - 1.0) - 2.0 * (s1[b] - 1.0)).abs() < 1e-12);
            assert!(s1[b] > 0.5, "scales stay positive");
        }
    }

    #[test]
    fn vertices_follow_weight_rows() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = random_params(&mut rng);
        let (j3d, _) = sk.fk(&params);

        // One-hot and half/half rows on a modified skeleton.
        let mut custom = sk.clone();
        custom.vertex_weights.row_mut(0).fill(0.0);
        custom.vertex_weights[[0, 7]] = 1.0;
        custom.vertex_weights.row_mut(1).fill(0.0);
        custom.vertex_weights[[1, 2]] = 0.5;
        custom.vertex_weights[[1, 9]] = 0.5;
        let verts = custom.vertices(&j3d);
        for k in 0..3 {
            assert!((verts[0][k] - j3d[7][k]).abs() < 1e-15);
            assert!((verts[1][k] - 0.5 * (j3d[2][k] + j3d[9][k])).abs() < 1e-15);
        }

        // Dense matrix-product oracle on the real weights.
        let verts = sk.vertices(&j3d);
        for v in 0..NUM_VERTICES {
            let mut want = [0.0; 3];
            for j in 0..NUM_PARTS {
                for k in 0..3 {
                    want[k] += sk.vertex_weights[[v, j]] * j3d[j][k];
                }
            }
            for k in 0..3 {
                assert!((verts[v][k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera {
            s: 2.0,
            tx: 1.0,
            ty: 0.0,
        };
        let out = project(&[[3.0, 4.0, 9.0]], &cam);
        assert_eq!(out[0], [7.0, 8.0]);
        // Depth changes leave the projection untouched.
        let deeper = project(&[[3.0, 4.0, 100.0]], &cam);
        assert_eq!(out, deeper);
        let identity = Camera {
            s: 1.0,
            tx: 0.0,
            ty: 0.0,
        };
        let pts = [[0.3, -0.4, 0.7]];
        let xy = project(&pts, &identity);
        assert_eq!(xy[0], [0.3, -0.4]);
    }

    #[test]
    fn rotmat_examples() {
        let mut pose = [0.0; NUM_PARTS * 3];
        pose[5] = PI / 2.0; // part 1 rotated about z
        let mats = rotmats(&pose);
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { 1.0 } else { 0.0 };
                assert!((mats[0][r][c] - id).abs() < 1e-15, "part 0 is identity");
                assert!((mats[1][r][c] - want[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_fk_matches_plain_fk() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let batch = 3;
        let mut theta = ArrayD::zeros(IxDyn(&[batch, NUM_PARTS * 3]));
        let mut betas = ArrayD::zeros(IxDyn(&[batch, NUM_SHAPE]));
        let mut cams = ArrayD::zeros(IxDyn(&[batch, 3]));
        let mut plain: Vec<BodyParams> = Vec::new();
        for i in 0..batch {
            let p = random_params(&mut rng);
            for k in 0..NUM_PARTS * 3 {
                theta[[i, k]] = p.pose[k];
            }
            for k in 0..NUM_SHAPE {
                betas[[i, k]] = p.betas[k];
            }
            cams[[i, 0]] = p.camera.s;
            cams[[i, 1]] = p.camera.tx;
            cams[[i, 2]] = p.camera.ty;
            plain.push(p);
        }
        let mut tape = Tape::new();
        let vt = tape.constant(theta);
        let vb = tape.constant(betas);
        let vc = tape.constant(cams);
        let mats = rotmats_tape(&mut tape, vt);
        let j3d = fk_tape(&mut tape, &sk, mats, vb);
        let verts = vertices_tape(&mut tape, &sk, j3d);
        let j2d = project_tape(&mut tape, j3d, vc);
        for (i, p) in plain.iter().enumerate() {
            let pm = rotmats(&p.pose);
            let (pj, _) = sk.fk(p);
            let pv = sk.vertices(&pj);
            let p2 = project(&pj, &p.camera);
            for j in 0..NUM_PARTS {
                for (r, row) in pm[j].iter().enumerate() {
                    for (c, want) in row.iter().enumerate() {
                        assert!((tape.data(mats)[[i, j, r, c]] - want).abs() < 1e-10);
                    }
                }
                for k in 0..3 {
                    assert!((tape.data(j3d)[[i, j, k]] - pj[j][k]).abs() < 1e-10);
                }
                for k in 0..2 {
                    assert!((tape.data(j2d)[[i, j, k]] - p2[j][k]).abs() < 1e-10);
                }
            }
            for v in 0..NUM_VERTICES {
                for k in 0..3 {
                    assert!((tape.data(verts)[[i, v, k]] - pv[v][k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fk_chain_is_differentiable_end_to_end() {
        let sk = Skeleton::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let batch = 2;
        let theta = ArrayD::from_shape_fn(IxDyn(&[batch, NUM_PARTS * 3]), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let betas =
            ArrayD::from_shape_fn(IxDyn(&[batch, NUM_SHAPE]), |_| rng.gen_range(-0.8..0.8));
        let cam = ArrayD::from_shape_fn(IxDyn(&[batch, 3]), |ix| {
            if ix[1] == 0 {
                1.0
            } else {
                0.05
            }
        });
        let wv = ArrayD::from_shape_fn(IxDyn(&[batch, NUM_VERTICES, 3]), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let wp = ArrayD::from_shape_fn(IxDyn(&[batch, NUM_PARTS, 2]), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let mut tape = Tape::new();
        let pt = tape.persistent(theta);
        let pb = tape.persistent(betas);
        let report = gradient_check(
            &mut tape,
            &[("theta".to_string(), pt), ("betas".to_string(), pb)],
            |t| {
                let mats = rotmats_tape(t, pt);
                let j3d = fk_tape(t, &sk, mats, pb);
                let verts = vertices_tape(t, &sk, j3d);
                let camv = t.constant(cam.clone());
                let j2d = project_tape(t, j3d, camv);
                let wvv = t.constant(wv.clone());
                let wpv = t.constant(wp.clone());
                let a = t.mul(verts, wvv);
                let b = t.mul(j2d, wpv);
                let sa = t.sum(a);
                let sb = t.sum(b);
                t.add(sa, sb)
            },
            1e-5,
        );
        assert!(
            report.passed(),
            "FK gradcheck: max_err={} at {}",
            report.max_err,
            report.worst_param
        );
    }
}
