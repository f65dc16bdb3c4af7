//! Conditional RealNVP over pose residuals.
//!
//! Two affine coupling blocks with alternating masks transform the
//! d-dimensional residual (d = 3 per part by default; d = 72 for the
//! whole-pose variant). Each block carries a scale net and a translate
//! net — two hidden layers of width 64 with tanh — whose input is the
//! passed-through dims plus a projection of the condition vector.
//! Scale outputs go through `tanh(·) × bound` with a learnable `bound`
//! (soft clamp), so no coupling layer can blow the density up: the
//! forward log-determinant is bounded by Σ_blocks (transformed dims ×
//! |bound|).
//!
//! Output layers are zero-initialized, so a freshly built flow is the
//! identity map and its density is exactly the standard normal. The
//! condition can be supplied per row, once per sample (broadcast over
//! parts — the common training layout), or omitted entirely for the
//! unconditional variants.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Tape, Value};

/// Natural log of 2π.
pub const LN_2PI: f64 = 1.8378770664093453;

/// How the condition vector is fed to the coupling nets.
#[derive(Clone, Copy)]
pub enum CondSource {
    /// One condition row per data row: `[N, c]`.
    PerRow(Value),
    /// One condition row per sample, shared by `parts` consecutive data
    /// rows: `[B, c]` with `N = B·parts`. Cheaper than materializing the
    /// repeated `[N, c]` matrix.
    PerSample { cond: Value, parts: usize },
    /// No conditioning (equivalent to an all-zero condition vector).
    Zero,
}

/// One two-hidden-layer perceptron used as a scale or translate net.
struct CouplingNet {
    w1x: Value,
    w1c: Value,
    b1: Value,
    w2: Value,
    b2: Value,
    w3: Value,
    b3: Value,
}

/// One affine coupling block: `pass` dims go through unchanged and
/// drive the transform of `out` dims.
struct CouplingBlock {
    pass: Vec<usize>,
    out: Vec<usize>,
    scale: CouplingNet,
    translate: CouplingNet,
    /// Learnable scalar soft-clamp bound (log-scales live in
    /// `[-|bound|, |bound|]`).
    bound: Value,
}

/// A 2-block conditional RealNVP with a standard-normal base.
pub struct CondFlow {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    blocks: Vec<CouplingBlock>,
}

/// Named parameter handles, e.g. for checkpointing and gradient checks.
pub type ParamRegistry = Vec<(String, Value)>;

fn xavier(tape: &mut Tape, rows: usize, cols: usize, rng: &mut impl Rng) -> Value {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-a..a));
    tape.persistent(data)
}

fn zeros(tape: &mut Tape, rows: usize, cols: usize) -> Value {
    tape.persistent(ArrayD::zeros(IxDyn(&[rows, cols])))
}

impl CondFlow {
    /// Builds a flow with training initialization: hidden layers Xavier,
    /// output layers zero (identity flow). Parameters become persistent
    /// nodes on `tape` and are listed in the returned registry under
    /// `prefix`.
    pub fn new(
        tape: &mut Tape,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
        registry: &mut ParamRegistry,
    ) -> Self {
        Self::build(tape, prefix, dim, cond_dim, hidden, rng, registry, false)
    }

    /// Like [`CondFlow::new`], but with random (nonzero) output layers —
    /// a genuinely non-identity map for property tests.
    pub fn new_random(
        tape: &mut Tape,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
        registry: &mut ParamRegistry,
    ) -> Self {
        Self::build(tape, prefix, dim, cond_dim, hidden, rng, registry, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        tape: &mut Tape,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
        registry: &mut ParamRegistry,
        random_output: bool,
    ) -> Self {
        assert!(dim >= 2, "coupling masks need at least 2 dims");
        // Block 0 transforms the complement of the low dims; block 1
        // flips the roles, so every dim is transformed exactly once.
        // d=3: pass {0} → transform {1,2}, then pass {1,2} → transform {0}.
        // Even d: evens drive odds, then odds drive evens.
        let split = if dim == 3 { 1 } else { dim / 2 };
        let low: Vec<usize> = (0..split).collect();
        let high: Vec<usize> = (split..dim).collect();
        let masks = [(low.clone(), high.clone()), (high, low)];

        let mut blocks = Vec::new();
        for (k, (pass, out)) in masks.into_iter().enumerate() {
            let mut net = |tape: &mut Tape, name: &str, registry: &mut ParamRegistry| {
                let p = pass.len();
                let q = out.len();
                let w1x = xavier(tape, p, hidden, rng);
                let w1c = xavier(tape, cond_dim, hidden, rng);
                let b1 = zeros(tape, 1, hidden);
                let w2 = xavier(tape, hidden, hidden, rng);
                let b2 = zeros(tape, 1, hidden);
                let (w3, b3) = if random_output {
                    (xavier(tape, hidden, q, rng), {
                        let b = ArrayD::from_shape_fn(IxDyn(&[1, q]), |_| {
                            rng.gen_range(-0.1..0.1)
                        });
                        tape.persistent(b)
                    })
                } else {
                    (zeros(tape, hidden, q), zeros(tape, 1, q))
                };
                for (field, v) in [
                    ("w1x", w1x),
                    ("w1c", w1c),
                    ("b1", b1),
                    ("w2", w2),
                    ("b2", b2),
                    ("w3", w3),
                    ("b3", b3),
                ] {
                    registry.push((format!("{prefix}.block{k}.{name}.{field}"), v));
                }
                CouplingNet {
                    w1x,
                    w1c,
                    b1,
                    w2,
                    b2,
                    w3,
                    b3,
                }
            };
            let scale = net(tape, "scale", registry);
            let translate = net(tape, "translate", registry);
            let bound = tape.persistent(ArrayD::from_elem(IxDyn(&[]), 2.0));
            registry.push((format!("{prefix}.block{k}.bound"), bound));
            blocks.push(CouplingBlock {
                pass,
                out,
                scale,
                translate,
                bound,
            });
        }
        CondFlow {
            dim,
            cond_dim,
            hidden,
            blocks,
        }
    }

    /// Extracts the listed dims of `x` (columns), preserving order.
    fn gather(tape: &mut Tape, x: Value, dims: &[usize]) -> Value {
        let contiguous = dims.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            tape.slice(x, 1, dims[0], dims[dims.len() - 1] + 1)
        } else {
            let cols: Vec<Value> = dims.iter().map(|&d| tape.slice(x, 1, d, d + 1)).collect();
            tape.concat(&cols, 1)
        }
    }

    /// Reassembles a full row from pass/out column groups.
    fn scatter(
        tape: &mut Tape,
        dim: usize,
        pass: &[usize],
        pass_v: Value,
        out: &[usize],
        out_v: Value,
    ) -> Value {
        // Column-by-column concat in index order. Both groups are
        // internally ordered, so each column is a slice of its group.
        let mut cols: Vec<Value> = Vec::with_capacity(dim);
        for d in 0..dim {
            if let Some(i) = pass.iter().position(|&p| p == d) {
                cols.push(tape.slice(pass_v, 1, i, i + 1));
            } else {
                let i = out.iter().position(|&o| o == d).expect("dim covered");
                cols.push(tape.slice(out_v, 1, i, i + 1));
            }
        }
        tape.concat(&cols, 1)
    }

    fn net_forward(&self, tape: &mut Tape, net: &CouplingNet, xp: Value, cond: CondSource) -> Value {
        let n = tape.data(xp).shape()[0];
        let h = tape.matmul(xp, net.w1x);
        let h = match cond {
            CondSource::Zero => h,
            CondSource::PerRow(c) => {
                let proj = tape.matmul(c, net.w1c);
                tape.add(h, proj)
            }
            CondSource::PerSample { cond, parts } => {
                let b = tape.data(cond).shape()[0];
                debug_assert_eq!(b * parts, n, "PerSample rows must tile the batch");
                let proj = tape.matmul(cond, net.w1c); // [B, H]
                let proj = tape.reshape(proj, &[b, 1, self.hidden]);
                let proj = tape.broadcast_to(proj, &[b, parts, self.hidden]);
                let proj = tape.reshape(proj, &[n, self.hidden]);
                tape.add(h, proj)
            }
        };
        let b1 = tape.broadcast_to(net.b1, &[n, self.hidden]);
        let h = tape.add(h, b1);
        let h = tape.tanh(h);
        let h2 = tape.matmul(h, net.w2);
        let b2 = tape.broadcast_to(net.b2, &[n, self.hidden]);
        let h2 = tape.add(h2, b2);
        let h2 = tape.tanh(h2);
        let o = tape.matmul(h2, net.w3);
        let q = tape.data(o).shape()[1];
        let b3 = tape.broadcast_to(net.b3, &[n, q]);
        tape.add(o, b3)
    }

    /// Soft-clamped log-scales for one block: `tanh(raw) × bound`.
    fn log_scales(&self, tape: &mut Tape, block: &CouplingBlock, xp: Value, cond: CondSource) -> Value {
        let raw = self.net_forward(tape, &block.scale, xp, cond);
        let t = tape.tanh(raw);
        let shape = tape.data(t).shape().to_vec();
        let bound = tape.broadcast_to(block.bound, &shape);
        tape.mul(t, bound)
    }

    /// Forward transform: `x → z` with the log-determinant of ∂z/∂x per
    /// row (`[N,1]`), which is the sum of the active log-scales.
    pub fn forward(&self, tape: &mut Tape, x: Value, cond: CondSource) -> (Value, Value) {
        let n = tape.data(x).shape()[0];
        let mut cur = x;
        let mut logdet = tape.constant(ArrayD::zeros(IxDyn(&[n, 1])));
        for block in &self.blocks {
            let xp = Self::gather(tape, cur, &block.pass);
            let xo = Self::gather(tape, cur, &block.out);
            let s = self.log_scales(tape, block, xp, cond);
            let t = self.net_forward(tape, &block.translate, xp, cond);
            let es = tape.exp(s);
            let scaled = tape.mul(xo, es);
            let yo = tape.add(scaled, t);
            cur = Self::scatter(tape, self.dim, &block.pass, xp, &block.out, yo);
            let ones = tape.constant(ArrayD::from_elem(IxDyn(&[block.out.len(), 1]), 1.0));
            let row_sum = tape.matmul(s, ones);
            logdet = tape.add(logdet, row_sum);
        }
        (cur, logdet)
    }

    /// Exact algebraic inverse: `z → x`, block order reversed. The
    /// returned log-determinant (of ∂x/∂z) is the negation of the
    /// forward one.
    pub fn inverse(&self, tape: &mut Tape, z: Value, cond: CondSource) -> (Value, Value) {
        let n = tape.data(z).shape()[0];
        let mut cur = z;
        let mut logdet = tape.constant(ArrayD::zeros(IxDyn(&[n, 1])));
        for block in self.blocks.iter().rev() {
            let yp = Self::gather(tape, cur, &block.pass);
            let yo = Self::gather(tape, cur, &block.out);
            let s = self.log_scales(tape, block, yp, cond);
            let t = self.net_forward(tape, &block.translate, yp, cond);
            let shifted = tape.sub(yo, t);
            let neg = {
                let zero = tape.constant(ArrayD::zeros(IxDyn(tape.data(s).shape())));
                tape.sub(zero, s)
            };
            let ens = tape.exp(neg);
            let xo = tape.mul(shifted, ens);
            cur = Self::scatter(tape, self.dim, &block.pass, yp, &block.out, xo);
            let ones = tape.constant(ArrayD::from_elem(IxDyn(&[block.out.len(), 1]), 1.0));
            let row_sum = tape.matmul(s, ones);
            logdet = tape.sub(logdet, row_sum);
        }
        (cur, logdet)
    }

    /// Log density under the flow: `log N(forward(x).z; 0, I) + logdet`,
    /// per row (`[N,1]`).
    pub fn log_prob(&self, tape: &mut Tape, x: Value, cond: CondSource) -> Value {
        let (z, logdet) = self.forward(tape, x, cond);
        let z2 = tape.square(z);
        let ones = tape.constant(ArrayD::from_elem(IxDyn(&[self.dim, 1]), 1.0));
        let ssq = tape.matmul(z2, ones);
        let half = tape.constant(ArrayD::from_elem(IxDyn(tape.data(ssq).shape()), -0.5));
        let quad = tape.mul(ssq, half);
        let norm = tape.constant(ArrayD::from_elem(
            IxDyn(tape.data(quad).shape()),
            -(self.dim as f64) / 2.0 * LN_2PI,
        ));
        let base = tape.add(quad, norm);
        tape.add(base, logdet)
    }

    /// Upper bound on `log_prob` implied by the soft clamp: the base
    /// density tops out at `-(d/2)·ln 2π` and each block's log-det at
    /// (transformed dims × |bound|).
    pub fn log_prob_upper_bound(&self, tape: &Tape) -> f64 {
        let mut bound = -(self.dim as f64) / 2.0 * LN_2PI;
        for block in &self.blocks {
            bound += block.out.len() as f64 * tape.data(block.bound)[[]].abs();
        }
        bound
    }
}
