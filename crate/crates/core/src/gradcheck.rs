//! Finite-difference verification of the reverse-mode gradients: every tape
//! primitive against a plain-arithmetic replica, and the full forest model
//! against central differences on the non-tape evaluation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ad::{exp1, AdError, AdResult, GatherPlan, GatherRow, Tape, Var};
use crate::latent::{scale_to_physical, LatentError, LatentVars, VarRanges, NUM_VARS};
use crate::rtm::{
    apply_plan, band_plan, diff, reference, BandSet, CoefficientPack, FixedVars, ResampleMode,
    RtmError,
};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Rtm(#[from] RtmError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("could not sample an in-domain point after {0} attempts")]
    SamplingExhausted(usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub what: String,
    pub coordinate: usize,
    pub inputs: Vec<f64>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of (point, coordinate) gradient comparisons performed.
    pub checked: usize,
    pub tolerance: f64,
    pub worst_rel: f64,
    pub worst_case: String,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        Self {
            checked: 0,
            tolerance,
            worst_rel: 0.0,
            worst_case: String::new(),
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, what: &str, coordinate: usize, inputs: &[f64], analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.checked += 1;
        if rel > self.worst_rel {
            self.worst_rel = rel;
            self.worst_case = format!("{what}[{coordinate}]");
        }
        if rel > self.tolerance {
            self.failures.push(GradCheckFailure {
                what: what.to_string(),
                coordinate,
                inputs: inputs.to_vec(),
                analytic,
                numeric,
                rel,
            });
        }
    }

    /// Folds another suite's results into this one; the tolerance of `self`
    /// is kept for reporting only, failures keep their own thresholds.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.worst_rel > self.worst_rel {
            self.worst_rel = other.worst_rel;
            self.worst_case = other.worst_case;
        }
        self.failures.extend(other.failures);
    }
}

/// Symmetric difference quotient (f(x+h) − f(x−h)) / 2h.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const FORWARD_TOLERANCE: f64 = 1e-3;

// ── primitive checks ──

/// One primitive under test: leaves with fixed vector shapes, a plain
/// scalar-valued replica, and the tape construction of the same scalar.
struct PrimitiveCheck {
    name: &'static str,
    shapes: &'static [usize],
    sample: fn(&mut ChaCha8Rng) -> Vec<f64>,
    plain: fn(&[f64]) -> f64,
    build: for<'t> fn(&'t Tape, &[Var<'t>]) -> AdResult<Var<'t>>,
}

fn split_leaves<'a>(flat: &'a [f64], shapes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &s in shapes {
        out.push(&flat[off..off + s]);
        off += s;
    }
    out
}

fn run_primitive_check(
    check: &PrimitiveCheck,
    samples: usize,
    rng: &mut ChaCha8Rng,
    report: &mut GradCheckReport,
) -> Result<(), GradCheckError> {
    let total: usize = check.shapes.iter().sum();
    for _ in 0..samples {
        let flat = (check.sample)(rng);
        debug_assert_eq!(flat.len(), total, "sampler shape mismatch for {}", check.name);

        let tape = Tape::new();
        let mut leaves = Vec::with_capacity(check.shapes.len());
        for part in split_leaves(&flat, check.shapes) {
            leaves.push(if part.len() == 1 {
                tape.scalar(part[0])?
            } else {
                tape.vector(part)?
            });
        }
        let root = (check.build)(&tape, &leaves)?;
        let grads = tape.backward(root)?;

        let mut coord = 0usize;
        for (leaf_idx, leaf) in leaves.iter().enumerate() {
            let g = grads.wrt(*leaf)?;
            for k in 0..check.shapes[leaf_idx] {
                let analytic = g[k];
                let mut probe = flat.clone();
                let base = probe.clone();
                let mut f = |v: f64| {
                    probe.clone_from(&base);
                    probe[coord] = v;
                    (check.plain)(&probe)
                };
                let numeric = central_diff(&mut f, flat[coord], fd_step(flat[coord]));
                report.record(check.name, coord, &flat, analytic, numeric);
                coord += 1;
            }
        }
    }
    Ok(())
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Weights used to scalarize vector outputs; distinct so per-entry errors
/// cannot cancel.
const SCALARIZE: [f64; 12] = [
    0.31, 0.47, 0.53, 0.61, 0.43, 0.59, 0.37, 0.67, 0.41, 0.71, 0.29, 0.73,
];

fn weighted(values: &[f64]) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| SCALARIZE[i % SCALARIZE.len()] * v)
        .sum()
}

fn weighted_root<'t>(tape: &'t Tape, v: Var<'t>, len: usize) -> AdResult<Var<'t>> {
    let w: Vec<f64> = (0..len).map(|i| SCALARIZE[i % SCALARIZE.len()]).collect();
    v.mul(tape.vector(&w)?)?.sum()
}

fn primitive_checks() -> Vec<PrimitiveCheck> {
    vec![
        PrimitiveCheck {
            name: "add",
            shapes: &[1, 1],
            sample: |r| vec![u(r, -3.0, 3.0), u(r, -3.0, 3.0)],
            plain: |x| x[0] + x[1],
            build: |_, l| l[0].add(l[1]),
        },
        PrimitiveCheck {
            name: "sub",
            shapes: &[1, 1],
            sample: |r| vec![u(r, -3.0, 3.0), u(r, -3.0, 3.0)],
            plain: |x| x[0] - x[1],
            build: |_, l| l[0].sub(l[1]),
        },
        PrimitiveCheck {
            name: "mul",
            shapes: &[1, 1],
            sample: |r| vec![u(r, -3.0, 3.0), u(r, -3.0, 3.0)],
            plain: |x| x[0] * x[1],
            build: |_, l| l[0].mul(l[1]),
        },
        PrimitiveCheck {
            name: "div",
            shapes: &[1, 1],
            sample: |r| {
                let d = u(r, 0.1, 3.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                vec![u(r, -3.0, 3.0), d]
            },
            plain: |x| x[0] / x[1],
            build: |_, l| l[0].div(l[1]),
        },
        PrimitiveCheck {
            name: "pow",
            shapes: &[1, 1],
            sample: |r| vec![u(r, 0.2, 3.0), u(r, -2.0, 2.0)],
            plain: |x| x[0].powf(x[1]),
            build: |_, l| l[0].pow(l[1]),
        },
        PrimitiveCheck {
            name: "min",
            shapes: &[1, 1],
            sample: |r| loop {
                let (a, b) = (u(r, -2.0, 2.0), u(r, -2.0, 2.0));
                if (a - b).abs() > 1e-2 {
                    return vec![a, b];
                }
            },
            plain: |x| x[0].min(x[1]),
            build: |_, l| l[0].min(l[1]),
        },
        PrimitiveCheck {
            name: "max",
            shapes: &[1, 1],
            sample: |r| loop {
                let (a, b) = (u(r, -2.0, 2.0), u(r, -2.0, 2.0));
                if (a - b).abs() > 1e-2 {
                    return vec![a, b];
                }
            },
            plain: |x| x[0].max(x[1]),
            build: |_, l| l[0].max(l[1]),
        },
        PrimitiveCheck {
            name: "affine",
            shapes: &[1],
            sample: |r| vec![u(r, -3.0, 3.0)],
            plain: |x| 1.7 * x[0] - 0.4,
            build: |_, l| l[0].affine(1.7, -0.4),
        },
        PrimitiveCheck {
            name: "neg",
            shapes: &[1],
            sample: |r| vec![u(r, -3.0, 3.0)],
            plain: |x| -x[0],
            build: |_, l| l[0].neg(),
        },
        PrimitiveCheck {
            name: "one_minus",
            shapes: &[1],
            sample: |r| vec![u(r, -3.0, 3.0)],
            plain: |x| 1.0 - x[0],
            build: |_, l| l[0].one_minus(),
        },
        PrimitiveCheck {
            name: "square",
            shapes: &[1],
            sample: |r| vec![u(r, -3.0, 3.0)],
            plain: |x| x[0] * x[0],
            build: |_, l| l[0].square(),
        },
        PrimitiveCheck {
            name: "exp",
            shapes: &[1],
            sample: |r| vec![u(r, -3.0, 3.0)],
            plain: |x| x[0].exp(),
            build: |_, l| l[0].exp(),
        },
        PrimitiveCheck {
            name: "log",
            shapes: &[1],
            sample: |r| vec![u(r, 0.1, 5.0)],
            plain: |x| x[0].ln(),
            build: |_, l| l[0].log(),
        },
        PrimitiveCheck {
            name: "sqrt",
            shapes: &[1],
            sample: |r| vec![u(r, 0.1, 5.0)],
            plain: |x| x[0].sqrt(),
            build: |_, l| l[0].sqrt(),
        },
        PrimitiveCheck {
            name: "sigmoid",
            shapes: &[1],
            sample: |r| vec![u(r, -5.0, 5.0)],
            plain: |x| crate::ad::sigmoid(x[0]),
            build: |_, l| l[0].sigmoid(),
        },
        PrimitiveCheck {
            name: "tanh",
            shapes: &[1],
            sample: |r| vec![u(r, -5.0, 5.0)],
            plain: |x| x[0].tanh(),
            build: |_, l| l[0].tanh(),
        },
        PrimitiveCheck {
            name: "relu",
            shapes: &[1],
            sample: |r| loop {
                let x = u(r, -2.0, 2.0);
                if x.abs() > 1e-2 {
                    return vec![x];
                }
            },
            plain: |x| x[0].max(0.0),
            build: |_, l| l[0].relu(),
        },
        PrimitiveCheck {
            name: "exp1",
            shapes: &[1],
            sample: |r| vec![u(r, 0.05, 5.0)],
            plain: |x| exp1::exp1(x[0]),
            build: |_, l| l[0].exp1(),
        },
        PrimitiveCheck {
            name: "replace_zero_with_epsilon",
            shapes: &[1],
            sample: |r| vec![u(r, 0.1, 2.0)],
            plain: |x| x[0],
            build: |_, l| l[0].replace_zero_with_epsilon(),
        },
        PrimitiveCheck {
            name: "clamp_const",
            shapes: &[1],
            sample: |r| vec![u(r, 0.2, 0.8)],
            plain: |x| x[0].clamp(0.0, 1.0),
            build: |_, l| l[0].clamp_const(0.0, 1.0),
        },
        PrimitiveCheck {
            name: "sum",
            shapes: &[5],
            sample: |r| (0..5).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| x.iter().sum(),
            build: |_, l| l[0].sum(),
        },
        PrimitiveCheck {
            name: "mean",
            shapes: &[5],
            sample: |r| (0..5).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| x.iter().sum::<f64>() / 5.0,
            build: |_, l| l[0].mean(),
        },
        PrimitiveCheck {
            name: "component",
            shapes: &[4],
            sample: |r| (0..4).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| x[2],
            build: |_, l| l[0].component(2),
        },
        PrimitiveCheck {
            name: "mul_broadcast",
            shapes: &[1, 3],
            sample: |r| (0..4).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| weighted(&[x[0] * x[1], x[0] * x[2], x[0] * x[3]]),
            build: |t, l| weighted_root(t, l[1].mul(l[0])?, 3),
        },
        PrimitiveCheck {
            name: "mul_elementwise",
            shapes: &[3, 3],
            sample: |r| (0..6).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| weighted(&[x[0] * x[3], x[1] * x[4], x[2] * x[5]]),
            build: |t, l| weighted_root(t, l[0].mul(l[1])?, 3),
        },
        PrimitiveCheck {
            name: "div_elementwise",
            shapes: &[3, 3],
            sample: |r| {
                let mut out: Vec<f64> = (0..3).map(|_| u(r, -2.0, 2.0)).collect();
                out.extend((0..3).map(|_| u(r, 0.2, 2.0)));
                out
            },
            plain: |x| weighted(&[x[0] / x[3], x[1] / x[4], x[2] / x[5]]),
            build: |t, l| weighted_root(t, l[0].div(l[1])?, 3),
        },
        PrimitiveCheck {
            name: "matvec",
            shapes: &[6, 3],
            sample: |r| (0..9).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| {
                let (w, v) = (&x[..6], &x[6..]);
                let y0 = w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
                let y1 = w[3] * v[0] + w[4] * v[1] + w[5] * v[2];
                weighted(&[y0, y1])
            },
            build: |t, l| weighted_root(t, l[0].matvec(l[1], 2, 3)?, 2),
        },
        PrimitiveCheck {
            name: "outer",
            shapes: &[2, 3],
            sample: |r| (0..5).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| {
                let (a, b) = (&x[..2], &x[2..]);
                weighted(&[
                    a[0] * b[0],
                    a[0] * b[1],
                    a[0] * b[2],
                    a[1] * b[0],
                    a[1] * b[1],
                    a[1] * b[2],
                ])
            },
            build: |t, l| weighted_root(t, l[0].outer(l[1])?, 6),
        },
        PrimitiveCheck {
            name: "gather",
            shapes: &[6],
            sample: |r| (0..6).map(|_| u(r, -2.0, 2.0)).collect(),
            plain: |x| {
                let g0 = 0.2 * x[0] + 0.3 * x[2] + 0.5 * x[4];
                let g1 = 0.7 * x[1] + 0.3 * x[5];
                weighted(&[g0, g1])
            },
            build: |t, l| {
                let plan = std::rc::Rc::new(GatherPlan {
                    rows: vec![
                        GatherRow {
                            indices: vec![0, 2, 4],
                            weights: vec![0.2, 0.3, 0.5],
                        },
                        GatherRow {
                            indices: vec![1, 5],
                            weights: vec![0.7, 0.3],
                        },
                    ],
                });
                weighted_root(t, l[0].gather(&plan)?, 2)
            },
        },
    ]
}

/// Checks every tape primitive against central differences on a plain
/// replica: `samples_per_op` random in-domain points per primitive, each
/// coordinate compared at relative tolerance 1e-4 (scaled by max(1, |g|)).
pub fn check_primitives(samples_per_op: usize, seed: u64) -> Result<GradCheckReport, GradCheckError> {
    let mut report = GradCheckReport::new(PRIMITIVE_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for check in primitive_checks() {
        run_primitive_check(&check, samples_per_op, &mut rng, &mut report)?;
    }
    Ok(report)
}

// ── full forward model ──

fn reference_weighted(
    lam: &[f64; NUM_VARS],
    ranges: &VarRanges,
    fixed: &FixedVars,
    pack: &CoefficientPack,
    plan: &GatherPlan,
    weights: &[f64],
) -> Result<f64, GradCheckError> {
    let latent = LatentVars::new(*lam)?;
    let phys = scale_to_physical(&latent, ranges, fixed.sd);
    let grid = reference::forest_model(&phys, fixed, pack);
    let bands = apply_plan(plan, &grid);
    Ok(bands.iter().zip(weights).map(|(b, w)| b * w).sum())
}

/// Margin check so no finite-difference step straddles the shadow-term
/// min/max kinks.
fn forward_point_ok(lam: &[f64; NUM_VARS], ranges: &VarRanges, fixed: &FixedVars) -> bool {
    let phys = match LatentVars::new(*lam) {
        Ok(l) => scale_to_physical(&l, ranges, fixed.sd),
        Err(_) => return false,
    };
    let halft = 0.5 * fixed.tts.to_radians().tan();
    let s_raw = phys.fc * (phys.h / phys.cd) * halft;
    s_raw > 1e-3 && (s_raw - (1.0 - phys.fc)).abs() > 1e-3
}

/// Checks the full forest forward model: central differences in each latent
/// coordinate on the plain evaluation path against the tape gradient of the
/// differentiable path, at `n_points` random interior points, relative
/// tolerance 1e-3.
pub fn check_forward_model(
    n_points: usize,
    seed: u64,
    ranges: &VarRanges,
    fixed: &FixedVars,
    pack: &CoefficientPack,
    bands: &BandSet,
) -> Result<GradCheckReport, GradCheckError> {
    let mut report = GradCheckReport::new(FORWARD_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = band_plan(bands, ResampleMode::Nearest)?;
    let shared_plan = std::rc::Rc::new(plan.clone());
    let n_bands = bands.bands.len();
    let weights: Vec<f64> = (0..n_bands)
        .map(|i| SCALARIZE[i % SCALARIZE.len()])
        .collect();
    let h = 1e-4;

    for _ in 0..n_points {
        let mut lam = [0.0; NUM_VARS];
        let mut found = false;
        for _attempt in 0..200 {
            for v in &mut lam {
                *v = rng.gen_range(0.05..0.95);
            }
            if forward_point_ok(&lam, ranges, fixed) {
                found = true;
                break;
            }
        }
        if !found {
            return Err(GradCheckError::SamplingExhausted(200));
        }

        let tape = Tape::new();
        let lam_node = tape.vector(&lam)?;
        let pv = diff::DiffPhysVars::from_latent_vector(lam_node, ranges, fixed.sd)?;
        let nodes = diff::lift_pack_with(&tape, pack, fixed)?;
        let out = diff::forest_bands(&tape, &pv, fixed, &nodes, &shared_plan)?;
        let root = out.mul(tape.vector(&weights)?)?.sum()?;
        let grads = tape.backward(root)?;
        let analytic = grads.wrt(lam_node)?.to_vec();

        for i in 0..NUM_VARS {
            let mut f = |v: f64| {
                let mut p = lam;
                p[i] = v;
                reference_weighted(&p, ranges, fixed, pack, &plan, &weights)
                    .expect("in-domain evaluation")
            };
            let numeric = central_diff(&mut f, lam[i], h);
            report.record("forest_forward", i, &lam, analytic[i], numeric);
        }
    }
    Ok(report)
}
