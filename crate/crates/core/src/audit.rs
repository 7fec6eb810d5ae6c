//! Finite-difference audit of every differentiable operation at seeded
//! random points.
//!
//! Each case builds a scalar objective around one operation (or one model
//! component) and compares its reverse-mode gradient against a five-point
//! central difference. Deep components are checked on a centered objective
//! and a sampled subset of parameter coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::cost_volume::{siamese_cost_graph, SiameseWeights};
use crate::error::{bail, Result};
use crate::gradcheck::{all_coords, finite_diff_check_stencil, Stencil};
use crate::image::{DisparityMap, GrayImage};
use crate::model::{
    comparative_branch, convlstm_step, lrcr_unroll, soft_argmin, tower_forward, BoundModel, ConvLstmState,
    LrcrWeights, ModelConfig,
};
use crate::tensor::Tensor;
use crate::training::l1_disparity_loss;

/// Step of the five-point stencil.
pub const AUDIT_STEP: f64 = 3e-4;
/// Relative-error tolerance of a single operation.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance of the two-step unrolled model.
pub const UNROLL_TOLERANCE: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for functions with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(w * out)` for a fixed weighting `w` drawn in `[0.5, 1.5]`, so that no
/// output coordinate is silently ignored by the check.
fn weighted_sum(g: &Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return Ok(g.sum(out));
    }
    let mut r = rng(seed ^ 0xfeed);
    let w = g.constant(rand_tensor(&shape, 0.5, 1.5, &mut r));
    Ok(g.sum(g.mul(out, w)?))
}

/// How one audit point is evaluated.
#[derive(Clone, Copy)]
struct Probe {
    seed: u64,
    flip: bool,
}

fn audit_fd(
    f: impl Fn(&Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    flip: bool,
) -> Result<f64> {
    let f = |g: &Graph, v: &[Var]| {
        let out = f(g, v)?;
        Ok(if flip { g.flip_gradient(out) } else { out })
    };
    finite_diff_check_stencil(f, inputs, coords, AUDIT_STEP, Stencil::FivePoint)
}

type Case = Box<dyn Fn(Probe) -> Result<f64>>;

fn full_check(
    f: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
) -> Case {
    Box::new(move |p| {
        let inputs = make_inputs(&mut rng(p.seed));
        let obj = |g: &Graph, v: &[Var]| weighted_sum(g, f(g, v)?, p.seed);
        audit_fd(obj, &inputs, &all_coords(&inputs), p.flip)
    })
}

fn unary(op: fn(&Graph, Var) -> Result<Var>, kinked: bool) -> Case {
    full_check(
        move |g, v| op(g, v[0]),
        move |r| {
            vec![if kinked {
                away_from_zero(&[2, 3, 4], r)
            } else {
                rand_tensor(&[2, 3, 4], -2.0, 2.0, r)
            }]
        },
    )
}

fn binary(op: fn(&Graph, Var, Var) -> Result<Var>) -> Case {
    full_check(
        move |g, v| op(g, v[0], v[1]),
        |r| vec![rand_tensor(&[2, 3, 4], -2.0, 2.0, r), rand_tensor(&[2, 3, 4], -2.0, 2.0, r)],
    )
}

/// A random fraction of coordinates over all inputs, at least one per input.
fn sampled_coords(inputs: &[Tensor], fraction: f64, r: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = ((t.len() as f64 * fraction).ceil() as usize).clamp(1, t.len());
        coords.extend(sample(r, t.len(), n).into_iter().map(|j| (i, j)));
    }
    coords
}

fn small_model(seed: u64, d: usize, h: usize, w: usize) -> LrcrWeights {
    LrcrWeights::init(ModelConfig::new(d, h, w), seed).unwrap()
}

/// Rebinds `weights` onto caller-provided variables.
fn bound_from(weights: &LrcrWeights, vars: &[Var]) -> BoundModel {
    BoundModel {
        towers: weights.towers.iter().map(|t| t.map(|id| vars[id.0])).collect(),
        branch: weights.branch.map(|id| vars[id.0]),
        disparities: weights.config.disparities,
        vars: vars.to_vec(),
    }
}

fn convlstm_case() -> Case {
    // Inputs: x, h, c, then the 15 cell tensors.
    Box::new(|Probe { seed, flip }| {
        let mut r = rng(seed);
        let w = LrcrWeights::init(
            ModelConfig {
                cell_channels: [3, 3, 3, 3],
                head_channels: [3, 3, 3],
                ..ModelConfig::new(3, 4, 4)
            },
            seed,
        )?;
        let cell_ids = {
            let c = &w.towers[0].cells[1];
            vec![
                c.w_xi, c.w_xf, c.w_xo, c.w_xc, c.w_hi, c.w_hf, c.w_ho, c.w_hc, c.w_ci, c.w_cf, c.w_co, c.b_i, c.b_f,
                c.b_o, c.b_c,
            ]
        };
        let mut inputs = vec![
            rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut r),
            rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut r),
            rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut r),
        ];
        inputs.extend(cell_ids.iter().map(|&id| w.store.get(id).clone()));
        let cell = w.towers[0].cells[1];
        let f = move |g: &Graph, v: &[Var]| -> Result<Vec<Var>> {
            let bound = cell.map(|id| v[3 + cell_ids.iter().position(|&c| c == id).unwrap()]);
            let s = convlstm_step(g, &bound, v[0], &ConvLstmState::new(v[1], v[2]))?;
            Ok(vec![s.h, s.c])
        };
        audit_fd(centered(f, &inputs)?, &inputs, &all_coords(&inputs), flip)
    })
}

fn tower_case() -> Case {
    Box::new(|Probe { seed, flip }| {
        let (d, h, wd) = (8, 8, 8);
        let weights = small_model(seed, d, h, wd);
        let mut r = rng(seed);
        let mut inputs = weights.store.tensors.clone();
        let n_params = inputs.len();
        inputs.push(rand_tensor(&[d, h, wd], 0.0, 1.0, &mut r));
        inputs.push(rand_tensor(&[1, h, wd], 0.0, 1.0, &mut r));
        let chans = weights.config.cell_channels;
        for &c in &chans {
            inputs.push(rand_tensor(&[c, h, wd], -0.5, 0.5, &mut r));
            inputs.push(rand_tensor(&[c, h, wd], -0.5, 0.5, &mut r));
        }
        let coords: Vec<(usize, usize)> = sampled_coords(&inputs[..n_params], 0.01, &mut r);
        let w2 = weights.clone();
        let f = move |g: &Graph, v: &[Var]| -> Result<Vec<Var>> {
            let m = bound_from(&w2, &v[..n_params]);
            let states: Vec<ConvLstmState> = (0..4)
                .map(|i| ConvLstmState::new(v[n_params + 2 + 2 * i], v[n_params + 3 + 2 * i]))
                .collect();
            let (scores, _) = tower_forward(g, m.tower(false), v[n_params], v[n_params + 1], &states)?;
            Ok(vec![scores])
        };
        audit_fd(centered(f, &inputs)?, &inputs, &coords, flip)
    })
}

fn branch_case() -> Case {
    Box::new(|Probe { seed, flip }| {
        let weights = small_model(seed, 8, 6, 6);
        let b = weights.branch;
        let ids = [b.conv1.kernel, b.conv1.bias, b.conv2.kernel, b.conv2.bias];
        let mut r = rng(seed);
        let mut inputs: Vec<Tensor> = ids.iter().map(|&id| weights.store.get(id).clone()).collect();
        inputs.push(rand_tensor(&[1, 6, 6], 0.0, 7.0, &mut r));
        inputs.push(rand_tensor(&[1, 6, 6], 0.0, 7.0, &mut r));
        let f = move |g: &Graph, v: &[Var]| -> Result<Vec<Var>> {
            let ids = &ids;
            let bound = b.map(|id| v[ids.iter().position(|&c| c == id).unwrap()]);
            Ok(vec![comparative_branch(g, &bound, v[4], v[5], 8)?])
        };
        audit_fd(centered(f, &inputs)?, &inputs, &all_coords(&inputs), flip)
    })
}

fn siamese_case() -> Case {
    Box::new(|Probe { seed, flip }| {
        let mut r = rng(seed);
        let left = GrayImage::from_fn(16, 16, |_, _| r.gen_range(0.0..1.0))?;
        let right = GrayImage::from_fn(16, 16, |_, _| r.gen_range(0.0..1.0))?;
        let weights = SiameseWeights::init(seed);
        let inputs: Vec<Tensor> = weights.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let f = move |g: &Graph, v: &[Var]| -> Result<Vec<Var>> {
            let layers: Vec<(Var, Var)> = v.chunks(2).map(|p| (p[0], p[1])).collect();
            let (cl, cr) = siamese_cost_graph(g, &left, &right, &layers, 4)?;
            Ok(vec![cl, cr])
        };
        audit_fd(centered(f, &inputs)?, &inputs, &all_coords(&inputs), flip)
    })
}

fn l1_case() -> Case {
    Box::new(|Probe { seed, flip }| {
        let mut r = rng(seed);
        let gt_vals: Vec<f64> = (0..30).map(|_| r.gen_range(0.0..7.0)).collect();
        let valid: Vec<bool> = (0..30).map(|i| i % 4 != 1).collect();
        let offsets = away_from_zero(&[1, 5, 6], &mut r);
        let pred = Tensor::from_fn(&[1, 5, 6], |i| gt_vals[i] + offsets.data()[i]);
        let gt = DisparityMap::new(5, 6, gt_vals, valid)?;
        let f = move |g: &Graph, v: &[Var]| l1_disparity_loss(g, v[0], &gt);
        audit_fd(f, &[pred.clone()], &all_coords(&[pred]), flip)
    })
}

pub type Objective = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

/// `sum_k mean(out_k - base_k)`, where `base_k` is `out_k` at `inputs`.
///
/// Same gradient as `sum_k mean(out_k)`, but the differences stay tiny, so the
/// probes are not quantized to the rounding grid of a large objective value.
fn centered(outputs: impl Fn(&Graph, &[Var]) -> Result<Vec<Var>> + 'static, inputs: &[Tensor]) -> Result<Objective> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let base: Vec<Tensor> = outputs(&g, &vars)?.into_iter().map(|v| (*g.value(v)).clone()).collect();
    Ok(Box::new(move |g: &Graph, v: &[Var]| {
        let mut total = g.constant(Tensor::scalar(0.0));
        for (out, b) in outputs(g, v)?.into_iter().zip(&base) {
            let diff = g.sub(out, g.constant(b.clone()))?;
            total = g.add(total, g.mean(diff))?;
        }
        Ok(total)
    }))
}

/// Two unrolled steps at D=8 on 8x8: the objective, its inputs (parameters
/// then both cost volumes) and the sampled parameter coordinates.
fn unroll_problem(seed: u64) -> Result<(Objective, Vec<Tensor>, Vec<(usize, usize)>)> {
    let (d, h, w) = (8, 8, 8);
    let weights = small_model(seed, d, h, w);
    let mut r = rng(seed);
    let mut inputs = weights.store.tensors.clone();
    let n_params = inputs.len();
    inputs.push(rand_tensor(&[d, h, w], 0.0, 1.0, &mut r));
    inputs.push(rand_tensor(&[d, h, w], 0.0, 1.0, &mut r));
    let coords = sampled_coords(&inputs[..n_params], 0.01, &mut r);
    let outputs = move |g: &Graph, v: &[Var]| -> Result<Vec<Var>> {
        let m = bound_from(&weights, &v[..n_params]);
        let steps = lrcr_unroll(g, &m, v[n_params], v[n_params + 1], 2)?;
        Ok(steps
            .into_iter()
            .flat_map(|s| [s.disp_left, s.disp_right, s.err_left, s.err_right])
            .collect())
    };
    let f = centered(outputs, &inputs)?;
    Ok((f, inputs, coords))
}

fn unroll_case() -> Case {
    Box::new(|Probe { seed, flip }| {
        let (f, inputs, coords) = unroll_problem(seed)?;
        audit_fd(f, &inputs, &coords, flip)
    })
}

fn softmax_argmin_case() -> Case {
    full_check(
        |g, v| soft_argmin(g, v[0]),
        |r| vec![rand_tensor(&[5, 3, 3], -3.0, 3.0, r)],
    )
}

/// Every differentiable operation with its tolerance.
fn gradient_cases() -> Vec<(&'static str, f64, Case)> {
    let t = OP_TOLERANCE;
    vec![
        (
            "conv2d",
            t,
            full_check(
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1),
                |r| {
                    vec![
                        rand_tensor(&[2, 4, 5], -1.0, 1.0, r),
                        rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, r),
                        rand_tensor(&[3], -1.0, 1.0, r),
                    ]
                },
            ),
        ),
        ("add", t, binary(|g, a, b| g.add(a, b))),
        ("sub", t, binary(|g, a, b| g.sub(a, b))),
        ("mul", t, binary(|g, a, b| g.mul(a, b))),
        ("scale", t, unary(|g, a| Ok(g.scale(a, -1.7)), false)),
        ("add_scalar", t, unary(|g, a| Ok(g.add_scalar(a, 0.3)), false)),
        ("neg", t, unary(|g, a| Ok(g.neg(a)), false)),
        ("sigmoid", t, unary(|g, a| Ok(g.sigmoid(a)), false)),
        ("tanh", t, unary(|g, a| Ok(g.tanh(a)), false)),
        ("relu", t, unary(|g, a| Ok(g.relu(a)), true)),
        ("abs", t, unary(|g, a| Ok(g.abs(a)), true)),
        ("softmax_over_disparity", t, unary(|g, a| g.softmax_channels(a), false)),
        ("normalize_channels", t, unary(|g, a| g.normalize_channels(a, 1e-12), false)),
        ("concat", t, binary(|g, a, b| g.concat(&[a, b]))),
        ("channel_dot", t, unary(|g, a| g.channel_dot(a, &[0.5, -1.0]), false)),
        ("mean", t, unary(|g, a| Ok(g.mean(a)), false)),
        (
            "masked_mean",
            t,
            unary(|g, a| g.masked_mean(a, &(0..24).map(|i| i % 3 != 0).collect::<Vec<_>>()), false),
        ),
        ("gather", t, unary(|g, a| g.gather(a, &[5, 0, 5, 23, 7]), false)),
        (
            "route",
            t,
            unary(|g, a| g.route(a, &(0..24).map(|i| (i % 5 != 2).then_some((i * 7) % 24)).collect::<Vec<_>>()), false),
        ),
        (
            "shifted_dot",
            t,
            binary(|g, a, b| {
                let l = g.shifted_dot(a, b, 2, false, -1.0)?;
                let r = g.shifted_dot(b, a, 2, true, -1.0)?;
                g.concat(&[l, r])
            }),
        ),
        ("convlstm_step", t, convlstm_case()),
        ("tower_forward", t, tower_case()),
        ("soft_argmin", t, softmax_argmin_case()),
        ("comparative_branch", t, branch_case()),
        ("siamese_cost", t, siamese_case()),
        ("l1_disparity_loss", t, l1_case()),
        ("lrcr_unroll_t2", UNROLL_TOLERANCE, unroll_case()),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    /// Number of random points per operation.
    pub points: u64,
    pub seed: u64,
    /// Restrict the audit to these operations; empty means all.
    pub ops: Vec<String>,
    /// Test hook: negate every analytic gradient, which must fail the audit.
    pub flip_gradients: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            points: 10,
            seed: 1000,
            ops: Vec::new(),
            flip_gradients: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpAudit {
    pub name: &'static str,
    /// Worst relative error over all points; infinite if a point errored.
    pub worst: f64,
    pub tolerance: f64,
}

impl OpAudit {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Names of all audited operations, in audit order.
pub fn op_names() -> Vec<&'static str> {
    gradient_cases().into_iter().map(|(n, _, _)| n).collect()
}

/// Audits the selected operations, reporting each as it finishes.
pub fn run_audit(cfg: &AuditConfig, mut on_op: impl FnMut(&OpAudit)) -> Result<Vec<OpAudit>> {
    let names = op_names();
    if let Some(bad) = cfg.ops.iter().find(|o| !names.contains(&o.as_str())) {
        bail!(Config, "unknown operation '{}'; known: {}", bad, names.join(", "));
    }
    if cfg.points == 0 {
        bail!(Config, "audit needs at least one point");
    }
    let mut out = Vec::new();
    for (name, tolerance, case) in gradient_cases() {
        if !cfg.ops.is_empty() && !cfg.ops.iter().any(|o| o == name) {
            continue;
        }
        let worst = (0..cfg.points)
            .map(|i| {
                let probe = Probe {
                    seed: cfg.seed + i,
                    flip: cfg.flip_gradients,
                };
                case(probe).unwrap_or(f64::INFINITY)
            })
            .fold(0.0, f64::max);
        let r = OpAudit { name, worst, tolerance };
        on_op(&r);
        out.push(r);
    }
    Ok(out)
}
