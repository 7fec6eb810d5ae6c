//! The left-right comparative recurrent model.
//!
//! Each view runs a stack of four ConvLSTM cells over its cost volume
//! concatenated with the attention error map of the previous step. A head of
//! 1x1 convolutions turns the last hidden state into a cost tensor, whose
//! negation is read out by soft-argmin. The two disparity maps are then warped
//! into the opposite view and compared by a small convolutional branch whose
//! sigmoid output becomes the next step's attention map.
//!
//! Parameters live in a flat, named [`ParamStore`]. The network structure is
//! described by layouts generic over the parameter handle: `ParamId` for the
//! stored weights, [`Var`] once they are bound to a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::cost_volume::CostVolume;
use crate::error::{bail, Result};
use crate::geometry::{warp_route, WarpDirection};
use crate::image::DisparityMap;
use crate::init::{seeded_rng, uniform};
use crate::tensor::Tensor;

pub const TOWER_DEPTH: usize = 4;
pub const HEAD_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Candidate disparities `D` (= d_max).
    pub disparities: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the four ConvLSTM cells.
    pub cell_channels: [usize; TOWER_DEPTH],
    /// Output channels of the 1x1 head; the last entry must equal `disparities`.
    pub head_channels: [usize; HEAD_DEPTH],
    /// Hidden channels between the two 3x3 convolutions of the comparative branch.
    pub branch_channels: usize,
    pub share_towers: bool,
}

impl ModelConfig {
    /// Channel plan `[D, 2D, 2D, D]` for the cells and `[D, D, D]` for the head.
    pub fn new(disparities: usize, height: usize, width: usize) -> Self {
        let d = disparities;
        ModelConfig {
            disparities: d,
            height,
            width,
            cell_channels: [d, 2 * d, 2 * d, d],
            head_channels: [d, d, d],
            branch_channels: 8,
            share_towers: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disparities < 2 {
            bail!(Config, "need at least 2 disparities, got {}", self.disparities);
        }
        if self.height == 0 || self.width == 0 {
            bail!(Config, "empty spatial extent {}x{}", self.height, self.width);
        }
        if self.cell_channels.contains(&0) || self.head_channels.contains(&0) || self.branch_channels == 0 {
            bail!(Config, "zero-width layer in {:?}", self);
        }
        if self.head_channels[HEAD_DEPTH - 1] != self.disparities {
            bail!(
                Config,
                "head must end in {} channels, got {}",
                self.disparities,
                self.head_channels[HEAD_DEPTH - 1]
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Role of a parameter, used to decide what each training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// `W_x*`: input-to-state kernels.
    InputKernel,
    /// `W_h*`: state-to-state kernels.
    RecurrentKernel,
    /// `W_c*`: elementwise peephole maps.
    Peephole,
    /// `b_*` of a ConvLSTM cell.
    CellBias,
    Head,
    Branch,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, kind: ParamKind, t: Tensor) -> ParamId {
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Weights of one ConvLSTM cell, named after the terms they multiply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLstmCell<P> {
    pub w_xi: P,
    pub w_xf: P,
    pub w_xo: P,
    pub w_xc: P,
    pub w_hi: P,
    pub w_hf: P,
    pub w_ho: P,
    pub w_hc: P,
    pub w_ci: P,
    pub w_cf: P,
    pub w_co: P,
    pub b_i: P,
    pub b_f: P,
    pub b_o: P,
    pub b_c: P,
}

impl<P: Copy> ConvLstmCell<P> {
    pub fn map<Q>(&self, f: impl Fn(P) -> Q) -> ConvLstmCell<Q> {
        ConvLstmCell {
            w_xi: f(self.w_xi),
            w_xf: f(self.w_xf),
            w_xo: f(self.w_xo),
            w_xc: f(self.w_xc),
            w_hi: f(self.w_hi),
            w_hf: f(self.w_hf),
            w_ho: f(self.w_ho),
            w_hc: f(self.w_hc),
            w_ci: f(self.w_ci),
            w_cf: f(self.w_cf),
            w_co: f(self.w_co),
            b_i: f(self.b_i),
            b_f: f(self.b_f),
            b_o: f(self.b_o),
            b_c: f(self.b_c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer<P> {
    pub kernel: P,
    pub bias: P,
}

impl<P: Copy> ConvLayer<P> {
    pub fn map<Q>(&self, f: impl Fn(P) -> Q) -> ConvLayer<Q> {
        ConvLayer {
            kernel: f(self.kernel),
            bias: f(self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower<P> {
    pub cells: Vec<ConvLstmCell<P>>,
    pub head: Vec<ConvLayer<P>>,
}

impl<P: Copy> Tower<P> {
    pub fn map<Q>(&self, f: impl Fn(P) -> Q + Copy) -> Tower<Q> {
        Tower {
            cells: self.cells.iter().map(|c| c.map(f)).collect(),
            head: self.head.iter().map(|l| l.map(f)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch<P> {
    pub conv1: ConvLayer<P>,
    pub conv2: ConvLayer<P>,
}

impl<P: Copy> Branch<P> {
    pub fn map<Q>(&self, f: impl Fn(P) -> Q + Copy) -> Branch<Q> {
        Branch {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
        }
    }
}

/// Model parameters plus the structure that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct LrcrWeights {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// One tower when shared, otherwise `[left, right]`.
    pub towers: Vec<Tower<ParamId>>,
    pub branch: Branch<ParamId>,
}

fn conv_init(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    kind: ParamKind,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> ConvLayer<ParamId> {
    let bound = (1.0 / (c_in * k * k) as f64).sqrt();
    ConvLayer {
        kernel: store.push(format!("{name}.kernel"), kind, uniform(&[c_out, c_in, k, k], bound, rng)),
        bias: store.push(format!("{name}.bias"), kind, uniform(&[c_out], bound, rng)),
    }
}

/// Input-kernel gain that keeps activation variance roughly constant through
/// a freshly initialized cell: with gates near 0.5 the cell passes about a
/// quarter of its candidate signal, and a uniform `+/- sqrt(1/fan_in)` kernel
/// carries a third of unit variance, so `4 * sqrt(3)` restores unit gain.
pub const VARIANCE_PRESERVING_GAIN: f64 = 6.928203230275509;

#[allow(clippy::too_many_arguments)]
fn cell_init(
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    input_gain: f64,
    prefix: &str,
    c_in: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ConvLstmCell<ParamId> {
    let x_bound = (1.0 / (c_in * 9) as f64).sqrt();
    let k_bound = x_bound * input_gain;
    let h_bound = (1.0 / (c * 9) as f64).sqrt();
    let peep_bound = (1.0 / c as f64).sqrt();
    let mut p = |suffix: &str, kind: ParamKind, t: Tensor| store.push(format!("{prefix}.{suffix}"), kind, t);
    use ParamKind::*;
    let w_xi = p("w_xi", InputKernel, uniform(&[c, c_in, 3, 3], k_bound, rng));
    let w_xf = p("w_xf", InputKernel, uniform(&[c, c_in, 3, 3], k_bound, rng));
    let w_xo = p("w_xo", InputKernel, uniform(&[c, c_in, 3, 3], k_bound, rng));
    let w_xc = p("w_xc", InputKernel, uniform(&[c, c_in, 3, 3], k_bound, rng));
    let w_hi = p("w_hi", RecurrentKernel, uniform(&[c, c, 3, 3], h_bound, rng));
    let w_hf = p("w_hf", RecurrentKernel, uniform(&[c, c, 3, 3], h_bound, rng));
    let w_ho = p("w_ho", RecurrentKernel, uniform(&[c, c, 3, 3], h_bound, rng));
    let w_hc = p("w_hc", RecurrentKernel, uniform(&[c, c, 3, 3], h_bound, rng));
    let w_ci = p("w_ci", Peephole, uniform(&[c, h, w], peep_bound, rng));
    let w_cf = p("w_cf", Peephole, uniform(&[c, h, w], peep_bound, rng));
    let w_co = p("w_co", Peephole, uniform(&[c, h, w], peep_bound, rng));
    let b_i = p("b_i", CellBias, uniform(&[c], x_bound, rng));
    let b_f = p("b_f", CellBias, Tensor::full(&[c], 1.0));
    let b_o = p("b_o", CellBias, uniform(&[c], x_bound, rng));
    let b_c = p("b_c", CellBias, uniform(&[c], x_bound, rng));
    ConvLstmCell {
        w_xi,
        w_xf,
        w_xo,
        w_xc,
        w_hi,
        w_hf,
        w_ho,
        w_hc,
        w_ci,
        w_cf,
        w_co,
        b_i,
        b_f,
        b_o,
        b_c,
    }
}

impl LrcrWeights {
    /// Uniform `+/- sqrt(1/fan_in)` initialization with forget-gate biases at
    /// 1, input-to-state kernels widened by [`VARIANCE_PRESERVING_GAIN`].
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_gain(config, seed, VARIANCE_PRESERVING_GAIN)
    }

    /// As [`LrcrWeights::init`] with an explicit input-kernel gain; a gain of
    /// 1 gives plain `+/- sqrt(1/fan_in)` everywhere.
    pub fn init_with_gain(config: ModelConfig, seed: u64, input_gain: f64) -> Result<Self> {
        config.validate()?;
        if !(input_gain > 0.0 && input_gain.is_finite()) {
            bail!(Config, "input-kernel gain must be positive, got {}", input_gain);
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::default();
        let (h, w, d) = (config.height, config.width, config.disparities);
        let prefixes: &[&str] = if config.share_towers {
            &["tower"]
        } else {
            &["left", "right"]
        };
        let mut towers = Vec::new();
        for prefix in prefixes {
            let mut c_in = d + 1;
            let mut cells = Vec::new();
            for (i, &c) in config.cell_channels.iter().enumerate() {
                cells.push(cell_init(&mut store, &mut rng, input_gain, &format!("{prefix}.cell{i}"), c_in, c, h, w));
                c_in = c;
            }
            let mut head = Vec::new();
            for (j, &c) in config.head_channels.iter().enumerate() {
                head.push(conv_init(
                    &mut store,
                    &mut rng,
                    &format!("{prefix}.head{j}"),
                    ParamKind::Head,
                    c,
                    c_in,
                    1,
                ));
                c_in = c;
            }
            towers.push(Tower { cells, head });
        }
        let bc = config.branch_channels;
        let branch = Branch {
            conv1: conv_init(&mut store, &mut rng, "branch.conv1", ParamKind::Branch, bc, 2, 3),
            conv2: conv_init(&mut store, &mut rng, "branch.conv2", ParamKind::Branch, 1, bc, 3),
        };
        Ok(LrcrWeights {
            config,
            store,
            towers,
            branch,
        })
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &Graph) -> BoundModel {
        let vars: Vec<Var> = self.store.tensors.iter().map(|t| g.param(t)).collect();
        let get = |id: ParamId| vars[id.0];
        BoundModel {
            towers: self.towers.iter().map(|t| t.map(get)).collect(),
            branch: self.branch.map(get),
            disparities: self.config.disparities,
            vars,
        }
    }

    /// Disparity maps and attention maps of every recurrent step.
    pub fn infer(&self, cost_left: &CostVolume, cost_right: &CostVolume, steps: usize) -> Result<Vec<StepMaps>> {
        let g = Graph::new();
        let model = self.bind(&g);
        let cl = g.constant(cost_left.values().clone());
        let cr = g.constant(cost_right.values().clone());
        let outputs = lrcr_unroll(&g, &model, cl, cr, steps)?;
        outputs.iter().map(|o| o.to_maps(&g)).collect()
    }
}

/// Parameters of an [`LrcrWeights`] bound to one graph.
pub struct BoundModel {
    pub towers: Vec<Tower<Var>>,
    pub branch: Branch<Var>,
    pub disparities: usize,
    /// Leaf for every stored parameter, indexed like the store.
    pub vars: Vec<Var>,
}

impl BoundModel {
    pub fn tower(&self, right_view: bool) -> &Tower<Var> {
        if right_view && self.towers.len() > 1 {
            &self.towers[1]
        } else {
            &self.towers[0]
        }
    }
}

/// Hidden state and memory cell of one ConvLSTM layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
    /// Both tensors are known to be all-zero, so the recurrent and peephole
    /// terms vanish and are skipped.
    zero: bool,
}

impl ConvLstmState {
    pub fn new(h: Var, c: Var) -> Self {
        ConvLstmState { h, c, zero: false }
    }

    pub fn zeros(g: &Graph, channels: usize, height: usize, width: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[channels, height, width]));
        ConvLstmState { h: z, c: z, zero: true }
    }
}

fn gate(
    g: &Graph,
    x: Var,
    prev: &ConvLstmState,
    w_x: Var,
    w_h: Var,
    peephole: Option<Var>,
    bias: Var,
) -> Result<Var> {
    let mut pre = g.conv2d(x, w_x, Some(bias), 1)?;
    if !prev.zero {
        pre = g.add(pre, g.conv2d(prev.h, w_h, None, 1)?)?;
        if let Some(w_c) = peephole {
            pre = g.add(pre, g.mul(w_c, prev.c)?)?;
        }
    }
    Ok(pre)
}

/// One ConvLSTM update with peephole connections:
///
/// ```text
/// i = sigmoid(W_xi * X + W_hi * H + W_ci o C + b_i)
/// f = sigmoid(W_xf * X + W_hf * H + W_cf o C + b_f)
/// o = sigmoid(W_xo * X + W_ho * H + W_co o C + b_o)
/// C' = f o C + i o tanh(W_xc * X + W_hc * H + b_c)
/// H' = o o tanh(C')
/// ```
///
/// `*` is a 3x3 convolution with padding 1 and `o` the elementwise product.
pub fn convlstm_step(g: &Graph, cell: &ConvLstmCell<Var>, x: Var, prev: &ConvLstmState) -> Result<ConvLstmState> {
    let i = g.sigmoid(gate(g, x, prev, cell.w_xi, cell.w_hi, Some(cell.w_ci), cell.b_i)?);
    let f = g.sigmoid(gate(g, x, prev, cell.w_xf, cell.w_hf, Some(cell.w_cf), cell.b_f)?);
    let o = g.sigmoid(gate(g, x, prev, cell.w_xo, cell.w_ho, Some(cell.w_co), cell.b_o)?);
    let candidate = g.tanh(gate(g, x, prev, cell.w_xc, cell.w_hc, None, cell.b_c)?);
    let write = g.mul(i, candidate)?;
    let c = if prev.zero {
        if g.shape(write) != g.shape(prev.c) {
            bail!(Dimension, "cell state {:?} vs update {:?}", g.shape(prev.c), g.shape(write));
        }
        write
    } else {
        g.add(g.mul(f, prev.c)?, write)?
    };
    let h = g.mul(o, g.tanh(c))?;
    Ok(ConvLstmState::new(h, c))
}

/// Zero states matching a tower's channel plan.
pub fn zero_states(g: &Graph, tower: &Tower<Var>, height: usize, width: usize) -> Vec<ConvLstmState> {
    tower
        .cells
        .iter()
        .map(|c| {
            let channels = g.shape(c.b_i)[0];
            ConvLstmState::zeros(g, channels, height, width)
        })
        .collect()
}

/// Runs the ConvLSTM stack and head on `cost (+) err` and returns the score
/// tensor (negated costs) together with the updated states.
pub fn tower_forward(
    g: &Graph,
    tower: &Tower<Var>,
    cost: Var,
    err: Var,
    states: &[ConvLstmState],
) -> Result<(Var, Vec<ConvLstmState>)> {
    if states.len() != TOWER_DEPTH || tower.cells.len() != TOWER_DEPTH {
        bail!(
            Contract,
            "tower needs {} states for {} cells, got {}",
            TOWER_DEPTH,
            tower.cells.len(),
            states.len()
        );
    }
    let mut x = g.concat(&[cost, err])?;
    let mut next = Vec::with_capacity(TOWER_DEPTH);
    for (cell, prev) in tower.cells.iter().zip(states) {
        let s = convlstm_step(g, cell, x, prev)?;
        x = s.h;
        next.push(s);
    }
    for (j, layer) in tower.head.iter().enumerate() {
        x = g.conv2d(x, layer.kernel, Some(layer.bias), 0)?;
        if j + 1 < tower.head.len() {
            x = g.tanh(x);
        }
    }
    Ok((g.neg(x), next))
}

/// Expected disparity under the per-pixel softmax of `scores [D, H, W]`;
/// returns a `[1, H, W]` map with values in `[0, D - 1]`.
pub fn soft_argmin(g: &Graph, scores: Var) -> Result<Var> {
    let p = g.softmax_channels(scores)?;
    let d = g.shape(scores)[0];
    let idx: Vec<f64> = (0..d).map(|i| i as f64).collect();
    g.channel_dot(p, &idx)
}

/// Soft-argmin of a fixed score tensor.
pub fn soft_argmin_map(scores: &Tensor) -> Result<DisparityMap> {
    let g = Graph::new();
    let s = g.constant(scores.clone());
    let d = soft_argmin(&g, s)?;
    let (_, h, w) = scores.dims3()?;
    DisparityMap::dense(h, w, g.value(d).data().to_vec())
}

/// Maps a view's disparity and the opposite view's induced disparity (both
/// `[1, H, W]`, scaled by `1/D` inside) to a `(0, 1)` attention map.
pub fn comparative_branch(
    g: &Graph,
    branch: &Branch<Var>,
    disparity: Var,
    induced: Var,
    disparities: usize,
) -> Result<Var> {
    let s = 1.0 / disparities as f64;
    let x = g.concat(&[g.scale(disparity, s), g.scale(induced, s)])?;
    let x = g.tanh(g.conv2d(x, branch.conv1.kernel, Some(branch.conv1.bias), 1)?);
    let x = g.conv2d(x, branch.conv2.kernel, Some(branch.conv2.bias), 1)?;
    Ok(g.sigmoid(x))
}

/// Per-pixel attention values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionErrorMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Graph handles produced by one recurrent step, each `[1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub disp_left: Var,
    pub disp_right: Var,
    pub err_left: Var,
    pub err_right: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMaps {
    pub left: DisparityMap,
    pub right: DisparityMap,
    pub err_left: AttentionErrorMap,
    pub err_right: AttentionErrorMap,
}

fn var_map(g: &Graph, v: Var) -> Result<DisparityMap> {
    let t = g.value(v);
    let (_, h, w) = t.dims3()?;
    DisparityMap::dense(h, w, t.data().to_vec())
}

fn var_attention(g: &Graph, v: Var) -> Result<AttentionErrorMap> {
    let t = g.value(v);
    let (_, h, w) = t.dims3()?;
    Ok(AttentionErrorMap {
        height: h,
        width: w,
        values: t.data().to_vec(),
    })
}

impl StepOutput {
    pub fn to_maps(&self, g: &Graph) -> Result<StepMaps> {
        Ok(StepMaps {
            left: var_map(g, self.disp_left)?,
            right: var_map(g, self.disp_right)?,
            err_left: var_attention(g, self.err_left)?,
            err_right: var_attention(g, self.err_right)?,
        })
    }
}

/// Re-indexes `disparity` into the opposite view. Routing follows the
/// forward-warp rule on the current values; gradients reach the routed values
/// but not the routing.
fn induce(g: &Graph, disparity: Var, direction: WarpDirection) -> Result<Var> {
    let map = var_map(g, disparity)?;
    let route = warp_route(&map, direction);
    g.route(disparity, &route)
}

/// Unrolls the model for `steps` recurrent steps from zero states and
/// all-zero attention maps.
pub fn lrcr_unroll(
    g: &Graph,
    model: &BoundModel,
    cost_left: Var,
    cost_right: Var,
    steps: usize,
) -> Result<Vec<StepOutput>> {
    if steps < 1 {
        bail!(Contract, "need at least one recurrent step");
    }
    let shape = g.shape(cost_left);
    if shape != g.shape(cost_right) {
        bail!(Dimension, "cost volumes {:?} and {:?} differ", shape, g.shape(cost_right));
    }
    let [d, h, w] = shape[..] else {
        bail!(Dimension, "cost volume must be [D, H, W], got {:?}", shape)
    };
    if d != model.disparities {
        bail!(Dimension, "model expects {} disparities, volume has {}", model.disparities, d);
    }
    let mut states_l = zero_states(g, model.tower(false), h, w);
    let mut states_r = zero_states(g, model.tower(true), h, w);
    let zero_err = g.constant(Tensor::zeros(&[1, h, w]));
    let (mut err_l, mut err_r) = (zero_err, zero_err);
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (scores_l, next_l) = tower_forward(g, model.tower(false), cost_left, err_l, &states_l)?;
        let (scores_r, next_r) = tower_forward(g, model.tower(true), cost_right, err_r, &states_r)?;
        states_l = next_l;
        states_r = next_r;
        let disp_left = soft_argmin(g, scores_l)?;
        let disp_right = soft_argmin(g, scores_r)?;
        let induced_left = induce(g, disp_right, WarpDirection::RightToLeft)?;
        let induced_right = induce(g, disp_left, WarpDirection::LeftToRight)?;
        err_l = comparative_branch(g, &model.branch, disp_left, induced_left, d)?;
        err_r = comparative_branch(g, &model.branch, disp_right, induced_right, d)?;
        outputs.push(StepOutput {
            disp_left,
            disp_right,
            err_left: err_l,
            err_right: err_r,
        });
    }
    Ok(outputs)
}

/// The non-recurrent model: one tower pass per view from zero states and a
/// zero attention map. Returns the left and right disparity handles.
pub fn forward_single(g: &Graph, model: &BoundModel, cost_left: Var, cost_right: Var) -> Result<(Var, Var)> {
    let [_, h, w] = g.shape(cost_left)[..] else {
        bail!(Dimension, "cost volume must be [D, H, W]")
    };
    let zero_err = g.constant(Tensor::zeros(&[1, h, w]));
    let run = |cost: Var, right: bool| -> Result<Var> {
        let tower = model.tower(right);
        let states = zero_states(g, tower, h, w);
        let (scores, _) = tower_forward(g, tower, cost, zero_err, &states)?;
        soft_argmin(g, scores)
    };
    Ok((run(cost_left, false)?, run(cost_right, true)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            cell_channels: [3, 4, 4, 3],
            head_channels: [3, 3, 3],
            branch_channels: 2,
            ..ModelConfig::new(3, 5, 6)
        }
    }

    fn zeroed(cfg: ModelConfig) -> LrcrWeights {
        let mut w = LrcrWeights::init(cfg, 0).unwrap();
        for t in &mut w.store.tensors {
            *t = Tensor::zeros(t.shape());
        }
        w
    }

    #[test]
    fn parameter_names_follow_the_layout() {
        let w = LrcrWeights::init(tiny_config(), 1).unwrap();
        assert!(w.store.find("tower.cell0.w_xi").is_some());
        assert!(w.store.find("tower.cell3.w_co").is_some());
        assert!(w.store.find("tower.head2.kernel").is_some());
        assert!(w.store.find("branch.conv2.bias").is_some());
        assert_eq!(w.store.get(w.towers[0].cells[0].w_xi).shape(), &[3, 4, 3, 3]);
        assert_eq!(w.store.get(w.towers[0].cells[1].w_ci).shape(), &[4, 5, 6]);
        assert_eq!(w.store.get(w.towers[0].cells[2].b_f).data(), &[1.0; 4]);

        let unshared = LrcrWeights::init(
            ModelConfig {
                share_towers: false,
                ..tiny_config()
            },
            1,
        )
        .unwrap();
        assert_eq!(unshared.towers.len(), 2);
        assert!(unshared.store.find("right.cell2.w_hf").is_some());
    }

    #[test]
    fn config_rejects_wrong_head_width() {
        let cfg = ModelConfig {
            head_channels: [3, 3, 4],
            ..tiny_config()
        };
        assert!(LrcrWeights::init(cfg, 0).is_err());
    }

    #[test]
    fn zero_cell_halves_memory() {
        let w = zeroed(tiny_config());
        let g = Graph::new();
        let m = w.bind(&g);
        let x = g.constant(Tensor::full(&[4, 5, 6], 0.3));
        let c0 = 0.8;
        let prev = ConvLstmState::new(
            g.constant(Tensor::full(&[3, 5, 6], 0.2)),
            g.constant(Tensor::full(&[3, 5, 6], c0)),
        );
        let cell = &m.towers[0].cells[0];
        // cell0 takes D + 1 = 4 input channels.
        let s = convlstm_step(&g, cell, x, &prev).unwrap();
        assert!(g.value(s.c).data().iter().all(|&v| v == 0.5 * c0));
        let expect = 0.5 * (0.5 * c0).tanh();
        assert!(g.value(s.h).data().iter().all(|&v| v == expect));
    }

    #[test]
    fn convlstm_rejects_mismatched_state() {
        let w = zeroed(tiny_config());
        let g = Graph::new();
        let m = w.bind(&g);
        let x = g.constant(Tensor::zeros(&[4, 5, 6]));
        let bad = ConvLstmState::new(g.constant(Tensor::zeros(&[2, 5, 6])), g.constant(Tensor::zeros(&[2, 5, 6])));
        assert!(matches!(
            convlstm_step(&g, &m.towers[0].cells[0], x, &bad),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn tower_needs_four_states() {
        let w = zeroed(tiny_config());
        let g = Graph::new();
        let m = w.bind(&g);
        let cost = g.constant(Tensor::zeros(&[3, 5, 6]));
        let err = g.constant(Tensor::zeros(&[1, 5, 6]));
        let states = zero_states(&g, &m.towers[0], 5, 6);
        assert!(matches!(
            tower_forward(&g, &m.towers[0], cost, err, &states[..3]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn zero_weights_give_mid_range_disparity_at_every_step() {
        let w = zeroed(tiny_config());
        let cost = CostVolume::new(crate::image::View::Left, Tensor::from_fn(&[3, 5, 6], |i| (i % 7) as f64 / 7.0)).unwrap();
        let cost_r = CostVolume::new(crate::image::View::Right, cost.values().clone()).unwrap();
        let steps = w.infer(&cost, &cost_r, 3).unwrap();
        for s in &steps {
            assert!(s.left.values().iter().all(|&d| d == 1.0));
            assert!(s.err_left.values.iter().all(|&e| e == 0.5));
        }
    }

    #[test]
    fn unroll_rejects_zero_steps() {
        let w = LrcrWeights::init(tiny_config(), 2).unwrap();
        let cost = CostVolume::new(crate::image::View::Left, Tensor::zeros(&[3, 5, 6])).unwrap();
        assert!(matches!(w.infer(&cost, &cost, 0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn soft_argmin_examples() {
        let uniform = soft_argmin_map(&Tensor::full(&[4, 2, 2], 0.3)).unwrap();
        assert!(uniform.values().iter().all(|&d| d == 1.5));
        let m = soft_argmin_map(&Tensor::new(&[3, 1, 1], vec![0.0, -10.0, -10.0]).unwrap()).unwrap();
        let e = (-10f64).exp();
        let exact = (e + 2.0 * e) / (1.0 + 2.0 * e);
        assert!((m.values()[0] - exact).abs() < 1e-15);
        assert!((m.values()[0] - 1.36e-4).abs() < 1e-6);
    }

    #[test]
    fn zero_branch_outputs_half() {
        let w = zeroed(tiny_config());
        let g = Graph::new();
        let m = w.bind(&g);
        let a = g.constant(Tensor::from_fn(&[1, 5, 6], |i| i as f64 * 0.1));
        let b = g.constant(Tensor::from_fn(&[1, 5, 6], |i| 2.0 - i as f64 * 0.05));
        let e = comparative_branch(&g, &m.branch, a, b, 3).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.5));
    }
}
