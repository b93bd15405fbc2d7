//! RGB-D feature fusion.
//!
//! The gated recurrent fusion (GRF) block treats the two modalities as the
//! steps of a convolutional GRU. With `[a, b]` denoting channel concatenation:
//!
//! ```text
//! r   = sigmoid(W_r * [f, h])
//! z   = sigmoid(W_z * [f, h])
//! h'  = r (.) h
//! h_c = tanh(W_h * [f, h'])
//! h+  = z (.) h + (1 - z) (.) h_c
//! ```
//!
//! The hidden state starts as `f_d + f_rgb`. A fusion run feeds features in
//! the order `f_d_1, f_rgb_1, ..., f_d_N, f_rgb_N`, every step using the one
//! shared set of gate weights.
//!
//! The baselines (sum, average, max, concat, gated, conv-LSTM) are here too so
//! the network can swap strategies without touching anything else.

use std::fmt;
use std::str::FromStr;

use grf_tensor::{ConvConfig, Graph, NodeId, ParamStore};
use rand::Rng;

use crate::blocks::{Conv, ConvSpec, Cost};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Grf,
    Sum,
    Average,
    Max,
    Concat,
    Gated,
    Lstm,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 7] = [
        FusionStrategy::Grf,
        FusionStrategy::Sum,
        FusionStrategy::Average,
        FusionStrategy::Max,
        FusionStrategy::Concat,
        FusionStrategy::Gated,
        FusionStrategy::Lstm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FusionStrategy::Grf => "grf",
            FusionStrategy::Sum => "sum",
            FusionStrategy::Average => "average",
            FusionStrategy::Max => "max",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Gated => "gated",
            FusionStrategy::Lstm => "lstm",
        }
    }

    /// Recurrent strategies thread one hidden state through every stage.
    pub fn is_recurrent(self) -> bool {
        matches!(self, FusionStrategy::Grf | FusionStrategy::Lstm)
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Unsupported(format!("fusion strategy `{s}`")))
    }
}

fn gate_conv(channels: usize, k: usize) -> ConvSpec {
    ConvSpec::new(2 * channels, channels, ConvConfig::cube(3, k))
}

fn sites(spatial: &[usize]) -> u64 {
    spatial.iter().product::<usize>() as u64
}

/// Shape of one GRF block: `channels` = C, gate kernel `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrfSpec {
    pub channels: usize,
    pub k: usize,
}

impl GrfSpec {
    pub fn new(channels: usize) -> Self {
        Self { channels, k: 3 }
    }

    pub fn gate(&self) -> ConvSpec {
        gate_conv(self.channels, self.k)
    }

    pub fn param_count(&self) -> u64 {
        3 * self.gate().param_count()
    }

    /// Cost of one step at the given extents (gate convs + 8 elementwise ops).
    pub fn step_cost(&self, spatial: &[usize]) -> Result<Cost> {
        let (gate, _) = self.gate().cost(spatial)?;
        let gates = Cost {
            params: 0,
            flops: 3 * gate.flops,
        };
        Ok(gates + Cost::flops(8 * sites(spatial) * self.channels as u64))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<GrfParams> {
        let g = self.gate();
        Ok(GrfParams {
            spec: *self,
            w_r: g.register(store, rng, &format!("{name}.w_r"))?,
            w_z: g.register(store, rng, &format!("{name}.w_z"))?,
            w_h: g.register(store, rng, &format!("{name}.w_h"))?,
        })
    }
}

/// The three gate convolutions shared by every step of a fusion run.
#[derive(Clone, Debug)]
pub struct GrfParams {
    pub spec: GrfSpec,
    pub w_r: Conv,
    pub w_z: Conv,
    pub w_h: Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionState {
    h: Option<NodeId>,
    pub step: usize,
}

impl FusionState {
    /// A state holding hidden tensor `h`.
    pub fn new(h: NodeId) -> Self {
        Self { h: Some(h), step: 0 }
    }

    /// A state with no hidden tensor; stepping it is an error.
    pub fn uninit() -> Self {
        Self { h: None, step: 0 }
    }

    pub fn h(&self) -> Result<NodeId> {
        self.h
            .ok_or_else(|| Error::Config("fusion state used before initialization".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrfStepTrace {
    pub r: NodeId,
    pub z: NodeId,
    pub h_reset: NodeId,
    pub h_candidate: NodeId,
}

fn same_shape(g: &Graph, a: NodeId, b: NodeId) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return shape_err(format!(
            "fusion inputs differ: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        ));
    }
    Ok(())
}

/// `h_0 = f_d + f_rgb`.
pub fn grf_init(g: &mut Graph, f_d: NodeId, f_rgb: NodeId) -> Result<FusionState> {
    same_shape(g, f_d, f_rgb)?;
    Ok(FusionState {
        h: Some(g.add(f_d, f_rgb)?),
        step: 0,
    })
}

pub fn grf_step(
    g: &mut Graph,
    store: &ParamStore,
    state: FusionState,
    f: NodeId,
    params: &GrfParams,
) -> Result<(FusionState, GrfStepTrace)> {
    let h = state.h()?;
    same_shape(g, f, h)?;
    let fh = g.concat(&[f, h])?;
    let r = params.w_r.forward(g, store, fh)?;
    let r = g.sigmoid(r)?;
    let z = params.w_z.forward(g, store, fh)?;
    let z = g.sigmoid(z)?;
    let h_reset = g.mul(r, h)?;
    let fr = g.concat(&[f, h_reset])?;
    let hc = params.w_h.forward(g, store, fr)?;
    let h_candidate = g.tanh(hc)?;
    let keep = g.mul(z, h)?;
    let one_minus_z = g.one_minus(z)?;
    let add = g.mul(one_minus_z, h_candidate)?;
    let next = g.add(keep, add)?;
    Ok((
        FusionState {
            h: Some(next),
            step: state.step + 1,
        },
        GrfStepTrace {
            r,
            z,
            h_reset,
            h_candidate,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct FusionRun {
    pub state: FusionState,
    pub traces: Vec<GrfStepTrace>,
    /// Hidden state after each (depth, rgb) stage.
    pub stage_states: Vec<NodeId>,
}

/// Step 1 consumes `f_d`, step 2 consumes `f_rgb`; both reuse `params`.
pub fn single_stage_fuse(
    g: &mut Graph,
    store: &ParamStore,
    f_d: NodeId,
    f_rgb: NodeId,
    params: &GrfParams,
) -> Result<FusionRun> {
    multi_stage_fuse(g, store, &[f_d, f_rgb], params)
}

/// Feed `(f_d_1, f_rgb_1, ..., f_d_N, f_rgb_N)` serially through one GRF block.
pub fn multi_stage_fuse(
    g: &mut Graph,
    store: &ParamStore,
    sequence: &[NodeId],
    params: &GrfParams,
) -> Result<FusionRun> {
    if sequence.is_empty() || sequence.len() % 2 != 0 {
        return shape_err(format!(
            "fusion sequence needs a positive even length, got {}",
            sequence.len()
        ));
    }
    for &f in &sequence[1..] {
        same_shape(g, sequence[0], f)?;
    }
    let mut state = grf_init(g, sequence[0], sequence[1])?;
    let mut traces = Vec::with_capacity(sequence.len());
    let mut stage_states = Vec::with_capacity(sequence.len() / 2);
    for (i, &f) in sequence.iter().enumerate() {
        let (next, trace) = grf_step(g, store, state, f, params)?;
        state = next;
        traces.push(trace);
        if i % 2 == 1 {
            stage_states.push(state.h()?);
        }
    }
    Ok(FusionRun {
        state,
        traces,
        stage_states,
    })
}

/// Conv-LSTM baseline with the same gate kernel and channel plan as GRF.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: Conv,
    pub forget: Conv,
    pub output: Conv,
    pub cell: Conv,
}

impl LstmParams {
    fn register(channels: usize, k: usize, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Self> {
        let g = gate_conv(channels, k);
        Ok(Self {
            input: g.register(store, rng, &format!("{name}.w_i"))?,
            forget: g.register(store, rng, &format!("{name}.w_f"))?,
            output: g.register(store, rng, &format!("{name}.w_o"))?,
            cell: g.register(store, rng, &format!("{name}.w_g"))?,
        })
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: NodeId,
        c: NodeId,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        same_shape(g, x, h)?;
        let xh = g.concat(&[x, h])?;
        let i = self.input.forward(g, store, xh)?;
        let i = g.sigmoid(i)?;
        let f = self.forget.forward(g, store, xh)?;
        let f = g.sigmoid(f)?;
        let o = self.output.forward(g, store, xh)?;
        let o = g.sigmoid(o)?;
        let cand = self.cell.forward(g, store, xh)?;
        let cand = g.tanh(cand)?;
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_next = g.add(fc, ic)?;
        let tc = g.tanh(c_next)?;
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Grf(GrfParams),
    Lstm(LstmParams),
    /// `G = sigmoid(W_g * [a, b])`, output `G a + (1 - G) b`.
    Gated(Conv),
    /// `[a, b]` projected back to C channels by a PWConv.
    Concat(Conv),
    Sum,
    Average,
    Max,
}

/// Fusion strategy plus the feature width it operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub strategy: FusionStrategy,
    pub channels: usize,
    pub k: usize,
}

impl FusionSpec {
    pub fn new(strategy: FusionStrategy, channels: usize) -> Self {
        Self {
            strategy,
            channels,
            k: 3,
        }
    }

    fn concat_proj(&self) -> ConvSpec {
        ConvSpec::pointwise(3, 2 * self.channels, self.channels)
    }

    pub fn param_count(&self) -> u64 {
        let gate = gate_conv(self.channels, self.k).param_count();
        match self.strategy {
            FusionStrategy::Grf => 3 * gate,
            FusionStrategy::Lstm => 4 * gate,
            FusionStrategy::Gated => gate,
            FusionStrategy::Concat => self.concat_proj().param_count(),
            FusionStrategy::Sum | FusionStrategy::Average | FusionStrategy::Max => 0,
        }
    }

    /// Total cost of fusing `stages` (depth, rgb) pairs at the given extents.
    pub fn cost(&self, spatial: &[usize], stages: usize) -> Result<Cost> {
        let n = sites(spatial) * self.channels as u64;
        let gate = gate_conv(self.channels, self.k).cost(spatial)?.0.flops;
        let s = stages as u64;
        let flops = match self.strategy {
            FusionStrategy::Grf => n + 2 * s * (3 * gate + 8 * n),
            FusionStrategy::Lstm => n + 2 * s * (4 * gate + 9 * n),
            FusionStrategy::Gated => s * (gate + 5 * n) + (s - 1) * n,
            FusionStrategy::Concat => {
                s * self.concat_proj().cost(spatial)?.0.flops + (s - 1) * n
            }
            FusionStrategy::Sum | FusionStrategy::Max => s * n + (s - 1) * n,
            FusionStrategy::Average => 2 * s * n + (s - 1) * n,
        };
        Ok(Cost {
            params: self.param_count(),
            flops,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Fusion> {
        Ok(match self.strategy {
            FusionStrategy::Grf => Fusion::Grf(GrfSpec { channels: self.channels, k: self.k }.register(store, rng, name)?),
            FusionStrategy::Lstm => Fusion::Lstm(LstmParams::register(self.channels, self.k, store, rng, name)?),
            FusionStrategy::Gated => {
                Fusion::Gated(gate_conv(self.channels, self.k).register(store, rng, &format!("{name}.w_g"))?)
            }
            FusionStrategy::Concat => Fusion::Concat(self.concat_proj().register(store, rng, &format!("{name}.proj"))?),
            FusionStrategy::Sum => Fusion::Sum,
            FusionStrategy::Average => Fusion::Average,
            FusionStrategy::Max => Fusion::Max,
        })
    }
}

impl Fusion {
    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Fusion::Grf(_) => FusionStrategy::Grf,
            Fusion::Lstm(_) => FusionStrategy::Lstm,
            Fusion::Gated(_) => FusionStrategy::Gated,
            Fusion::Concat(_) => FusionStrategy::Concat,
            Fusion::Sum => FusionStrategy::Sum,
            Fusion::Average => FusionStrategy::Average,
            Fusion::Max => FusionStrategy::Max,
        }
    }

    /// Fuse per-stage `(depth, rgb)` features into one volume.
    ///
    /// Recurrent strategies run over the whole interleaved sequence. The
    /// others fuse each stage on its own (sharing any weights) and sum the
    /// per-stage results.
    pub fn fuse_stages(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stages: &[(NodeId, NodeId)],
    ) -> Result<NodeId> {
        if stages.is_empty() {
            return shape_err("fusion needs at least one stage");
        }
        let sequence: Vec<NodeId> = stages.iter().flat_map(|&(d, c)| [d, c]).collect();
        match self {
            Fusion::Grf(p) => multi_stage_fuse(g, store, &sequence, p)?.state.h(),
            Fusion::Lstm(p) => lstm_run(g, store, &sequence, p),
            _ => {
                let mut acc = baseline_fuse(g, store, self, stages[0].0, stages[0].1)?;
                for &(d, c) in &stages[1..] {
                    let f = baseline_fuse(g, store, self, d, c)?;
                    acc = g.add(acc, f)?;
                }
                Ok(acc)
            }
        }
    }
}

fn lstm_run(g: &mut Graph, store: &ParamStore, sequence: &[NodeId], p: &LstmParams) -> Result<NodeId> {
    if sequence.len() < 2 || sequence.len() % 2 != 0 {
        return shape_err("LSTM fusion needs a positive even-length sequence");
    }
    let mut h = g.add(sequence[0], sequence[1])?;
    let zeros = grf_tensor::Tensor::zeros(g.value(h).shape());
    let mut c = g.input(zeros);
    for &x in sequence {
        (h, c) = p.step(g, store, h, c, x)?;
    }
    Ok(h)
}

/// One fusion of a single (a, b) pair with a non-GRF strategy.
pub fn baseline_fuse(
    g: &mut Graph,
    store: &ParamStore,
    fusion: &Fusion,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    if !matches!(fusion, Fusion::Concat(_)) {
        same_shape(g, a, b)?;
    } else if g.value(a).spatial() != g.value(b).spatial() {
        return shape_err("concat fusion needs equal spatial extents");
    }
    Ok(match fusion {
        Fusion::Grf(_) => {
            return Err(Error::Unsupported(
                "GRF is not a baseline; use single_stage_fuse".into(),
            ))
        }
        Fusion::Sum => g.add(a, b)?,
        Fusion::Average => {
            let s = g.add(a, b)?;
            g.scale(s, 0.5)?
        }
        Fusion::Max => g.maximum(a, b)?,
        Fusion::Concat(proj) => {
            let ab = g.concat(&[a, b])?;
            proj.forward(g, store, ab)?
        }
        Fusion::Gated(w) => {
            let ab = g.concat(&[a, b])?;
            let gate = w.forward(g, store, ab)?;
            let gate = g.sigmoid(gate)?;
            let ga = g.mul(gate, a)?;
            let inv = g.one_minus(gate)?;
            let gb = g.mul(inv, b)?;
            g.add(ga, gb)?
        }
        Fusion::Lstm(p) => lstm_run(g, store, &[a, b], p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use grf_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(spec: FusionSpec) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let f = spec
            .register(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "fusion")
            .unwrap();
        for e in store.entries_mut() {
            e.value.data_mut().fill(0.0);
        }
        (store, f)
    }

    fn vol(vals: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn init_is_elementwise_sum() {
        let mut g = Graph::new();
        let a = g.input(vol(&[1.0, 2.0]));
        let b = g.input(vol(&[3.0, 4.0]));
        let s = grf_init(&mut g, a, b).unwrap();
        assert_eq!(g.value(s.h().unwrap()).data(), &[4.0, 6.0]);

        let c = g.input(vol(&[1.0, 2.0, 3.0]));
        assert!(matches!(grf_init(&mut g, a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn uninitialized_state_cannot_step() {
        let (store, f) = zeroed(FusionSpec::new(FusionStrategy::Grf, 2));
        let Fusion::Grf(p) = f else { unreachable!() };
        let mut g = Graph::new();
        let x = g.input(vol(&[1.0, 2.0]));
        assert!(grf_step(&mut g, &store, FusionState::uninit(), x, &p).is_err());
    }

    #[test]
    fn zero_weights_halve_the_hidden_state() {
        let (store, f) = zeroed(FusionSpec::new(FusionStrategy::Grf, 2));
        let Fusion::Grf(p) = f else { unreachable!() };
        let mut g = Graph::new();
        let a = g.input(vol(&[0.0, 0.0]));
        let b = g.input(vol(&[2.0, 2.0]));
        let s = grf_init(&mut g, a, b).unwrap();
        let (s, t) = grf_step(&mut g, &store, s, a, &p).unwrap();
        assert_eq!(g.value(t.r).data(), &[0.5, 0.5]);
        assert_eq!(g.value(t.z).data(), &[0.5, 0.5]);
        assert_eq!(g.value(t.h_candidate).data(), &[0.0, 0.0]);
        assert_eq!(g.value(s.h().unwrap()).data(), &[1.0, 1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn saturated_update_gate_preserves_state() {
        let mut store = ParamStore::new();
        let p = GrfSpec::new(2)
            .register(&mut store, &mut ChaCha8Rng::seed_from_u64(5), "grf")
            .unwrap();
        store.get_mut(p.w_z.weight).value.data_mut().fill(0.0);
        store.get_mut(p.w_z.bias.unwrap()).value.data_mut().fill(20.0);
        let mut g = Graph::new();
        let a = g.input(vol(&[0.3, -0.7]));
        let b = g.input(vol(&[1.1, 0.4]));
        let s = grf_init(&mut g, a, b).unwrap();
        let h0 = g.value(s.h().unwrap()).clone();
        let (s, _) = grf_step(&mut g, &store, s, a, &p).unwrap();
        let h1 = g.value(s.h().unwrap());
        assert!(h0.data().iter().zip(h1.data()).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn baselines_on_small_vectors() {
        let mut g = Graph::new();
        let a = g.input(vol(&[1.0, 5.0]));
        let b = g.input(vol(&[3.0, 4.0]));
        let store = ParamStore::new();
        let s = baseline_fuse(&mut g, &store, &Fusion::Sum, a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 9.0]);
        let m = baseline_fuse(&mut g, &store, &Fusion::Max, a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let av = baseline_fuse(&mut g, &store, &Fusion::Average, a, b).unwrap();
        assert_eq!(g.value(av).data(), &[2.0, 4.5]);
    }

    #[test]
    fn zero_weight_gated_fusion_is_average() {
        let (store, f) = zeroed(FusionSpec::new(FusionStrategy::Gated, 2));
        let mut g = Graph::new();
        let a = g.input(vol(&[1.0, 5.0]));
        let b = g.input(vol(&[3.0, 4.0]));
        let y = baseline_fuse(&mut g, &store, &f, a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.5]);
    }

    #[test]
    fn grf_is_not_a_baseline_tag() {
        let (store, f) = zeroed(FusionSpec::new(FusionStrategy::Grf, 2));
        let mut g = Graph::new();
        let a = g.input(vol(&[1.0, 5.0]));
        assert!(matches!(
            baseline_fuse(&mut g, &store, &f, a, a),
            Err(Error::Unsupported(_))
        ));
        assert!("bilinear".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn parameter_free_strategies_register_nothing() {
        for s in [FusionStrategy::Sum, FusionStrategy::Average, FusionStrategy::Max] {
            let (store, _) = zeroed(FusionSpec::new(s, 8));
            assert_eq!(store.scalar_count(), 0);
            assert_eq!(FusionSpec::new(s, 8).param_count(), 0);
        }
        for s in FusionStrategy::ALL {
            let (store, _) = zeroed(FusionSpec::new(s, 4));
            assert_eq!(store.scalar_count() as u64, FusionSpec::new(s, 4).param_count());
        }
    }
}
