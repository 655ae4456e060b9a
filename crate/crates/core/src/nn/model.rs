//! Cell-based networks: the supernet and the discrete networks derived from it.
//!
//! Both share one layout. A supernet edge carries every candidate op and
//! mixes their outputs with relaxed architecture weights; a discrete edge
//! carries only the ops retained by a [`Genotype`] and sums them. Parameter
//! names are identical in both, which is what lets discretization copy
//! trained weights by name.

use serde::{Deserialize, Serialize};

use super::arch::{cell_edges, MixWeights, Relaxation};
use super::genotype::Genotype;
use super::ops::{register_conv, BatchNormIds, CandidateOp, Layer, OpKind};
use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{BatchStats, ConvSpec, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetConfig {
    pub num_cells: usize,
    pub nodes_per_cell: usize,
    pub init_channels: usize,
    pub input_channels: usize,
    pub input_side: usize,
    pub embed_dim: usize,
    /// Stem width as a multiple of `init_channels`.
    pub stem_multiplier: usize,
    pub ops: Vec<OpKind>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            num_cells: 3,
            nodes_per_cell: 4,
            init_channels: 16,
            input_channels: 3,
            input_side: 32,
            embed_dim: 128,
            stem_multiplier: 3,
            ops: OpKind::ALL.to_vec(),
        }
    }
}

impl SupernetConfig {
    /// Small CPU-scale network: 3 cells, 8 channels, 8×8 inputs.
    pub fn desk() -> Self {
        SupernetConfig {
            init_channels: 8,
            input_side: 8,
            embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_cells", self.num_cells),
            ("nodes_per_cell", self.nodes_per_cell),
            ("init_channels", self.init_channels),
            ("input_channels", self.input_channels),
            ("input_side", self.input_side),
            ("embed_dim", self.embed_dim),
            ("stem_multiplier", self.stem_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.ops.is_empty() {
            return Err(Error::Parameter("empty operation list".into()));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(op) {
                return Err(Error::Parameter(format!("operation {op} listed twice")));
            }
        }
        Ok(())
    }

    /// Reduction cells sit at ⌊k/3⌋ and ⌊2k/3⌋, never at the last cell.
    pub fn is_reduction(&self, cell: usize) -> bool {
        let k = self.num_cells;
        cell + 1 != k && (cell == k / 3 || cell == 2 * k / 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; statistics are recorded.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Parameters of one store placed on a tape, plus the batch statistics
/// measured while running in [`Mode::Train`].
pub struct Binding<'t, T: Real> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
    trainable: Vec<bool>,
    mode: Mode,
    stats: Vec<(BatchNormIds, BatchStats<T>)>,
}

impl<'t, T: Real> Binding<'t, T> {
    pub fn new(store: &ParamStore<T>, tape: &'t Tape<T>, mode: Mode, requires_grad: bool) -> Self {
        let trainable: Vec<bool> = store.ids().map(|id| store.is_trainable(id)).collect();
        let vars = store
            .ids()
            .map(|id| tape.leaf_rc(store.get_rc(id), requires_grad && store.is_trainable(id)))
            .collect();
        Binding {
            tape,
            vars,
            trainable,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient of every trainable parameter (zeros where nothing flowed).
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(i, _)| self.trainable[*i])
            .map(|(i, &v)| (ParamId(i), grads.get_or_zeros(v)))
            .collect()
    }

    pub fn take_stats(&mut self) -> Vec<(BatchNormIds, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    fn batch_norm(&mut self, x: Var<'t, T>, bn: BatchNormIds) -> Var<'t, T> {
        let eps = T::lit(BN_EPS);
        let (gamma, beta) = (self.var(bn.gamma), self.var(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, eps);
                self.stats.push((bn, stats));
                y
            }
            Mode::Eval => {
                let rm = self.var(bn.running_mean).value();
                let rv = self.var(bn.running_var).value();
                x.batch_norm_eval(gamma, beta, rm.data(), rv.data(), eps)
            }
        }
    }

    fn layers(&mut self, layers: &[Layer], mut x: Var<'t, T>) -> Var<'t, T> {
        for layer in layers {
            x = match layer {
                Layer::Relu => x.relu(),
                Layer::Conv { weight, spec } => x.conv2d(self.var(*weight), *spec),
                Layer::BatchNorm(bn) => self.batch_norm(x, *bn),
                Layer::MaxPool => x.max_pool(3),
                Layer::AvgPool => x.avg_pool(3),
            };
        }
        x
    }

    /// Output of one op, `None` for the zero op.
    pub fn op(&mut self, op: &CandidateOp, x: Var<'t, T>) -> Option<Var<'t, T>> {
        match op.kind {
            OpKind::Zero => None,
            OpKind::SkipConnect => Some(x),
            _ => Some(self.layers(&op.layers, x)),
        }
    }
}

/// Fold measured batch statistics into the running averages. Running
/// variance uses the unbiased estimate.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(BatchNormIds, BatchStats<T>)]) {
    let m = T::lit(BN_MOMENTUM);
    for (bn, s) in stats {
        let unbias = if s.count > 1 {
            T::lit(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &v) in store.get_mut(bn.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (T::one() - m) * *r + m * v;
        }
        for (r, &v) in store.get_mut(bn.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (T::one() - m) * *r + m * v * unbias;
        }
    }
}

/// An edge with its ops keyed by position in the configured op list.
#[derive(Clone, Debug)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Row of this edge in the architecture tables.
    pub row: usize,
    pub ops: Vec<(usize, CandidateOp)>,
}

/// ReLU, 1×1 convolution (strided when the spatial size must shrink), batch norm.
#[derive(Clone, Debug)]
struct Preprocess {
    layers: Vec<Layer>,
    cin: usize,
    side_in: usize,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub reduction: bool,
    pub channels: usize,
    pub side: usize,
    pre: [Preprocess; 2],
    pub edges: Vec<Edge>,
}

#[derive(Clone)]
pub struct Network<T: Real> {
    config: SupernetConfig,
    genotype: Option<Genotype>,
    seed: u64,
    params: ParamStore<T>,
    stem: Vec<Layer>,
    cells: Vec<Cell>,
    proj: (ParamId, ParamId),
    head: Option<(ParamId, ParamId)>,
}

fn preprocess<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    side_in: usize,
    cout: usize,
    side_out: usize,
    seed: u64,
) -> Result<Preprocess> {
    let stride = side_in.div_ceil(side_out);
    let spec = ConvSpec::new(stride, 0, 1, 1);
    if spec.out_size(side_in, 1) != side_out {
        return Err(Error::Structural(format!(
            "{name}: cannot map side {side_in} to {side_out} with a strided 1x1 convolution"
        )));
    }
    Ok(Preprocess {
        layers: vec![
            Layer::Relu,
            register_conv(store, &format!("{name}.conv"), cin, cout, 1, spec, seed),
            Layer::BatchNorm(BatchNormIds::register(store, &format!("{name}.bn"), cout, seed)),
        ],
        cin,
        side_in,
    })
}

impl<T: Real> Network<T> {
    /// Every candidate op on every edge.
    pub fn supernet(config: &SupernetConfig, seed: u64) -> Result<Self> {
        Self::build(config, None, seed)
    }

    /// Only the genotype's ops, freshly initialized.
    pub fn from_genotype(config: &SupernetConfig, genotype: &Genotype, seed: u64) -> Result<Self> {
        genotype.validate(config.nodes_per_cell, &config.ops)?;
        Self::build(config, Some(genotype), seed)
    }

    fn build(config: &SupernetConfig, genotype: Option<&Genotype>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.init_channels;
        let stem_c = config.stem_multiplier * c;
        let stem = vec![
            register_conv(&mut params, "stem.conv", config.input_channels, stem_c, 3, ConvSpec::new(1, 1, 1, 1), seed),
            Layer::BatchNorm(BatchNormIds::register(&mut params, "stem.bn", stem_c, seed)),
        ];
        let all_edges = cell_edges(config.nodes_per_cell);
        // (channels, side) of the two most recent states.
        let mut prev_prev = (stem_c, config.input_side);
        let mut prev = (stem_c, config.input_side);
        let mut channels = c;
        let mut side = config.input_side;
        let mut cells = Vec::with_capacity(config.num_cells);
        for k in 0..config.num_cells {
            let reduction = config.is_reduction(k);
            if reduction {
                channels *= 2;
                side = side.div_ceil(2);
            }
            let pre = [
                preprocess(&mut params, &format!("cells.{k}.pre0"), prev_prev.0, prev_prev.1, channels, side, seed)?,
                preprocess(&mut params, &format!("cells.{k}.pre1"), prev.0, prev.1, channels, side, seed)?,
            ];
            let mut edges = Vec::new();
            for (row, &(src, dst)) in all_edges.iter().enumerate() {
                let kinds: Vec<(usize, OpKind)> = match genotype {
                    None => config.ops.iter().copied().enumerate().collect(),
                    Some(g) => config
                        .ops
                        .iter()
                        .copied()
                        .enumerate()
                        .filter(|&(_, op)| g.cell(reduction).contains(&(src, dst, op)))
                        .collect(),
                };
                if kinds.is_empty() {
                    continue;
                }
                let prefix = format!("cells.{k}.edge_{src}_{dst}");
                let ops = kinds
                    .into_iter()
                    .map(|(i, kind)| (i, CandidateOp::build(kind, channels, &prefix, &mut params, seed)))
                    .collect();
                edges.push(Edge { src, dst, row, ops });
            }
            cells.push(Cell {
                reduction,
                channels,
                side,
                pre,
                edges,
            });
            prev_prev = prev;
            prev = (config.nodes_per_cell * channels, side);
        }
        let proj_in = prev.0;
        let proj = (
            params.add("proj.weight", &[config.embed_dim, proj_in], Init::Uniform { fan_in: proj_in }, true, seed),
            params.add("proj.bias", &[config.embed_dim], Init::Uniform { fan_in: proj_in }, true, seed),
        );
        Ok(Network {
            config: config.clone(),
            genotype: genotype.cloned(),
            seed,
            params,
            stem,
            cells,
            proj,
            head: None,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    /// `None` for a supernet.
    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Output width: class count with a head, `embed_dim` without.
    pub fn output_dim(&self) -> usize {
        match self.head {
            Some((w, _)) => self.params.get(w).shape()[0],
            None => self.config.embed_dim,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head.map(|(w, _)| self.params.get(w).shape()[0])
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.trainable_count()
    }

    /// Append an affine classifier `embed_dim → classes`.
    pub fn attach_head(&mut self, classes: usize) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::Structural("network already has a classifier head".into()));
        }
        if classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
        }
        let d = self.config.embed_dim;
        self.head = Some((
            self.params.add("head.weight", &[classes, d], Init::Uniform { fan_in: d }, true, self.seed),
            self.params.add("head.bias", &[classes], Init::Uniform { fan_in: d }, true, self.seed),
        ));
        Ok(())
    }

    /// Running means to 0 and running variances to 1.
    pub fn reset_running_stats(&mut self) {
        let ids: Vec<ParamId> = self
            .params
            .ids()
            .filter(|&id| !self.params.is_trainable(id))
            .collect();
        for id in ids {
            let fill = if self.params.name(id).ends_with("running_var") { T::one() } else { T::zero() };
            for v in self.params.get_mut(id).data_mut() {
                *v = fill;
            }
        }
    }

    /// Copy every parameter of this network from `source` by name, except
    /// names starting with one of `skip`. Missing names or shape mismatches
    /// are data errors.
    pub fn load_from(&mut self, source: &ParamStore<T>, skip: &[&str]) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if skip.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let src = source
                .id(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            let value = source.get_rc(src);
            if value.shape() != self.params.get(id).shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.params.get(id).shape()
                )));
            }
            self.params.set(id, value.as_ref().clone());
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: Mode, requires_grad: bool) -> Binding<'t, T> {
        Binding::new(&self.params, tape, mode, requires_grad)
    }

    pub fn absorb_stats(&mut self, stats: &[(BatchNormIds, BatchStats<T>)]) {
        update_running_stats(&mut self.params, stats);
    }

    fn check_state(x: Var<'_, T>, want: [usize; 3], what: impl Fn() -> String) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Structural(format!(
                "{}: got shape {s:?}, expected [B, {}, {}, {}]",
                what(),
                want[0],
                want[1],
                want[2]
            )));
        }
        Ok(())
    }

    /// One mixed edge: relaxed-weight mix of its ops (supernet with
    /// weights), or their plain sum. `None` when every op is zero.
    fn edge_forward<'t>(
        &self,
        b: &mut Binding<'t, T>,
        k: usize,
        edge: &Edge,
        x: Var<'t, T>,
        mix: Option<&MixWeights<'t, T>>,
    ) -> Result<Option<Var<'t, T>>> {
        let cell = &self.cells[k];
        let want = [cell.channels, cell.side, cell.side];
        let name = || format!("cell {k} edge {}->{}", edge.src, edge.dst);
        Self::check_state(x, want, name)?;
        let mut outs: Vec<Option<Var<'t, T>>> = vec![None; self.config.ops.len()];
        for (i, op) in &edge.ops {
            let y = b.op(op, x);
            if let Some(y) = y {
                Self::check_state(y, want, || format!("{} op {}", name(), op.kind))?;
            }
            outs[*i] = y;
        }
        if outs.iter().all(Option::is_none) {
            return Ok(None);
        }
        Ok(Some(match mix {
            Some(m) => {
                let w = m.table(cell.reduction);
                Var::mix(&outs, w, edge.row * self.config.ops.len())
            }
            None => Var::add_all(&outs.into_iter().flatten().collect::<Vec<_>>()),
        }))
    }

    /// The DAG of cell `k` on already preprocessed inputs; returns the
    /// channel concatenation of its intermediate nodes.
    pub fn cell_body<'t>(
        &self,
        b: &mut Binding<'t, T>,
        k: usize,
        inputs: [Var<'t, T>; 2],
        mix: Option<&MixWeights<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let cell = &self.cells[k];
        let nodes = self.config.nodes_per_cell;
        let mut states: Vec<Var<'t, T>> = inputs.to_vec();
        for dst in 2..2 + nodes {
            let mut terms = Vec::new();
            for edge in cell.edges.iter().filter(|e| e.dst == dst) {
                if let Some(y) = self.edge_forward(b, k, edge, states[edge.src], mix)? {
                    terms.push(y);
                }
            }
            let node = if terms.is_empty() {
                let bsz = states[0].shape()[0];
                b.tape().constant(Tensor::zeros(&[bsz, cell.channels, cell.side, cell.side]))
            } else {
                Var::add_all(&terms)
            };
            states.push(node);
        }
        Ok(Var::concat_channels(&states[2..]))
    }

    /// Preprocess both inputs of cell `k`, then run its DAG.
    pub fn cell_forward<'t>(
        &self,
        b: &mut Binding<'t, T>,
        k: usize,
        inputs: [Var<'t, T>; 2],
        mix: Option<&MixWeights<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let cell = &self.cells[k];
        let mut pre = Vec::with_capacity(2);
        for (i, (p, x)) in cell.pre.iter().zip(inputs).enumerate() {
            Self::check_state(x, [p.cin, p.side_in, p.side_in], || format!("cell {k} input {i}"))?;
            pre.push(b.layers(&p.layers, x));
        }
        self.cell_body(b, k, [pre[0], pre[1]], mix)
    }

    /// Stem, cells, global pooling and projection: `B × embed_dim`.
    pub fn embed<'t>(
        &self,
        b: &mut Binding<'t, T>,
        x: Var<'t, T>,
        mix: Option<&MixWeights<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let c = &self.config;
        Self::check_state(x, [c.input_channels, c.input_side, c.input_side], || "network input".into())?;
        if let Some(m) = mix {
            let want = [cell_edges(c.nodes_per_cell).len(), c.ops.len()];
            for t in [m.normal, m.reduce] {
                if t.shape() != want {
                    return Err(Error::Structural(format!(
                        "mixing weights have shape {:?}, expected {want:?}",
                        t.shape()
                    )));
                }
            }
        }
        let stem = b.layers(&self.stem, x);
        let (mut s0, mut s1) = (stem, stem);
        for k in 0..self.cells.len() {
            let out = self.cell_forward(b, k, [s0, s1], mix)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = s1.global_avg_pool();
        Ok(pooled.linear(b.var(self.proj.0), Some(b.var(self.proj.1))))
    }

    /// Embedding, followed by the classifier head when one is attached.
    pub fn forward<'t>(
        &self,
        b: &mut Binding<'t, T>,
        x: Var<'t, T>,
        mix: Option<&MixWeights<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let z = self.embed(b, x, mix)?;
        Ok(match self.head {
            Some((w, bias)) => z.linear(b.var(w), Some(b.var(bias))),
            None => z,
        })
    }

    /// Evaluation-mode forward on a fresh tape.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut b = self.bind(&tape, Mode::Eval, false);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut b, x, None)?;
        let out = y.value().as_ref().clone();
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            genotype: self.genotype.clone(),
            seed: self.seed,
            params: self.params.cast(),
            stem: self.stem.clone(),
            cells: self.cells.clone(),
            proj: self.proj,
            head: self.head,
        }
    }
}

/// Build the discrete network for `genotype` and copy the supernet's
/// weights for every retained op (and the shared stem, preprocessing and
/// projection) bit for bit.
pub fn discretize_and_retain_weights<T: Real>(supernet: &Network<T>, genotype: &Genotype) -> Result<Network<T>> {
    if supernet.genotype.is_some() {
        return Err(Error::Structural("source is already a discrete network".into()));
    }
    let mut net = Network::from_genotype(&supernet.config, genotype, supernet.seed)?;
    net.load_from(&supernet.params, &[])?;
    Ok(net)
}

/// Independent parameter count from the layer recipes.
pub fn analytic_parameter_count(config: &SupernetConfig, genotype: Option<&Genotype>, classes: Option<usize>) -> usize {
    let c = config.init_channels;
    let stem_c = config.stem_multiplier * c;
    let mut total = config.input_channels * stem_c * 9 + 2 * stem_c;
    let (mut cpp, mut cp, mut ch) = (stem_c, stem_c, c);
    for k in 0..config.num_cells {
        if config.is_reduction(k) {
            ch *= 2;
        }
        total += cpp * ch + 2 * ch + cp * ch + 2 * ch;
        total += match genotype {
            None => cell_edges(config.nodes_per_cell).len() * config.ops.iter().map(|op| op.param_count(ch)).sum::<usize>(),
            Some(g) => g.cell(config.is_reduction(k)).iter().map(|e| e.2.param_count(ch)).sum(),
        };
        cpp = cp;
        cp = config.nodes_per_cell * ch;
    }
    total += cp * config.embed_dim + config.embed_dim;
    if let Some(l) = classes {
        total += config.embed_dim * l + l;
    }
    total
}

/// A single mixed edge with its own parameters, for direct use and tests.
pub struct MixedEdge<T: Real> {
    pub ops: Vec<CandidateOp>,
    pub params: ParamStore<T>,
}

impl<T: Real> MixedEdge<T> {
    pub fn new(kinds: &[OpKind], channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let ops = kinds
            .iter()
            .map(|&k| CandidateOp::build(k, channels, "edge", &mut params, seed))
            .collect();
        MixedEdge { ops, params }
    }
}

/// `Σ_o w_o · o(x)` with `w = σ(α)` or `softmax(α)` over the edge's ops.
pub fn mixed_edge_forward<'t, T: Real>(
    b: &mut Binding<'t, T>,
    edge: &MixedEdge<T>,
    x: Var<'t, T>,
    alphas: Var<'t, T>,
    relaxation: Relaxation,
) -> Result<Var<'t, T>> {
    if alphas.value().numel() != edge.ops.len() {
        return Err(Error::Structural(format!(
            "{} mixing weights for {} ops",
            alphas.value().numel(),
            edge.ops.len()
        )));
    }
    if !alphas.value().all_finite() {
        return Err(Error::Numeric("architecture weight is not finite".into()));
    }
    let w = match relaxation {
        Relaxation::Sigmoid => alphas.sigmoid(),
        Relaxation::Softmax => alphas.softmax_last(),
    };
    let outs: Vec<Option<Var<'t, T>>> = edge.ops.iter().map(|op| b.op(op, x)).collect();
    if outs.iter().all(Option::is_none) {
        return Ok(x.scale(T::zero()));
    }
    Ok(Var::mix(&outs, w, 0))
}
