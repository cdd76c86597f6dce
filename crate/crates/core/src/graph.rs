//! Dependency graphs: the GCN-derived weighted graph `G` over the reference
//! set, the RBF bipartite graph `A` between M and R, and GCN pretraining.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::autodiff::sigmoid;
use crate::numerics::params::glorot;
use crate::numerics::{
    stream_rng, Bound, Dense, OptimizerKind, OptimizerState, ParamId, ParamStore, Tape, Tensor, Var,
};

const PAIR_STREAM: u64 = 7 << 32;

/// Binary same-class matrix over reference-set labels (diagonal included).
pub fn label_adjacency(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], data).expect("square")
}

/// `D^{-1/2} (A + I) D^{-1/2}` for a square, non-negative adjacency.
pub fn normalize_adjacency(adj: &Tensor) -> Result<Tensor> {
    let n = adj.rows();
    if adj.shape() != [n, n] {
        return shape_err(format!("adjacency must be square, got {:?}", adj.shape()));
    }
    let mut a = adj.clone();
    for i in 0..n {
        a.data_mut()[i * n + i] += 1.0;
    }
    // sorted sums keep the degrees independent of node order
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let mut row = a.row_slice(i).to_vec();
            row.sort_by(f64::total_cmp);
            1.0 / row.iter().sum::<f64>().sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            a.data_mut()[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(a)
}

/// One propagation step `act(Ā U W + b)`. Neighbour sums use
/// [`Var::aggregate`], which makes the layer exactly permutation-equivariant.
pub fn gcn_layer<'t>(abar: Var<'t>, u: Var<'t>, weight: Var<'t>, bias: Var<'t>, relu: bool) -> Var<'t> {
    let out = abar.aggregate(u).matmul(weight).add_row(bias);
    if relu {
        out.relu()
    } else {
        out
    }
}

/// Two-layer edge scorer on `[u_i | u_j]`:
/// `sigmoid(w_out . relu(W_l u_i + W_r u_j + b) + b_out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeHead {
    pub left: ParamId,
    pub right: ParamId,
    pub hidden_bias: ParamId,
    pub out: Dense,
}

/// GCN weights plus the node-classification and edge-weight heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub layers: Vec<Dense>,
    pub node_head: Dense,
    pub edge: EdgeHead,
}

impl GcnParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        input: usize,
        hidden: usize,
        edge_hidden: usize,
        classes: usize,
    ) -> Self {
        let layers = vec![
            Dense::new(store, rng, "gcn.layer0", input, hidden),
            Dense::new(store, rng, "gcn.layer1", hidden, hidden),
        ];
        let node_head = Dense::new(store, rng, "gcn.node_head", hidden, classes);
        let edge = EdgeHead {
            left: store.add("gcn.edge.left", glorot(rng, hidden, edge_hidden)),
            right: store.add("gcn.edge.right", glorot(rng, hidden, edge_hidden)),
            hidden_bias: store.add("gcn.edge.hidden_bias", Tensor::zeros(&[edge_hidden])),
            out: Dense::new(store, rng, "gcn.edge.out", edge_hidden, 1),
        };
        GcnParams {
            layers,
            node_head,
            edge,
        }
    }

    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Node representations; ReLU between layers, identity after the last.
    pub fn forward<'t>(&self, p: &Bound<'t>, features: Var<'t>, abar: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        let mut u = features;
        for (l, layer) in self.layers.iter().enumerate() {
            u = gcn_layer(abar, u, p.var(layer.weight), p.var(layer.bias), l < last);
        }
        u
    }

    /// Edge logits for the listed ordered pairs `(ii[k], jj[k])`, `[k, 1]`.
    pub fn edge_logits_at<'t>(&self, p: &Bound<'t>, u: Var<'t>, ii: &[usize], jj: &[usize]) -> Var<'t> {
        let left = u.matmul(p.var(self.edge.left)).rows(ii);
        let right = u.matmul(p.var(self.edge.right)).rows(jj);
        let hidden = left.add(right).add_row(p.var(self.edge.hidden_bias)).relu();
        self.edge.out.forward(p, hidden)
    }

    /// Directed edge logits for every ordered pair, `[n * m, 1]`.
    pub fn edge_logits<'t>(&self, p: &Bound<'t>, ui: Var<'t>, uj: Var<'t>) -> Var<'t> {
        let left = ui.matmul(p.var(self.edge.left));
        let right = uj.matmul(p.var(self.edge.right));
        let hidden = left
            .pair_sum(right)
            .add_row(p.var(self.edge.hidden_bias))
            .relu();
        self.edge.out.forward(p, hidden)
    }
}

/// Node representations for `features` on the graph `adjacency`.
pub fn gcn_forward(
    store: &ParamStore,
    params: &GcnParams,
    features: &Tensor,
    adjacency: &Tensor,
) -> Result<Tensor> {
    if adjacency.shape() != [features.rows(), features.rows()] {
        return shape_err(format!(
            "adjacency {:?} for {} nodes",
            adjacency.shape(),
            features.rows()
        ));
    }
    let abar = normalize_adjacency(adjacency)?;
    let tape = Tape::new();
    let p = Bound::frozen(&tape, store);
    let out = params.forward(&p, tape.constant(features.clone()), tape.constant(abar));
    Ok((*out.value()).clone())
}

/// Weight of the directed edge `(i, j)`.
pub fn edge_weight(store: &ParamStore, params: &GcnParams, ui: &[f64], uj: &[f64]) -> Result<f64> {
    let w = params.width();
    if ui.len() != w || uj.len() != w {
        return shape_err(format!("edge endpoints must have {w} values"));
    }
    let tape = Tape::new();
    let p = Bound::frozen(&tape, store);
    let a = tape.constant(Tensor::row(ui.to_vec()));
    let b = tape.constant(Tensor::row(uj.to_vec()));
    Ok(sigmoid(params.edge_logits(&p, a, b).item()))
}

/// Symmetric `G[i][j] = (w(i, j) + w(j, i)) / 2` over node representations.
pub fn edge_matrix(store: &ParamStore, params: &GcnParams, nodes: &Tensor) -> Tensor {
    const BLOCK: usize = 32;
    let n = nodes.rows();
    let mut directed = Vec::with_capacity(n * n);
    for start in (0..n).step_by(BLOCK) {
        let rows: Vec<usize> = (start..(start + BLOCK).min(n)).collect();
        let tape = Tape::new();
        let p = Bound::frozen(&tape, store);
        let left = tape.constant(nodes.select_rows(&rows));
        let logits = params.edge_logits(&p, left, tape.constant(nodes.clone())).value();
        directed.extend(logits.data().iter().map(|l| sigmoid(*l)));
    }
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = 0.5 * (directed[i * n + j] + directed[j * n + i]);
        }
    }
    Tensor::new(&[n, n], g).expect("square")
}

/// `G` for a labeled node set: GCN on the label graph, then the edge head.
pub fn dependency_graph(
    store: &ParamStore,
    params: &GcnParams,
    features: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let nodes = gcn_forward(store, params, features, &label_adjacency(labels))?;
    Ok(edge_matrix(store, params, &nodes))
}

/// RBF weight `exp(-(tau / 2) * |u_i - u_j|^2)`.
pub fn bipartite_weight(ui: &[f64], uj: &[f64], tau: f64) -> f64 {
    let d: f64 = ui.iter().zip(uj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-0.5 * tau * d).exp()
}

/// Bipartite weights on the tape; `tau = exp(log_tau)`.
pub fn bipartite_vars<'t>(u_m: Var<'t>, u_r: Var<'t>, log_tau: Var<'t>) -> Var<'t> {
    u_m.sq_dist(u_r).mul_scalar(log_tau.exp()).scale(-0.5).exp()
}

/// `A[k][j]` between every M-set row and every R-set row.
pub fn build_bipartite(u_m: &Tensor, u_r: &Tensor, tau: f64) -> Result<Tensor> {
    if u_r.rows() == 0 {
        return Err(Error::Data("bipartite graph needs a non-empty reference set".into()));
    }
    if u_m.rows() > 0 && u_m.cols() != u_r.cols() {
        return shape_err("embedding widths differ between M and R");
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau {tau} must be positive")));
    }
    let (n, m) = (u_m.rows(), u_r.rows());
    let mut data = Vec::with_capacity(n * m);
    for k in 0..n {
        for j in 0..m {
            data.push(bipartite_weight(u_m.row_slice(k), u_r.row_slice(j), tau));
        }
    }
    if n == 0 {
        return Ok(Tensor::zeros(&[0, m]));
    }
    Tensor::new(&[n, m], data)
}

/// Graphs of one domain at one point in training.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraphs {
    pub g: Tensor,
    pub a: Tensor,
    pub log_tau: f64,
}

impl DependencyGraphs {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Number of source samples forming the pretraining graph.
    pub graph_size: usize,
    /// Edge pairs scored per epoch; graphs with more ordered pairs are
    /// subsampled uniformly each epoch.
    pub max_pairs: usize,
}

impl Default for GcnTrainConfig {
    fn default() -> Self {
        GcnTrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            graph_size: 300,
            max_pairs: 8192,
        }
    }
}

/// Per-epoch pretraining diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GcnTrace {
    pub node_loss: Vec<f64>,
    pub edge_bce: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Trains the GCN (node cross-entropy + edge BCE against the label graph)
/// and returns the resulting `G` over the training nodes.
pub fn pretrain_gcn(
    store: &mut ParamStore,
    params: &GcnParams,
    features: &Tensor,
    labels: &[usize],
    config: &GcnTrainConfig,
    seed: u64,
) -> Result<(Tensor, GcnTrace)> {
    let n = labels.len();
    if features.rows() != n {
        return shape_err(format!("{} feature rows for {n} labels", features.rows()));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data(format!(
            "GCN pretraining needs at least 2 classes, found {}",
            distinct.len()
        )));
    }
    if distinct.last().copied().unwrap_or(0) >= params.node_head.outputs {
        return Err(Error::Data("label outside the node head's classes".into()));
    }
    let adjacency = label_adjacency(labels);
    let abar = normalize_adjacency(&adjacency)?;
    let all_pairs = n * n <= config.max_pairs;
    if !all_pairs && config.max_pairs == 0 {
        return Err(Error::Config("gcn max_pairs must be positive".into()));
    }
    let mut pair_rng = stream_rng(seed, PAIR_STREAM);
    let mut opt = OptimizerState::new(config.optimizer.method(), config.learning_rate, store)?;
    let mut trace = GcnTrace::default();
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let p = Bound::trainable(&tape, store);
        let u = params.forward(&p, tape.constant(features.clone()), tape.constant(abar.clone()));
        let logp = params.node_head.forward(&p, u).log_softmax();
        let node_loss = logp.pick(labels).mean().neg();
        let (logits, y) = if all_pairs {
            (params.edge_logits(&p, u, u), adjacency.data().to_vec())
        } else {
            let ii: Vec<usize> = (0..config.max_pairs).map(|_| pair_rng.random_range(0..n)).collect();
            let jj: Vec<usize> = (0..config.max_pairs).map(|_| pair_rng.random_range(0..n)).collect();
            let y = ii.iter().zip(&jj).map(|(&i, &j)| adjacency.at(i, j)).collect();
            (params.edge_logits_at(&p, u, &ii, &jj), y)
        };
        let y = tape.constant(Tensor::new(&[y.len(), 1], y)?);
        let bce = logits.softplus().sub(logits.mul(y)).mean();
        let loss = node_loss.add(bce);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("GCN pretraining loss at epoch {epoch}")));
        }
        let lp = logp.value();
        let correct = (0..n)
            .filter(|&i| argmax(lp.row_slice(i)) == labels[i])
            .count();
        trace.node_loss.push(node_loss.item());
        trace.edge_bce.push(bce.item());
        trace.accuracy.push(correct as f64 / n as f64);
        let mut grads = tape.backward(loss);
        let g = p.grads(&mut grads);
        opt.step(store, &g)?;
    }
    if let (Some(acc), Some(bce)) = (trace.accuracy.last(), trace.edge_bce.last()) {
        info!("GCN pretraining: accuracy {acc:.3}, edge BCE {bce:.4}");
    }
    let g = dependency_graph(store, params, features, labels)?;
    Ok((g, trace))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
