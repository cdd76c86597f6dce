//! Training orchestration: GCN pretraining, paired source/target batches,
//! loss assembly and optimization, plus deterministic prediction.

use log::{debug, info};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::embedding::ModelDims;
use crate::error::{shape_err, Error, Result};
use crate::graph::{dependency_graph, edge_matrix, gcn_forward, pretrain_gcn, GcnTrace, GcnTrainConfig};
use crate::latent::one_hot;
use crate::losses::{
    classification_loss_vars, distribution_loss_vars, median_distance, mmd_vars, total_loss, LossBreakdown,
    LossConfig, LossParts,
};
use crate::model::GtnpModel;
use crate::numerics::gaussian::{kl_standard_normal, reparam_rows};
use crate::numerics::{stream_rng, Bound, OptimizerKind, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::uncertainty::{track_global, GlobalRecord};

const INIT_STREAM: u64 = 1;
const SPLIT_SOURCE_STREAM: u64 = 2;
const SPLIT_TARGET_STREAM: u64 = 3;
const GCN_SUBSET_STREAM: u64 = 4;
const CYCLE_SOURCE_STREAM: u64 = 1 << 32;
const CYCLE_TARGET_STREAM: u64 = 2 << 32;
const STEP_STREAM: u64 = 3 << 32;

/// Optimization schedule and structural switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Target reference-set size.
    pub n_ref: usize,
    /// Source reference-set size; defaults to `n_ref`.
    pub source_n_ref: Option<usize>,
    /// Reference nodes drawn per step as the conditioning context.
    pub context_size: usize,
    pub gcn: GcnTrainConfig,
    /// `false` keeps the edge head untrained.
    pub pretrain_gcn: bool,
    /// Target label space may contain classes the source lacks.
    pub emerging: bool,
    /// `false` hides target labels from the loss and the graphs.
    pub use_target_labels: bool,
    /// Rescales the full gradient to at most this Euclidean norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            epochs: 30,
            n_ref: 600,
            source_n_ref: None,
            context_size: 64,
            gcn: GcnTrainConfig::default(),
            pretrain_gcn: true,
            emerging: false,
            use_target_labels: true,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub dims: ModelDims,
    pub losses: LossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be at least 2", s.batch_size)));
        }
        if !(s.learning_rate >= 0.0 && s.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", s.learning_rate)));
        }
        if s.n_ref == 0 || s.source_n_ref == Some(0) || s.context_size == 0 {
            return Err(Error::Config("n_ref and context_size must be positive".into()));
        }
        if !(s.gcn.learning_rate >= 0.0 && s.gcn.learning_rate.is_finite()) || s.gcn.graph_size < 2 {
            return Err(Error::Config("gcn needs a finite learning rate and graph_size >= 2".into()));
        }
        self.dims.validate()?;
        self.losses.validate()
    }
}

/// Reference set of one domain with its frozen dependency graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRef {
    /// Dataset positions of the reference samples, ascending.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Whether the labels may condition `p(z | .)`.
    pub labels_visible: bool,
    pub g: Tensor,
}

impl DomainRef {
    fn position(&self, sample: usize) -> Option<usize> {
        self.indices.binary_search(&sample).ok()
    }
}

/// Everything needed to continue training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: GtnpModel,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub source_ref: DomainRef,
    pub target_ref: DomainRef,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps; also seeds each step's random draws.
    pub step: u64,
}

/// Per-domain tensors of one step. Batch rows are ordered reference rows
/// first, then M rows; `x` holds the batch followed by the context.
#[derive(Clone, Debug)]
pub struct DomainInputs {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub n_ref_rows: usize,
    /// `G` entries from each reference batch row to the context, self zeroed.
    pub g_rows: Tensor,
    pub context_onehot: Tensor,
    pub eps_u: Tensor,
    pub eps_z: Tensor,
    pub classify: bool,
}

#[derive(Clone, Debug)]
pub struct StepInputs {
    pub source: DomainInputs,
    pub target: DomainInputs,
    pub eps_g: Tensor,
    /// Fixed MMD bandwidth; `None` uses the median heuristic on the step's
    /// sampled embeddings.
    pub sigma: Option<f64>,
}

/// Scalar nodes of one evaluated objective.
pub struct LossVars<'t> {
    pub dist_source: Var<'t>,
    pub dist_target: Var<'t>,
    pub cls_source: Option<Var<'t>>,
    pub cls_target: Option<Var<'t>>,
    pub mmd: Var<'t>,
    pub global_kl: Var<'t>,
    pub total: Var<'t>,
}

impl LossVars<'_> {
    pub fn parts(&self) -> LossParts {
        LossParts {
            dist_source: self.dist_source.item(),
            dist_target: self.dist_target.item(),
            cls_source: self.cls_source.map_or(0.0, |v| v.item()),
            cls_target: self.cls_target.map_or(0.0, |v| v.item()),
            mmd: self.mmd.item(),
            global_kl: self.global_kl.item(),
        }
    }
}

struct DomainOut<'t> {
    u_batch: Var<'t>,
    dist: Var<'t>,
    cls: Option<Var<'t>>,
}

fn rows_range(start: usize, end: usize) -> Vec<usize> {
    (start..end).collect()
}

fn domain_forward<'t>(model: &GtnpModel, p: &Bound<'t>, zg: Var<'t>, d: &DomainInputs) -> DomainOut<'t> {
    let tape = zg.tape();
    let nb = d.labels.len();
    let nx = d.x.rows();
    let h = model.embedding.embed_vars(p, tape.constant(d.x.clone()), zg);
    let (um, ul) = model.embedding.head.forward(p, h);
    let u = reparam_rows(um, ul, tape.constant(d.eps_u.clone()));
    let u_batch = u.rows(&rows_range(0, nb));
    let u_ctx = u.rows(&rows_range(nb, nx));
    let messages = model.real.messages(p, u_ctx, tape.constant(d.context_onehot.clone()));

    let mut means = Vec::new();
    let mut logvars = Vec::new();
    if d.n_ref_rows > 0 {
        let w = tape.constant(d.g_rows.clone()).row_normalize();
        let (m, l) = model.real.forward(p, w, messages);
        means.push(m);
        logvars.push(l);
    }
    if d.n_ref_rows < nb {
        // Normalized bipartite weights, computed in the log domain so that
        // distant rows cannot underflow to an all-zero row.
        let u_m = u_batch.rows(&rows_range(d.n_ref_rows, nb));
        let tau = p.var(model.log_tau).exp();
        let logits = u_m.sq_dist(u_ctx).mul_scalar(tau).scale(-0.5);
        let (m, l) = model.real.forward(p, logits.log_softmax().exp(), messages);
        means.push(m);
        logvars.push(l);
    }
    let (p_mean, p_logvar) = (Var::vcat(&means), Var::vcat(&logvars));
    let (q_mean, q_logvar) = model.est.forward(p, u_batch);
    let dist = distribution_loss_vars(q_mean, q_logvar, p_mean, p_logvar);
    let cls = d.classify.then(|| {
        let z = reparam_rows(q_mean, q_logvar, tape.constant(d.eps_z.clone()));
        classification_loss_vars(model.classifier.logits(p, z, u_batch), &d.labels)
    });
    DomainOut { u_batch, dist, cls }
}

/// Builds the full objective on `p`'s tape.
pub fn loss_graph<'t>(
    model: &GtnpModel,
    p: &Bound<'t>,
    inputs: &StepInputs,
    losses: &LossConfig,
) -> LossVars<'t> {
    let g = &model.embedding.global;
    let tape = p.var(g.mean).tape();
    let zg = g.sample(p, tape.constant(inputs.eps_g.clone()));
    let s = domain_forward(model, p, zg, &inputs.source);
    let t = domain_forward(model, p, zg, &inputs.target);
    let sigma = inputs
        .sigma
        .unwrap_or_else(|| median_distance(&s.u_batch.value(), &t.u_batch.value()));
    let mmd = mmd_vars(s.u_batch, t.u_batch, sigma);
    let global_kl = kl_standard_normal(p.var(g.mean), p.var(g.logvar));

    let mut total = s.dist.add(t.dist);
    for c in [s.cls, t.cls].into_iter().flatten() {
        total = total.add(c);
    }
    total = total.add(mmd.scale(losses.lambda_mmd)).add(global_kl.scale(losses.amp));
    LossVars {
        dist_source: s.dist,
        dist_target: t.dist,
        cls_source: s.cls,
        cls_target: t.cls,
        mmd,
        global_kl,
        total,
    }
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape")
}

fn domain_inputs<R: Rng>(
    model: &GtnpModel,
    config: &TrainConfig,
    data: &DomainDataset,
    dref: &DomainRef,
    batch: &[usize],
    classify: bool,
    rng: &mut R,
) -> Result<DomainInputs> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if dref.indices.is_empty() {
        return Err(Error::Data("empty reference set".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Data(format!("batch index {bad} outside {} samples", data.len())));
    }
    let n_r = dref.indices.len();
    let n_c = config.schedule.context_size.min(n_r);
    let mut context = sample_indices(rng, n_r, n_c).into_vec();
    context.sort_unstable();

    let (mut rows, mut rest): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for &i in batch {
        if dref.position(i).is_some() {
            rows.push(i);
        } else {
            rest.push(i);
        }
    }
    let n_ref_rows = rows.len();
    rows.extend(rest);

    let mut g_rows = Vec::with_capacity(n_ref_rows * n_c);
    for &i in &rows[..n_ref_rows] {
        let a = dref.position(i).expect("reference row");
        g_rows.extend(context.iter().map(|&c| if c == a { 0.0 } else { dref.g.at(a, c) }));
    }
    let labels = data.labels_at(&rows);
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.classes) {
        return Err(Error::Data(format!("label {bad} outside {} classes", model.classes)));
    }
    let ctx_labels: Vec<usize> = context.iter().map(|&c| dref.labels[c]).collect();
    let context_onehot = if dref.labels_visible {
        one_hot(&ctx_labels, model.classes)?
    } else {
        Tensor::zeros(&[n_c, model.classes])
    };
    let mut all = rows.clone();
    all.extend(context.iter().map(|&c| dref.indices[c]));
    let nb = rows.len();
    Ok(DomainInputs {
        x: data.batch(&all),
        labels,
        n_ref_rows,
        g_rows: Tensor::new(&[n_ref_rows, n_c], g_rows)?,
        context_onehot,
        eps_u: normal_tensor(rng, &[nb + n_c, model.dims.d_u]),
        eps_z: normal_tensor(rng, &[nb, model.dims.d_z]),
        classify,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub loss: LossBreakdown,
    /// Mean of the two domains' `KL(q || p)` terms.
    pub kl_qp_mean: f64,
}

impl TrainState {
    /// Random draws of step `self.step` for the given batches.
    pub fn step_inputs(
        &self,
        source: &DomainDataset,
        target: &DomainDataset,
        source_batch: &[usize],
        target_batch: &[usize],
    ) -> Result<StepInputs> {
        let mut rng = stream_rng(self.config.seed, STEP_STREAM + self.step);
        let cfg = &self.config;
        let s = domain_inputs(&self.model, cfg, source, &self.source_ref, source_batch, true, &mut rng)?;
        let t = domain_inputs(
            &self.model,
            cfg,
            target,
            &self.target_ref,
            target_batch,
            cfg.schedule.use_target_labels,
            &mut rng,
        )?;
        if s.labels.len() < 2 || t.labels.len() < 2 {
            return Err(Error::Data("each batch needs at least 2 samples for MMD".into()));
        }
        let sigma = match cfg.losses.mmd {
            crate::losses::MmdConfig::Fixed { sigma } => Some(sigma),
            crate::losses::MmdConfig::Median => None,
        };
        Ok(StepInputs {
            source: s,
            target: t,
            eps_g: normal_tensor(&mut rng, &[1, self.model.dims.d_g]),
            sigma,
        })
    }

    /// One optimization step. A non-finite loss or gradient leaves the
    /// state untouched.
    pub fn train_step(
        &mut self,
        source: &DomainDataset,
        target: &DomainDataset,
        source_batch: &[usize],
        target_batch: &[usize],
    ) -> Result<StepResult> {
        let inputs = self.step_inputs(source, target, source_batch, target_batch)?;
        let tape = Tape::new();
        let p = Bound::trainable(&tape, &self.store);
        let vars = loss_graph(&self.model, &p, &inputs, &self.config.losses);
        let loss = total_loss(&vars.parts(), &self.config.losses.weights())?;
        let mut grads = tape.backward(vars.total);
        let mut g = p.grads(&mut grads);
        if let Some(max) = self.config.schedule.grad_clip {
            clip_gradients(&mut g, max);
        }
        self.optimizer.step(&mut self.store, &g)?;
        self.step += 1;
        Ok(StepResult {
            loss,
            kl_qp_mean: 0.5 * (loss.dist_source + loss.dist_target),
        })
    }

    /// Deterministic prediction for one `h x w` sample.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, Vec<f64>)> {
        let (h, w) = self.model.input();
        if x.shape() != [h, w] {
            return shape_err(format!("sample shape {:?}, expected [{h}, {w}]", x.shape()));
        }
        let probs = self.model.predict_probs(&self.store, &x.clone().reshape(&[1, h, w, 1])?)?;
        let row = probs.row_slice(0).to_vec();
        Ok((crate::graph::argmax(&row), row))
    }

    /// Deterministic probabilities for the dataset positions `idx`.
    pub fn predict_indices(&self, data: &DomainDataset, idx: &[usize]) -> Result<Tensor> {
        if data.shape != self.model.input() {
            return shape_err(format!(
                "dataset samples are {:?}, model expects {:?}",
                data.shape,
                self.model.input()
            ));
        }
        self.model.predict_probs(&self.store, &data.batch(idx))
    }
}

/// Scales all gradients by a common factor so their joint norm is at most
/// `max`. Non-finite norms are left for the optimizer to reject.
pub fn clip_gradients(grads: &mut [Option<Vec<f64>>], max: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max {
        let k = max / norm;
        grads.iter_mut().flatten().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
}

/// Endless shuffled passes over a fixed pool of indices.
#[derive(Clone, Debug)]
pub(crate) struct BatchCycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    stream: u64,
}

impl BatchCycler {
    pub(crate) fn new(pool: Vec<usize>, seed: u64, stream: u64) -> Self {
        let mut c = BatchCycler {
            order: Vec::new(),
            pool,
            pos: 0,
            pass: 0,
            seed,
            stream,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.order.shuffle(&mut stream_rng(self.seed, self.stream + self.pass));
        self.pass += 1;
        self.pos = 0;
    }

    /// The next `b` indices; a pass whose remainder is too short is dropped.
    pub(crate) fn next(&mut self, b: usize) -> Vec<usize> {
        let b = b.min(self.pool.len());
        if self.pos + b > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + b].to_vec();
        self.pos += b;
        out
    }
}

/// One line of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub global_latent: GlobalRecord,
    pub kl_qp_mean: f64,
}

/// Averages over the steps of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub total: f64,
    pub kl_qp_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Global-latent summary after `e` completed epochs, `e = 0..=epochs`.
    pub global: Vec<GlobalRecord>,
    pub gcn: GcnTrace,
    /// Whether the GCN graph reused the source reference set.
    pub gcn_on_reference: bool,
}

impl TrainTrace {
    /// Per-step records as JSON lines.
    pub fn steps_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_classes(source: &DomainDataset, target: &DomainDataset, cfg: &TrainConfig) -> Result<usize> {
    let classes = source.class_count.max(target.class_count);
    let s_train = source.training_indices();
    let present = source.label_set(&s_train);
    if !cfg.schedule.emerging {
        if let Some(missing) = (0..classes).find(|c| present.binary_search(c).is_err()) {
            return Err(Error::Data(format!(
                "class {missing} absent from the source training set (enable emerging mode to allow this)"
            )));
        }
    }
    let t_labels = target.label_set(&target.training_indices());
    if t_labels.last().copied().unwrap_or(0) >= classes || present.last().copied().unwrap_or(0) >= classes {
        return Err(Error::Data("label outside the declared class count".into()));
    }
    Ok(classes)
}

fn features(model: &GtnpModel, store: &ParamStore, data: &DomainDataset, idx: &[usize]) -> Result<Tensor> {
    model.embedding.extractor.features(store, &data.batch(idx))
}

/// Initializes the model, pretrains the GCN and freezes both domains'
/// dependency graphs. `source` and `target` are re-split into R/M in place.
pub fn initialize(
    config: &TrainConfig,
    source: &mut DomainDataset,
    target: &mut DomainDataset,
) -> Result<(TrainState, GcnTrace, bool)> {
    config.validate()?;
    if source.shape != target.shape {
        return shape_err(format!(
            "source samples are {:?} but target samples are {:?}",
            source.shape, target.shape
        ));
    }
    let classes = check_classes(source, target, config)?;
    let sched = &config.schedule;
    let s_split = source.split_reference(sched.source_n_ref.unwrap_or(sched.n_ref), config.seed ^ SPLIT_SOURCE_STREAM)?;
    let t_split = target.split_reference(sched.n_ref, config.seed ^ SPLIT_TARGET_STREAM)?;

    let mut store = ParamStore::new();
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let model = GtnpModel::new(&mut store, &mut rng, source.shape, classes, &config.dims)?;

    let graph_size = sched.gcn.graph_size;
    let on_reference = s_split.reference.len() == graph_size;
    let gcn_nodes = if on_reference {
        info!("GCN graph uses the {graph_size}-sample source reference set");
        s_split.reference.clone()
    } else {
        let train = source.training_indices();
        let k = graph_size.min(train.len());
        let mut pick: Vec<usize> = sample_indices(&mut stream_rng(config.seed, GCN_SUBSET_STREAM), train.len(), k)
            .into_iter()
            .map(|i| train[i])
            .collect();
        pick.sort_unstable();
        info!("GCN graph uses a fresh draw of {k} source training samples");
        debug!("GCN nodes: {pick:?}");
        pick
    };
    let mut gcn_trace = GcnTrace::default();
    if sched.pretrain_gcn {
        let feats = features(&model, &store, source, &gcn_nodes)?;
        let (_, trace) = pretrain_gcn(&mut store, &model.gcn, &feats, &source.labels_at(&gcn_nodes), &sched.gcn, config.seed)?;
        gcn_trace = trace;
    }

    let s_labels = source.labels_at(&s_split.reference);
    let g_s = dependency_graph(&store, &model.gcn, &features(&model, &store, source, &s_split.reference)?, &s_labels)?;
    let t_labels = target.labels_at(&t_split.reference);
    let t_feats = features(&model, &store, target, &t_split.reference)?;
    let g_t = if sched.use_target_labels {
        dependency_graph(&store, &model.gcn, &t_feats, &t_labels)?
    } else {
        let n = t_labels.len();
        let nodes = gcn_forward(&store, &model.gcn, &t_feats, &Tensor::zeros(&[n, n]))?;
        edge_matrix(&store, &model.gcn, &nodes)
    };

    let optimizer = OptimizerState::new(sched.optimizer.method(), sched.learning_rate, &store)?;
    let state = TrainState {
        config: config.clone(),
        model,
        store,
        optimizer,
        source_ref: DomainRef {
            indices: s_split.reference,
            labels: s_labels,
            labels_visible: true,
            g: g_s,
        },
        target_ref: DomainRef {
            indices: t_split.reference,
            labels: t_labels,
            labels_visible: sched.use_target_labels,
            g: g_t,
        },
        epoch: 0,
        step: 0,
    };
    Ok((state, gcn_trace, on_reference))
}

/// Full training run. Returns the final state, the trace and the datasets
/// as split into R/M.
pub fn fit(
    config: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(TrainState, TrainTrace, DomainDataset, DomainDataset)> {
    let mut source = source.clone();
    let mut target = target.clone();
    let (mut state, gcn, gcn_on_reference) = initialize(config, &mut source, &mut target)?;
    let mut trace = TrainTrace {
        gcn,
        gcn_on_reference,
        ..TrainTrace::default()
    };
    trace.global.push(track_global(&state));

    let s_pool = source.training_indices();
    let t_pool = target.training_indices();
    let b = config.schedule.batch_size;
    let steps_per_epoch = s_pool.len().div_ceil(b).max(t_pool.len().div_ceil(b)).max(1);
    let mut s_cycle = BatchCycler::new(s_pool, config.seed, CYCLE_SOURCE_STREAM);
    let mut t_cycle = BatchCycler::new(t_pool, config.seed, CYCLE_TARGET_STREAM);

    for epoch in 0..config.schedule.epochs {
        let mut sum = LossParts::default();
        let (mut total, mut kl) = (0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let sb = s_cycle.next(b);
            let tb = t_cycle.next(b);
            let res = state.train_step(&source, &target, &sb, &tb)?;
            let l = &res.loss;
            sum.dist_source += l.dist_source;
            sum.dist_target += l.dist_target;
            sum.cls_source += l.cls_source;
            sum.cls_target += l.cls_target;
            sum.mmd += l.mmd;
            sum.global_kl += l.global_kl;
            total += l.total;
            kl += res.kl_qp_mean;
            trace.steps.push(StepRecord {
                epoch,
                step: state.step - 1,
                loss: res.loss,
                global_latent: track_global(&state),
                kl_qp_mean: res.kl_qp_mean,
            });
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            loss: LossParts {
                dist_source: sum.dist_source / n,
                dist_target: sum.dist_target / n,
                cls_source: sum.cls_source / n,
                cls_target: sum.cls_target / n,
                mmd: sum.mmd / n,
                global_kl: sum.global_kl / n,
            },
            total: total / n,
            kl_qp_mean: kl / n,
        };
        info!(
            "epoch {epoch}: loss {:.4}, KL(q||p) {:.4}, cls {:.4}/{:.4}, mmd {:.4}",
            record.total, record.kl_qp_mean, record.loss.cls_source, record.loss.cls_target, record.loss.mmd
        );
        trace.epochs.push(record);
        state.epoch = epoch + 1;
        trace.global.push(track_global(&state));
    }
    Ok((state, trace, source, target))
}
