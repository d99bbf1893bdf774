//! Alternating trainer.
//!
//! Each optimizer step runs in two phases on the same batch graph: an SGD
//! step on the embedding network and classifier heads (every parameter
//! outside the `q.` namespace), then one or more Adam steps on the
//! conditional density estimator, re-run on the freshly updated embeddings.
//! The two sides never share a gradient buffer: the backward filter zeroes
//! the other side exactly, and each optimizer only visits its own
//! parameters.
//!
//! Epoch reports go to a tab-separated log whose bytes are a pure function
//! of the config, so identical runs produce identical logs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backbone::{self, EmbedNodes, ModelDims};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainMode};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Inputs, NodeId};
use crate::mi::{self, MiTerm};
use crate::objectives::{self, ID_MARGIN, ID_SCALE};
use crate::scalar::Real;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::{streams, ParamSet};

/// Column header of the per-epoch training log.
pub const LOG_HEADER: &str = "epoch\tL_id\tL_age\tL_MIM_term\tmi_estimate\tlr_phi\tlr_theta";

// ── optimizers ──────────────────────────────────────────────────────────

/// SGD with classical momentum and coupled weight decay. Velocity buffers
/// are created on first touch and keep the parameter's name, so exporting
/// them into a checkpoint is a plain rename.
pub struct Sgd<F: Real> {
    momentum: f64,
    weight_decay: f64,
    velocity: ParamSet<F>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    /// One update over every parameter selected by `take` that has a
    /// gradient. Arithmetic runs in f64 and narrows on store, so f32 and
    /// f64 runs follow the same trajectory up to rounding.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &Gradients<F>,
        lr: f64,
        take: impl Fn(&str) -> bool,
    ) {
        for (name, p) in params.iter_mut() {
            if !take(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.shape(), p.shape());
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let grad = gv.into_f64() + self.weight_decay * pv.into_f64();
                let vel = self.momentum * vv.into_f64() + grad;
                *vv = F::from_f64(vel);
                *pv = F::from_f64(pv.into_f64() - lr * vel);
            }
        }
    }

    /// Copy velocity buffers into `out` under `opt.sgd.v.<param>`.
    pub fn export_state(&self, out: &mut ParamSet<F>) {
        for (name, v) in &self.velocity {
            out.insert(format!("opt.sgd.v.{name}"), v.clone());
        }
    }

    /// Restore velocity buffers from checkpoint tensors.
    pub fn import_state(&mut self, tensors: &ParamSet<F>) {
        for (name, t) in tensors {
            if let Some(par) = name.strip_prefix("opt.sgd.v.") {
                self.velocity.insert(par.to_string(), t.clone());
            }
        }
    }
}

/// Adam with bias correction and coupled weight decay, used for the
/// estimator side.
pub struct Adam<F: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: ParamSet<F>,
    v: ParamSet<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Adam::new(
            cfg.est_beta1,
            cfg.est_beta2,
            cfg.est_eps,
            cfg.est_weight_decay,
        )
    }

    /// Steps taken so far; the bias-correction clock.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &Gradients<F>,
        lr: f64,
        take: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !take(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.shape(), p.shape());
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let grad = gv.into_f64() + self.weight_decay * pv.into_f64();
                let m_new = self.beta1 * mv.into_f64() + (1.0 - self.beta1) * grad;
                let v_new = self.beta2 * vv.into_f64() + (1.0 - self.beta2) * grad * grad;
                *mv = F::from_f64(m_new);
                *vv = F::from_f64(v_new);
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                *pv = F::from_f64(pv.into_f64() - lr * update);
            }
        }
    }

    /// Copy moment buffers into `out` under `opt.adam.{m,v}.<param>`.
    pub fn export_state(&self, out: &mut ParamSet<F>) {
        for (name, m) in &self.m {
            out.insert(format!("opt.adam.m.{name}"), m.clone());
            out.insert(format!("opt.adam.v.{name}"), self.v[name].clone());
        }
    }

    /// Restore moment buffers and the step clock.
    pub fn import_state(&mut self, tensors: &ParamSet<F>, t: u64) {
        for (name, tens) in tensors {
            if let Some(par) = name.strip_prefix("opt.adam.m.") {
                self.m.insert(par.to_string(), tens.clone());
            } else if let Some(par) = name.strip_prefix("opt.adam.v.") {
                self.v.insert(par.to_string(), tens.clone());
            }
        }
        self.t = t;
    }
}

// ── learning-rate schedule ──────────────────────────────────────────────

/// Per-step learning rate for the embedding side: a linear per-step ramp
/// from lr0/100 over the warmup epochs, then lr0 * lr_decay^(epoch -
/// warmup) held constant within each epoch. The first post-warmup step
/// lands on lr0 exactly.
pub fn phi_lr(cfg: &RunConfig, epoch: usize, global_step: usize, steps_per_epoch: usize) -> f64 {
    let warm_steps = cfg.warmup_epochs * steps_per_epoch;
    if global_step < warm_steps {
        let frac = global_step as f64 / warm_steps as f64;
        cfg.lr0 * (0.01 + 0.99 * frac)
    } else {
        decayed_lr(cfg, epoch)
    }
}

fn decayed_lr(cfg: &RunConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch.saturating_sub(cfg.warmup_epochs) as i32)
}

// ── batch graph ─────────────────────────────────────────────────────────

/// A fully wired per-batch loss graph plus handles to its reported nodes.
pub struct StepGraph<F: Real> {
    pub graph: Graph<F>,
    pub embed: EmbedNodes,
    pub l_id: NodeId,
    pub l_age: NodeId,
    /// Mutual-information penalty before its lambda, absent in no_mim.
    pub l_mim: Option<NodeId>,
    /// Estimator negative log likelihood on matched pairs, absent in
    /// no_mim.
    pub nll: Option<NodeId>,
    pub total: NodeId,
}

/// Compose the batch objective for `classes.len()` utterances of `t`
/// frames each: identity loss on x_id, age-group loss on x_age, and in the
/// mim modes the matched/mismatched contrast plus the estimator's own NLL.
/// `negatives` are in-batch indices; `weights` multiply the mismatched
/// term per item (all ones in no_aa).
pub fn build_step_graph<F: Real>(
    params: &ParamSet<F>,
    cfg: &RunConfig,
    t: usize,
    classes: &[usize],
    groups: &[usize],
    negatives: &[usize],
    weights: &[f64],
) -> Result<StepGraph<F>> {
    let n = classes.len();
    if n == 0 || groups.len() != n {
        return Err(Error::Invalid(format!(
            "build_step_graph: {} classes vs {} groups",
            n,
            groups.len()
        )));
    }
    let with_mi = cfg.mode != TrainMode::NoMim;
    if with_mi && (negatives.len() != n || weights.len() != n) {
        return Err(Error::Invalid(format!(
            "build_step_graph: batch {n} needs {n} negatives and weights, got {} and {}",
            negatives.len(),
            weights.len()
        )));
    }

    let dims = ModelDims::from_params(params)?;
    let mut g = Graph::new();
    backbone::add_backbone_params(&mut g, params)?;
    objectives::add_head_params(&mut g, params)?;
    if with_mi {
        mi::add_estimator_params(&mut g, params)?;
    }

    let embed = backbone::build_embeddings(&mut g, dims, n, t)?;
    let l_id = objectives::identity_loss(&mut g, embed.x_id, classes, ID_MARGIN, ID_SCALE)?;
    let l_age = objectives::age_loss(&mut g, embed.x_age, groups)?;
    let age_term = g.mul_scalar(l_age, F::from_f64(cfg.lambda_age));
    let mut total = g.add(l_id, age_term)?;

    let (l_mim, nll) = if with_mi {
        let cond = mi::cond_stats(&mut g, embed.x_id)?;
        let pos = mi::cond_log_density(&mut g, &cond, embed.x_age)?;
        let neg_rows = g.gather_rows(embed.x_age, negatives.to_vec())?;
        let neg = mi::cond_log_density(&mut g, &cond, neg_rows)?;
        // no_aa keeps the probability-ratio form and only drops the
        // age-gap weights (λ ≡ 1); the plain log-ratio bound stays
        // available through `mi::mim_loss` directly.
        let term = MiTerm::ClampedDensity {
            dim: dims.embed_dim,
        };
        let mim = mi::mim_loss(&mut g, pos, neg, weights, term)?;
        let mim_term = g.mul_scalar(mim, F::from_f64(cfg.lambda_mi));
        total = g.add(total, mim_term)?;
        (Some(mim), Some(mi::estimator_nll(&mut g, pos)?))
    } else {
        (None, None)
    };

    Ok(StepGraph {
        graph: g,
        embed,
        l_id,
        l_age,
        l_mim,
        nll,
        total,
    })
}

/// Push current parameter values into a graph built from an older copy.
pub fn sync_graph_params<F: Real>(g: &mut Graph<F>, params: &ParamSet<F>) -> Result<()> {
    for name in g.param_names() {
        let t = params
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("sync: parameter `{name}` disappeared")))?;
        g.set_param(&name, t.clone())?;
    }
    Ok(())
}

// ── parameter setup ─────────────────────────────────────────────────────

/// Dense class index per item plus the class count, from sorted distinct
/// speaker ids over the whole dataset.
pub fn speaker_classes<F: Real>(ds: &Dataset<F>) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = ds.items.iter().map(|s| s.speaker_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let classes = ds
        .items
        .iter()
        .map(|s| ids.binary_search(&s.speaker_id).unwrap())
        .collect();
    (classes, ids.len())
}

/// Initialize every model parameter from one rng, estimator included.
/// Drawing the estimator even in no_mim keeps the backbone start point
/// identical across modes at a fixed seed, which is what the ablation
/// comparisons lean on.
pub fn init_params<F: Real, R: rand::Rng>(
    cfg: &RunConfig,
    num_classes: usize,
    rng: &mut R,
) -> ParamSet<F> {
    let mut params = ParamSet::new();
    backbone::init_backbone_params(&mut params, ModelDims::from_config(cfg), rng);
    objectives::init_head_params(&mut params, cfg.embed_dim, num_classes, rng);
    mi::init_estimator_params(&mut params, cfg.embed_dim, rng);
    params
}

// ── training loop ───────────────────────────────────────────────────────

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_id: f64,
    pub l_age: f64,
    pub l_mim: Option<f64>,
    /// Estimator-based mutual information on the held-out tail, absent in
    /// no_mim.
    pub mi_estimate: Option<f64>,
    pub lr_phi: f64,
    pub lr_theta: Option<f64>,
}

impl EpochStats {
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{}",
            self.epoch,
            self.l_id,
            self.l_age,
            opt(self.l_mim),
            opt(self.mi_estimate),
            self.lr_phi,
            opt(self.lr_theta),
        )
    }
}

/// Everything a finished run hands back.
pub struct TrainOutcome<F: Real> {
    pub params: ParamSet<F>,
    pub checkpoint: Checkpoint<F>,
    pub history: Vec<EpochStats>,
    /// Full log text, header plus one line per epoch, trailing newline.
    pub log: String,
    pub epochs_run: usize,
    pub steps: u64,
}

/// Run the alternating loop over `ds`. The last `mi_holdout` utterances
/// never join a batch; they are embedded at every epoch end to report the
/// estimator's mutual-information value under the current parameters.
/// Partial trailing batches are dropped. `on_epoch` sees each finished
/// epoch's stats, log line, and a checkpoint snapshot, so a caller can
/// stream the log and keep a last-good checkpoint.
pub fn train<F: Real>(
    cfg: &RunConfig,
    ds: &Dataset<F>,
    mut on_epoch: impl FnMut(&EpochStats, &str, &Checkpoint<F>) -> Result<()>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let n = ds.len();
    if n == 0 {
        return Err(Error::Data("train: empty dataset".into()));
    }
    let t = ds.items[0].num_frames();
    if ds.items.iter().any(|s| s.num_frames() != t) {
        return Err(Error::Data(
            "train: utterances must share one frame count".into(),
        ));
    }
    if cfg.mi_holdout >= n {
        return Err(Error::Data(format!(
            "train: mi_holdout {} swallows the whole dataset of {n}",
            cfg.mi_holdout
        )));
    }
    let train_n = n - cfg.mi_holdout;
    if train_n < cfg.batch_size {
        return Err(Error::Data(format!(
            "train: {train_n} training utterances cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    let steps_per_epoch = train_n / cfg.batch_size;
    let with_mi = cfg.mode != TrainMode::NoMim;

    let (classes, num_classes) = speaker_classes(ds);
    let mut model_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    model_rng.set_stream(streams::MODEL);
    let mut params: ParamSet<F> = init_params(cfg, num_classes, &mut model_rng);

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(streams::SHUFFLE);
    let mut neg_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    neg_rng.set_stream(streams::NEGATIVES);

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut adam = Adam::from_config(cfg);
    let digest = cfg.digest();

    let mut order: Vec<usize> = (0..train_n).collect();
    let mut history: Vec<EpochStats> = Vec::new();
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.epochs {
        // the decayed schedule reaching the floor ends the run
        if epoch >= cfg.warmup_epochs && decayed_lr(cfg, epoch) <= cfg.lr_floor {
            break;
        }
        order.shuffle(&mut shuffle_rng);

        let mut sum_id = 0.0;
        let mut sum_age = 0.0;
        let mut sum_mim = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let b = chunk.len();
            let lr = phi_lr(cfg, epoch, global_step as usize, steps_per_epoch);
            last_lr = lr;

            let cls: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            let grp: Vec<usize> = chunk
                .iter()
                .map(|&i| objectives::age_group(ds.items[i].age_years))
                .collect();
            let (negs, weights) = if with_mi {
                let negs = mi::sample_negatives(b, &mut neg_rng)?;
                let weights = match cfg.mode {
                    TrainMode::Full => chunk
                        .iter()
                        .zip(&negs)
                        .map(|(&i, &k)| {
                            let gap = ds.items[i].age_years - ds.items[chunk[k]].age_years;
                            mi::aa_weight(gap, cfg.lambda0)
                        })
                        .collect(),
                    _ => vec![1.0; b],
                };
                (negs, weights)
            } else {
                (Vec::new(), Vec::new())
            };

            let mut sg = build_step_graph(&params, cfg, t, &cls, &grp, &negs, &weights)?;
            let mut inputs = Inputs::new();
            for (slot, &i) in chunk.iter().enumerate() {
                inputs.insert(
                    format!("frames.{slot}"),
                    backbone::frames_input(&ds.items[i]),
                );
            }

            let exec = sg.graph.forward(&inputs)?;
            sum_id += exec.value(sg.l_id).item().into_f64();
            sum_age += exec.value(sg.l_age).item().into_f64();
            if let Some(node) = sg.l_mim {
                sum_mim += exec.value(node).item().into_f64();
            }
            let grads = sg
                .graph
                .backward(&exec, sg.total, &|nm| !mi::is_estimator_param(nm))?;
            sgd.step(&mut params, &grads, lr, |nm| !mi::is_estimator_param(nm));

            if let Some(nll) = sg.nll {
                // estimator catches up against the post-step embeddings
                for _ in 0..cfg.theta_steps_per_phi {
                    sync_graph_params(&mut sg.graph, &params)?;
                    let exec = sg.graph.forward(&inputs)?;
                    let grads = sg.graph.backward(&exec, nll, &mi::is_estimator_param)?;
                    adam.step(&mut params, &grads, cfg.est_lr, mi::is_estimator_param);
                }
            }
            global_step += 1;
        }

        let denom = steps_per_epoch as f64;
        let mi_estimate = if with_mi {
            let triples = backbone::embed_batch(&params, &ds.items[train_n..])?;
            let (_, x_age, x_id) = backbone::stack_triples(&triples)?;
            Some(mi::estimate_mi(&params, &x_id, &x_age)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch,
            l_id: sum_id / denom,
            l_age: sum_age / denom,
            l_mim: with_mi.then_some(sum_mim / denom),
            mi_estimate,
            lr_phi: last_lr,
            lr_theta: with_mi.then_some(cfg.est_lr),
        };
        let line = stats.line();
        log.push_str(&line);
        log.push('\n');
        let ckpt = snapshot(digest, epoch as u64 + 1, global_step, &params, &sgd, &adam);
        on_epoch(&stats, &line, &ckpt)?;
        history.push(stats);
    }

    let epochs_run = history.len();
    let checkpoint = snapshot(digest, epochs_run as u64, global_step, &params, &sgd, &adam);
    Ok(TrainOutcome {
        params,
        checkpoint,
        history,
        log,
        epochs_run,
        steps: global_step,
    })
}

fn snapshot<F: Real>(
    digest: [u8; 32],
    epoch: u64,
    step: u64,
    params: &ParamSet<F>,
    sgd: &Sgd<F>,
    adam: &Adam<F>,
) -> Checkpoint<F> {
    let mut tensors = params.clone();
    sgd.export_state(&mut tensors);
    adam.export_state(&mut tensors);
    Checkpoint {
        config_digest: digest,
        epoch,
        step,
        adam_t: adam.steps(),
        tensors,
    }
}

// ── standalone estimator fitting ────────────────────────────────────────

/// Settings for fitting a fresh estimator to a fixed embedding table.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 7,
        }
    }
}

/// Fit a fresh conditional estimator on fixed (x_id, x_age) rows by Adam
/// on the matched-pair NLL. Returns the fitted parameters and the batch
/// NLL recorded before every step. Rows are revisited in shuffled epochs;
/// a short trailing batch is dropped.
pub fn fit_estimator<F: Real>(
    x_id: &Tensor<F>,
    x_age: &Tensor<F>,
    opts: &FitOptions,
) -> Result<(ParamSet<F>, Vec<f64>)> {
    if x_id.rank() != 2 || x_id.shape() != x_age.shape() {
        return Err(Error::Shape(format!(
            "fit_estimator: x_id {:?} vs x_age {:?}",
            x_id.shape(),
            x_age.shape()
        )));
    }
    let (n, d) = (x_id.shape()[0], x_id.shape()[1]);
    if n < 2 {
        return Err(Error::Invalid("fit_estimator: need at least 2 rows".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 || opts.lr <= 0.0 {
        return Err(Error::Invalid(format!(
            "fit_estimator: steps {}, batch {}, lr {}",
            opts.steps, opts.batch_size, opts.lr
        )));
    }
    let b = opts.batch_size.min(n);

    let mut model_rng = ChaCha12Rng::seed_from_u64(opts.seed);
    model_rng.set_stream(streams::MODEL);
    let mut params = ParamSet::new();
    mi::init_estimator_params(&mut params, d, &mut model_rng);
    let mut adam = Adam::new(0.9, 0.999, 1e-8, opts.weight_decay);

    let mut g: Graph<F> = Graph::new();
    mi::add_estimator_params(&mut g, &params)?;
    let xid_in = g.input("xid", &[b, d])?;
    let y_in = g.input("y", &[b, d])?;
    let cond = mi::cond_stats(&mut g, xid_in)?;
    let logq = mi::cond_log_density(&mut g, &cond, y_in)?;
    let nll = mi::estimator_nll(&mut g, logq)?;

    let gather = |src: &Tensor<F>, rows: &[usize]| -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        Tensor::from_rows(rows.len(), d, data)
    };

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(opts.seed);
    shuffle_rng.set_stream(streams::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(opts.steps);

    'fit: loop {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(b) {
            let mut inputs = Inputs::new();
            inputs.insert("xid".into(), gather(x_id, chunk)?);
            inputs.insert("y".into(), gather(x_age, chunk)?);
            sync_graph_params(&mut g, &params)?;
            let exec = g.forward(&inputs)?;
            trace.push(exec.value(nll).item().into_f64());
            let grads = g.backward(&exec, nll, &|_| true)?;
            adam.step(&mut params, &grads, opts.lr, |_| true);
            if trace.len() == opts.steps {
                break 'fit;
            }
        }
    }
    Ok((params, trace))
}
