//! Supervised training of the node model with cross-entropy and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::DropoutRng;
use crate::eval::metrics::micro_f1;
use crate::graph::{HinGraph, NodeId};
use crate::model::{ModelConfig, ModelError, RingTypeTransformer};
use crate::rings::{RingError, TokenCache};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cache(#[from] RingError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Fraction of labeled nodes held out for validation, stratified.
    pub val_fraction: f64,
    /// Nodes per gradient work unit. Fixes the reduction order, so results
    /// do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            batch_size: 32,
            eval_every: 1,
            patience: 30,
            seed: 0,
            val_fraction: 0.1,
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction = {} outside (0, 1)", self.val_fraction));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.eval_every == 0 {
            return bad("batch_size, chunk_size and eval_every must be >= 1".into());
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy_with_logits(x, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) -> Result<(), TensorError> {
    if grads.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = S::lit(1.0 - b1.powi(t));
    let c2 = S::lit(1.0 - b2.powi(t));
    let (lr, eps, wd) = (S::lit(cfg.lr), S::lit(cfg.eps), S::lit(cfg.weight_decay));
    let (b1, b2) = (S::lit(b1), S::lit(b2));
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i);
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *x);
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_micro_f1: Option<f64>,
}

pub struct TrainOutcome<S> {
    /// Parameters from the best validation epoch.
    pub model: RingTypeTransformer<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_nodes: Vec<NodeId>,
    pub val_nodes: Vec<NodeId>,
}

/// History as CSV: `epoch,train_loss,val_loss,val_micro_f1`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_micro_f1\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.9}")).unwrap_or_default();
    for r in history {
        out.push_str(&format!(
            "{},{:.9},{},{}\n",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_micro_f1)
        ));
    }
    out
}

/// Per-class shuffle and split: `round(fraction · n_c)` nodes of each
/// class go to validation, at least one when the class has two or more.
pub fn stratified_split(nodes: &[(NodeId, usize)], fraction: f64, seed: u64) -> (Vec<NodeId>, Vec<NodeId>) {
    let mut by_class: Vec<Vec<NodeId>> = Vec::new();
    for &(u, c) in nodes {
        if by_class.len() <= c {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in &mut by_class {
        members.sort_unstable();
        members.shuffle(&mut rng);
        let mut n_val = (fraction * members.len() as f64).round() as usize;
        if members.len() >= 2 {
            n_val = n_val.clamp(1, members.len() - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn chunk_seed(seed: u64, epoch: usize, batch: usize, chunk: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [epoch as u64, batch as u64, chunk as u64] {
        h = (h ^ x).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Labeled nodes that have cached tokens, with their classes.
fn labeled_in_cache(g: &HinGraph, cache: &TokenCache) -> Vec<(NodeId, usize)> {
    g.labeled_nodes()
        .into_iter()
        .filter(|&u| cache.get(u).is_some())
        .map(|u| (u, g.label(u).expect("labeled") as usize))
        .collect()
}

pub struct Trainer<'a, S> {
    pub graph: &'a HinGraph,
    pub cache: &'a TokenCache,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pool: Option<Vec<NodeId>>,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(
        graph: &'a HinGraph,
        cache: &'a TokenCache,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        model_cfg.validate()?;
        cache.check_matches(graph, model_cfg.k)?;
        if cache.num_types() != model_cfg.num_types || cache.d_in() != model_cfg.d_in {
            return Err(TrainError::Config(format!(
                "cache has T = {}, d_in = {}; model expects T = {}, d_in = {}",
                cache.num_types(),
                cache.d_in(),
                model_cfg.num_types,
                model_cfg.d_in
            )));
        }
        if graph.num_classes() > model_cfg.num_classes {
            return Err(TrainError::Config(format!(
                "graph has {} classes, model head has {}",
                graph.num_classes(),
                model_cfg.num_classes
            )));
        }
        Ok(Self {
            graph,
            cache,
            model_cfg,
            train_cfg,
            pool: None,
            _marker: std::marker::PhantomData,
        })
    }

    /// Limits training and validation to `nodes`; other labeled nodes are
    /// never seen by the model.
    pub fn with_pool(mut self, nodes: &[NodeId]) -> Self {
        let mut nodes = nodes.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        self.pool = Some(nodes);
        self
    }

    /// Mean loss and summed gradients of a chunk, each sample weighted by
    /// `1 / batch_len`.
    fn chunk_grads(
        &self,
        model: &RingTypeTransformer<S>,
        chunk: &[NodeId],
        batch_len: usize,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor<S>>), TrainError> {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let mut rng = DropoutRng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let tok = self.cache.get(u).expect("node in cache");
            rows.push(model.forward_tape(&mut tape, &p, tok, Some(&mut rng))?.logits);
            labels.push(self.graph.label(u).expect("labeled") as usize);
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy_with_logits(logits, &labels)?;
        let loss = tape.scale(loss, S::lit(chunk.len() as f64 / batch_len as f64))?;
        tape.backward(loss)?;
        let grads = p
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(loss).data()[0].to_f64_lossy(), grads))
    }

    /// Loss and micro-F1 of the head's predictions in evaluation mode.
    pub fn evaluate(&self, model: &RingTypeTransformer<S>, nodes: &[NodeId]) -> Result<(f64, f64), TrainError> {
        if nodes.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let toks: Vec<_> = nodes.iter().map(|&u| self.cache.get(u).expect("node in cache")).collect();
        let (_, logits) = model.embed_batch(&toks)?;
        let c = model.config().num_classes;
        let flat: Vec<S> = logits.concat();
        let logits_t = Tensor::matrix(nodes.len(), c, flat)?;
        let labels: Vec<usize> = nodes.iter().map(|&u| self.graph.label(u).expect("labeled") as usize).collect();
        let loss = cross_entropy_loss(&logits_t, &labels)?.to_f64_lossy();
        let pred: Vec<usize> = logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0
            })
            .collect();
        Ok((loss, micro_f1(&labels, &pred)))
    }

    fn divergence(&self, e: TrainError, epoch: usize, batch: usize) -> TrainError {
        let detail = match &e {
            TrainError::Model(ModelError::NonFinite(u)) => {
                format!("non-finite output for node {}", self.graph.node_name(*u))
            }
            TrainError::Model(ModelError::Tensor(t @ TensorError::NonFinite { .. }))
            | TrainError::Tensor(t @ TensorError::NonFinite { .. }) => t.to_string(),
            _ => return e,
        };
        TrainError::Diverged { epoch, batch, detail }
    }

    pub fn fit(&self) -> Result<TrainOutcome<S>, TrainError> {
        let cfg = &self.train_cfg;
        let mut labeled = labeled_in_cache(self.graph, self.cache);
        if let Some(pool) = &self.pool {
            labeled.retain(|(u, _)| pool.binary_search(u).is_ok());
        }
        if labeled.len() < 2 {
            return Err(TrainError::Config(format!("need at least 2 labeled cached nodes, found {}", labeled.len())));
        }
        let (train_nodes, val_nodes) = stratified_split(&labeled, cfg.val_fraction, cfg.seed);
        let mut model = RingTypeTransformer::<S>::new(self.model_cfg.clone())?;
        let mut adam = AdamState::new(model.params());
        let mut best = model.params().clone();
        let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut best_epoch = 0;
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order = train_nodes.clone();

        for epoch in 1..=cfg.epochs {
            order.copy_from_slice(&train_nodes);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, epoch, usize::MAX, 0)));
            let mut epoch_loss = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let parts = batch
                    .par_chunks(cfg.chunk_size)
                    .enumerate()
                    .map(|(c, chunk)| self.chunk_grads(&model, chunk, batch.len(), chunk_seed(cfg.seed, epoch, b, c)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| self.divergence(e, epoch, b))?;
                let mut iter = parts.into_iter();
                let (mut loss, mut grads) = iter.next().expect("non-empty batch");
                for (l, g) in iter {
                    loss += l;
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        for (a, &x) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += x;
                        }
                    }
                }
                if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("loss = {loss}"),
                    });
                }
                epoch_loss += loss * batch.len() as f64;
                adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            }
            let train_loss = epoch_loss / order.len() as f64;
            let mut record = EpochRecord {
                epoch,
                train_loss,
                val_loss: None,
                val_micro_f1: None,
            };
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let (vl, vf) = self
                    .evaluate(&model, &val_nodes)
                    .map_err(|e| self.divergence(e, epoch, usize::MAX))?;
                record.val_loss = Some(vl);
                record.val_micro_f1 = Some(vf);
                let key = (vf, -vl);
                if key > best_key || best_epoch == 0 {
                    best_key = key;
                    best_epoch = epoch;
                    best = model.params().clone();
                }
                log::info!("epoch {epoch}: train_loss {train_loss:.6} val_loss {vl:.6} val_micro_f1 {vf:.4}");
            } else {
                log::debug!("epoch {epoch}: train_loss {train_loss:.6}");
            }
            history.push(record);
            if cfg.patience > 0 && best_epoch > 0 && epoch - best_epoch >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
        if best_epoch == 0 {
            best = model.params().clone();
        }
        model.params_mut().assign_from(&best)?;
        Ok(TrainOutcome {
            model,
            history,
            best_epoch,
            train_nodes,
            val_nodes,
        })
    }
}
