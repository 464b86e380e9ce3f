//! Toy byte-level language model with one MoE layer:
//! embedding `[256, H]` -> MoE -> output projection `[256, H]` -> cross-entropy.
//!
//! Each corpus line is one sequence, truncated to `seq_len` bytes, with
//! targets shifted by one. Lines are packed without padding, which is the
//! same objective as padding with masked positions.

use moelab_core::grad::{NodeId, Parameterized, Tape};
use moelab_core::moe::{ExpertKind, MoeLayer};
use moelab_core::numcore::{rng_normal, Rng};
use moelab_core::optim::Optimizer;
use moelab_core::routers::RouterConfig;
use moelab_core::{Activation, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const VOCAB: usize = 256;
/// Smallest corpus accepted by [`train_toy`].
pub const MIN_CORPUS_BYTES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `[256, H]`
    pub embedding: Tensor,
    pub layer: MoeLayer,
    /// `[256, H]`
    pub output: Tensor,
}

impl ToyModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let h = cfg.hidden;
        let rcfg = RouterConfig {
            seed: cfg.seed,
            ..RouterConfig::with_dims(h, cfg.experts, cfg.top_k)
        };
        let mut rng = Rng::new(cfg.seed).fork(0x0054_4f59);
        let expert_std = 1.0 / (h as f64).sqrt();
        let layer = MoeLayer::random(
            cfg.router,
            &rcfg,
            ExpertKind::Standard,
            cfg.ffn_width(),
            Activation::Gelu,
            expert_std,
        )?;
        Ok(Self {
            embedding: rng_normal(&mut rng, &[VOCAB, h], 0.0, 1.0)?,
            layer,
            output: rng_normal(&mut rng, &[VOCAB, h], 0.0, 0.02)?,
        })
    }

    /// Records task and total loss for one packed micro-batch.
    fn record<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        inputs: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<(Vec<NodeId>, NodeId, NodeId)> {
        let emb = tape.parameter(&self.embedding);
        let layer_params = self.layer.bind(tape, true);
        let out = tape.parameter(&self.output);
        let x = tape.gather_rows(emb, inputs)?;
        let nodes = self.layer.record(tape, x, &layer_params)?;
        let logits = tape.linear(nodes.output, out)?;
        let task = tape.cross_entropy(logits, targets)?;
        let mut total = tape.add(task, nodes.aux)?;
        if let Some(reg) = nodes.regularizer {
            total = tape.add(total, reg)?;
        }
        let mut ids = vec![emb];
        ids.extend(layer_params.all());
        ids.push(out);
        Ok((ids, task, total))
    }
}

impl Parameterized for ToyModel {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut p = vec![("embedding", &self.embedding)];
        p.extend(self.layer.parameters());
        p.push(("output", &self.output));
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.embedding];
        p.extend(self.layer.parameters_mut());
        p.push(&mut self.output);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean task loss over the steps since the previous entry.
    pub loss: f64,
    /// Mean scaled auxiliary loss over the same steps.
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Task loss of the first effective batch before any update.
    pub initial_loss: f64,
    /// Scaled auxiliary loss of the same batch.
    pub initial_aux: f64,
    pub log: Vec<LogEntry>,
}

/// Byte sequences of the corpus lines that yield at least one target.
pub fn sequences(corpus: &[u8], seq_len: usize) -> Vec<Vec<usize>> {
    corpus
        .split(|&b| b == b'\n')
        .map(|line| line.strip_suffix(b"\r").unwrap_or(line))
        .filter(|line| line.len() >= 2)
        .map(|line| {
            line[..line.len().min(seq_len)]
                .iter()
                .map(|&b| usize::from(b))
                .collect()
        })
        .collect()
}

/// Deterministic epoch-shuffled stream of sequence indices.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(0x5341_4d50);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains a fresh [`ToyModel`] and returns the loss log.
pub fn train_toy(cfg: &TrainConfig, corpus: &[u8]) -> Result<TrainReport> {
    train_model(&mut ToyModel::new(cfg)?, cfg, corpus)
}

pub fn train_model(model: &mut ToyModel, cfg: &TrainConfig, corpus: &[u8]) -> Result<TrainReport> {
    if corpus.len() < MIN_CORPUS_BYTES {
        return Err(Error::Invalid(format!(
            "corpus has {} bytes, training needs at least {MIN_CORPUS_BYTES}",
            corpus.len()
        )));
    }
    if cfg.batch == 0 || cfg.grad_accum == 0 || cfg.log_every == 0 || cfg.seq_len < 2 {
        return Err(Error::Invalid(
            "batch, grad_accum and log_every must be >= 1 and seq_len >= 2".into(),
        ));
    }
    let seqs = sequences(corpus, cfg.seq_len);
    if seqs.is_empty() {
        return Err(Error::Invalid(
            "corpus has no line of two or more bytes".into(),
        ));
    }
    let mut sampler = Sampler::new(seqs.len(), cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let micro = cfg.grad_accum as f64;
    let mut initial = None;
    let mut log = Vec::new();
    let (mut window_loss, mut window_aux, mut window_steps) = (0.0, 0.0, 0usize);
    for step in 1..=cfg.steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut step_loss, mut step_aux) = (0.0, 0.0);
        for _ in 0..cfg.grad_accum {
            let (mut inputs, mut targets) = (Vec::new(), Vec::new());
            for _ in 0..cfg.batch {
                let s = &seqs[sampler.next()];
                inputs.extend_from_slice(&s[..s.len() - 1]);
                targets.extend_from_slice(&s[1..]);
            }
            let mut tape = Tape::new();
            let (ids, task, total) = model.record(&mut tape, inputs, targets)?;
            let g = tape.backward(total)?;
            step_loss += tape.scalar(task) / micro;
            step_aux += (tape.scalar(total) - tape.scalar(task)) / micro;
            let params = model.parameters();
            match grads.as_mut() {
                None => {
                    grads = Some(
                        ids.iter()
                            .zip(&params)
                            .map(|(&id, (_, p))| g.wrt(id, p).map(|v| v / micro))
                            .collect(),
                    )
                }
                Some(acc) => {
                    for ((a, &id), (_, p)) in acc.iter_mut().zip(&ids).zip(&params) {
                        let gi = g.wrt(id, p);
                        for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                            *x += y / micro;
                        }
                    }
                }
            }
        }
        initial.get_or_insert((step_loss, step_aux));
        let grads = grads.expect("grad_accum >= 1");
        opt.step(&mut model.parameters_mut(), &grads)?;
        window_loss += step_loss;
        window_aux += step_aux;
        window_steps += 1;
        if step % cfg.log_every == 0 {
            log.push(LogEntry {
                step,
                loss: window_loss / window_steps as f64,
                aux: window_aux / window_steps as f64,
            });
            (window_loss, window_aux, window_steps) = (0.0, 0.0, 0);
        }
    }
    let (initial_loss, initial_aux) = initial.unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainReport {
        initial_loss,
        initial_aux,
        log,
    })
}
