//! Minibatch SGD with momentum, staircase learning-rate decay, on-the-fly
//! augmentation and checkpointing.
//!
//! Every random choice is drawn from a stream keyed by the run seed and the
//! iteration it belongs to, so a run is reproducible regardless of thread
//! timing and can be resumed from any checkpoint.

use std::fs;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{normalize_zscore, AugmentPolicy, AUGMENT_KEYS};
use crate::checkpoint::{Block, Checkpoint};
use crate::config::KvConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{ClassWeights, DiceReduction, LossKind};
use crate::metrics::hard_dice;
use crate::model::{NetworkConfig, VNetModel, NETWORK_KEYS};
use crate::ops;
use crate::rng::{self, tag};
use crate::tape::Tape;
use crate::tensor::Tensor5;
use crate::volume::{write_atomic, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    /// Initial learning rate.
    pub lr: f64,
    /// Factor applied to the learning rate every `decay_interval` iterations.
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub max_iters: usize,
    pub loss: LossKind,
    pub dice_reduction: DiceReduction,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    /// Full-scale schedule: 1e-4 dropping tenfold every 25k iterations.
    fn default() -> Self {
        Self {
            batch_size: 2,
            momentum: 0.99,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_interval: 25_000,
            max_iters: 30_000,
            loss: LossKind::Dice,
            dice_reduction: DiceReduction::MeanPerVolume,
            checkpoint_interval: 1000,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "momentum",
    "lr",
    "lr_decay",
    "decay_interval",
    "max_iters",
    "loss",
    "dice_reduction",
    "checkpoint_interval",
    "seed",
];

/// Every key understood by a training run.
pub fn known_keys() -> Vec<&'static str> {
    NETWORK_KEYS
        .iter()
        .chain(TRAIN_KEYS)
        .chain(AUGMENT_KEYS)
        .copied()
        .collect()
}

impl TrainConfig {
    /// Short CPU schedule for 32^3 volumes.
    pub fn desk() -> Self {
        Self {
            lr: DESK_LR,
            decay_interval: 200,
            max_iters: 600,
            checkpoint_interval: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Error::Config {
            key: key.into(),
            detail,
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(bad(
                "lr_decay",
                format!("must be positive, got {}", self.lr_decay),
            ));
        }
        if self.decay_interval == 0 {
            return Err(bad("decay_interval", "must be at least 1".into()));
        }
        self.augment.validate()
    }

    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        if let Some(v) = kv.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.get("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.get("lr_decay")? {
            self.lr_decay = v;
        }
        if let Some(v) = kv.get("decay_interval")? {
            self.decay_interval = v;
        }
        if let Some(v) = kv.get("max_iters")? {
            self.max_iters = v;
        }
        if let Some(v) = kv.get("loss")? {
            self.loss = v;
        }
        if let Some(v) = kv.get("dice_reduction")? {
            self.dice_reduction = v;
        }
        if let Some(v) = kv.get("checkpoint_interval")? {
            self.checkpoint_interval = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        self.augment = self.augment.overlay(kv)?;
        self.validate()?;
        Ok(self)
    }

    pub fn write_to(&self, kv: &mut KvConfig) {
        kv.set("batch_size", self.batch_size);
        kv.set("momentum", self.momentum);
        kv.set("lr", self.lr);
        kv.set("lr_decay", self.lr_decay);
        kv.set("decay_interval", self.decay_interval);
        kv.set("max_iters", self.max_iters);
        kv.set("loss", self.loss);
        kv.set("dice_reduction", self.dice_reduction);
        kv.set("checkpoint_interval", self.checkpoint_interval);
        kv.set("seed", self.seed);
        self.augment.write_to(kv);
    }
}

/// Initial learning rate of [`TrainConfig::desk`].
pub const DESK_LR: f64 = 3e-3;

/// `lr * lr_decay^floor(iter / decay_interval)`.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    let drops = (iter / cfg.decay_interval) as i32;
    cfg.lr * cfg.lr_decay.powi(drops)
}

/// Heavy-ball update `v <- mu v - lr g; w <- w + v`. Leaves everything
/// untouched when a gradient entry is not finite.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocities: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        return Err(Error::Shape(format!(
            "sgd step over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            field: "gradient".into(),
            index,
        });
    }
    for ((w, v), g) in params.iter_mut().zip(velocities.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Dice of the thresholded prediction against the batch labels, averaged
    /// over the batch.
    pub train_dice: f64,
}

pub const HISTORY_HEADER: &str = "iter,lr,loss,train_dice";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.iter, r.lr, r.loss, r.train_dice
        ));
    }
    s
}

/// Optimizer state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: usize,
    /// One array per parameter block, in parameter-store order.
    pub velocities: Vec<Vec<f64>>,
    pub history: Vec<HistoryRow>,
}

/// One network input with its flattened labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor5,
    pub labels: Vec<u8>,
    /// Dataset index of each batch entry.
    pub cases: Vec<usize>,
}

/// Assembles minibatches; a pure function of (dataset, config, iteration).
#[derive(Debug, Clone)]
struct BatchSource {
    data: Dataset,
    /// Z-scored images, used as-is when augmentation is off.
    normalized: Vec<Volume>,
    cfg: TrainConfig,
}

impl BatchSource {
    fn case_index(&self, iter: usize, slot: usize) -> usize {
        let n = self.data.len();
        let s = iter * self.cfg.batch_size + slot;
        let epoch = s / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(
            self.cfg.seed,
            &[tag::BATCH_ORDER, epoch as u64],
        ));
        order[s % n]
    }

    fn sample(&self, ci: usize, iter: usize, slot: usize) -> Result<(Volume, Vec<u8>)> {
        let aug = &self.cfg.augment;
        let case = &self.data.cases()[ci];
        if !aug.deform && !aug.hist_match {
            return Ok((self.normalized[ci].clone(), case.label.data().to_vec()));
        }
        let mut r = rng::stream(
            self.cfg.seed,
            &[tag::DEFORM, aug.seed, ci as u64, iter as u64, slot as u64],
        );
        let n = self.data.len();
        let reference = (aug.hist_match && n > 1).then(|| {
            let j = r.random_range(0..n - 1);
            &self.data.cases()[if j >= ci { j + 1 } else { j }].image
        });
        let (image, label) = aug.apply(&case.image, &case.label, reference, &mut r)?;
        Ok((normalize_zscore(&image), label.data().to_vec()))
    }

    fn batch(&self, iter: usize) -> Result<Batch> {
        let b = self.cfg.batch_size;
        let [d, h, w] = self.data.common_dims()?;
        let mut input = Vec::with_capacity(b * d * h * w);
        let mut labels = Vec::with_capacity(b * d * h * w);
        let mut cases = Vec::with_capacity(b);
        for slot in 0..b {
            let ci = self.case_index(iter, slot);
            let (image, label) = self.sample(ci, iter, slot)?;
            input.extend_from_slice(image.data());
            labels.extend_from_slice(&label);
            cases.push(ci);
        }
        Ok(Batch {
            input: Tensor5::from_vec([b, 1, d, h, w], input)?,
            labels,
            cases,
        })
    }
}

pub struct Trainer {
    model: VNetModel,
    state: TrainState,
    source: BatchSource,
    weights: ClassWeights,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: VNetModel, data: Dataset) -> Result<Self> {
        let velocities = model
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        let state = TrainState {
            iteration: 0,
            velocities,
            history: Vec::new(),
        };
        Self::with_state(cfg, model, data, state)
    }

    fn with_state(
        cfg: TrainConfig,
        model: VNetModel,
        data: Dataset,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = data.common_dims()?;
        if dims != model.config().input {
            return Err(Error::Shape(format!(
                "dataset volumes are {dims:?}, model expects {:?}",
                model.config().input
            )));
        }
        let all: Vec<u8> = data
            .cases()
            .iter()
            .flat_map(|c| c.label.data().iter().copied())
            .collect();
        let weights = ClassWeights::inverse_frequency(&all);
        let normalized = data
            .cases()
            .iter()
            .map(|c| normalize_zscore(&c.image))
            .collect();
        Ok(Self {
            model,
            state,
            source: BatchSource {
                data,
                normalized,
                cfg,
            },
            weights,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.source.cfg
    }

    pub fn model(&self) -> &VNetModel {
        &self.model
    }

    pub fn into_model(self) -> VNetModel {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.state.history
    }

    /// Class weights used by the logistic loss, from the whole training set.
    pub fn class_weights(&self) -> ClassWeights {
        self.weights
    }

    /// The minibatch of iteration `iter`.
    pub fn batch(&self, iter: usize) -> Result<Batch> {
        self.source.batch(iter)
    }

    /// Forward, loss and backward on `batch` at the current parameters.
    /// Returns (loss, train Dice, parameter gradients).
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, f64, crate::tape::ParamGrads)> {
        let cfg = &self.source.cfg;
        let mut tape = Tape::new(self.model.params());
        let x = tape.input(batch.input.clone());
        let trace = self.model.forward(&mut tape, x)?;
        let root = match cfg.loss {
            LossKind::Dice => {
                let probs = tape.softmax(trace.logits)?;
                tape.dice_loss(probs, &batch.labels, cfg.dice_reduction)?.0
            }
            LossKind::WeightedLogistic => {
                tape.weighted_logistic(trace.logits, &batch.labels, self.weights)?
            }
        };
        let loss = tape.value(root).data()[0];
        let probs = ops::softmax2(tape.value(trace.logits))?;
        let plane = probs.spatial_len();
        let mut dice = 0.0;
        for n in 0..probs.batch() {
            let mask: Vec<u8> = probs
                .channel(n, 1)
                .iter()
                .map(|&p| (p > 0.5) as u8)
                .collect();
            dice += hard_dice(&mask, &batch.labels[n * plane..(n + 1) * plane]);
        }
        tape.backward(root)?;
        Ok((loss, dice / probs.batch() as f64, tape.into_param_grads()))
    }

    fn step_on(&mut self, batch: &Batch) -> Result<HistoryRow> {
        let iter = self.state.iteration;
        let cfg = &self.source.cfg;
        let lr = lr_schedule(iter, cfg);
        let (loss, train_dice, grads) = self.loss_and_grads(batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                what: "loss",
                iteration: iter as u64,
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                what: "loss",
                iteration: iter as u64,
            });
        }
        let momentum = cfg.momentum;
        let ids: Vec<_> = self.model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let numel = self.model.params().get(id).numel();
            let zeros;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; numel];
                    &zeros
                }
            };
            let w = self.model.params_mut().get_mut(id).data_mut();
            sgd_momentum_step(w, g, &mut self.state.velocities[k], lr, momentum).map_err(|e| {
                match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        what: "gradient",
                        iteration: iter as u64,
                    },
                    other => other,
                }
            })?;
        }
        let row = HistoryRow {
            iter,
            lr,
            loss,
            train_dice,
        };
        self.state.history.push(row);
        self.state.iteration += 1;
        Ok(row)
    }

    /// One iteration on its own minibatch.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let batch = self.source.batch(self.state.iteration)?;
        self.step_on(&batch)
    }

    /// Runs until `until` iterations are complete. Batches are prepared on a
    /// producer thread, at most two ahead of the optimizer. `on_step` sees
    /// the trainer after each update.
    pub fn run_until(
        &mut self,
        until: usize,
        mut on_step: impl FnMut(&Trainer, &HistoryRow) -> Result<()>,
    ) -> Result<()> {
        let start = self.state.iteration;
        if until <= start {
            return Ok(());
        }
        let source = self.source.clone();
        thread::scope(|s| {
            let (tx, rx) = sync_channel::<Result<Batch>>(2);
            s.spawn(move || {
                for iter in start..until {
                    if tx.send(source.batch(iter)).is_err() {
                        break;
                    }
                }
            });
            for _ in start..until {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::InvalidArgument("batch producer stopped".into()))??;
                let row = self.step_on(&batch)?;
                on_step(self, &row)?;
            }
            Ok(())
        })
    }

    /// Every resolved key of the run.
    pub fn resolved_config(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        self.model.config().write_to(&mut kv);
        self.source.cfg.write_to(&mut kv);
        kv
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.resolved_config();
        meta.set("iteration", self.state.iteration);
        let mut blocks = model_blocks(&self.model);
        for ((_, p), v) in self.model.params().iter().zip(&self.state.velocities) {
            blocks.push(
                Block::new(
                    format!("velocity/{}", p.name),
                    p.value.shape().to_vec(),
                    v.clone(),
                )
                .expect("velocity mirrors parameter"),
            );
        }
        let h = &self.state.history;
        let data = h
            .iter()
            .flat_map(|r| [r.iter as f64, r.lr, r.loss, r.train_dice])
            .collect();
        blocks.push(Block::new("history", vec![h.len(), 4], data).expect("4 columns"));
        Checkpoint { meta, blocks }
    }

    /// Continues a run from `ck`. Keys in `overrides` (e.g. a larger
    /// `max_iters`) replace the stored ones.
    pub fn resume(ck: &Checkpoint, data: Dataset, overrides: &KvConfig) -> Result<Self> {
        let mut kv = ck.meta.clone();
        kv.overlay(overrides);
        let model = model_from_checkpoint(ck)?;
        let cfg = TrainConfig::default().overlay(&kv)?;
        let iteration: usize = ck.meta.get("iteration")?.ok_or_else(|| Error::Config {
            key: "iteration".into(),
            detail: "missing from checkpoint".into(),
        })?;
        let mut velocities = Vec::new();
        for (_, p) in model.params().iter() {
            let name = format!("velocity/{}", p.name);
            let b = ck.block(&name).ok_or_else(|| Error::Config {
                key: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            if b.data.len() != p.value.numel() {
                return Err(Error::Shape(format!("{name}: {:?}", b.shape)));
            }
            velocities.push(b.data.clone());
        }
        let history = match ck.block("history") {
            Some(b) => b
                .data
                .chunks_exact(4)
                .map(|r| HistoryRow {
                    iter: r[0] as usize,
                    lr: r[1],
                    loss: r[2],
                    train_dice: r[3],
                })
                .collect(),
            None => Vec::new(),
        };
        let state = TrainState {
            iteration,
            velocities,
            history,
        };
        Self::with_state(cfg, model, data, state)
    }

    /// Trains to `max_iters`, writing `history.csv` and `ckpt_<iter>.vpar`
    /// files into `out` on the checkpoint schedule and at the end.
    pub fn train_to_dir(&mut self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let until = self.source.cfg.max_iters;
        let every = self.source.cfg.checkpoint_interval;
        let save = |t: &Trainer| -> Result<()> {
            let it = t.state.iteration;
            t.checkpoint().save(out.join(format!("ckpt_{it}.vpar")))?;
            write_atomic(
                &out.join("history.csv"),
                history_csv(&t.state.history).as_bytes(),
            )
        };
        self.run_until(until, |t, row| {
            if row.iter % 10 == 0 {
                log::info!(
                    "iter {} lr {:e} loss {:.6} train_dice {:.4}",
                    row.iter,
                    row.lr,
                    row.loss,
                    row.train_dice
                );
            }
            let done = t.state.iteration;
            if every > 0 && done % every == 0 && done < until {
                save(t)?;
            }
            Ok(())
        })?;
        save(self)
    }
}

/// Parameter blocks of `model`, named as in its parameter store.
pub fn model_blocks(model: &VNetModel) -> Vec<Block> {
    model
        .params()
        .iter()
        .map(|(_, p)| {
            Block::new(
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().to_vec(),
            )
            .expect("parameter shape")
        })
        .collect()
}

/// Checkpoint holding only a model's architecture and parameters.
pub fn model_checkpoint(model: &VNetModel) -> Checkpoint {
    let mut meta = KvConfig::new();
    model.config().write_to(&mut meta);
    Checkpoint {
        meta,
        blocks: model_blocks(model),
    }
}

/// Rebuilds the network described by `ck.meta` and loads its parameters.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<VNetModel> {
    let config = NetworkConfig::default().overlay(&ck.meta)?;
    let mut model = VNetModel::build(config, 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let b = ck.block(&name).ok_or_else(|| Error::Config {
            key: name.clone(),
            detail: "parameter missing from checkpoint".into(),
        })?;
        let t = model.params_mut().get_mut(id);
        if b.shape != t.shape() {
            return Err(Error::Shape(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                b.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&b.data);
    }
    Ok(model)
}
