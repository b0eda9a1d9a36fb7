//! Losses and training loops for task networks, the transfer network and the
//! multi-task comparator.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use atdt_autodiff::{read_checkpoint, write_checkpoint, Adam, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Batch, Split};
use crate::error::{contract, Error, Result};
use crate::metrics::{evaluate, TaskMetrics};
use crate::nets::{Mode, MultiTaskNetwork, Task, TaskNetwork, TransferNet};
use crate::scenegen::D_MAX;

/// Reconstruction objective for the transfer network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferLossKind {
    /// Squared L2 normalized by element count.
    #[default]
    Mse,
    /// Plain Euclidean norm of the difference.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation and checkpoint period in steps; 0 disables both.
    pub eval_every: usize,
    pub transfer_loss: TransferLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_every: 250,
            transfer_loss: TransferLossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, batchnorm: bool) -> Result<()> {
        if self.batch_size == 0 || (batchnorm && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} too small{}",
                self.batch_size,
                if batchnorm { " for batch norm (needs >= 2)" } else { "" }
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    /// Validation score at evaluation steps: mIoU, Abs Rel, or held-out
    /// transfer loss, depending on what is being trained.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    /// Validation score before the first update.
    pub initial_val: Option<f64>,
    pub final_val: Option<f64>,
}

impl TrainOutcome {
    /// `step,loss,val` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,val\n");
        for r in &self.records {
            let _ = match r.val_metric {
                Some(v) => writeln!(s, "{},{:.17e},{:.17e}", r.step, r.train_loss, v),
                None => writeln!(s, "{},{:.17e},", r.step, r.train_loss),
            };
        }
        s
    }

    /// Median training loss over the first and last tenth of the run.
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n < 10 {
            return None;
        }
        let k = n / 10;
        let median = |rs: &[LossRecord]| {
            let mut v: Vec<f64> = rs.iter().map(|r| r.train_loss).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        Some((median(&self.records[..k]), median(&self.records[n - k..])))
    }
}

// ------------------------------------------------------------------ losses

/// Mean pixelwise cross entropy.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Masked L1 between predicted and target normalized depth.
pub fn depth_loss(tape: &mut Tape, pred: Var, target: &Tensor, valid: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    Ok(tape.masked_l1(pred, t, valid)?)
}

/// Reconstruction error between transferred and target features. The target
/// enters as a constant, so no gradient reaches the network that produced it.
pub fn transfer_loss(tape: &mut Tape, g_out: Var, target: &Tensor, kind: TransferLossKind) -> Result<Var> {
    contract!(
        tape.shape(g_out) == target.shape(),
        "transfer output {:?} vs target features {:?}",
        tape.shape(g_out),
        target.shape()
    );
    let t = tape.constant(target.detached());
    Ok(match kind {
        TransferLossKind::Mse => tape.mse(g_out, t)?,
        TransferLossKind::L2 => tape.l2_distance(g_out, t)?,
    })
}

/// Depth in world units → network target in `[0, 1]`.
pub fn normalize_depth(depth: &Tensor) -> Tensor {
    let mut t = depth.detached();
    t.data_mut().iter_mut().for_each(|d| *d /= D_MAX);
    t
}

/// Task loss of a prediction against a batch.
pub fn task_loss(tape: &mut Tape, task: Task, pred: Var, batch: &Batch) -> Result<Var> {
    match task {
        Task::Segmentation => segmentation_loss(tape, pred, &batch.labels),
        Task::Depth => depth_loss(tape, pred, &normalize_depth(&batch.depth), &batch.valid),
    }
}

// ------------------------------------------------------------------ loop

/// Cycles through shuffled epochs of one split.
struct Sampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Sampler {
            len,
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.len {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Draws batches from one or two splits. With two sources every batch is
/// split evenly between them (the first gets the extra sample when odd).
struct MixedSampler<'a> {
    sources: Vec<(&'a Split, Sampler)>,
}

impl<'a> MixedSampler<'a> {
    fn new(sources: &[&'a Split], seed: u64) -> Result<Self> {
        contract!(
            (1..=2).contains(&sources.len()),
            "training takes one or two domains, got {}",
            sources.len()
        );
        Ok(MixedSampler {
            sources: sources
                .iter()
                .enumerate()
                .map(|(i, s)| (*s, Sampler::new(s.len(), derive_seed(seed, &format!("sampler{i}")))))
                .collect(),
        })
    }

    fn next(&mut self, batch: usize) -> Result<Batch> {
        let k = self.sources.len();
        let mut out: Option<Batch> = None;
        for (i, (split, sampler)) in self.sources.iter_mut().enumerate() {
            let n = batch / k + usize::from(i < batch % k);
            let b = split.batch(&sampler.take(n))?;
            out = Some(match out {
                None => b,
                Some(prev) => prev.concat(&b)?,
            });
        }
        Ok(out.expect("at least one source"))
    }
}

/// Parameters plus whatever else a checkpoint must capture.
trait Trainable {
    fn label(&self) -> String;
    fn params(&mut self) -> &mut ParamStore;
    fn snapshot(&self) -> Vec<(String, Tensor)>;
    fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()>;
}

impl Trainable for TaskNetwork {
    fn label(&self) -> String {
        self.name().to_string()
    }
    fn params(&mut self) -> &mut ParamStore {
        self.store_mut()
    }
    fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
    }
    fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.load_named(entries)
    }
}

impl Trainable for TransferNet {
    fn label(&self) -> String {
        self.name().to_string()
    }
    fn params(&mut self) -> &mut ParamStore {
        self.store_mut()
    }
    fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
    }
    fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.load_named(entries)
    }
}

impl Trainable for MultiTaskNetwork {
    fn label(&self) -> String {
        self.name().to_string()
    }
    fn params(&mut self) -> &mut ParamStore {
        self.store_mut()
    }
    fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
    }
    fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.load_named(entries)
    }
}

/// Where periodic checkpoints go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct CheckpointDir(pub Option<PathBuf>);

impl CheckpointDir {
    pub fn none() -> Self {
        CheckpointDir(None)
    }

    pub fn at(path: impl Into<PathBuf>) -> Self {
        CheckpointDir(Some(path.into()))
    }

    fn save(&self, name: &str, entries: &[(String, Tensor)]) -> Result<()> {
        if let Some(dir) = &self.0 {
            save_checkpoint(&dir.join(format!("{name}.ckpt")), entries)?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(read_checkpoint(std::io::BufReader::new(File::open(path)?))?)
}

fn finite_or_diverged(label: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            run: label.to_string(),
            step,
            reason: format!("loss is {loss}"),
        })
    }
}

/// Generic minibatch loop: Adam on `loss`, validation and checkpointing
/// every `eval_every` steps and at the end. A non-finite loss or gradient
/// restores the last good state and aborts.
fn run_loop<M: Trainable, B>(
    model: &mut M,
    cfg: &TrainConfig,
    checkpoints: &CheckpointDir,
    mut next_batch: impl FnMut() -> Result<B>,
    mut loss: impl FnMut(&mut M, &mut Tape, &B) -> Result<Var>,
    mut validate: impl FnMut(&mut M) -> Result<Option<f64>>,
) -> Result<TrainOutcome> {
    let label = model.label();
    let mut outcome = TrainOutcome::default();
    if cfg.steps == 0 {
        return Ok(outcome);
    }
    outcome.initial_val = validate(model)?;
    let mut opt = Adam::new(cfg.lr);
    let mut last_good = model.snapshot();
    for step in 1..=cfg.steps {
        let batch = next_batch()?;
        let mut tape = Tape::new();
        let l = loss(model, &mut tape, &batch)?;
        let value = tape.value(l).item()?;
        let failed = finite_or_diverged(&label, step, value).and_then(|()| {
            tape.backward(l)?;
            let store = model.params();
            store.zero_grad();
            store.accumulate_grads(&tape)?;
            opt.step(store).map_err(|e| Error::Diverged {
                run: label.clone(),
                step,
                reason: e.to_string(),
            })
        });
        if let Err(e) = failed {
            model.restore(&last_good)?;
            checkpoints.save(&label, &last_good)?;
            return Err(e);
        }
        let mut record = LossRecord {
            step,
            train_loss: value,
            val_metric: None,
        };
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps {
            record.val_metric = validate(model)?;
            last_good = model.snapshot();
            checkpoints.save(&label, &last_good)?;
        }
        outcome.records.push(record);
    }
    model.params().zero_grad();
    outcome.final_val = outcome.records.last().and_then(|r| r.val_metric);
    Ok(outcome)
}

/// Validation score used during task-network training: mIoU or Abs Rel.
fn val_score(m: &TaskMetrics) -> f64 {
    match m {
        TaskMetrics::Segmentation(s) => s.miou,
        TaskMetrics::Depth(d) => d.abs_rel,
    }
}

/// Trains `net` on its own task. With two sources, each batch holds equal
/// shares of both.
pub fn train_task_network(
    net: &mut TaskNetwork,
    sources: &[&Split],
    val: Option<&Split>,
    cfg: &TrainConfig,
    checkpoints: &CheckpointDir,
) -> Result<TrainOutcome> {
    cfg.validate(net.use_batchnorm())?;
    let mut sampler = MixedSampler::new(sources, cfg.seed)?;
    let task = net.task();
    run_loop(
        net,
        cfg,
        checkpoints,
        || sampler.next(cfg.batch_size),
        |net, tape, batch| {
            let x = tape.constant(batch.images.clone());
            let y = net.forward(tape, x, Mode::Train)?;
            task_loss(tape, task, y, batch)
        },
        |net| {
            val.map(|v| evaluate(v, task, |x| net.predict(x)).map(|m| val_score(&m)))
                .transpose()
        },
    )
}

/// Multi-task comparator: segmentation and depth heads on a shared encoder,
/// losses weighted 1:1. `depth_sources` supervise depth, `seg_sources`
/// segmentation; every step draws one batch from each.
pub fn train_multitask(
    net: &mut MultiTaskNetwork,
    seg_sources: &[&Split],
    depth_sources: &[&Split],
    cfg: &TrainConfig,
    checkpoints: &CheckpointDir,
) -> Result<TrainOutcome> {
    cfg.validate(net.use_batchnorm())?;
    let mut seg = MixedSampler::new(seg_sources, derive_seed(cfg.seed, "seg"))?;
    let mut dep = MixedSampler::new(depth_sources, derive_seed(cfg.seed, "dep"))?;
    run_loop(
        net,
        cfg,
        checkpoints,
        || Ok((seg.next(cfg.batch_size)?, dep.next(cfg.batch_size)?)),
        |net, tape, (sb, db): &(Batch, Batch)| {
            let xs = tape.constant(sb.images.clone());
            let (logits, _) = net.forward(tape, xs, Mode::Train)?;
            let ls = task_loss(tape, Task::Segmentation, logits, sb)?;
            let xd = tape.constant(db.images.clone());
            let (_, depth) = net.forward(tape, xd, Mode::Train)?;
            let ld = task_loss(tape, Task::Depth, depth, db)?;
            Ok(tape.add(ls, ld)?)
        },
        |_| Ok(None),
    )
}

/// Eval-mode encoder features of a whole split at `level`.
pub fn split_features(net: &mut TaskNetwork, split: &Split, level: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for batch in split.chunks(25) {
        parts.push(net.features(&batch?.images, level)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat_rows(&refs)
}

fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    contract!(!parts.is_empty(), "no feature batches");
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Paired features `(E1(x), E2(x))` for a transfer network.
#[derive(Clone, Debug)]
pub struct FeaturePairs {
    pub source: Tensor,
    pub target: Tensor,
}

impl FeaturePairs {
    /// Runs both frozen encoders in eval mode over `split`.
    pub fn extract(e1: &mut TaskNetwork, e2: &mut TaskNetwork, split: &Split, level: usize) -> Result<Self> {
        Ok(FeaturePairs {
            source: split_features(e1, split, level)?,
            target: split_features(e2, split, level)?,
        })
    }

    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Transfer loss of `g` over all pairs, eval mode, in chunks. For MSE this is
/// the element-weighted mean over chunks, i.e. the MSE over the whole set.
pub fn transfer_eval_loss(g: &mut TransferNet, pairs: &FeaturePairs, kind: TransferLossKind) -> Result<f64> {
    let n = pairs.len();
    let (mut total, mut weight) = (0.0, 0.0);
    for start in (0..n).step_by(25) {
        let idx: Vec<usize> = (start..(start + 25).min(n)).collect();
        let src = pairs.source.gather_rows(&idx)?;
        let tgt = pairs.target.gather_rows(&idx)?;
        let mut tape = Tape::new();
        let f = tape.constant(src);
        let out = g.forward(&mut tape, f, Mode::Eval)?;
        let l = transfer_loss(&mut tape, out, &tgt, kind)?;
        let w = idx.len() as f64;
        total += tape.value(l).item()? * w;
        weight += w;
    }
    Ok(total / weight)
}

/// Trains `g` to map `pairs.source` onto `pairs.target`. The encoders that
/// produced the pairs are not touched here at all. `held_out` pairs provide the
/// validation loss.
pub fn train_transfer(
    g: &mut TransferNet,
    pairs: &FeaturePairs,
    held_out: Option<&FeaturePairs>,
    cfg: &TrainConfig,
    checkpoints: &CheckpointDir,
) -> Result<TrainOutcome> {
    cfg.validate(g.use_batchnorm())?;
    contract!(
        pairs.source.shape() == pairs.target.shape(),
        "source features {:?} vs target features {:?}",
        pairs.source.shape(),
        pairs.target.shape()
    );
    let mut sampler = Sampler::new(pairs.len(), derive_seed(cfg.seed, "transfer"));
    let kind = cfg.transfer_loss;
    run_loop(
        g,
        cfg,
        checkpoints,
        || {
            let idx = sampler.take(cfg.batch_size);
            Ok((pairs.source.gather_rows(&idx)?, pairs.target.gather_rows(&idx)?))
        },
        |g, tape, (src, tgt): &(Tensor, Tensor)| {
            let f = tape.constant(src.clone());
            let out = g.forward(tape, f, Mode::Train)?;
            transfer_loss(tape, out, tgt, kind)
        },
        |g| held_out.map(|h| transfer_eval_loss(g, h, kind)).transpose(),
    )
}

/// Train/validate/transfer loops write their curves here.
pub fn write_curves(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, outcome.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            n_train: 8,
            n_val: 4,
            n_test: 4,
            resolution: [32, 32],
            ..DatasetConfig::default()
        }
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    fn weights(entries: &[(String, Tensor)]) -> Vec<(String, Vec<f64>)> {
        entries.iter().map(|(k, t)| (k.clone(), t.data().to_vec())).collect()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 6, 3, 3]));
        let labels = Tensor::from_fn(&[2, 1, 3, 3], |i| (i % 6) as f64);
        let l = segmentation_loss(&mut tape, logits, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_is_mean_offset_over_valid_pixels() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let target = Tensor::new(vec![1, 1, 2, 2], vec![0.25, 0.75, 0.5, 10.0]).unwrap();
        let valid = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let l = depth_loss(&mut tape, pred, &target, &valid).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn transfer_loss_constant_offset() {
        let mut tape = Tape::new();
        let out = tape.leaf(Tensor::full(&[2, 3, 2, 2], 1.5));
        let target = Tensor::full(&[2, 3, 2, 2], 1.0);
        let l = transfer_loss(&mut tape, out, &target, TransferLossKind::Mse).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.25).abs() < 1e-12);
        let mut tape = Tape::new();
        let out = tape.leaf(Tensor::full(&[2, 3, 2, 2], 1.5));
        let l = transfer_loss(&mut tape, out, &target, TransferLossKind::L2).unwrap();
        assert!((tape.value(l).item().unwrap() - (24.0f64 * 0.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn transfer_loss_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let out = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        let err = transfer_loss(&mut tape, out, &Tensor::zeros(&[1, 3, 2, 3]), TransferLossKind::Mse);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn normalized_depth_maps_range_into_unit_interval() {
        let d = Tensor::new(vec![3], vec![1.0, 50.0, 100.0]).unwrap();
        assert_eq!(normalize_depth(&d).data(), &[0.01, 0.5, 1.0]);
    }

    #[test]
    fn sampler_visits_every_index_once_per_epoch() {
        let mut s = Sampler::new(7, 3);
        let mut epoch = s.take(7);
        epoch.sort_unstable();
        assert_eq!(epoch, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_batches_split_evenly() {
        let data = build_dataset(&tiny(), 1).unwrap();
        let mut m = MixedSampler::new(&[&data.a.train, &data.b.train], 0).unwrap();
        let b = m.next(5).unwrap();
        assert_eq!(b.len(), 5);
        assert!(MixedSampler::new(&[], 0).is_err());
    }

    #[test]
    fn zero_steps_leave_network_untouched() {
        let data = build_dataset(&tiny(), 2).unwrap();
        let mut net = TaskNetwork::new("n", Task::Depth, 4, true, 5).unwrap();
        let before = weights(&net.named_tensors());
        let out = train_task_network(
            &mut net,
            &[&data.a.train],
            data.a.val.as_ref(),
            &short(0),
            &CheckpointDir::none(),
        )
        .unwrap();
        assert!(out.records.is_empty() && out.initial_val.is_none());
        assert_eq!(weights(&net.named_tensors()), before);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let data = build_dataset(&tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = |ckpt: CheckpointDir| {
            let mut net = TaskNetwork::new("seg", Task::Segmentation, 4, true, 9).unwrap();
            let out = train_task_network(
                &mut net,
                &[&data.a.train, &data.b.train],
                data.a.val.as_ref(),
                &short(3),
                &ckpt,
            )
            .unwrap();
            (out, weights(&net.named_tensors()))
        };
        let (o1, w1) = run(CheckpointDir::at(dir.path()));
        let (o2, w2) = run(CheckpointDir::none());
        assert_eq!(o1, o2);
        assert_eq!(w1, w2);
        assert_eq!(o1.records.len(), 3);
        assert!(o1.records[1].val_metric.is_some() && o1.records[2].val_metric.is_some());
        assert!(o1.records[0].val_metric.is_none());
        assert!(dir.path().join("seg.ckpt").exists());
    }

    #[test]
    fn transfer_training_leaves_encoders_frozen() {
        let data = build_dataset(&tiny(), 4).unwrap();
        let mut e1 = TaskNetwork::new("e1", Task::Depth, 4, true, 1).unwrap();
        let mut e2 = TaskNetwork::new("e2", Task::Segmentation, 4, true, 2).unwrap();
        train_task_network(&mut e1, &[&data.a.train], None, &short(2), &CheckpointDir::none()).unwrap();
        let (b1, b2) = (weights(&e1.named_tensors()), weights(&e2.named_tensors()));
        let pairs = FeaturePairs::extract(&mut e1, &mut e2, &data.a.train, 3).unwrap();
        let mut g = TransferNet::new("g", 3, true, 7).unwrap();
        let before_g = weights(&g.named_tensors());
        train_transfer(&mut g, &pairs, None, &short(3), &CheckpointDir::none()).unwrap();
        assert_eq!(weights(&e1.named_tensors()), b1);
        assert_eq!(weights(&e2.named_tensors()), b2);
        assert_ne!(weights(&g.named_tensors()), before_g);
        assert!(e1
            .store()
            .iter()
            .all(|p| p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
    }

    #[test]
    fn self_transfer_loss_falls() {
        let data = build_dataset(&tiny(), 5).unwrap();
        let mut e = TaskNetwork::new("e", Task::Depth, 4, true, 3).unwrap();
        let f = split_features(&mut e, &data.a.train, 4).unwrap();
        let pairs = FeaturePairs {
            source: f.clone(),
            target: f,
        };
        let mut g = TransferNet::new("g", 4, true, 4).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            lr: 3e-3,
            ..short(60)
        };
        let out = train_transfer(&mut g, &pairs, Some(&pairs), &cfg, &CheckpointDir::none()).unwrap();
        let (first, last) = (out.initial_val.unwrap(), out.final_val.unwrap());
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn config_validation() {
        assert!(short(1).validate(true).is_ok());
        let one = TrainConfig {
            batch_size: 1,
            ..short(1)
        };
        assert!(one.validate(true).is_err());
        assert!(one.validate(false).is_ok());
        assert!(TrainConfig { lr: 0.0, ..short(1) }.validate(false).is_err());
    }

    #[test]
    fn curves_csv_has_header_and_rows() {
        let out = TrainOutcome {
            records: vec![
                LossRecord {
                    step: 1,
                    train_loss: 0.5,
                    val_metric: None,
                },
                LossRecord {
                    step: 2,
                    train_loss: 0.25,
                    val_metric: Some(0.1),
                },
            ],
            ..Default::default()
        };
        let csv = out.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,val");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(','));
    }
}
