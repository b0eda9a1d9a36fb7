//! The four-step transfer procedure, its comparators and ablations.
//!
//! 1. `N1` learns the source task on A and B (batches mixed evenly).
//! 2. `N2` learns the target task on A.
//! 3. `G` maps frozen `E1` features onto frozen `E2` features, on A only.
//! 4. On B the prediction is `D2(G(E1(x)))`.
//!
//! Every network a seed needs is built by a [`Workbench`] and cached under a
//! key describing its task, training domains and options. Training seeds are
//! derived from that key, so an arm produces the same network whether it runs
//! alone or next to others, and a run can be repeated from its manifest alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use atdt_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_dataset, derive_seed, write_depth_pgm, write_label_pgm, write_ppm, DatasetConfig, Datasets, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, TaskMetrics};
use crate::nets::{Mode, MultiTaskNetwork, Task, TaskNetwork, TransferNet};
use crate::scenegen::{Domain, D_MAX};
use crate::training::{
    save_checkpoint, train_multitask, train_task_network, train_transfer, CheckpointDir, FeaturePairs, TrainConfig,
    TrainOutcome,
};

/// Version of the run-directory layout.
pub const MANIFEST_VERSION: u32 = 1;
/// B-test samples dumped per run for inspection.
pub const SAMPLE_DUMPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Depth is supervised on both domains, segmentation only on A.
    Dep2sem,
    /// Segmentation is supervised on both domains, depth only on A.
    Sem2dep,
}

impl Direction {
    pub fn source(self) -> Task {
        match self {
            Direction::Dep2sem => Task::Depth,
            Direction::Sem2dep => Task::Segmentation,
        }
    }

    pub fn target(self) -> Task {
        match self {
            Direction::Dep2sem => Task::Segmentation,
            Direction::Sem2dep => Task::Depth,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Dep2sem => "dep2sem",
            Direction::Sem2dep => "sem2dep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Atdt,
    Baseline,
    Oracle,
    Multitask,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Atdt, Method::Baseline, Method::Oracle, Method::Multitask];

    pub fn name(self) -> &'static str {
        match self {
            Method::Atdt => "atdt",
            Method::Baseline => "baseline",
            Method::Oracle => "oracle",
            Method::Multitask => "multitask",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// One transfer network per split level 1..=4.
    Levels,
    /// Shared `N1` versus separate `N1` per domain.
    Shared,
    /// Batch norm everywhere versus nowhere.
    Batchnorm,
    /// Proxy depth labels on B.
    Proxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub direction: Direction,
    pub dataset: DatasetConfig,
    pub split_level: usize,
    pub shared_encoder: bool,
    pub use_batchnorm: bool,
    pub proxy_labels_on_b: bool,
    pub seeds: Vec<u64>,
    /// Budget of every task network; its `seed` salts the per-network seeds.
    pub task_training: TrainConfig,
    /// Budget of every transfer network.
    pub transfer_training: TrainConfig,
    pub methods: Vec<Method>,
    pub ablations: Vec<Ablation>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            name: "default".into(),
            direction: Direction::Dep2sem,
            dataset: DatasetConfig::default(),
            split_level: 4,
            shared_encoder: true,
            use_batchnorm: true,
            proxy_labels_on_b: false,
            seeds: vec![0, 1, 2, 3, 4],
            task_training: TrainConfig::default(),
            transfer_training: TrainConfig::default(),
            methods: vec![Method::Atdt, Method::Baseline, Method::Oracle],
            ablations: Vec::new(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if !(1..=4).contains(&self.split_level) {
            return Err(Error::Config(format!("split level {} outside 1..=4", self.split_level)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() && self.ablations.is_empty() {
            return Err(Error::Config("nothing to run: no methods and no ablations".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        let bn = self.use_batchnorm || self.ablations.contains(&Ablation::Batchnorm);
        self.task_training.validate(bn)?;
        self.transfer_training.validate(bn)?;
        if self.dataset.n_val == 0 {
            return Err(Error::Config("a validation split is required (n_val > 0)".into()));
        }
        Ok(())
    }

    fn arm(&self) -> Arm {
        Arm {
            level: self.split_level,
            shared: self.shared_encoder,
            bn: self.use_batchnorm,
            proxy: self.proxy_labels_on_b,
        }
    }

    /// Result keys produced by this plan, each with the arm it evaluates.
    fn jobs(&self) -> Vec<(String, Job)> {
        let base = self.arm();
        let mut jobs = Vec::new();
        for m in &self.methods {
            let job = match m {
                Method::Atdt => Job::Atdt(base),
                Method::Baseline => Job::Baseline { bn: base.bn },
                Method::Oracle => Job::Oracle { bn: base.bn },
                Method::Multitask => Job::Multitask {
                    bn: base.bn,
                    proxy: base.proxy,
                },
            };
            jobs.push((m.name().to_string(), job));
        }
        for a in &self.ablations {
            match a {
                Ablation::Levels => {
                    for level in 1..=4 {
                        jobs.push((format!("atdt@level{level}"), Job::Atdt(Arm { level, ..base })));
                    }
                }
                Ablation::Shared => {
                    jobs.push(("atdt@shared".into(), Job::Atdt(Arm { shared: true, ..base })));
                    jobs.push(("atdt@nonshared".into(), Job::Atdt(Arm { shared: false, ..base })));
                }
                Ablation::Batchnorm => {
                    for bn in [true, false] {
                        let tag = if bn { "bn" } else { "nobn" };
                        jobs.push((format!("atdt@{tag}"), Job::Atdt(Arm { bn, ..base })));
                        jobs.push((format!("baseline@{tag}"), Job::Baseline { bn }));
                    }
                }
                Ablation::Proxy => {
                    jobs.push(("atdt@proxy".into(), Job::Atdt(Arm { proxy: true, ..base })));
                    jobs.push(("atdt@gt".into(), Job::Atdt(Arm { proxy: false, ..base })));
                }
            }
        }
        jobs
    }
}

/// One configuration of the transfer procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Arm {
    level: usize,
    shared: bool,
    bn: bool,
    proxy: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Job {
    Atdt(Arm),
    Baseline { bn: bool },
    Oracle { bn: bool },
    Multitask { bn: bool, proxy: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Sources {
    A,
    B,
    AB,
}

/// Identity of a cached task network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct NetSpec {
    task: Task,
    sources: Sources,
    bn: bool,
    /// Depth supervision on B comes from proxy labels.
    proxy: bool,
}

impl NetSpec {
    fn new(task: Task, sources: Sources, bn: bool, proxy: bool) -> Self {
        let proxy = proxy && task == Task::Depth && sources != Sources::A;
        NetSpec {
            task,
            sources,
            bn,
            proxy,
        }
    }

    fn key(&self) -> String {
        let src = match self.sources {
            Sources::A => "a",
            Sources::B => "b",
            Sources::AB => "ab",
        };
        format!(
            "{}_{}_{}{}",
            self.task.short(),
            src,
            if self.bn { "bn" } else { "nobn" },
            if self.proxy { "_proxy" } else { "" }
        )
    }
}

/// The networks an arm of the transfer procedure is assembled from.
#[derive(Clone, Copy, Debug)]
struct ArmNets {
    /// Feeds `G` during training on A.
    e1_train: NetSpec,
    /// Feeds `G` at inference on B.
    e1_deploy: NetSpec,
    n2: NetSpec,
}

impl ArmNets {
    fn new(direction: Direction, arm: Arm) -> Self {
        let (src, tgt) = (direction.source(), direction.target());
        let n2 = NetSpec::new(tgt, Sources::A, arm.bn, false);
        if arm.shared {
            let e1 = NetSpec::new(src, Sources::AB, arm.bn, arm.proxy);
            ArmNets {
                e1_train: e1,
                e1_deploy: e1,
                n2,
            }
        } else {
            ArmNets {
                e1_train: NetSpec::new(src, Sources::A, arm.bn, false),
                e1_deploy: NetSpec::new(src, Sources::B, arm.bn, arm.proxy),
                n2,
            }
        }
    }

    fn transfer_key(&self, level: usize) -> String {
        format!("g{level}_{}_to_{}", self.e1_train.key(), self.n2.key())
    }
}

/// Metrics of one method on the B and A test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub b_test: TaskMetrics,
    pub a_test: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok(MethodMetrics),
    Failed(String),
}

impl Outcome {
    pub fn metrics(&self) -> Option<&MethodMetrics> {
        match self {
            Outcome::Ok(m) => Some(m),
            Outcome::Failed(_) => None,
        }
    }
}

/// Everything measured for one seed of one plan. This is `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub name: String,
    pub direction: Direction,
    pub seed: u64,
    pub results: BTreeMap<String, Outcome>,
    /// Mean absolute encoder activation on B-test at the split level, per
    /// source network, for the batch-norm study.
    pub feature_magnitude: BTreeMap<String, f64>,
}

impl SeedResult {
    pub fn get(&self, key: &str) -> Option<&MethodMetrics> {
        self.results.get(key).and_then(Outcome::metrics)
    }

    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.results
            .iter()
            .filter_map(|(k, o)| match o {
                Outcome::Failed(e) => Some((k.as_str(), e.as_str())),
                Outcome::Ok(_) => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub plan: ExperimentPlan,
    pub seeds: Vec<SeedResult>,
    /// Run directory of each seed, when persisted.
    pub dirs: Vec<PathBuf>,
}

impl RunResult {
    /// Seed-mean of `f` over seeds where `key` succeeded; `None` if any failed.
    pub fn mean(&self, key: &str, f: impl Fn(&MethodMetrics) -> f64) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seeds.iter().map(|s| s.get(key).map(&f)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_primary_b(&self, key: &str) -> Option<f64> {
        self.mean(key, |m| m.b_test.primary())
    }

    pub fn mean_primary_a(&self, key: &str) -> Option<f64> {
        self.mean(key, |m| m.a_test.primary())
    }

    pub fn mean_feature_magnitude(&self, key: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self
            .seeds
            .iter()
            .map(|s| s.feature_magnitude.get(key).copied())
            .collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.failures().is_empty())
    }
}

/// The fully resolved input of one seed's run. Feeding it back to
/// [`run_from_manifest`] reproduces `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    /// The plan restricted to this seed.
    pub config: ExperimentPlan,
    /// Checkpoint files, relative to the run directory.
    pub checkpoints: Vec<String>,
}

// --------------------------------------------------------------- workbench

/// Datasets and trained networks of one seed.
pub struct Workbench {
    seed: u64,
    dataset_cfg: DatasetConfig,
    task_cfg: TrainConfig,
    transfer_cfg: TrainConfig,
    data: Datasets,
    proxy_b: Option<Split>,
    nets: BTreeMap<String, TaskNetwork>,
    transfers: BTreeMap<String, TransferNet>,
    multitask: BTreeMap<String, MultiTaskNetwork>,
    failed: BTreeMap<String, String>,
    curves: BTreeMap<String, TrainOutcome>,
    timings: BTreeMap<String, f64>,
    scratch: CheckpointDir,
}

impl Workbench {
    pub fn new(plan: &ExperimentPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let t = Instant::now();
        let data = build_dataset(&plan.dataset, derive_seed(seed, "data"))?;
        let mut wb = Workbench {
            seed,
            dataset_cfg: plan.dataset.clone(),
            task_cfg: plan.task_training.clone(),
            transfer_cfg: plan.transfer_training.clone(),
            data,
            proxy_b: None,
            nets: BTreeMap::new(),
            transfers: BTreeMap::new(),
            multitask: BTreeMap::new(),
            failed: BTreeMap::new(),
            curves: BTreeMap::new(),
            timings: BTreeMap::new(),
            scratch: CheckpointDir::none(),
        };
        wb.timings.insert("data".into(), t.elapsed().as_secs_f64());
        Ok(wb)
    }

    /// Whether `plan` can reuse this workbench's data and networks.
    pub fn serves(&self, plan: &ExperimentPlan, seed: u64) -> bool {
        self.seed == seed
            && self.dataset_cfg == plan.dataset
            && self.task_cfg == plan.task_training
            && self.transfer_cfg == plan.transfer_training
    }

    /// Periodic checkpoints of networks trained from now on go to `dir`.
    pub fn set_scratch(&mut self, dir: Option<PathBuf>) {
        self.scratch = CheckpointDir(dir);
    }

    pub fn datasets(&self) -> &Datasets {
        &self.data
    }

    /// Seconds spent on each artifact (`data`, network keys, evaluations).
    pub fn timings(&self) -> &BTreeMap<String, f64> {
        &self.timings
    }

    pub fn curves(&self) -> &BTreeMap<String, TrainOutcome> {
        &self.curves
    }

    fn proxy_b(&mut self) -> Result<&Split> {
        if self.proxy_b.is_none() {
            let p = self
                .data
                .b
                .train
                .with_proxy_depth(&self.dataset_cfg.proxy, derive_seed(self.seed, "proxy"))?;
            self.proxy_b = Some(p);
        }
        Ok(self.proxy_b.as_ref().expect("just built"))
    }

    fn seeds_for(&self, key: &str, cfg: &TrainConfig) -> (u64, u64) {
        let salt = self.seed ^ cfg.seed.rotate_left(32);
        (
            derive_seed(salt, &format!("init/{key}")),
            derive_seed(salt, &format!("train/{key}")),
        )
    }

    fn check_failed(&self, key: &str) -> Result<()> {
        match self.failed.get(key) {
            Some(e) => Err(Error::Diverged {
                run: key.to_string(),
                step: 0,
                reason: e.clone(),
            }),
            None => Ok(()),
        }
    }

    fn ensure_net(&mut self, spec: NetSpec) -> Result<()> {
        let key = spec.key();
        self.check_failed(&key)?;
        if self.nets.contains_key(&key) {
            return Ok(());
        }
        if spec.proxy {
            self.proxy_b()?;
        }
        let (init, train) = self.seeds_for(&key, &self.task_cfg);
        let mut net = TaskNetwork::new(&key, spec.task, 4, spec.bn, init)?;
        let cfg = self.task_cfg.with_seed(train);
        let t = Instant::now();
        let b_train = if spec.proxy {
            self.proxy_b.as_ref().expect("built above")
        } else {
            &self.data.b.train
        };
        let (sources, val): (Vec<&Split>, _) = match spec.sources {
            Sources::A => (vec![&self.data.a.train], self.data.a.val.as_ref()),
            Sources::B => (vec![b_train], self.data.b.val.as_ref()),
            Sources::AB => (vec![&self.data.a.train, b_train], self.data.a.val.as_ref()),
        };
        match train_task_network(&mut net, &sources, val, &cfg, &self.scratch) {
            Ok(outcome) => {
                self.curves.insert(key.clone(), outcome);
                self.timings.insert(key.clone(), t.elapsed().as_secs_f64());
                self.nets.insert(key, net);
                Ok(())
            }
            Err(e) => {
                self.failed.insert(key, e.to_string());
                Err(e)
            }
        }
    }

    fn ensure_transfer(&mut self, nets: ArmNets, level: usize) -> Result<String> {
        let key = nets.transfer_key(level);
        self.check_failed(&key)?;
        if self.transfers.contains_key(&key) {
            return Ok(key);
        }
        self.ensure_net(nets.e1_train)?;
        self.ensure_net(nets.n2)?;
        let t = Instant::now();
        let (pairs, held) = {
            let mut e1 = self.nets.remove(&nets.e1_train.key()).expect("ensured");
            let mut e2 = self.nets.remove(&nets.n2.key()).expect("ensured");
            let val = self.data.a.val.as_ref().expect("validated plan has a val split");
            let out = FeaturePairs::extract(&mut e1, &mut e2, &self.data.a.train, level)
                .and_then(|p| Ok((p, FeaturePairs::extract(&mut e1, &mut e2, val, level)?)));
            self.nets.insert(nets.e1_train.key(), e1);
            self.nets.insert(nets.n2.key(), e2);
            out?
        };
        let (init, train) = self.seeds_for(&key, &self.transfer_cfg);
        let mut g = TransferNet::new(&key, level, nets.n2.bn, init)?;
        let cfg = self.transfer_cfg.with_seed(train);
        match train_transfer(&mut g, &pairs, Some(&held), &cfg, &self.scratch) {
            Ok(outcome) => {
                self.curves.insert(key.clone(), outcome);
                self.timings.insert(key.clone(), t.elapsed().as_secs_f64());
                self.transfers.insert(key.clone(), g);
                Ok(key)
            }
            Err(e) => {
                self.failed.insert(key, e.to_string());
                Err(e)
            }
        }
    }

    fn ensure_multitask(&mut self, direction: Direction, bn: bool, proxy: bool) -> Result<String> {
        let proxy = proxy && direction == Direction::Dep2sem;
        let key = format!(
            "mtl_{direction}_{}{}",
            if bn { "bn" } else { "nobn" },
            if proxy { "_proxy" } else { "" }
        );
        self.check_failed(&key)?;
        if self.multitask.contains_key(&key) {
            return Ok(key);
        }
        if proxy {
            self.proxy_b()?;
        }
        let (init, train) = self.seeds_for(&key, &self.task_cfg);
        let mut net = MultiTaskNetwork::new(&key, bn, init)?;
        let cfg = self.task_cfg.with_seed(train);
        let t = Instant::now();
        let a = &self.data.a.train;
        let b_depth = if proxy {
            self.proxy_b.as_ref().expect("built above")
        } else {
            &self.data.b.train
        };
        let result = match direction {
            Direction::Dep2sem => train_multitask(&mut net, &[a], &[a, b_depth], &cfg, &self.scratch),
            Direction::Sem2dep => train_multitask(&mut net, &[a, &self.data.b.train], &[a], &cfg, &self.scratch),
        };
        match result {
            Ok(outcome) => {
                self.curves.insert(key.clone(), outcome);
                self.timings.insert(key.clone(), t.elapsed().as_secs_f64());
                self.multitask.insert(key.clone(), net);
                Ok(key)
            }
            Err(e) => {
                self.failed.insert(key, e.to_string());
                Err(e)
            }
        }
    }

    fn eval_both(
        &self,
        task: Task,
        mut predict: impl FnMut(&Tensor, Domain) -> Result<Tensor>,
    ) -> Result<MethodMetrics> {
        Ok(MethodMetrics {
            b_test: evaluate(&self.data.b.test, task, |x| predict(x, Domain::B))?,
            a_test: evaluate(&self.data.a.test, task, |x| predict(x, Domain::A))?,
        })
    }

    fn run_job(&mut self, direction: Direction, job: Job) -> Result<MethodMetrics> {
        let target = direction.target();
        let t = Instant::now();
        let out = match job {
            Job::Baseline { bn } | Job::Oracle { bn } => {
                let sources = if matches!(job, Job::Baseline { .. }) {
                    Sources::A
                } else {
                    Sources::B
                };
                let spec = NetSpec::new(target, sources, bn, false);
                self.ensure_net(spec)?;
                let mut net = self.nets.remove(&spec.key()).expect("ensured");
                let out = self.eval_both(target, |x, _| net.predict(x));
                self.nets.insert(spec.key(), net);
                out
            }
            Job::Multitask { bn, proxy } => {
                let key = self.ensure_multitask(direction, bn, proxy)?;
                let mut net = self.multitask.remove(&key).expect("ensured");
                let out = self.eval_both(target, |x, _| net.predict(x, target));
                self.multitask.insert(key, net);
                out
            }
            Job::Atdt(arm) => {
                let nets = ArmNets::new(direction, arm);
                let gkey = self.ensure_transfer(nets, arm.level)?;
                self.ensure_net(nets.e1_deploy)?;
                let mut g = self.transfers.remove(&gkey).expect("ensured");
                let mut e1a = self.nets.remove(&nets.e1_train.key()).expect("ensured");
                let mut e1b = if nets.e1_deploy == nets.e1_train {
                    None
                } else {
                    Some(self.nets.remove(&nets.e1_deploy.key()).expect("ensured"))
                };
                let mut n2 = self.nets.remove(&nets.n2.key()).expect("ensured");
                let out = self.eval_both(target, |x, d| {
                    let e1 = match (d, e1b.as_mut()) {
                        (Domain::B, Some(e)) => e,
                        _ => &mut e1a,
                    };
                    atdt_predict(e1, &mut g, &mut n2, x, arm.level)
                });
                self.transfers.insert(gkey, g);
                self.nets.insert(nets.e1_train.key(), e1a);
                if let Some(e) = e1b {
                    self.nets.insert(nets.e1_deploy.key(), e);
                }
                self.nets.insert(nets.n2.key(), n2);
                out
            }
        };
        *self.timings.entry("eval".into()).or_insert(0.0) += t.elapsed().as_secs_f64();
        out
    }

    /// Mean |E1(x)| on B-test at `level`.
    fn feature_magnitude(&mut self, spec: NetSpec, level: usize) -> Result<f64> {
        self.ensure_net(spec)?;
        let net = self.nets.get_mut(&spec.key()).expect("ensured");
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in self.data.b.test.chunks(25) {
            let f = net.features(&batch?.images, level)?;
            sum += f.data().iter().map(|v| v.abs()).sum::<f64>();
            count += f.numel();
        }
        Ok(sum / count as f64)
    }

    /// Network keys a job depends on, for checkpoints and curves.
    fn artifacts(&self, direction: Direction, job: Job) -> Vec<String> {
        let target = direction.target();
        match job {
            Job::Baseline { bn } => vec![NetSpec::new(target, Sources::A, bn, false).key()],
            Job::Oracle { bn } => vec![NetSpec::new(target, Sources::B, bn, false).key()],
            Job::Multitask { bn, proxy } => {
                let proxy = proxy && direction == Direction::Dep2sem;
                vec![format!(
                    "mtl_{direction}_{}{}",
                    if bn { "bn" } else { "nobn" },
                    if proxy { "_proxy" } else { "" }
                )]
            }
            Job::Atdt(arm) => {
                let n = ArmNets::new(direction, arm);
                let mut v = vec![
                    n.e1_train.key(),
                    n.e1_deploy.key(),
                    n.n2.key(),
                    n.transfer_key(arm.level),
                ];
                v.dedup();
                v
            }
        }
    }

    fn named_tensors(&self, key: &str) -> Option<Vec<(String, Tensor)>> {
        self.nets
            .get(key)
            .map(TaskNetwork::named_tensors)
            .or_else(|| self.transfers.get(key).map(TransferNet::named_tensors))
            .or_else(|| self.multitask.get(key).map(MultiTaskNetwork::named_tensors))
    }

    /// Predictions of a job on the first B-test samples, for inspection.
    fn sample_predictions(&mut self, direction: Direction, job: Job, x: &Tensor) -> Result<Tensor> {
        let target = direction.target();
        match job {
            Job::Baseline { bn } | Job::Oracle { bn } => {
                let src = if matches!(job, Job::Baseline { .. }) {
                    Sources::A
                } else {
                    Sources::B
                };
                let key = NetSpec::new(target, src, bn, false).key();
                self.nets.get_mut(&key).expect("evaluated before").predict(x)
            }
            Job::Multitask { .. } => {
                let key = self.artifacts(direction, job).remove(0);
                self.multitask
                    .get_mut(&key)
                    .expect("evaluated before")
                    .predict(x, target)
            }
            Job::Atdt(arm) => {
                let n = ArmNets::new(direction, arm);
                let mut g = self
                    .transfers
                    .remove(&n.transfer_key(arm.level))
                    .expect("evaluated before");
                let mut e1 = self.nets.remove(&n.e1_deploy.key()).expect("evaluated before");
                let mut n2 = self.nets.remove(&n.n2.key()).expect("evaluated before");
                let out = atdt_predict(&mut e1, &mut g, &mut n2, x, arm.level);
                self.transfers.insert(n.transfer_key(arm.level), g);
                self.nets.insert(n.e1_deploy.key(), e1);
                self.nets.insert(n.n2.key(), n2);
                out
            }
        }
    }
}

/// `D2(G(E1(x)))` in eval mode.
pub fn atdt_predict(
    e1: &mut TaskNetwork,
    g: &mut TransferNet,
    n2: &mut TaskNetwork,
    x: &Tensor,
    level: usize,
) -> Result<Tensor> {
    let f = e1.features(x, level)?;
    let h = g.apply(&f)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let y = n2.decode(&mut tape, hv, level, Mode::Eval)?;
    Ok(tape.value(y).detached())
}

// -------------------------------------------------------------- execution

/// Runs every method and ablation of `plan` for one seed on `wb`.
pub fn run_seed(plan: &ExperimentPlan, wb: &mut Workbench) -> Result<SeedResult> {
    let seed = wb.seed;
    contract_serves(plan, wb, seed)?;
    let mut results = BTreeMap::new();
    for (key, job) in plan.jobs() {
        let outcome = match wb.run_job(plan.direction, job) {
            Ok(m) => Outcome::Ok(m),
            Err(e @ (Error::Diverged { .. } | Error::Autodiff(_))) => Outcome::Failed(e.to_string()),
            Err(e) => return Err(e),
        };
        results.insert(key, outcome);
    }
    let mut feature_magnitude = BTreeMap::new();
    if plan.ablations.contains(&Ablation::Batchnorm) {
        for bn in [true, false] {
            let spec = ArmNets::new(plan.direction, Arm { bn, ..plan.arm() }).e1_deploy;
            if let Ok(v) = wb.feature_magnitude(spec, plan.split_level) {
                feature_magnitude.insert(spec.key(), v);
            }
        }
    }
    Ok(SeedResult {
        name: plan.name.clone(),
        direction: plan.direction,
        seed,
        results,
        feature_magnitude,
    })
}

fn contract_serves(plan: &ExperimentPlan, wb: &Workbench, seed: u64) -> Result<()> {
    if wb.serves(plan, seed) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "workbench for seed {} does not match plan `{}`",
            wb.seed, plan.name
        )))
    }
}

/// Writes `<root>/<name>/<seed>/` for one seed: manifest, checkpoints,
/// metrics, curves and sample dumps.
pub fn persist(root: &Path, plan: &ExperimentPlan, result: &SeedResult, wb: &mut Workbench) -> Result<PathBuf> {
    let dir = root.join(&plan.name).join(result.seed.to_string());
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("samples"))?;

    let jobs = plan.jobs();
    let mut keys = BTreeSet::new();
    for (_, job) in &jobs {
        keys.extend(wb.artifacts(plan.direction, *job));
    }
    let mut checkpoints = Vec::new();
    for key in &keys {
        if let Some(entries) = wb.named_tensors(key) {
            let rel = format!("checkpoints/{key}.ckpt");
            save_checkpoint(&dir.join(&rel), &entries)?;
            checkpoints.push(rel);
        }
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: result.seed,
        config: ExperimentPlan {
            seeds: vec![result.seed],
            ..plan.clone()
        },
        checkpoints,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(result)? + "\n")?;

    let mut curves = String::from("run,step,loss,val\n");
    for key in &keys {
        if let Some(c) = wb.curves.get(key) {
            for line in c.to_csv().lines().skip(1) {
                curves.push_str(&format!("{key},{line}\n"));
            }
        }
    }
    fs::write(dir.join("curves.csv"), curves)?;
    let timings: BTreeMap<&String, &f64> = wb
        .timings
        .iter()
        .filter(|(k, _)| keys.contains(*k) || *k == "data")
        .collect();
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timings)? + "\n")?;

    dump_samples(&dir.join("samples"), plan, result, wb, &jobs)?;
    Ok(dir)
}

fn dump_samples(
    dir: &Path,
    plan: &ExperimentPlan,
    result: &SeedResult,
    wb: &mut Workbench,
    jobs: &[(String, Job)],
) -> Result<()> {
    let n = SAMPLE_DUMPS.min(wb.data.b.test.len());
    let idx: Vec<usize> = (0..n).collect();
    let batch = wb.data.b.test.batch(&idx)?;
    let target = plan.direction.target();
    for i in 0..n {
        let s = wb.data.b.test.sample(i)?;
        write_ppm(&dir.join(format!("{i}_input.ppm")), &s.image)?;
        match target {
            Task::Segmentation => write_label_pgm(&dir.join(format!("{i}_gt.pgm")), &s.labels)?,
            Task::Depth => write_depth_pgm(&dir.join(format!("{i}_gt.pgm")), &s.depth)?,
        }
    }
    for (key, job) in jobs {
        if result.get(key).is_none() {
            continue;
        }
        let pred = wb.sample_predictions(plan.direction, *job, &batch.images)?;
        let pred = match target {
            Task::Segmentation => crate::metrics::argmax_labels(&pred)?,
            Task::Depth => {
                let mut p = pred;
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v * D_MAX).clamp(crate::scenegen::D_MIN, D_MAX));
                p
            }
        };
        let file = key.replace('@', "_");
        for i in 0..n {
            let one = pred.gather_rows(&[i])?;
            let shape = one.shape()[1..].to_vec();
            let one = one.reshape(&shape)?;
            match target {
                Task::Segmentation => write_label_pgm(&dir.join(format!("{i}_{file}.pgm")), &one)?,
                Task::Depth => write_depth_pgm(&dir.join(format!("{i}_{file}.pgm")), &one)?,
            }
        }
    }
    Ok(())
}

type SeedOutcome = Result<(SeedResult, Option<PathBuf>)>;

/// Runs `plan` over all its seeds, `jobs` seeds at a time, persisting under
/// `out` when given. Failed sub-runs are recorded, not fatal.
pub fn run_experiment(plan: &ExperimentPlan, out: Option<&Path>, jobs: usize) -> Result<RunResult> {
    plan.validate()?;
    let queue = Mutex::new(plan.seeds.clone().into_iter().enumerate());
    let done: Mutex<Vec<(usize, SeedOutcome)>> = Mutex::new(Vec::new());
    let worker = || loop {
        let next = queue.lock().expect("queue lock").next();
        let Some((i, seed)) = next else { break };
        let r = (|| {
            let mut wb = Workbench::new(plan, seed)?;
            if let Some(root) = out {
                wb.set_scratch(Some(root.join(&plan.name).join(seed.to_string()).join("checkpoints")));
            }
            let res = run_seed(plan, &mut wb)?;
            let dir = out.map(|root| persist(root, plan, &res, &mut wb)).transpose()?;
            Ok((res, dir))
        })();
        done.lock().expect("result lock").push((i, r));
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(plan.seeds.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let mut done = done.into_inner().expect("result lock");
    done.sort_by_key(|(i, _)| *i);
    let mut seeds = Vec::new();
    let mut dirs = Vec::new();
    for (_, r) in done {
        let (res, dir) = r?;
        seeds.push(res);
        dirs.extend(dir);
    }
    Ok(RunResult {
        plan: plan.clone(),
        seeds,
        dirs,
    })
}

fn with_jobs(plan: &ExperimentPlan, methods: &[Method], ablations: &[Ablation]) -> ExperimentPlan {
    ExperimentPlan {
        methods: methods.to_vec(),
        ablations: ablations.to_vec(),
        ..plan.clone()
    }
}

/// AT/DT alone, with the plan's level and options.
pub fn run_atdt(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[Method::Atdt], &[]), None, 1)
}

/// `N2` trained on A, tested on B.
pub fn run_baseline(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[Method::Baseline], &[]), None, 1)
}

/// `N2` trained on B with ground truth.
pub fn run_oracle(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[Method::Oracle], &[]), None, 1)
}

pub fn ablate_transfer_level(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[], &[Ablation::Levels]), None, 1)
}

pub fn ablate_shared_encoder(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[], &[Ablation::Shared]), None, 1)
}

pub fn ablate_batchnorm(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[], &[Ablation::Batchnorm]), None, 1)
}

pub fn run_multitask_comparator(plan: &ExperimentPlan) -> Result<RunResult> {
    run_experiment(&with_jobs(plan, &[Method::Multitask, Method::Atdt], &[]), None, 1)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

/// Re-executes the run described by a manifest, writing under `out`.
pub fn run_from_manifest(path: &Path, out: &Path) -> Result<RunResult> {
    let m = read_manifest(path)?;
    let plan = ExperimentPlan {
        seeds: vec![m.seed],
        ..m.config
    };
    run_experiment(&plan, Some(out), 1)
}
