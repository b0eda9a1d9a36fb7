//! Task networks `N = D ∘ E` with a selectable split level, the feature
//! transfer network, and the multi-task comparator.
//!
//! Encoder: four residual stages with output strides {2, 4, 8, 8} and widths
//! {16, 32, 64, 64}; the last stage keeps stride 8 and uses dilation 2. The
//! decoder is a clean bottleneck (no skip connections): three
//! conv → BN → ReLU → 2x-upsample blocks of widths {64, 32, 16}, then a 1x1
//! prediction head.

use atdt_autodiff::{BnMode, ConvSpec, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const NUM_CLASSES: usize = 6;
pub const ENCODER_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const ENCODER_STRIDES: [usize; 4] = [2, 4, 8, 8];
pub const DECODER_WIDTHS: [usize; 3] = [64, 32, 16];
/// Parameter budget of one task network.
pub const MAX_TASK_PARAMS: usize = 500_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Depth,
}

impl Task {
    pub fn out_channels(self) -> usize {
        match self {
            Task::Segmentation => NUM_CLASSES,
            Task::Depth => 1,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Task::Segmentation => "sem",
            Task::Depth => "dep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl From<Mode> for BnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

fn check_level(level: usize) -> Result<()> {
    contract!((1..=4).contains(&level), "split level {} outside 1..=4", level);
    Ok(())
}

/// Shape of the stage-`level` encoder output for an `[n, 3, h, w]` input.
pub fn feature_shape(level: usize, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
    check_level(level)?;
    let s = ENCODER_STRIDES[level - 1];
    Ok([n, ENCODER_WIDTHS[level - 1], h / s, w / s])
}

// ------------------------------------------------------------------ layers

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = (cin * k * k) as f64;
        let he = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| he.sample(rng));
        Ok(Conv {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
            spec: ConvSpec::same(k, stride, dilation),
        })
    }

    fn apply(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.w);
        let b = store.bind(tape, self.b);
        Ok(tape.conv2d(x, w, Some(b), self.spec)?)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    name: String,
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            stats: RunningStats::new(channels),
        })
    }

    fn maybe(store: &mut ParamStore, name: &str, channels: usize, on: bool) -> Result<Option<Self>> {
        on.then(|| Norm::new(store, name, channels)).transpose()
    }

    fn apply(&mut self, store: &ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        Ok(tape.batch_norm2d(x, g, b, &mut self.stats, mode.into())?)
    }

    fn buffers(&self) -> [(String, Tensor); 2] {
        let c = self.stats.mean.len();
        [
            (
                format!("{}.running_mean", self.name),
                Tensor::new(vec![c], self.stats.mean.clone()).expect("channel vector"),
            ),
            (
                format!("{}.running_var", self.name),
                Tensor::new(vec![c], self.stats.var.clone()).expect("channel vector"),
            ),
        ]
    }
}

fn norm_opt(n: &mut Option<Norm>, store: &ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
    match n {
        Some(n) => n.apply(store, tape, x, mode),
        None => Ok(x),
    }
}

/// conv → [BN] → ReLU
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv,
    norm: Option<Norm>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bn: bool,
    ) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride, 1)?,
            norm: Norm::maybe(store, &format!("{name}.bn"), cout, bn)?,
        })
    }

    fn apply(&mut self, store: &ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.apply(store, tape, x)?;
        let h = norm_opt(&mut self.norm, store, tape, h, mode)?;
        Ok(tape.relu(h))
    }

    fn norms(&self) -> impl Iterator<Item = &Norm> {
        self.norm.iter()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    bn1: Option<Norm>,
    conv2: Conv,
    bn2: Option<Norm>,
    shortcut: Option<(Conv, Option<Norm>)>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        bn: bool,
    ) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some((
                Conv::new(store, rng, &format!("{name}.proj"), cin, cout, 1, stride, 1)?,
                Norm::maybe(store, &format!("{name}.proj_bn"), cout, bn)?,
            ))
        } else {
            None
        };
        Ok(ResBlock {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, dilation)?,
            bn1: Norm::maybe(store, &format!("{name}.bn1"), cout, bn)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, dilation)?,
            bn2: Norm::maybe(store, &format!("{name}.bn2"), cout, bn)?,
            shortcut,
        })
    }

    fn apply(&mut self, store: &ParamStore, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.apply(store, tape, x)?;
        let h = norm_opt(&mut self.bn1, store, tape, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.apply(store, tape, h)?;
        let h = norm_opt(&mut self.bn2, store, tape, h, mode)?;
        let skip = match &mut self.shortcut {
            Some((conv, norm)) => {
                let s = conv.apply(store, tape, x)?;
                norm_opt(norm, store, tape, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }

    fn norms(&self) -> impl Iterator<Item = &Norm> {
        self.bn1
            .iter()
            .chain(self.bn2.iter())
            .chain(self.shortcut.iter().flat_map(|(_, n)| n.iter()))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<ResBlock>,
}

impl Encoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, bn: bool) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in ENCODER_WIDTHS.iter().enumerate() {
            let (stride, dilation) = if i < 3 { (2, 1) } else { (1, 2) };
            stages.push(ResBlock::new(
                store,
                rng,
                &format!("{prefix}.enc.stage{}", i + 1),
                cin,
                cout,
                stride,
                dilation,
                bn,
            )?);
            cin = cout;
        }
        Ok(Encoder { stages })
    }

    /// Runs stages `from+1 ..= to` (1-based levels; `from = 0` is the image).
    fn run(
        &mut self,
        store: &ParamStore,
        tape: &mut Tape,
        mut x: Var,
        from: usize,
        to: usize,
        mode: Mode,
    ) -> Result<Var> {
        for stage in &mut self.stages[from..to] {
            x = stage.apply(store, tape, x, mode)?;
        }
        Ok(x)
    }

    fn norms(&self) -> impl Iterator<Item = &Norm> {
        self.stages.iter().flat_map(ResBlock::norms)
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut Norm> {
        self.stages.iter_mut().flat_map(|s| {
            s.bn1
                .iter_mut()
                .chain(s.bn2.iter_mut())
                .chain(s.shortcut.iter_mut().flat_map(|(_, n)| n.iter_mut()))
        })
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<ConvUnit>,
    head: Conv,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, out: usize, bn: bool) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = ENCODER_WIDTHS[3];
        for (i, &cout) in DECODER_WIDTHS.iter().enumerate() {
            blocks.push(ConvUnit::new(
                store,
                rng,
                &format!("{prefix}.dec.up{}", i + 1),
                cin,
                cout,
                1,
                bn,
            )?);
            cin = cout;
        }
        let head = Conv::new(store, rng, &format!("{prefix}.head"), cin, out, 1, 1, 1)?;
        Ok(Decoder { blocks, head })
    }

    fn apply(&mut self, store: &ParamStore, tape: &mut Tape, mut x: Var, mode: Mode) -> Result<Var> {
        for block in &mut self.blocks {
            x = block.apply(store, tape, x, mode)?;
            x = tape.upsample2x(x)?;
        }
        self.head.apply(store, tape, x)
    }

    fn norms(&self) -> impl Iterator<Item = &Norm> {
        self.blocks.iter().flat_map(ConvUnit::norms)
    }
}

fn check_input(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    let shape = tape.value(x).dims4()?;
    contract!(shape[1] == 3, "expected an RGB batch, got {} channels", shape[1]);
    contract!(
        shape[2] % 8 == 0 && shape[3] % 8 == 0,
        "input {}x{} is not divisible by 8",
        shape[2],
        shape[3]
    );
    Ok(shape)
}

fn named_tensors(
    store: &ParamStore,
    norms: impl Iterator<Item = impl std::ops::Deref<Target = Norm>>,
) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = store.iter().map(|p| (p.name.clone(), p.tensor.detached())).collect();
    for n in norms {
        out.extend(n.buffers());
    }
    out
}

fn load_named<'a>(
    store: &mut ParamStore,
    norms: impl Iterator<Item = &'a mut Norm>,
    entries: &[(String, Tensor)],
) -> Result<()> {
    let lookup = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{name}`")))
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let t = lookup(&name)?;
        let id = store.lookup(&name).expect("name from this store");
        let p = store.get_mut(id);
        contract!(
            p.tensor.shape() == t.shape(),
            "checkpoint shape {:?} for `{}` differs from {:?}",
            t.shape(),
            name,
            p.tensor.shape()
        );
        p.tensor.data_mut().copy_from_slice(t.data());
    }
    for n in norms {
        n.stats.mean = lookup(&format!("{}.running_mean", n.name))?.data().to_vec();
        n.stats.var = lookup(&format!("{}.running_var", n.name))?.data().to_vec();
    }
    Ok(())
}

// --------------------------------------------------------------- networks

/// Single-task encoder/decoder network.
#[derive(Clone, Debug)]
pub struct TaskNetwork {
    name: String,
    task: Task,
    split_level: usize,
    use_batchnorm: bool,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl TaskNetwork {
    pub fn new(name: &str, task: Task, split_level: usize, use_batchnorm: bool, seed: u64) -> Result<Self> {
        check_level(split_level)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, name, use_batchnorm)?;
        let decoder = Decoder::new(&mut store, &mut rng, name, task.out_channels(), use_batchnorm)?;
        Ok(TaskNetwork {
            name: name.to_string(),
            task,
            split_level,
            use_batchnorm,
            store,
            encoder,
            decoder,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split_level(&self) -> usize {
        self.split_level
    }

    pub fn use_batchnorm(&self) -> bool {
        self.use_batchnorm
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let f = self.encode(tape, x, 4, mode)?;
        self.decode(tape, f, 4, mode)
    }

    /// Encoder `E`: activation of residual stage `level`.
    pub fn encode(&mut self, tape: &mut Tape, x: Var, level: usize, mode: Mode) -> Result<Var> {
        check_level(level)?;
        check_input(tape, x)?;
        self.encoder.run(&self.store, tape, x, 0, level, mode)
    }

    /// Decoder `D`: remaining encoder stages after `level`, then the
    /// upsampling decoder and head.
    pub fn decode(&mut self, tape: &mut Tape, f: Var, level: usize, mode: Mode) -> Result<Var> {
        check_level(level)?;
        let [_, c, h, w] = tape.value(f).dims4()?;
        let s = ENCODER_STRIDES[level - 1];
        contract!(
            c == ENCODER_WIDTHS[level - 1],
            "decode at level {}: expected {} channels, got {}",
            level,
            ENCODER_WIDTHS[level - 1],
            c
        );
        contract!(
            (h * s).is_multiple_of(8) && (w * s).is_multiple_of(8),
            "decode at level {}: feature map {}x{} does not correspond to an input divisible by 8",
            level,
            h,
            w
        );
        let deep = self.encoder.run(&self.store, tape, f, level, 4, mode)?;
        self.decoder.apply(&self.store, tape, deep, mode)
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(y).detached())
    }

    /// Eval-mode features at `level`.
    pub fn features(&mut self, x: &Tensor, level: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.encode(&mut tape, xv, level, Mode::Eval)?;
        Ok(tape.value(f).detached())
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        named_tensors(&self.store, self.encoder.norms().chain(self.decoder.norms()))
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let norms = self
            .encoder
            .norms_mut()
            .chain(self.decoder.blocks.iter_mut().flat_map(|b| b.norm.iter_mut()));
        load_named(&mut self.store, norms, entries)
    }
}

/// `G₁→₂`: maps encoder features of the source task onto those of the target
/// task at the same split level. Two stride-2 blocks reduce the feature map to
/// 1/4 of its resolution, a middle block works at that scale, and two
/// upsample + conv blocks restore it. The bottleneck is twice as wide as the
/// features.
#[derive(Clone, Debug)]
pub struct TransferNet {
    name: String,
    level: usize,
    channels: usize,
    use_batchnorm: bool,
    store: ParamStore,
    down1: ConvUnit,
    down2: ConvUnit,
    mid: ConvUnit,
    up1: ConvUnit,
    out: Conv,
}

impl TransferNet {
    pub fn new(name: &str, level: usize, use_batchnorm: bool, seed: u64) -> Result<Self> {
        check_level(level)?;
        let c = ENCODER_WIDTHS[level - 1];
        let wide = 2 * c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bn = use_batchnorm;
        let down1 = ConvUnit::new(&mut store, &mut rng, &format!("{name}.down1"), c, wide, 2, bn)?;
        let down2 = ConvUnit::new(&mut store, &mut rng, &format!("{name}.down2"), wide, wide, 2, bn)?;
        let mid = ConvUnit::new(&mut store, &mut rng, &format!("{name}.mid"), wide, wide, 1, bn)?;
        let up1 = ConvUnit::new(&mut store, &mut rng, &format!("{name}.up1"), wide, wide, 1, bn)?;
        let out = Conv::new(&mut store, &mut rng, &format!("{name}.up2.conv"), wide, c, 3, 1, 1)?;
        Ok(TransferNet {
            name: name.to_string(),
            level,
            channels: c,
            use_batchnorm,
            store,
            down1,
            down2,
            mid,
            up1,
            out,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn use_batchnorm(&self) -> bool {
        self.use_batchnorm
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, shape: [usize; 4]) -> Result<()> {
        contract!(
            shape[1] == self.channels,
            "transfer at level {} expects {} channels, got {}",
            self.level,
            self.channels,
            shape[1]
        );
        contract!(
            shape[2].is_multiple_of(4) && shape[3].is_multiple_of(4),
            "transfer needs feature maps divisible by 4, got {}x{}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    /// Spatial size of the innermost activation for a given feature map.
    pub fn bottleneck_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / 4, w / 4)
    }

    pub fn forward(&mut self, tape: &mut Tape, f: Var, mode: Mode) -> Result<Var> {
        self.check(tape.value(f).dims4()?)?;
        let s = &self.store;
        let h = self.down1.apply(s, tape, f, mode)?;
        let h = self.down2.apply(s, tape, h, mode)?;
        let h = self.mid.apply(s, tape, h, mode)?;
        let h = tape.upsample2x(h)?;
        let h = self.up1.apply(s, tape, h, mode)?;
        let h = tape.upsample2x(h)?;
        self.out.apply(s, tape, h)
    }

    pub fn apply(&mut self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let y = self.forward(&mut tape, fv, Mode::Eval)?;
        Ok(tape.value(y).detached())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let norms = [&self.down1, &self.down2, &self.mid, &self.up1]
            .into_iter()
            .flat_map(|u| u.norm.iter());
        named_tensors(&self.store, norms)
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let norms = [&mut self.down1, &mut self.down2, &mut self.mid, &mut self.up1]
            .into_iter()
            .flat_map(|u| u.norm.iter_mut());
        load_named(&mut self.store, norms, entries)
    }
}

/// Shared encoder with one decoder per task.
#[derive(Clone, Debug)]
pub struct MultiTaskNetwork {
    name: String,
    use_batchnorm: bool,
    store: ParamStore,
    encoder: Encoder,
    seg: Decoder,
    depth: Decoder,
}

impl MultiTaskNetwork {
    pub fn new(name: &str, use_batchnorm: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, name, use_batchnorm)?;
        let seg = Decoder::new(&mut store, &mut rng, &format!("{name}.sem"), NUM_CLASSES, use_batchnorm)?;
        let depth = Decoder::new(&mut store, &mut rng, &format!("{name}.dep"), 1, use_batchnorm)?;
        Ok(MultiTaskNetwork {
            name: name.to_string(),
            use_batchnorm,
            store,
            encoder,
            seg,
            depth,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn use_batchnorm(&self) -> bool {
        self.use_batchnorm
    }

    /// Both heads read the same deepest feature tensor. Returns `(segmentation logits, depth)`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Var)> {
        check_input(tape, x)?;
        let f = self.encoder.run(&self.store, tape, x, 0, 4, mode)?;
        let seg = self.seg.apply(&self.store, tape, f, mode)?;
        let depth = self.depth.apply(&self.store, tape, f, mode)?;
        Ok((seg, depth))
    }

    pub fn predict(&mut self, x: &Tensor, task: Task) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (seg, depth) = self.forward(&mut tape, xv, Mode::Eval)?;
        let out = match task {
            Task::Segmentation => seg,
            Task::Depth => depth,
        };
        Ok(tape.value(out).detached())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        named_tensors(
            &self.store,
            self.encoder.norms().chain(self.seg.norms()).chain(self.depth.norms()),
        )
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let norms = self
            .encoder
            .norms_mut()
            .chain(self.seg.blocks.iter_mut().flat_map(|b| b.norm.iter_mut()))
            .chain(self.depth.blocks.iter_mut().flat_map(|b| b.norm.iter_mut()));
        load_named(&mut self.store, norms, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0);
        Tensor::from_fn(&[n, 3, hw, hw], |_| u.sample(&mut rng))
    }

    #[test]
    fn stride_table_per_level() {
        let mut net = TaskNetwork::new("n", Task::Depth, 4, true, 1).unwrap();
        let x = image(2, 64, 0);
        for level in 1..=4 {
            let f = net.features(&x, level).unwrap();
            assert_eq!(f.shape(), &feature_shape(level, 2, 64, 64).unwrap());
        }
        assert_eq!(net.features(&x, 4).unwrap().shape(), &[2, 64, 8, 8]);
        assert_eq!(net.features(&x, 1).unwrap().shape(), &[2, 16, 32, 32]);
    }

    #[test]
    fn heads_restore_full_resolution() {
        let x = image(1, 64, 1);
        let mut seg = TaskNetwork::new("s", Task::Segmentation, 4, true, 2).unwrap();
        let mut dep = TaskNetwork::new("d", Task::Depth, 4, true, 2).unwrap();
        assert_eq!(seg.predict(&x).unwrap().shape(), &[1, 6, 64, 64]);
        assert_eq!(dep.predict(&x).unwrap().shape(), &[1, 1, 64, 64]);
        // same architecture apart from the head
        assert_eq!(
            seg.store().num_scalars() - dep.store().num_scalars(),
            (NUM_CLASSES - 1) * (DECODER_WIDTHS[2] + 1)
        );
    }

    #[test]
    fn decode_of_encode_equals_forward() {
        let x = image(2, 32, 3);
        let mut net = TaskNetwork::new("n", Task::Segmentation, 4, true, 4).unwrap();
        let full = net.predict(&x).unwrap();
        for level in 1..=4 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let f = net.encode(&mut tape, xv, level, Mode::Eval).unwrap();
            let y = net.decode(&mut tape, f, level, Mode::Eval).unwrap();
            assert_eq!(tape.value(y).data(), full.data());
        }
    }

    #[test]
    fn eval_features_are_deterministic() {
        let x = image(2, 64, 5);
        let mut net = TaskNetwork::new("n", Task::Depth, 4, true, 6).unwrap();
        let a = net.features(&x, 4).unwrap();
        let b = net.features(&x, 4).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn input_must_be_divisible_by_eight() {
        let mut net = TaskNetwork::new("n", Task::Depth, 4, true, 6).unwrap();
        let x = Tensor::zeros(&[1, 3, 36, 36]);
        assert!(matches!(net.predict(&x), Err(Error::Contract(_))));
        assert!(TaskNetwork::new("n", Task::Depth, 5, true, 6).is_err());
    }

    #[test]
    fn parameter_budget_and_unique_names() {
        let net = TaskNetwork::new("n1", Task::Segmentation, 4, true, 0).unwrap();
        assert!(net.store().num_scalars() < MAX_TASK_PARAMS);
        let mut names: Vec<_> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
        let len = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), len);
    }

    #[test]
    fn batchnorm_switch_keeps_convolutions() {
        let a = TaskNetwork::new("n", Task::Depth, 4, true, 0).unwrap();
        let b = TaskNetwork::new("n", Task::Depth, 4, false, 0).unwrap();
        let convs = |n: &TaskNetwork| -> Vec<(String, Vec<usize>)> {
            n.store()
                .iter()
                .filter(|p| !p.name.contains("bn"))
                .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
                .collect()
        };
        assert_eq!(convs(&a), convs(&b));
        assert!(b.store().iter().all(|p| !p.name.contains("bn")));
    }

    #[test]
    fn transfer_shapes() {
        for level in 1..=4 {
            let [_, c, h, w] = feature_shape(level, 1, 64, 64).unwrap();
            let mut g = TransferNet::new("g", level, true, 0).unwrap();
            let f = Tensor::full(&[2, c, h, w], 0.5);
            assert_eq!(g.apply(&f).unwrap().shape(), &[2, c, h, w]);
        }
        let g = TransferNet::new("g", 4, true, 0).unwrap();
        assert_eq!(g.bottleneck_hw(8, 8), (2, 2));
        let mut g = g;
        assert!(g.apply(&Tensor::zeros(&[1, 32, 8, 8])).is_err());
    }

    #[test]
    fn checkpoint_entries_round_trip() {
        let a = TaskNetwork::new("n", Task::Depth, 4, true, 0).unwrap();
        let mut b = TaskNetwork::new("n", Task::Depth, 4, true, 1).unwrap();
        b.load_named(&a.named_tensors()).unwrap();
        assert_eq!(a.named_tensors(), b.named_tensors());
    }

    #[test]
    fn multitask_heads_share_features() {
        let mut m = MultiTaskNetwork::new("mt", true, 0).unwrap();
        let x = image(1, 32, 0);
        assert_eq!(m.predict(&x, Task::Segmentation).unwrap().shape(), &[1, 6, 32, 32]);
        assert_eq!(m.predict(&x, Task::Depth).unwrap().shape(), &[1, 1, 32, 32]);
    }
}
