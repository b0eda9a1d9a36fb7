//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the list in reverse and
//! accumulates adjoints; only leaf tensors keep their gradients afterwards.

use crate::error::{contract, Error, Result};
use crate::kernels::{col2im, gemm, im2col, upsample_taps, ConvGeometry};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride/dilation/padding of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// "Same" padding: `dilation * (k - 1) / 2`.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        filters: usize,
        cols: Option<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Upsample2x(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    MaskedL1 {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
        denom: f64,
    },
    Mse(Var, Var),
    L2Distance(Var, Var),
}

/// Adjoint buffer of `v`, created on first use; `None` when `v` needs no gradient.
fn sink<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.value.requires_grad() {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, u64, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn out(&self, shape: &[usize], data: Vec<f64>, inputs: &[Var]) -> Tensor {
        let rg = inputs.iter().any(|&v| self.rg(v));
        Tensor::new(shape.to_vec(), data)
            .expect("kernel produced a buffer matching its declared shape")
            .with_requires_grad(rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf)
    }

    /// Leaf whose gradient is tracked; `value.requires_grad()` decides.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn bind_param(&mut self, value: Tensor, store: u64, idx: usize) -> Var {
        let v = self.push(value.with_requires_grad(true), Op::Leaf);
        self.params.push((v, store, idx));
        v
    }

    pub(crate) fn param_bindings(&self) -> impl Iterator<Item = (Var, u64, usize)> + '_ {
        self.params.iter().copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    // ---------------------------------------------------------------- layers

    /// 2-D cross-correlation (no kernel flip). `x: [N,C,H,W]`, `w: [F,C,k,k]`, `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [f, cw, k, k2] = self.value(w).dims4()?;
        contract!(c == cw, "conv2d: input has {} channels but weight expects {}", c, cw);
        contract!(
            k == k2 && k % 2 == 1,
            "conv2d: kernel must be square and odd, got {}x{}",
            k,
            k2
        );
        contract!(
            spec.stride >= 1 && spec.dilation >= 1,
            "conv2d: stride and dilation must be >= 1"
        );
        if let Some(b) = b {
            contract!(
                self.shape(b) == [f],
                "conv2d: bias shape {:?} does not match {} filters",
                self.shape(b),
                f
            );
        }
        contract!(
            h + 2 * spec.padding > spec.dilation * (k - 1) && wd + 2 * spec.padding > spec.dilation * (k - 1),
            "conv2d: receptive field larger than padded input"
        );
        let geom = ConvGeometry {
            in_channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, cc) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.rg(w);
        // Columns of the whole batch side by side: [rows, n*cc].
        let ld = n * cc;
        let mut cols = vec![0.0; rows * ld];
        let mut tmp = vec![0.0; f * ld];
        let mut out = vec![0.0; n * f * cc];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for s in 0..n {
                im2col(
                    &xd[s * c * h * wd..(s + 1) * c * h * wd],
                    &geom,
                    &mut cols[s * cc..],
                    ld,
                );
            }
            gemm(f, rows, ld, 1.0, wdat, false, &cols, false, 0.0, &mut tmp);
            let bias = b.map(|b| self.value(b).data());
            for s in 0..n {
                for fi in 0..f {
                    let src = &tmp[fi * ld + s * cc..fi * ld + (s + 1) * cc];
                    let dst = &mut out[(s * f + fi) * cc..(s * f + fi + 1) * cc];
                    match bias {
                        Some(bias) => dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + bias[fi]),
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = self.out(&[n, f, ho, wo], out, &inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
                filters: f,
                cols: keep_cols.then_some(cols),
            },
        ))
    }

    /// Per-channel batch normalization over `[N,C,H,W]`. Train mode normalizes
    /// with batch statistics and updates `running`; eval mode uses `running`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        contract!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "batch_norm2d: affine parameters must have shape [{}]",
            c
        );
        contract!(
            running.mean.len() == c && running.var.len() == c,
            "batch_norm2d: running statistics sized for {} channels, input has {}",
            running.mean.len(),
            c
        );
        let hw = h * w;
        let m = n * hw;
        let train = mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateVariance(m));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, inv) = if train {
                let mut sum = 0.0;
                for s in 0..n {
                    sum += xd[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    sq += xd[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let mom = running.momentum;
                running.mean[ch] = (1.0 - mom) * running.mean[ch] + mom * mean;
                running.var[ch] = (1.0 - mom) * running.var[ch] + mom * var * m as f64 / (m - 1) as f64;
                (mean, 1.0 / (var + BN_EPS).sqrt())
            } else {
                (running.mean[ch], 1.0 / (running.var[ch] + BN_EPS).sqrt())
            };
            inv_std[ch] = inv;
            for s in 0..n {
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in range {
                    let xh = (xd[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = self.out(&[n, c, h, w], out, &[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = self.out(t.shape(), data, &[x]);
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        contract!(
            self.shape(a) == self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = self.out(self.shape(a), data, &[a, b]);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        contract!(
            self.shape(a) == self.shape(b),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = self.out(self.shape(a), data, &[a, b]);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = self.out(self.shape(x), data, &[x]);
        self.push(value, Op::Scale(x, factor))
    }

    /// Bilinear 2x upsampling with the align-corners = false convention.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (rt, ct) = (upsample_taps(h), upsample_taps(w));
        let xd = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in xd.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for (oy, r) in rt.iter().enumerate() {
                let lo = &plane[r.lo * w..(r.lo + 1) * w];
                let hi = &plane[r.hi * w..(r.hi + 1) * w];
                let line = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, t) in ct.iter().enumerate() {
                    line[ox] = r.w_lo * (t.w_lo * lo[t.lo] + t.w_hi * lo[t.hi])
                        + r.w_hi * (t.w_lo * hi[t.lo] + t.w_hi * hi[t.hi]);
                }
            }
        }
        let value = self.out(&[n, c, ho, wo], out, &[x]);
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let value = self.out(shape, value.into_data(), &[x]);
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let value = self.out(&[1], vec![s], &[x]);
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let value = self.out(&[1], vec![s], &[x]);
        self.push(value, Op::Mean(x))
    }

    // ---------------------------------------------------------------- losses

    /// Mean over pixels of `-log softmax(logits)[label]`.
    /// `logits: [N,K,H,W]`, `labels: [N,1,H,W]` holding integer class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let [n, k, h, w] = self.value(logits).dims4()?;
        contract!(
            labels.shape() == [n, 1, h, w],
            "cross_entropy: labels shape {:?}, expected {:?}",
            labels.shape(),
            [n, 1, h, w]
        );
        let hw = h * w;
        let mut ids = Vec::with_capacity(n * hw);
        for &l in labels.data() {
            contract!(
                l >= 0.0 && l.fract() == 0.0 && (l as usize) < k,
                "cross_entropy: label {} outside [0, {}]",
                l,
                k - 1
            );
            ids.push(l as usize);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for s in 0..n {
            for p in 0..hw {
                let at = |j: usize| (s * k + j) * hw + p;
                let max = (0..k).map(|j| ld[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|j| (ld[at(j)] - max).exp()).sum();
                let lse = max + z.ln();
                for j in 0..k {
                    probs[at(j)] = (ld[at(j)] - lse).exp();
                }
                total += lse - ld[at(ids[s * hw + p])];
            }
        }
        let loss = total / (n * hw) as f64;
        let value = self.out(&[1], vec![loss], &[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: ids,
            },
        ))
    }

    /// `sum(|pred - target| * mask) / sum(mask)`.
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
        contract!(
            self.shape(pred) == self.shape(target) && self.shape(pred) == mask.shape(),
            "masked_l1: shapes {:?}, {:?}, {:?} differ",
            self.shape(pred),
            self.shape(target),
            mask.shape()
        );
        let denom: f64 = mask.data().iter().sum();
        contract!(denom > 0.0, "masked_l1: mask selects no pixels");
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(mask.data())
            .map(|((p, t), m)| (p - t).abs() * m)
            .sum();
        let value = self.out(&[1], vec![s / denom], &[pred, target]);
        Ok(self.push(
            value,
            Op::MaskedL1 {
                pred,
                target,
                mask: mask.data().to_vec(),
                denom,
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        contract!(
            self.shape(a) == self.shape(b),
            "mse: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let t = self.value(a);
        let s: f64 = t
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = self.out(&[1], vec![s / t.numel() as f64], &[a, b]);
        Ok(self.push(value, Op::Mse(a, b)))
    }

    /// Euclidean distance `||a - b||_2` over all elements.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        contract!(
            self.shape(a) == self.shape(b),
            "l2_distance: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = self.out(&[1], vec![s.sqrt()], &[a, b]);
        Ok(self.push(value, Op::L2Distance(a, b)))
    }

    // -------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
    /// Calling it again without [`Tape::zero_grad`] adds to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        contract!(
            self.value(loss).numel() == 1,
            "backward on non-scalar of shape {:?}",
            self.shape(loss)
        );
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                filters,
                cols,
            } => {
                let (rows, cc) = (geom.col_rows(), geom.col_cols());
                let f = *filters;
                let in_len = geom.in_channels * geom.height * geom.width;
                if let Some(db) = b.and_then(|b| sink(nodes, adj, b)) {
                    for s in 0..*batch {
                        for (fi, plane) in g[s * f * cc..(s + 1) * f * cc].chunks(cc).enumerate() {
                            db[fi] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let ld = *batch * cc;
                // gradient rearranged to [f, n*cc] to match the column layout
                let mut gp = vec![0.0; f * ld];
                for s in 0..*batch {
                    for fi in 0..f {
                        gp[fi * ld + s * cc..fi * ld + (s + 1) * cc]
                            .copy_from_slice(&g[(s * f + fi) * cc..(s * f + fi + 1) * cc]);
                    }
                }
                if let Some(dw) = sink(nodes, adj, *w) {
                    let cols = cols
                        .as_ref()
                        .expect("columns are kept whenever the weight needs a gradient");
                    gemm(f, ld, rows, 1.0, &gp, false, cols, true, 1.0, dw);
                }
                let wdat = nodes[w.0].value.data();
                if let Some(dx) = sink(nodes, adj, *x) {
                    let mut dcols = vec![0.0; rows * ld];
                    gemm(rows, f, ld, 1.0, wdat, true, &gp, false, 0.0, &mut dcols);
                    for s in 0..*batch {
                        col2im(&dcols[s * cc..], geom, &mut dx[s * in_len..(s + 1) * in_len], ld);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = nodes[x.0].value.dims4().expect("rank checked in forward");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = nodes[gamma.0].value.data();
                let idx = |s: usize, ch: usize| (s * c + ch) * hw..(s * c + ch + 1) * hw;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for s in 0..n {
                        for j in idx(s, ch) {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if let Some(dx) = sink(nodes, adj, *x) {
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        if *train {
                            // dgamma/dbeta are exactly the two reductions the
                            // batch-statistics correction needs.
                            let (sd, sdx) = (dbeta[ch], dgamma[ch]);
                            for s in 0..n {
                                for j in idx(s, ch) {
                                    dx[j] += k / m * (m * g[j] - sd - xhat[j] * sdx);
                                }
                            }
                        } else {
                            for s in 0..n {
                                for j in idx(s, ch) {
                                    dx[j] += k * g[j];
                                }
                            }
                        }
                    }
                }
                if let Some(dg) = sink(nodes, adj, *gamma) {
                    dg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                }
                if let Some(db) = sink(nodes, adj, *beta) {
                    db.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                let out = nodes[i].value.data();
                if let Some(dx) = sink(nodes, adj, *x) {
                    for ((d, gv), o) in dx.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = sink(nodes, adj, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = sink(nodes, adj, *a) {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = sink(nodes, adj, *b) {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(d) = sink(nodes, adj, *x) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b);
                }
            }
            Op::Upsample2x(x) => {
                let [_, _, h, w] = nodes[x.0].value.dims4().expect("rank checked in forward");
                let (rt, ct) = (upsample_taps(h), upsample_taps(w));
                let wo = 2 * w;
                if let Some(dx) = sink(nodes, adj, *x) {
                    for (plane, src) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for (oy, r) in rt.iter().enumerate() {
                            for (ox, t) in ct.iter().enumerate() {
                                let gv = src[oy * wo + ox];
                                plane[r.lo * w + t.lo] += gv * r.w_lo * t.w_lo;
                                plane[r.lo * w + t.hi] += gv * r.w_lo * t.w_hi;
                                plane[r.hi * w + t.lo] += gv * r.w_hi * t.w_lo;
                                plane[r.hi * w + t.hi] += gv * r.w_hi * t.w_hi;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = sink(nodes, adj, *x) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = sink(nodes, adj, *x) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = sink(nodes, adj, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let [n, k, h, w] = nodes[logits.0].value.dims4().expect("rank checked in forward");
                let hw = h * w;
                let scale = g[0] / (n * hw) as f64;
                if let Some(d) = sink(nodes, adj, *logits) {
                    for s in 0..n {
                        for p in 0..hw {
                            let label = labels[s * hw + p];
                            for j in 0..k {
                                let at = (s * k + j) * hw + p;
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                d[at] += scale * (probs[at] - onehot);
                            }
                        }
                    }
                }
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                denom,
            } => {
                let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                let sign = |j: usize| {
                    let d = p[j] - t[j];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let s = g[0] / denom;
                if let Some(d) = sink(nodes, adj, *pred) {
                    for j in 0..d.len() {
                        d[j] += s * sign(j) * mask[j];
                    }
                }
                if let Some(d) = sink(nodes, adj, *target) {
                    for j in 0..d.len() {
                        d[j] -= s * sign(j) * mask[j];
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(d) = sink(nodes, adj, *a) {
                    for j in 0..d.len() {
                        d[j] += s * (av[j] - bv[j]);
                    }
                }
                if let Some(d) = sink(nodes, adj, *b) {
                    for j in 0..d.len() {
                        d[j] -= s * (av[j] - bv[j]);
                    }
                }
            }
            Op::L2Distance(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let norm = nodes[i].value.data()[0];
                if norm == 0.0 {
                    return;
                }
                let s = g[0] / norm;
                if let Some(d) = sink(nodes, adj, *a) {
                    for j in 0..d.len() {
                        d[j] += s * (av[j] - bv[j]);
                    }
                }
                if let Some(d) = sink(nodes, adj, *b) {
                    for j in 0..d.len() {
                        d[j] -= s * (av[j] - bv[j]);
                    }
                }
            }
        }
    }
}
