//! Segmentation and depth evaluation.
//!
//! Segmentation goes through an integer confusion matrix, so chunked and
//! single-shot evaluation agree exactly. Depth aggregates use compensated
//! (Neumaier) summation.

use atdt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{contract, Error, Result};
use crate::nets::{Task, NUM_CLASSES};
use crate::scenegen::{D_MAX, D_MIN};

/// `counts[gt * k + pred]`: rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        contract!(
            counts.len() == k * k,
            "{} counts for a {}x{} matrix",
            counts.len(),
            k,
            k
        );
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel where `valid` (if given) is non-zero.
    pub fn accumulate(&mut self, pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<()> {
        contract!(
            pred.shape() == gt.shape(),
            "prediction {:?} vs labels {:?}",
            pred.shape(),
            gt.shape()
        );
        if let Some(v) = valid {
            contract!(
                v.shape() == gt.shape(),
                "mask {:?} vs labels {:?}",
                v.shape(),
                gt.shape()
            );
        }
        let k = self.k;
        let label = |x: f64, what: &str| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && (x as usize) < k {
                Ok(x as usize)
            } else {
                Err(Error::Contract(format!("{what} label {x} outside [0, {}]", k - 1)))
            }
        };
        // validate everything first so a bad label leaves the matrix untouched
        let mut pairs = Vec::with_capacity(gt.numel());
        for i in 0..gt.numel() {
            if valid.is_none_or(|v| v.data()[i] != 0.0) {
                pairs.push((
                    label(gt.data()[i], "ground-truth")?,
                    label(pred.data()[i], "predicted")?,
                ));
            }
        }
        for (g, p) in pairs {
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        contract!(
            self.k == other.k,
            "merging {}-class and {}-class matrices",
            self.k,
            other.k
        );
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub acc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn seg_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    let total = cm.total();
    contract!(total > 0, "segmentation metrics of an empty confusion matrix");
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    let mut trace = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        let gt_c: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred_c: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        trace += tp;
        per_class.push((gt_c > 0).then(|| tp as f64 / (gt_c + pred_c - tp) as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(SegMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        acc: trace as f64 / total as f64,
        per_class_iou: per_class,
    })
}

/// Pixelwise argmax over the channel axis: `[N, K, H, W]` → `[N, 1, H, W]`.
/// Ties resolve to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Tensor> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0.0; n * hw];
    for s in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(s * k + c) * hw + i] > d[(s * k + best) * hw + i] {
                    best = c;
                }
            }
            out[s * hw + i] = best as f64;
        }
    }
    Ok(Tensor::new(vec![n, 1, h, w], out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const NAMES: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

/// Neumaier compensated sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Streaming depth-metric accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAccumulator {
    range: [f64; 2],
    count: u64,
    abs_rel: KahanSum,
    sq_rel: KahanSum,
    sq: KahanSum,
    sq_log: KahanSum,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn new(clamp_range: [f64; 2]) -> Result<Self> {
        contract!(
            clamp_range[0] > 0.0 && clamp_range[0] < clamp_range[1],
            "invalid clamp range {:?}",
            clamp_range
        );
        Ok(DepthAccumulator {
            range: clamp_range,
            count: 0,
            abs_rel: KahanSum::default(),
            sq_rel: KahanSum::default(),
            sq: KahanSum::default(),
            sq_log: KahanSum::default(),
            within: [0; 3],
        })
    }

    /// `pred` and `gt` in world units; `pred` is clamped to the range first.
    pub fn accumulate(&mut self, pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<()> {
        contract!(
            pred.shape() == gt.shape(),
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        );
        if let Some(v) = valid {
            contract!(
                v.shape() == gt.shape(),
                "mask {:?} vs ground truth {:?}",
                v.shape(),
                gt.shape()
            );
        }
        for i in 0..gt.numel() {
            if valid.is_some_and(|v| v.data()[i] == 0.0) {
                continue;
            }
            let g = gt.data()[i];
            contract!(g > 0.0, "non-positive ground-truth depth {} at {}", g, i);
            let p = pred.data()[i].clamp(self.range[0], self.range[1]);
            let diff = p - g;
            self.abs_rel.add(diff.abs() / g);
            self.sq_rel.add(diff * diff / g);
            self.sq.add(diff * diff);
            let dl = p.ln() - g.ln();
            self.sq_log.add(dl * dl);
            let ratio = (p / g).max(g / p);
            for (a, w) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(a as i32 + 1) {
                    *w += 1;
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        contract!(self.count > 0, "depth metrics over an empty valid set");
        let n = self.count as f64;
        Ok(DepthMetrics {
            abs_rel: self.abs_rel.value() / n,
            sq_rel: self.sq_rel.value() / n,
            rmse: (self.sq.value() / n).sqrt(),
            rmse_log: (self.sq_log.value() / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
        })
    }
}

pub fn depth_metrics(
    pred: &Tensor,
    gt: &Tensor,
    valid: Option<&Tensor>,
    clamp_range: [f64; 2],
) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::new(clamp_range)?;
    acc.accumulate(pred, gt, valid)?;
    acc.finish()
}

/// Metrics of one task on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMetrics {
    Segmentation(SegMetrics),
    Depth(DepthMetrics),
}

impl TaskMetrics {
    pub fn task(&self) -> Task {
        match self {
            TaskMetrics::Segmentation(_) => Task::Segmentation,
            TaskMetrics::Depth(_) => Task::Depth,
        }
    }

    /// mIoU for segmentation, Abs Rel for depth.
    pub fn primary(&self) -> f64 {
        match self {
            TaskMetrics::Segmentation(m) => m.miou,
            TaskMetrics::Depth(m) => m.abs_rel,
        }
    }

    /// Whether `self` is at least as good as `other` on the primary metric.
    pub fn at_least(&self, other: &TaskMetrics) -> bool {
        match self.task() {
            Task::Segmentation => self.primary() >= other.primary(),
            Task::Depth => self.primary() <= other.primary(),
        }
    }
}

/// Evaluates `predict` over a split in chunks. Segmentation predictions are
/// logits (argmax taken here); depth predictions are normalized and get
/// denormalized and clamped to `[D_MIN, D_MAX]`.
pub fn evaluate(split: &Split, task: Task, mut predict: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<TaskMetrics> {
    match task {
        Task::Segmentation => {
            let mut cm = ConfusionMatrix::new(NUM_CLASSES);
            for batch in split.chunks(25) {
                let batch = batch?;
                let labels = argmax_labels(&predict(&batch.images)?)?;
                cm.accumulate(&labels, &batch.labels, None)?;
            }
            Ok(TaskMetrics::Segmentation(seg_metrics(&cm)?))
        }
        Task::Depth => {
            let mut acc = DepthAccumulator::new([D_MIN, D_MAX])?;
            for batch in split.chunks(25) {
                let batch = batch?;
                let mut pred = predict(&batch.images)?;
                pred.data_mut().iter_mut().for_each(|v| *v *= D_MAX);
                acc.accumulate(&pred, &batch.depth, Some(&batch.valid))?;
            }
            Ok(TaskMetrics::Depth(acc.finish()?))
        }
    }
}

/// Direct per-pixel implementations used to cross-check the kernels above.
/// They share no code with them: no confusion matrix, no compensated sums.
pub mod oracle {
    /// `(miou, acc)` from raw label slices; classes absent from `gt` are skipped.
    pub fn seg(pred: &[usize], gt: &[usize], k: usize) -> (f64, f64) {
        let mut ious = Vec::new();
        for c in 0..k {
            let mut inter = 0usize;
            let mut union = 0usize;
            let mut in_gt = false;
            for (p, g) in pred.iter().zip(gt) {
                in_gt |= *g == c;
                if *p == c && *g == c {
                    inter += 1;
                }
                if *p == c || *g == c {
                    union += 1;
                }
            }
            if in_gt {
                ious.push(inter as f64 / union as f64);
            }
        }
        let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        (
            ious.iter().sum::<f64>() / ious.len() as f64,
            correct as f64 / gt.len() as f64,
        )
    }

    /// `[abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3]` over pixels
    /// with `valid[i]`, predictions clamped to `[lo, hi]`.
    pub fn depth(pred: &[f64], gt: &[f64], valid: &[bool], lo: f64, hi: f64) -> [f64; 7] {
        let mut out = [0.0; 7];
        let mut n = 0.0;
        for i in 0..gt.len() {
            if !valid[i] {
                continue;
            }
            let p = pred[i].max(lo).min(hi);
            let g = gt[i];
            n += 1.0;
            out[0] += (p - g).abs() / g;
            out[1] += (p - g).powi(2) / g;
            out[2] += (p - g).powi(2);
            out[3] += (p.ln() - g.ln()).powi(2);
            let r = if p / g > g / p { p / g } else { g / p };
            out[4] += f64::from(u8::from(r < 1.25));
            out[5] += f64::from(u8::from(r < 1.25 * 1.25));
            out[6] += f64::from(u8::from(r < 1.25 * 1.25 * 1.25));
        }
        for v in &mut out {
            *v /= n;
        }
        out[2] = out[2].sqrt();
        out[3] = out[3].sqrt();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[usize]) -> Tensor {
        Tensor::new(vec![1, 1, 1, v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()
    }

    #[test]
    fn hand_counted_two_class_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let m = seg_metrics(&cm).unwrap();
        assert!((m.per_class_iou[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((m.per_class_iou[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.miou - 0.535_714_285_714_285_7).abs() < 1e-12);
        assert!((m.acc - 0.7).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(6);
        let l = labels(&[0, 1, 1, 3, 3, 3]);
        cm.accumulate(&l, &l, None).unwrap();
        let m = seg_metrics(&cm).unwrap();
        assert_eq!((m.miou, m.acc), (1.0, 1.0));
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(cm.get(3, 3), 3);
    }

    #[test]
    fn masked_pixels_are_skipped() {
        let mut cm = ConfusionMatrix::new(3);
        let mask = Tensor::zeros(&[1, 1, 1, 3]);
        cm.accumulate(&labels(&[0, 1, 2]), &labels(&[2, 1, 0]), Some(&mask))
            .unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert!(seg_metrics(&cm).is_err());
    }

    #[test]
    fn out_of_range_label_is_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.accumulate(&labels(&[0, 3]), &labels(&[0, 1]), None).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn accumulation_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
        let mut whole = ConfusionMatrix::new(4);
        whole.accumulate(&labels(&a), &labels(&b), None).unwrap();
        let mut parts = ConfusionMatrix::new(4);
        parts.accumulate(&labels(&a[..20]), &labels(&b[..20]), None).unwrap();
        let mut rest = ConfusionMatrix::new(4);
        rest.accumulate(&labels(&a[20..]), &labels(&b[20..]), None).unwrap();
        parts.merge(&rest).unwrap();
        assert_eq!(parts, whole);
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![0.1, 5.0, 0.7, 5.0, -1.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&logits).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn depth_identity_and_strict_threshold() {
        let g = Tensor::new(vec![1, 1, 1, 4], vec![2.0, 5.0, 10.0, 40.0]).unwrap();
        let m = depth_metrics(&g, &g, None, [1.0, 100.0]).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);

        let p = Tensor::new(vec![1, 1, 1, 4], g.data().iter().map(|v| v * 1.25).collect()).unwrap();
        let m = depth_metrics(&p, &g, None, [1.0, 100.0]).unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!((m.delta2, m.delta3), (1.0, 1.0));
        assert!((m.abs_rel - 0.25).abs() < 1e-15);
    }

    #[test]
    fn predictions_are_clamped() {
        let g = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 100.0]).unwrap();
        let p = Tensor::new(vec![1, 1, 1, 2], vec![-3.0, 250.0]).unwrap();
        let m = depth_metrics(&p, &g, None, [1.0, 100.0]).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn empty_valid_set_is_rejected() {
        let g = Tensor::full(&[1, 1, 1, 3], 4.0);
        assert!(depth_metrics(&g, &g, Some(&Tensor::zeros(&[1, 1, 1, 3])), [1.0, 100.0]).is_err());
    }

    #[test]
    fn chunked_depth_equals_single_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..100.0)).collect();
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..120.0)).collect();
        let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let whole = depth_metrics(&t(&p), &t(&g), None, [1.0, 100.0]).unwrap();
        let mut acc = DepthAccumulator::new([1.0, 100.0]).unwrap();
        for c in 0..4 {
            let r = c * 16..(c + 1) * 16;
            acc.accumulate(&t(&p[r.clone()]), &t(&g[r]), None).unwrap();
        }
        assert_eq!(acc.finish().unwrap(), whole);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = KahanSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }
}
