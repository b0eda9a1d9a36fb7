//! Fast sanity suite: gradient checks, metric kernels against brute-force
//! oracles, and renderer invariants. Fixed seeds, so the verdict is stable.

use atdt_autodiff::{gradcheck, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::{depth_metrics, oracle, seg_metrics, ConfusionMatrix, DepthMetrics, SegMetrics};
use crate::scenegen::{generate_scene, render, Class, DomainStyle, GrammarConfig, D_MAX, D_MIN, NUM_CLASSES};

pub const ORACLE_CASES: usize = 100;
pub const GRAD_CASES: usize = 20;
const TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub type SegKernel = fn(&ConfusionMatrix) -> Result<SegMetrics>;
pub type DepthKernel = fn(&Tensor, &Tensor, Option<&Tensor>, [f64; 2]) -> Result<DepthMetrics>;

/// The metric implementations under test. Swappable so the suite itself can
/// be shown to catch a broken kernel.
#[derive(Clone, Copy)]
pub struct MetricKernels {
    pub seg: SegKernel,
    pub depth: DepthKernel,
}

impl Default for MetricKernels {
    fn default() -> Self {
        MetricKernels {
            seg: seg_metrics,
            depth: depth_metrics,
        }
    }
}

/// Runs everything with the library's own kernels.
pub fn run() -> Vec<Check> {
    run_with(&MetricKernels::default())
}

pub fn run_with(kernels: &MetricKernels) -> Vec<Check> {
    let mut checks = gradient_checks();
    checks.push(seg_oracle_check(kernels.seg));
    checks.push(worked_example_check(kernels.seg));
    checks.push(depth_oracle_check(kernels.depth));
    checks.push(scene_check());
    checks
}

fn gradient_checks() -> Vec<Check> {
    match gradcheck::suite(GRAD_CASES, 2024) {
        Ok(ops) => ops
            .iter()
            .map(|op| {
                Check::new(
                    format!("grad/{}", op.op),
                    op.passed() && op.cases >= GRAD_CASES,
                    format!("{} cases, worst rel err {:.2e}", op.cases, op.worst_rel_error),
                )
            })
            .collect(),
        Err(e) => vec![Check::new("grad", false, e.to_string())],
    }
}

fn seg_oracle_check(kernel: SegKernel) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_CASES {
        let n = rng.gen_range(1..200);
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let t = |v: &[usize]| Tensor::new(vec![1, 1, 1, n], v.iter().map(|&x| x as f64).collect());
        let got = (|| {
            let mut cm = ConfusionMatrix::new(NUM_CLASSES);
            cm.accumulate(&t(&pred)?, &t(&gt)?, None)?;
            kernel(&cm)
        })();
        let (om, oa) = oracle::seg(&pred, &gt, NUM_CLASSES);
        match got {
            Ok(m) => worst = worst.max((m.miou - om).abs()).max((m.acc - oa).abs()),
            Err(e) => return Check::new("metrics/seg-oracle", false, e.to_string()),
        }
    }
    Check::new(
        "metrics/seg-oracle",
        worst < TOL,
        format!("{ORACLE_CASES} cases, worst abs err {worst:.2e}"),
    )
}

fn worked_example_check(kernel: SegKernel) -> Check {
    let r = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).and_then(|cm| kernel(&cm));
    match r {
        Ok(m) => Check::new(
            "metrics/worked-example",
            (m.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < TOL && (m.acc - 0.7).abs() < TOL,
            format!("miou {:.4} acc {:.4}", m.miou, m.acc),
        ),
        Err(e) => Check::new("metrics/worked-example", false, e.to_string()),
    }
}

fn depth_oracle_check(kernel: DepthKernel) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_CASES {
        let n = rng.gen_range(1..200);
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(D_MIN..D_MAX)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.5 * D_MAX)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
        valid[0] = true;
        let t = |v: Vec<f64>| Tensor::new(vec![1, 1, 1, n], v);
        let got = (|| {
            let mask = t(valid.iter().map(|&v| f64::from(u8::from(v))).collect())?;
            kernel(&t(pred.clone())?, &t(gt.clone())?, Some(&mask), [D_MIN, D_MAX])
        })();
        let o = oracle::depth(&pred, &gt, &valid, D_MIN, D_MAX);
        match got {
            Ok(m) => {
                for (a, b) in m.values().iter().zip(o) {
                    worst = worst.max((a - b).abs() / b.abs().max(1.0));
                }
            }
            Err(e) => return Check::new("metrics/depth-oracle", false, e.to_string()),
        }
    }
    Check::new(
        "metrics/depth-oracle",
        worst < TOL,
        format!("{ORACLE_CASES} cases, worst rel err {worst:.2e}"),
    )
}

fn scene_check() -> Check {
    let grammar = GrammarConfig::default();
    let mut problems = Vec::new();
    for seed in 0..20u64 {
        let scene = match generate_scene(seed, &grammar) {
            Ok(s) => s,
            Err(e) => return Check::new("scenegen/invariants", false, e.to_string()),
        };
        let again = generate_scene(seed, &grammar).map(|s| s == scene).unwrap_or(false);
        let (a, b) = match (
            render(&scene, &DomainStyle::domain_a(), (32, 32)),
            render(&scene, &DomainStyle::domain_b(), (32, 32)),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Check::new("scenegen/invariants", false, e.to_string()),
        };
        if !again {
            problems.push(format!("seed {seed}: generation not deterministic"));
        }
        if a.labels.data() != b.labels.data() || a.depth.data() != b.depth.data() {
            problems.push(format!("seed {seed}: style changed geometry"));
        }
        for (&d, &l) in a.depth.data().iter().zip(a.labels.data()) {
            let bad_range = !(D_MIN..=D_MAX).contains(&d) || l as usize >= NUM_CLASSES;
            let bad_sky = l as usize == Class::Sky.id() && d != D_MAX;
            if bad_range || bad_sky {
                problems.push(format!("seed {seed}: pixel label {l} depth {d}"));
                break;
            }
        }
        if a.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            problems.push(format!("seed {seed}: image outside [0, 1]"));
        }
    }
    let detail = if problems.is_empty() {
        "20 scenes".to_string()
    } else {
        problems.join("; ")
    };
    Check::new("scenegen/invariants", problems.is_empty(), detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let checks = run();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() > 10);
    }

    fn skewed_seg(cm: &ConfusionMatrix) -> Result<SegMetrics> {
        let mut m = seg_metrics(cm)?;
        m.miou += 1e-9;
        Ok(m)
    }

    fn lenient_delta(p: &Tensor, g: &Tensor, v: Option<&Tensor>, r: [f64; 2]) -> Result<DepthMetrics> {
        let mut m = depth_metrics(p, g, v, r)?;
        m.delta1 = m.delta2;
        Ok(m)
    }

    #[test]
    fn perturbed_kernels_fail() {
        let seg = run_with(&MetricKernels {
            seg: skewed_seg,
            ..MetricKernels::default()
        });
        assert!(!seg.iter().find(|c| c.name == "metrics/seg-oracle").unwrap().passed);
        let depth = run_with(&MetricKernels {
            depth: lenient_delta,
            ..MetricKernels::default()
        });
        assert!(!depth.iter().find(|c| c.name == "metrics/depth-oracle").unwrap().passed);
    }

    #[test]
    fn verdict_is_deterministic() {
        assert_eq!(run(), run());
    }
}
