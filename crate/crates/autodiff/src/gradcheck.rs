//! Central finite-difference gradient checks for every differentiable operation.
//!
//! The oracle only ever calls forward passes; it never looks at the backward
//! implementation it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{BnMode, ConvSpec, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

/// Worst-case discrepancy between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares `backward` against central differences of the scalar `f`.
///
/// Up to `max_samples` coordinates across all inputs are probed (chosen with
/// `rng`). The relative error of an input is `max|a - n| / max(max|n|, 1e-8)`,
/// taken over the probed coordinates of that input.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, max_samples: usize, rng: &mut impl Rng) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.detached().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if total > max_samples {
        // partial Fisher-Yates
        for k in 0..max_samples {
            let r = rng.gen_range(k..coords.len());
            coords.swap(k, r);
        }
        coords.truncate(max_samples);
    }

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for &(_, j) in coords.iter().filter(|(ii, _)| *ii == i) {
            let mut values = inputs.to_vec();
            values[i].data_mut()[j] += h;
            let plus = eval(&values)?;
            values[i].data_mut()[j] -= 2.0 * h;
            let minus = eval(&values)?;
            let numeric = (plus - minus) / (2.0 * h);
            max_diff = max_diff.max((numeric - analytic[j]).abs());
            max_num = max_num.max(numeric.abs());
            checked += 1;
        }
        worst = worst.max(max_diff / max_num.max(1e-8));
    }
    Ok(GradReport {
        max_rel_error: worst,
        checked,
    })
}

/// Result of checking one operation over many random cases.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < REL_TOLERANCE
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps this module free of extra distribution crates.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Values bounded away from zero, so kinks (ReLU, |.|) are never straddled by `h`.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Contracts a tensor to a scalar with a fixed random projection so every
/// output element influences the checked loss.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn dims(rng: &mut impl Rng) -> [usize; 4] {
    [
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(2..=7),
        rng.gen_range(2..=7),
    ]
}

/// Runs `cases` random checks for every differentiable operation.
pub fn suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let max_samples = 60;

    macro_rules! run {
        ($name:expr, $body:expr) => {{
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let r: GradReport = $body(&mut rng)?;
                worst = worst.max(r.max_rel_error);
            }
            out.push(OpCheck {
                op: $name,
                cases,
                worst_rel_error: worst,
            });
        }};
    }

    run!("conv2d", |rng: &mut ChaCha8Rng| {
        let [n, c, h, w] = dims(rng);
        let f = rng.gen_range(1..=3);
        let k = if rng.gen_bool(0.3) { 1 } else { 3 };
        let stride = rng.gen_range(1..=2);
        let dilation = rng.gen_range(1..=2);
        let spec = ConvSpec::same(k, stride, dilation);
        let x = normal(rng, &[n, c, h + 2, w + 2], 1.0);
        let wt = normal(rng, &[f, c, k, k], 0.5);
        let b = normal(rng, &[f], 0.5);
        let probe = {
            let g = crate::kernels::ConvGeometry {
                in_channels: c,
                height: h + 2,
                width: w + 2,
                kernel: k,
                stride,
                dilation,
                padding: spec.padding,
            };
            normal(rng, &[n, f, g.out_height(), g.out_width()], 1.0)
        };
        check(
            &[x, wt, b],
            |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("batch_norm2d/train", |rng: &mut ChaCha8Rng| {
        let [n, c, h, w] = dims(rng);
        let x = normal(rng, &[n, c, h, w], 2.0);
        let gamma = normal(rng, &[c], 1.0);
        let beta = normal(rng, &[c], 1.0);
        let probe = normal(rng, &[n, c, h, w], 1.0);
        let stats = RunningStats::new(c);
        check(
            &[x, gamma, beta],
            |t: &mut Tape, v: &[Var]| {
                let mut rs = stats.clone();
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut rs, BnMode::Train)?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("batch_norm2d/eval", |rng: &mut ChaCha8Rng| {
        let [n, c, h, w] = dims(rng);
        let x = normal(rng, &[n, c, h, w], 2.0);
        let gamma = normal(rng, &[c], 1.0);
        let beta = normal(rng, &[c], 1.0);
        let probe = normal(rng, &[n, c, h, w], 1.0);
        let mut stats = RunningStats::new(c);
        stats.mean = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        stats.var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        check(
            &[x, gamma, beta],
            |t: &mut Tape, v: &[Var]| {
                let mut rs = stats.clone();
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut rs, BnMode::Eval)?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("relu", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let x = away_from_zero(rng, &shape);
        let probe = normal(rng, &shape, 1.0);
        check(
            &[x],
            |t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0]);
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("add", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let (a, b) = (normal(rng, &shape, 1.0), normal(rng, &shape, 1.0));
        let probe = normal(rng, &shape, 1.0);
        check(
            &[a, b],
            |t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("mul", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let (a, b) = (normal(rng, &shape, 1.0), normal(rng, &shape, 1.0));
        check(
            &[a, b],
            |t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                let y = t.mul(y, v[0])?;
                Ok(t.sum(y))
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("scale", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let x = normal(rng, &shape, 1.0);
        let factor = rng.gen_range(-3.0..3.0);
        let probe = normal(rng, &shape, 1.0);
        check(
            &[x],
            |t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], factor);
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("upsample2x", |rng: &mut ChaCha8Rng| {
        let [n, c, h, w] = dims(rng);
        let x = normal(rng, &[n, c, h - 1, w - 1], 1.0);
        let probe = normal(rng, &[n, c, 2 * (h - 1), 2 * (w - 1)], 1.0);
        check(
            &[x],
            |t: &mut Tape, v: &[Var]| {
                let y = t.upsample2x(v[0])?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("reshape", |rng: &mut ChaCha8Rng| {
        let [n, c, h, w] = dims(rng);
        let x = normal(rng, &[n, c, h, w], 1.0);
        let probe = normal(rng, &[n, c * h * w], 1.0);
        check(
            &[x],
            |t: &mut Tape, v: &[Var]| {
                let y = t.flatten(v[0])?;
                project(t, y, &probe)
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("mean", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let x = normal(rng, &shape, 1.0);
        check(
            &[x],
            |t: &mut Tape, v: &[Var]| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            },
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("cross_entropy", |rng: &mut ChaCha8Rng| {
        let [n, _, h, w] = dims(rng);
        let k = rng.gen_range(2..=6);
        let logits = normal(rng, &[n, k, h, w], 2.0);
        let labels = Tensor::from_fn(&[n, 1, h, w], |_| rng.gen_range(0..k) as f64);
        check(
            &[logits],
            |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels),
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("masked_l1", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let target = normal(rng, &shape, 1.0);
        let offset = away_from_zero(rng, &shape);
        let pred = Tensor::from_fn(&shape, |i| target.data()[i] + offset.data()[i]);
        let mut mask = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        mask.data_mut()[0] = 1.0;
        check(
            &[pred, target],
            |t: &mut Tape, v: &[Var]| t.masked_l1(v[0], v[1], &mask),
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("mse", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let (a, b) = (normal(rng, &shape, 1.0), normal(rng, &shape, 1.0));
        check(
            &[a, b],
            |t: &mut Tape, v: &[Var]| t.mse(v[0], v[1]),
            FD_STEP,
            max_samples,
            rng,
        )
    });

    run!("l2_distance", |rng: &mut ChaCha8Rng| {
        let shape = dims(rng);
        let (a, b) = (normal(rng, &shape, 1.0), normal(rng, &shape, 1.0));
        check(
            &[a, b],
            |t: &mut Tape, v: &[Var]| t.l2_distance(v[0], v[1]),
            FD_STEP,
            max_samples,
            rng,
        )
    });

    Ok(out)
}
