//! End-to-end acceptance run. Trains every network the criteria need for each
//! seed, prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails. Expect roughly 25 minutes per seed on one core.
//!
//! `ATDT_ACCEPTANCE_SEEDS` sets the number of seeds (default 5).

use std::fs;
use std::time::Instant;

use atdt_autodiff::gradcheck;
use atdt_core::pipeline::{
    persist, run_from_manifest, run_seed, Ablation, Direction, ExperimentPlan, Method, RunResult, Workbench,
};
use atdt_core::selftest;

const PIPELINE_LIMIT_S: f64 = 600.0;

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn plan(name: &str, direction: Direction, methods: &[Method], ablations: &[Ablation], seeds: &[u64]) -> ExperimentPlan {
    ExperimentPlan {
        name: name.into(),
        direction,
        seeds: seeds.to_vec(),
        methods: methods.to_vec(),
        ablations: ablations.to_vec(),
        ..ExperimentPlan::default()
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn main() {
    let n_seeds: u64 = std::env::var("ATDT_ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let mut verdicts = Vec::new();
    let start = Instant::now();

    // 1. Gradient suite.
    let t = Instant::now();
    let grad = gradcheck::suite(20, 2024);
    let grad_s = t.elapsed().as_secs_f64();
    verdicts.push(match grad {
        Ok(ops) => {
            let worst = ops.iter().map(|o| o.worst_rel_error).fold(0.0, f64::max);
            Verdict {
                id: 1,
                name: "gradient suite",
                passed: ops.iter().all(|o| o.passed() && o.cases >= 20) && grad_s < 60.0,
                detail: format!(
                    "{} ops x >=20 cases, worst rel err {worst:.2e}, {grad_s:.1}s",
                    ops.len()
                ),
            }
        }
        Err(e) => Verdict {
            id: 1,
            name: "gradient suite",
            passed: false,
            detail: e.to_string(),
        },
    });

    // 2. Metric oracles.
    let checks: Vec<_> = selftest::run()
        .into_iter()
        .filter(|c| c.name.starts_with("metrics/"))
        .collect();
    verdicts.push(Verdict {
        id: 2,
        name: "metric oracles",
        passed: checks.len() == 3 && checks.iter().all(|c| c.passed),
        detail: checks
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; "),
    });

    // Experiments: one workbench per seed, shared by every plan of that seed.
    let core = plan(
        "acc-core",
        Direction::Dep2sem,
        &[Method::Atdt, Method::Baseline],
        &[],
        &seeds,
    );
    let d2s = plan(
        "acc-dep2sem",
        Direction::Dep2sem,
        &[Method::Atdt, Method::Baseline, Method::Oracle],
        &[Ablation::Levels, Ablation::Shared, Ablation::Batchnorm, Ablation::Proxy],
        &seeds,
    );
    let s2d = plan(
        "acc-sem2dep",
        Direction::Sem2dep,
        &[Method::Atdt, Method::Baseline, Method::Oracle],
        &[],
        &seeds,
    );
    let replay = plan(
        "acc-replay",
        Direction::Dep2sem,
        &[Method::Atdt, Method::Baseline, Method::Oracle],
        &[],
        &seeds[..1],
    );
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut results = [&core, &d2s, &s2d].map(|p| RunResult {
        plan: p.clone(),
        seeds: Vec::new(),
        dirs: Vec::new(),
    });
    let mut pipeline_s = Vec::new();
    let mut replay_dir = None;
    for &seed in &seeds {
        let t = Instant::now();
        let mut wb = Workbench::new(&core, seed).expect("workbench");
        let r = run_seed(&core, &mut wb).expect("core run");
        pipeline_s.push(t.elapsed().as_secs_f64());
        results[0].seeds.push(r);
        results[1].seeds.push(run_seed(&d2s, &mut wb).expect("dep2sem run"));
        results[2].seeds.push(run_seed(&s2d, &mut wb).expect("sem2dep run"));
        if seed == seeds[0] {
            let r = run_seed(&replay, &mut wb).expect("replay run");
            replay_dir = Some(persist(scratch.path(), &replay, &r, &mut wb).expect("persist"));
        }
        eprintln!(
            "seed {seed} done after {:.0}s (core pipeline {:.0}s)",
            start.elapsed().as_secs_f64(),
            pipeline_s.last().unwrap()
        );
    }
    let [core_r, d2s_r, s2d_r] = &results;
    for r in &results {
        for s in &r.seeds {
            for (k, e) in s.failures() {
                eprintln!("warning: {} seed {} {k} failed: {e}", r.plan.name, s.seed);
            }
        }
    }

    // 3. Dep->Sem gain and pipeline time.
    let (atdt, base) = (core_r.mean_primary_b("atdt"), core_r.mean_primary_b("baseline"));
    let gain = atdt.zip(base).map(|(a, b)| a - b);
    let slowest = pipeline_s.iter().copied().fold(0.0, f64::max);
    verdicts.push(Verdict {
        id: 3,
        name: "dep2sem gain on B",
        passed: gain.is_some_and(|g| g >= 0.02) && slowest < PIPELINE_LIMIT_S,
        detail: format!(
            "mIoU atdt {} baseline {} gain {} (need >= 0.02); slowest pipeline {slowest:.0}s",
            fmt(atdt),
            fmt(base),
            fmt(gain)
        ),
    });

    // 4. Sem->Dep gain.
    let (a_rel, b_rel) = (s2d_r.mean_primary_b("atdt"), s2d_r.mean_primary_b("baseline"));
    let d1 = |k| {
        s2d_r.mean(k, |m| match &m.b_test {
            atdt_core::metrics::TaskMetrics::Depth(d) => d.delta1,
            _ => f64::NAN,
        })
    };
    let (a_d1, b_d1) = (d1("atdt"), d1("baseline"));
    let rel_gain = a_rel.zip(b_rel).map(|(a, b)| (b - a) / b);
    verdicts.push(Verdict {
        id: 4,
        name: "sem2dep gain on B",
        passed: rel_gain.is_some_and(|g| g >= 0.10) && a_d1.zip(b_d1).is_some_and(|(a, b)| a > b),
        detail: format!(
            "AbsRel atdt {} baseline {} relative gain {} (need >= 0.10); delta1 atdt {} baseline {}",
            fmt(a_rel),
            fmt(b_rel),
            fmt(rel_gain),
            fmt(a_d1),
            fmt(b_d1)
        ),
    });

    // 5. Ordering in both directions; AbsRel is lower-is-better.
    let order = |r: &RunResult, lower_better: bool| {
        let (o, a, b) = (
            r.mean_primary_b("oracle"),
            r.mean_primary_b("atdt"),
            r.mean_primary_b("baseline"),
        );
        let ok = match (o, a, b) {
            (Some(o), Some(a), Some(b)) if lower_better => o <= a && a <= b,
            (Some(o), Some(a), Some(b)) => o >= a && a >= b,
            _ => false,
        };
        (ok, format!("oracle {} atdt {} baseline {}", fmt(o), fmt(a), fmt(b)))
    };
    let (ok_d, txt_d) = order(d2s_r, false);
    let (ok_s, txt_s) = order(s2d_r, true);
    verdicts.push(Verdict {
        id: 5,
        name: "oracle >= atdt >= baseline",
        passed: ok_d && ok_s,
        detail: format!("dep2sem mIoU {txt_d}; sem2dep AbsRel {txt_s}"),
    });

    // 6. Split level.
    let cross: Vec<Option<f64>> = (1..=4)
        .map(|l| d2s_r.mean_primary_b(&format!("atdt@level{l}")))
        .collect();
    let inside: Vec<Option<f64>> = (1..=4)
        .map(|l| d2s_r.mean_primary_a(&format!("atdt@level{l}")))
        .collect();
    let band = inside
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min));
    verdicts.push(Verdict {
        id: 6,
        name: "split level",
        passed: cross[3].zip(cross[0]).is_some_and(|(l4, l1)| l4 >= l1) && band.is_some_and(|b| b <= 0.10),
        detail: format!(
            "B mIoU by level [{}]; A mIoU by level [{}], spread {} (need <= 0.10)",
            cross.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", "),
            inside.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", "),
            fmt(band)
        ),
    });

    // 7. Shared encoder.
    let (sh, ns) = (
        d2s_r.mean_primary_b("atdt@shared"),
        d2s_r.mean_primary_b("atdt@nonshared"),
    );
    verdicts.push(Verdict {
        id: 7,
        name: "shared encoder",
        passed: sh.zip(ns).is_some_and(|(s, n)| s - n >= 0.02),
        detail: format!("B mIoU shared {} non-shared {} (need gap >= 0.02)", fmt(sh), fmt(ns)),
    });

    // 8. Batch norm.
    let (bn, nobn) = (d2s_r.mean_primary_b("atdt@bn"), d2s_r.mean_primary_b("atdt@nobn"));
    let (fm_bn, fm_nobn) = (
        d2s_r.mean_feature_magnitude("dep_ab_bn"),
        d2s_r.mean_feature_magnitude("dep_ab_nobn"),
    );
    verdicts.push(Verdict {
        id: 8,
        name: "batch norm",
        passed: bn.zip(nobn).is_some_and(|(a, b)| a >= b) && fm_bn.zip(fm_nobn).is_some_and(|(a, b)| a < b),
        detail: format!(
            "B mIoU with {} without {}; mean |feature| with {} without {}",
            fmt(bn),
            fmt(nobn),
            fmt(fm_bn),
            fmt(fm_nobn)
        ),
    });

    // 9. Proxy depth labels on B.
    let proxy = d2s_r.mean_primary_b("atdt@proxy");
    let pgain = proxy.zip(d2s_r.mean_primary_b("baseline")).map(|(p, b)| p - b);
    verdicts.push(Verdict {
        id: 9,
        name: "proxy labels",
        passed: pgain.is_some_and(|g| g >= 0.01),
        detail: format!(
            "B mIoU with proxy depth {} gain over baseline {} (need >= 0.01)",
            fmt(proxy),
            fmt(pgain)
        ),
    });

    // 10. Replay from manifest.
    let v10 = (|| {
        let dir = replay_dir.as_ref().ok_or("no persisted run")?;
        let again = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_from_manifest(&dir.join("manifest.json"), again.path()).map_err(|e| e.to_string())?;
        let a = fs::read(dir.join("metrics.json")).map_err(|e| e.to_string())?;
        let b =
            fs::read(again.path().join(format!("acc-replay/{}/metrics.json", seeds[0]))).map_err(|e| e.to_string())?;
        Ok::<_, String>((a == b, a.len()))
    })();
    verdicts.push(Verdict {
        id: 10,
        name: "manifest replay",
        passed: matches!(v10, Ok((true, _))),
        detail: match v10 {
            Ok((same, n)) => format!("metrics.json ({n} bytes) identical: {same}"),
            Err(e) => e,
        },
    });

    println!(
        "\nacceptance over {} seed(s), {:.0}s",
        seeds.len(),
        start.elapsed().as_secs_f64()
    );
    for v in &verdicts {
        println!(
            "{} criterion {:>2} {:<28} {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    if verdicts.iter().any(|v| !v.passed) {
        std::process::exit(1);
    }
}
