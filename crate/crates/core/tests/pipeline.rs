use std::fs;

use atdt_core::dataset::{build_dataset, derive_seed, DatasetConfig};
use atdt_core::nets::{Task, TaskNetwork, TransferNet};
use atdt_core::pipeline::*;
use atdt_core::training::{load_checkpoint, TrainConfig};

fn tiny_plan(name: &str) -> ExperimentPlan {
    let budget = TrainConfig {
        steps: 4,
        batch_size: 4,
        eval_every: 2,
        ..TrainConfig::default()
    };
    ExperimentPlan {
        name: name.into(),
        dataset: DatasetConfig {
            n_train: 8,
            n_val: 4,
            n_test: 4,
            resolution: [32, 32],
            ..DatasetConfig::default()
        },
        seeds: vec![3],
        task_training: budget.clone(),
        transfer_training: budget,
        ..ExperimentPlan::default()
    }
}

#[test]
fn run_layout_and_manifest_replay() {
    let out = tempfile::tempdir().unwrap();
    let plan = tiny_plan("tiny");
    let r = run_experiment(&plan, Some(out.path()), 1).unwrap();
    assert!(r.all_ok());
    let dir = out.path().join("tiny/3");
    for f in ["manifest.json", "metrics.json", "curves.csv", "timing.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert!(dir.join("samples/0_input.ppm").is_file());
    assert!(dir.join("samples/0_atdt.pgm").is_file());
    let manifest = read_manifest(&dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.config.seeds, vec![3]);
    for c in &manifest.checkpoints {
        assert!(dir.join(c).is_file(), "{c}");
    }

    let again = tempfile::tempdir().unwrap();
    run_from_manifest(&dir.join("manifest.json"), again.path()).unwrap();
    let a = fs::read(dir.join("metrics.json")).unwrap();
    let b = fs::read(again.path().join("tiny/3/metrics.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inference_matches_manual_composition_from_checkpoints() {
    let out = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan {
        methods: vec![Method::Atdt],
        ..tiny_plan("compose")
    };
    run_experiment(&plan, Some(out.path()), 1).unwrap();
    let ck = out.path().join("compose/3/checkpoints");
    let load_task = |key: &str, task| {
        let mut n = TaskNetwork::new(key, task, 4, true, 0).unwrap();
        n.load_named(&load_checkpoint(&ck.join(format!("{key}.ckpt"))).unwrap())
            .unwrap();
        n
    };
    let mut e1 = load_task("dep_ab_bn", Task::Depth);
    let mut n2 = load_task("sem_a_bn", Task::Segmentation);
    let gkey = "g4_dep_ab_bn_to_sem_a_bn";
    let mut g = TransferNet::new(gkey, 4, true, 0).unwrap();
    g.load_named(&load_checkpoint(&ck.join(format!("{gkey}.ckpt"))).unwrap())
        .unwrap();

    let data = build_dataset(&plan.dataset, derive_seed(3, "data")).unwrap();
    let x = data.b.test.batch(&[0, 1]).unwrap().images;
    let piped = atdt_predict(&mut e1, &mut g, &mut n2, &x, 4).unwrap();

    let f = e1.features(&x, 4).unwrap();
    let h = g.apply(&f).unwrap();
    let mut tape = atdt_autodiff::Tape::new();
    let hv = tape.constant(h);
    let y = n2.decode(&mut tape, hv, 4, atdt_core::nets::Mode::Eval).unwrap();
    assert_eq!(piped.data(), tape.value(y).data());

    let metrics: SeedResult =
        serde_json::from_str(&fs::read_to_string(out.path().join("compose/3/metrics.json")).unwrap()).unwrap();
    let recomputed = atdt_core::metrics::evaluate(&data.b.test, Task::Segmentation, |x| {
        atdt_predict(&mut e1, &mut g, &mut n2, x, 4)
    })
    .unwrap();
    assert_eq!(metrics.get("atdt").unwrap().b_test, recomputed);
}

#[test]
fn ablation_keys_and_shared_networks() {
    let plan = ExperimentPlan {
        methods: vec![],
        ablations: vec![Ablation::Levels, Ablation::Shared, Ablation::Batchnorm, Ablation::Proxy],
        ..tiny_plan("abl")
    };
    let r = run_experiment(&plan, None, 1).unwrap();
    let s = &r.seeds[0];
    for key in [
        "atdt@level1",
        "atdt@level2",
        "atdt@level3",
        "atdt@level4",
        "atdt@shared",
        "atdt@nonshared",
        "atdt@bn",
        "atdt@nobn",
        "baseline@bn",
        "baseline@nobn",
        "atdt@proxy",
        "atdt@gt",
    ] {
        assert!(s.get(key).is_some(), "{key}");
    }
    // The default arm is level 4, shared, with batch norm: same networks.
    assert_eq!(s.get("atdt@level4"), s.get("atdt@shared"));
    assert_eq!(s.get("atdt@level4"), s.get("atdt@bn"));
    assert_eq!(s.feature_magnitude.len(), 2);
}

#[test]
fn invalid_plans_are_config_errors() {
    let bad = ExperimentPlan {
        split_level: 5,
        ..tiny_plan("x")
    };
    assert!(matches!(
        run_experiment(&bad, None, 1),
        Err(atdt_core::Error::Config(_))
    ));
    let bad = ExperimentPlan {
        seeds: vec![],
        ..tiny_plan("x")
    };
    assert!(matches!(bad.validate(), Err(atdt_core::Error::Config(_))));
    let json = r#"{"name": "x", "bogus": 1}"#;
    assert!(serde_json::from_str::<ExperimentPlan>(json).is_err());
}

#[test]
fn seeds_run_in_parallel_match_serial() {
    let plan = ExperimentPlan {
        seeds: vec![1, 2],
        methods: vec![Method::Baseline],
        ..tiny_plan("par")
    };
    let serial = run_experiment(&plan, None, 1).unwrap();
    let parallel = run_experiment(&plan, None, 2).unwrap();
    assert_eq!(serial.seeds, parallel.seeds);
}

#[test]
fn wrappers_select_their_methods() {
    let plan = tiny_plan("wrap");
    let keys = |r: &RunResult| r.seeds[0].results.keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&run_baseline(&plan).unwrap()), vec!["baseline"]);
    assert_eq!(keys(&run_oracle(&plan).unwrap()), vec!["oracle"]);
    let mtl = run_multitask_comparator(&plan).unwrap();
    assert_eq!(keys(&mtl), vec!["atdt", "multitask"]);
    assert!(mtl.mean_primary_b("multitask").is_some());
    let levels = ablate_transfer_level(&plan).unwrap();
    assert_eq!(levels.seeds[0].results.len(), 4);
}

#[test]
fn inference_updates_nothing() {
    let data = build_dataset(&tiny_plan("x").dataset, 1).unwrap();
    let mut e1 = TaskNetwork::new("e1", Task::Depth, 4, true, 1).unwrap();
    let mut n2 = TaskNetwork::new("n2", Task::Segmentation, 4, true, 2).unwrap();
    let mut g = TransferNet::new("g", 2, true, 3).unwrap();
    let snap = |n: &TaskNetwork| n.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
    let (s1, s2) = (snap(&e1), snap(&n2));
    let sg: Vec<Vec<f64>> = g.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let x = data.b.test.batch(&[0, 1, 2]).unwrap().images;
    let y1 = atdt_predict(&mut e1, &mut g, &mut n2, &x, 2).unwrap();
    let y2 = atdt_predict(&mut e1, &mut g, &mut n2, &x, 2).unwrap();
    assert_eq!(y1.data(), y2.data());
    assert_eq!(snap(&e1), s1);
    assert_eq!(snap(&n2), s2);
    let sg2: Vec<Vec<f64>> = g.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(sg2, sg);
}
