use atdt_cli::report::{build_tables, columns, seed_mean, LoadedRun};
use atdt_core::metrics::{SegMetrics, TaskMetrics};
use atdt_core::pipeline::{Direction, MethodMetrics, Outcome, SeedResult};

fn seg(miou: f64) -> TaskMetrics {
    TaskMetrics::Segmentation(SegMetrics {
        miou,
        acc: miou + 0.1,
        per_class_iou: vec![Some(miou), None, Some(0.5), Some(0.5), Some(0.5), Some(0.5)],
    })
}

fn run(seed: u64, miou: f64) -> LoadedRun {
    let mut results = std::collections::BTreeMap::new();
    results.insert(
        "atdt".to_string(),
        Outcome::Ok(MethodMetrics {
            b_test: seg(miou),
            a_test: seg(miou),
        }),
    );
    results.insert("oracle".to_string(), Outcome::Failed("diverged".into()));
    LoadedRun {
        dir: Default::default(),
        result: SeedResult {
            name: "x".into(),
            direction: Direction::Dep2sem,
            seed,
            results,
            feature_magnitude: Default::default(),
        },
    }
}

#[test]
fn column_counts() {
    assert_eq!(columns(Direction::Dep2sem).len(), 6 + 2);
    assert_eq!(columns(Direction::Sem2dep).len(), 7);
}

#[test]
fn mean_row_is_arithmetic_mean_of_seed_rows() {
    let runs = [run(0, 0.2), run(1, 0.4), run(2, 0.9)];
    let refs: Vec<&LoadedRun> = runs.iter().collect();
    let tables = build_tables("x", &refs);
    assert_eq!(tables.len(), 2);
    let rows = &tables[0].rows;
    assert_eq!(rows.len(), 4, "failed methods contribute no rows");
    let mean = &rows[3];
    assert_eq!(mean.1, "mean");
    let miou_col = 6;
    assert!((mean.2[miou_col].unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(mean.2[1], None);
    let text = tables[0].to_text();
    assert!(text.lines().count() == 6);
    let widths: Vec<usize> = text.lines().skip(1).map(str::len).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]), "aligned columns");
}

#[test]
fn seed_mean_skips_undefined_cells() {
    let m = seed_mean(&[(0, vec![Some(1.0), None]), (1, vec![Some(3.0), Some(4.0)])]);
    assert_eq!(m, vec![Some(2.0), Some(4.0)]);
}
