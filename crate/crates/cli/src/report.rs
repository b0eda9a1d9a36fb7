//! Comparison tables and qualitative triptychs from finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use atdt_autodiff::Tensor;
use atdt_core::dataset::{colorize_labels, depth_to_rgb, read_depth_pgm, read_pgm, read_ppm, write_ppm};
use atdt_core::metrics::{DepthMetrics, TaskMetrics};
use atdt_core::nets::Task;
use atdt_core::pipeline::{Direction, SeedResult};
use atdt_core::scenegen::Class;

/// One loaded `metrics.json` with the directory it came from.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub result: SeedResult,
}

/// Column headers of a direction's table, after `method` and `seed`.
pub fn columns(direction: Direction) -> Vec<String> {
    match direction.target() {
        Task::Segmentation => Class::ALL
            .iter()
            .map(|c| format!("iou_{}", c.name()))
            .chain(["miou".to_string(), "acc".to_string()])
            .collect(),
        Task::Depth => DepthMetrics::NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Metric values in column order; `None` for classes absent from ground truth.
pub fn row_values(m: &TaskMetrics) -> Vec<Option<f64>> {
    match m {
        TaskMetrics::Segmentation(s) => s
            .per_class_iou
            .iter()
            .copied()
            .chain([Some(s.miou), Some(s.acc)])
            .collect(),
        TaskMetrics::Depth(d) => d.values().iter().map(|&v| Some(v)).collect(),
    }
}

/// Finds `metrics.json` files up to three levels below each root. Roots that
/// do not exist and files that do not parse are reported and skipped.
pub fn collect_runs(roots: &[PathBuf]) -> (Vec<LoadedRun>, Vec<String>) {
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for root in roots {
        if !root.is_dir() {
            warnings.push(format!("{}: no such run directory, skipped", root.display()));
            continue;
        }
        let mut found = Vec::new();
        find_metrics(root, 3, &mut found);
        if found.is_empty() {
            warnings.push(format!("{}: no metrics.json found, skipped", root.display()));
        }
        for path in found {
            let parsed = fs::read_to_string(&path)
                .map_err(anyhow::Error::from)
                .and_then(|t| serde_json::from_str::<SeedResult>(&t).map_err(anyhow::Error::from));
            match parsed {
                Ok(result) => runs.push(LoadedRun {
                    dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
                    result,
                }),
                Err(e) => warnings.push(format!("{}: unreadable ({e}), skipped", path.display())),
            }
        }
    }
    runs.sort_by(|a, b| (&a.result.name, a.result.seed).cmp(&(&b.result.name, b.result.seed)));
    (runs, warnings)
}

fn find_metrics(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    let candidate = dir.join("metrics.json");
    if candidate.is_file() {
        out.push(candidate);
        return;
    }
    if depth == 0 {
        return;
    }
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut subdirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        find_metrics(&d, depth - 1, out);
    }
}

/// One table: rows per method and seed, then a seed-mean row per method.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
}

/// A seed and its metric values in column order.
pub type SeedRow = (u64, Vec<Option<f64>>);

/// Tables for the runs of one experiment name, B-test first, then A-test.
pub fn build_tables(name: &str, runs: &[&LoadedRun]) -> Vec<Table> {
    let direction = runs[0].result.direction;
    let header = columns(direction);
    let mut tables = Vec::new();
    for (split, pick) in [
        (
            "b_test",
            (|m: &atdt_core::pipeline::MethodMetrics| &m.b_test) as fn(&_) -> &_,
        ),
        ("a_test", |m| &m.a_test),
    ] {
        let mut by_method: BTreeMap<&str, Vec<SeedRow>> = BTreeMap::new();
        for run in runs {
            for (method, outcome) in &run.result.results {
                if let Some(m) = outcome.metrics() {
                    by_method
                        .entry(method)
                        .or_default()
                        .push((run.result.seed, row_values(pick(m))));
                }
            }
        }
        let mut rows = Vec::new();
        for (method, seeds) in by_method {
            for (seed, vals) in &seeds {
                rows.push((method.to_string(), seed.to_string(), vals.clone()));
            }
            rows.push((method.to_string(), "mean".to_string(), seed_mean(&seeds)));
        }
        tables.push(Table {
            title: format!("{name} ({direction}) {split}"),
            header: header.clone(),
            rows,
        });
    }
    tables
}

/// Column-wise mean over the seeds where the value is defined.
pub fn seed_mean(seeds: &[SeedRow]) -> Vec<Option<f64>> {
    let width = seeds.first().map_or(0, |(_, v)| v.len());
    (0..width)
        .map(|c| {
            let vals: Vec<f64> = seeds.iter().filter_map(|(_, v)| v[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = format!("method,seed,{}\n", self.header.join(","));
        for (method, seed, vals) in &self.rows {
            let cells: Vec<String> = vals
                .iter()
                .map(|v| v.map_or(String::new(), |v| format!("{v:.6}")))
                .collect();
            let _ = writeln!(s, "{method},{seed},{}", cells.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![["method".to_string(), "seed".to_string()]
            .into_iter()
            .chain(self.header.iter().cloned())
            .collect()];
        for (method, seed, vals) in &self.rows {
            grid.push(
                [method.clone(), seed.clone()]
                    .into_iter()
                    .chain(vals.iter().map(|v| v.map_or("-".to_string(), |v| format!("{v:.4}"))))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = format!("{}\n", self.title);
        for row in &grid {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

fn read_map(path: &Path, task: Task) -> Result<Tensor> {
    Ok(match task {
        Task::Segmentation => colorize_labels(&read_pgm(path)?)?,
        Task::Depth => depth_to_rgb(&read_depth_pgm(path)?)?,
    })
}

/// Input, prediction and ground truth side by side with a 2 px white gap.
pub fn triptych(parts: [&Tensor; 3]) -> Result<Tensor> {
    const GAP: usize = 2;
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    for p in parts {
        anyhow::ensure!(p.shape() == [3, h, w], "triptych panels differ in size");
    }
    let tw = 3 * w + 2 * GAP;
    Ok(Tensor::from_fn(&[3, h, tw], |i| {
        let (c, y, x) = (i / (h * tw), (i / tw) % h, i % tw);
        let (panel, px) = (x / (w + GAP), x % (w + GAP));
        if px >= w {
            1.0
        } else {
            parts[panel].data()[c * h * w + y * w + px]
        }
    }))
}

fn write_triptychs(run: &LoadedRun, out: &Path) -> Result<usize> {
    let samples = run.dir.join("samples");
    if !samples.is_dir() {
        return Ok(0);
    }
    let task = run.result.direction.target();
    let dest = out.join(&run.result.name).join(run.result.seed.to_string());
    let mut written = 0;
    for i in 0.. {
        let input = samples.join(format!("{i}_input.ppm"));
        if !input.is_file() {
            break;
        }
        let image = read_ppm(&input)?;
        let gt = read_map(&samples.join(format!("{i}_gt.pgm")), task)?;
        for method in run.result.results.keys() {
            let file = method.replace('@', "_");
            let pred_path = samples.join(format!("{i}_{file}.pgm"));
            if !pred_path.is_file() {
                continue;
            }
            let pred = read_map(&pred_path, task)?;
            fs::create_dir_all(&dest)?;
            write_ppm(&dest.join(format!("{i}_{file}.ppm")), &triptych([&image, &pred, &gt])?)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Writes `<name>_<split>.csv` / `.txt` tables and triptychs under `out`.
/// Missing or broken runs only produce warnings.
pub fn report(roots: &[PathBuf], out: &Path) -> Result<()> {
    let (runs, warnings) = collect_runs(roots);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut groups: BTreeMap<(String, Direction), Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry((r.result.name.clone(), r.result.direction))
            .or_default()
            .push(r);
    }
    for ((name, direction), group) in &groups {
        for table in build_tables(name, group) {
            let split = table.title.rsplit(' ').next().unwrap_or("table");
            let stem = if groups.keys().filter(|(n, _)| n == name).count() > 1 {
                format!("{name}_{direction}_{split}")
            } else {
                format!("{name}_{split}")
            };
            fs::write(out.join(format!("{stem}.csv")), table.to_csv())?;
            let text = table.to_text();
            fs::write(out.join(format!("{stem}.txt")), &text)?;
            println!("{text}");
        }
        let mut images = 0;
        for run in group {
            match write_triptychs(run, &out.join("samples")) {
                Ok(n) => images += n,
                Err(e) => eprintln!("warning: {}: samples unreadable ({e:#}), skipped", run.dir.display()),
            }
        }
        eprintln!("{name}: {} run(s), {images} triptych(s)", group.len());
    }
    if groups.is_empty() {
        eprintln!("warning: no runs to report");
    }
    Ok(())
}
