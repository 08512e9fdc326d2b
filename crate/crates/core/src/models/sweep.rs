//! Resumable CNN hyperparameter sweep over `n_convs × dense_len`.
//!
//! Every finished cell writes a TOML marker under `<out>/cells/`; a rerun
//! skips cells whose marker exists. The table `<out>/sweep.csv` is rebuilt
//! from the markers after each run, in grid order.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{evaluate, train_classifier, ModelConfig, ModelError, TrainConfig};
use crate::dataset::{balance, split, write_atomic, DatasetError, LabeledExample, SplitMode};
use crate::par;

pub const GRID_N: [usize; 4] = [1, 2, 3, 4];
pub use super::cnn::DENSE_GRID as GRID_L;

#[derive(Debug, Clone)]
pub struct SweepDataset {
    pub name: String,
    pub examples: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
    pub l_values: Vec<usize>,
    pub base_seed: u64,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub split_mode: SplitMode,
    /// Worker threads for cells; 0 uses the global pool.
    pub jobs: usize,
    /// Stop after computing this many new cells (the rest stay pending).
    pub max_new_cells: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_values: GRID_N.to_vec(),
            l_values: GRID_L.to_vec(),
            base_seed: 0,
            train: TrainConfig::default(),
            train_fraction: 0.7,
            split_mode: SplitMode::Random,
            jobs: 0,
            max_new_cells: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub n: usize,
    pub l: usize,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Every finished cell (old and new), in grid order.
    pub rows: Vec<SweepRow>,
    pub computed: usize,
    pub skipped: usize,
    pub pending: usize,
    pub csv_path: PathBuf,
}

pub const CSV_HEADER: &str = "dataset,n,l,seed,train_acc,test_acc,wall_seconds";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Cell seed derived from `(base, n, l)`; kept below 2^63 so it survives
/// TOML round trips.
pub fn cell_seed(base: u64, n: usize, l: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ n as u64) ^ l as u64) >> 1
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn marker_path(out: &Path, dataset: &str, n: usize, l: usize) -> PathBuf {
    out.join("cells").join(format!("{}-n{n}-l{l}.toml", safe_name(dataset)))
}

fn read_marker(path: &Path) -> Option<SweepRow> {
    let text = std::fs::read_to_string(path).ok()?;
    toml::from_str(&text).ok()
}

fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.3}\n",
            r.dataset, r.n, r.l, r.seed, r.train_acc, r.test_acc, r.wall_seconds
        ));
    }
    s
}

struct Cell<'a> {
    dataset: &'a str,
    n: usize,
    l: usize,
    train: &'a [LabeledExample],
    test: &'a [LabeledExample],
}

fn run_cell(cell: &Cell<'_>, cfg: &SweepConfig) -> Result<SweepRow, ModelError> {
    let seed = cell_seed(cfg.base_seed, cell.n, cell.l);
    let mcfg = ModelConfig::cnn(
        cell.n,
        cell.l,
        TrainConfig {
            seed,
            ..cfg.train.clone()
        },
    );
    let start = std::time::Instant::now();
    let (train_acc, test_acc) = match train_classifier(cell.train, &mcfg) {
        Ok(c) => {
            let test_acc = if cell.test.is_empty() {
                f64::NAN
            } else {
                evaluate(&c, cell.test)?.accuracy
            };
            (c.meta.training_accuracy, test_acc)
        }
        Err(ModelError::DivergenceDetected) => {
            log::warn!("cell {} n={} l={} diverged", cell.dataset, cell.n, cell.l);
            (f64::NAN, f64::NAN)
        }
        Err(e) => return Err(e),
    };
    Ok(SweepRow {
        dataset: cell.dataset.to_string(),
        n: cell.n,
        l: cell.l,
        seed,
        train_acc,
        test_acc,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs (or resumes) the grid for every dataset. Each dataset is balanced
/// and split once so all of its cells see the same train/test partition.
pub fn run_sweep(datasets: &[SweepDataset], cfg: &SweepConfig, out: &Path) -> Result<SweepReport, ModelError> {
    std::fs::create_dir_all(out.join("cells"))?;
    let mut splits = Vec::with_capacity(datasets.len());
    for d in datasets {
        let balanced = balance(d.examples.clone(), cfg.base_seed)?;
        splits.push(split(balanced, cfg.train_fraction, cfg.split_mode, cfg.base_seed)?);
    }

    let mut todo = Vec::new();
    let mut skipped = 0;
    for (d, (train, test)) in datasets.iter().zip(&splits) {
        for &n in &cfg.n_values {
            for &l in &cfg.l_values {
                if read_marker(&marker_path(out, &d.name, n, l)).is_some() {
                    skipped += 1;
                } else {
                    todo.push(Cell {
                        dataset: &d.name,
                        n,
                        l,
                        train,
                        test,
                    });
                }
            }
        }
    }
    let limit = cfg.max_new_cells.unwrap_or(usize::MAX).min(todo.len());
    let pending = todo.len() - limit;
    todo.truncate(limit);

    let results = par::with_jobs(cfg.jobs, || {
        par::map(&todo, |cell| -> Result<(), ModelError> {
            let row = run_cell(cell, cfg)?;
            let text = toml::to_string(&row).map_err(|e| DatasetError::Header(e.to_string()))?;
            write_atomic(&marker_path(out, cell.dataset, cell.n, cell.l), text.as_bytes())?;
            Ok(())
        })
    });
    for r in results {
        r?;
    }

    let mut rows = Vec::new();
    for d in datasets {
        for &n in &cfg.n_values {
            for &l in &cfg.l_values {
                if let Some(row) = read_marker(&marker_path(out, &d.name, n, l)) {
                    rows.push(row);
                }
            }
        }
    }
    let csv_path = out.join("sweep.csv");
    write_atomic(&csv_path, to_csv(&rows).as_bytes())?;
    Ok(SweepReport {
        rows,
        computed: limit,
        skipped,
        pending,
        csv_path,
    })
}
