use std::fmt;
use std::path::Path;

use super::features::csv_error;
use crate::contrastive::ContrastiveEncoder;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::pipeline::{train_supervised, ConViTacModel, ConditionMode, ModelConfig, TrainConfig};
use crate::synth::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub conditions: Vec<ConditionMode>,
    pub fusions: Vec<FusionKind>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// Cells in output order: condition, then fusion, then seed.
    pub fn cells(&self) -> Vec<(ConditionMode, FusionKind, u64)> {
        let mut out = Vec::with_capacity(self.len());
        for &c in &self.conditions {
            for &f in &self.fusions {
                out.extend(self.seeds.iter().map(|&s| (c, f, s)));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.conditions.len() * self.fusions.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub condition: ConditionMode,
    pub fusion: FusionKind,
    pub seed: u64,
    /// Accuracy on the evaluation set after the last epoch.
    pub eval_acc: f64,
}

pub const ABLATION_HEADER: [&str; 4] = ["condition", "fusion", "seed", "eval_acc"];

/// Trains and evaluates every cell of `grid`. Each cell builds a fresh
/// model from `base` with the cell's condition and fusion, encoder seed
/// `base.encoder.seed + seed`, and shuffles with `seed`. All cells share
/// the frozen `contrastive` encoder. With `out`, rows are appended to a CSV
/// and flushed as each cell finishes.
pub fn ablation_run(
    grid: &AblationGrid,
    base: &ModelConfig,
    train_config: &TrainConfig,
    contrastive: &ContrastiveEncoder,
    train: &[Sample],
    eval: &[Sample],
    out: Option<&Path>,
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<Vec<AblationCell>> {
    if grid.is_empty() {
        return Err(Error::Validation("ablation grid has no cells".into()));
    }
    let mut writer = match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
            w.write_record(ABLATION_HEADER).map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let mut results = Vec::with_capacity(grid.len());
    for (condition, fusion, seed) in grid.cells() {
        let mut cfg = base.clone();
        cfg.condition = condition;
        cfg.fusion = fusion;
        cfg.encoder.seed = base.encoder.seed.wrapping_add(seed);
        let mut model = ConViTacModel::new(cfg, Some(contrastive.clone()))?;
        let tc = TrainConfig {
            seed,
            ..train_config.clone()
        };
        let record = train_supervised(&mut model, train, eval, &tc, None, |_| {})?;
        let cell = AblationCell {
            condition,
            fusion,
            seed,
            eval_acc: record.final_eval_acc(),
        };
        if let Some((w, path)) = &mut writer {
            w.write_record([
                condition.to_string(),
                fusion.to_string(),
                seed.to_string(),
                format!("{:.6}", cell.eval_acc),
            ])
            .map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| Error::io(*path, e))?;
        }
        on_cell(&cell);
        results.push(cell);
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationSummary {
    pub condition: ConditionMode,
    pub fusion: FusionKind,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl fmt::Display for AblationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{}: {:.4} ± {:.4} (n={})",
            self.condition, self.fusion, self.mean, self.std, self.runs
        )
    }
}

/// Mean ± std of eval accuracy per (condition, fusion), in first-seen order.
pub fn summarize(cells: &[AblationCell]) -> Vec<AblationSummary> {
    let mut keys: Vec<(ConditionMode, FusionKind)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.condition, c.fusion)) {
            keys.push((c.condition, c.fusion));
        }
    }
    keys.into_iter()
        .map(|(condition, fusion)| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.condition == condition && c.fusion == fusion)
                .map(|c| c.eval_acc)
                .collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = if accs.len() > 1 {
                accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            AblationSummary {
                condition,
                fusion,
                runs: accs.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Seeds where `better` beats `worse` for `fusion` (strictly when `strict`,
/// otherwise ties count), and the number of seeds present for both.
pub fn seed_wins(
    cells: &[AblationCell],
    fusion: FusionKind,
    better: ConditionMode,
    worse: ConditionMode,
    strict: bool,
) -> (usize, usize) {
    let acc = |cond: ConditionMode, seed: u64| {
        cells
            .iter()
            .find(|c| c.fusion == fusion && c.condition == cond && c.seed == seed)
            .map(|c| c.eval_acc)
    };
    let mut wins = 0;
    let mut total = 0;
    for c in cells.iter().filter(|c| c.fusion == fusion && c.condition == better) {
        if let (Some(b), Some(w)) = (Some(c.eval_acc), acc(worse, c.seed)) {
            total += 1;
            wins += usize::from(if strict { b > w } else { b >= w });
        }
    }
    (wins, total)
}
