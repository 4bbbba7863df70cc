use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Rng;

/// Grid size and alphabet; fixes the token vocabulary of the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridTask {
    pub grid: usize,
    pub symbols: usize,
}

impl Default for GridTask {
    fn default() -> Self {
        Self { grid: 4, symbols: 8 }
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// Placeholder for the multimodal slot in question templates.
pub const IMG: usize = 2;
pub const Q_CELL: usize = 3;
pub const Q_ROW: usize = 4;
const CELL_BASE: usize = 5;

// Coordinates are single tokens: one per cell, one per row. The answer is
// predicted at the coordinate token, the last prompt position.
impl GridTask {
    pub fn cell_token(&self, r: usize, c: usize) -> usize {
        CELL_BASE + r * self.grid + c
    }

    pub fn row_token(&self, r: usize) -> usize {
        CELL_BASE + self.grid * self.grid + r
    }

    pub fn symbol_token(&self, s: usize) -> usize {
        CELL_BASE + self.grid * self.grid + self.grid + s
    }

    pub fn answer_tokens(&self) -> std::ops::Range<usize> {
        self.symbol_token(0)..self.symbol_token(self.symbols)
    }

    /// Smallest vocabulary covering every task token.
    pub fn min_vocab(&self) -> usize {
        self.symbol_token(self.symbols)
    }

    /// Multimodal tokens per sample.
    pub fn l_mm(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    /// Symbol at `(row, col)`.
    Cell,
    /// Most frequent symbol in a row.
    Row,
}

impl QueryType {
    pub fn name(self) -> &'static str {
        match self {
            QueryType::Cell => "cell",
            QueryType::Row => "row",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSample {
    pub grid: Vec<Vec<usize>>,
    pub qtype: QueryType,
    pub args: Vec<usize>,
    /// Full prompt template, including `BOS` and one `IMG` placeholder.
    pub question_tokens: Vec<usize>,
    pub answer_token: usize,
}

impl GridSample {
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.grid.iter().flatten().copied()
    }

    pub fn grid_hash(&self) -> u64 {
        grid_hash(&self.grid)
    }
}

/// FNV-1a over the grid shape and cells; stable across builds.
fn grid_hash(grid: &[Vec<usize>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(grid.len() as u64);
    for row in grid {
        eat(row.len() as u64);
        row.iter().for_each(|&c| eat(c as u64));
    }
    h
}

/// Most frequent symbol of a row when it is unique.
pub fn unique_mode(row: &[usize], symbols: usize) -> Option<usize> {
    let mut counts = vec![0usize; symbols];
    for &s in row {
        counts[s] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let first = winners.next()?.0;
    winners.next().is_none().then_some(first)
}

pub fn cell_question(task: &GridTask, r: usize, c: usize) -> Vec<usize> {
    vec![BOS, IMG, Q_CELL, task.cell_token(r, c)]
}

pub fn row_question(task: &GridTask, r: usize) -> Vec<usize> {
    vec![BOS, IMG, Q_ROW, task.row_token(r)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub task: GridTask,
    /// Fraction of cell-identity queries; the rest are row-majority.
    pub cell_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 6000,
            task: GridTask::default(),
            cell_fraction: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: GridTask,
    pub train: Vec<GridSample>,
    pub val: Vec<GridSample>,
    pub test: Vec<GridSample>,
}

/// Deterministic train/val/test splits with one distinct grid per sample,
/// so no grid is shared between splits. Within each split and query type,
/// answers cycle through the alphabet, giving a balanced answer histogram.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let t = cfg.task;
    if cfg.size < 3 {
        return Err(invalid(format!("dataset size {} below 3", cfg.size)));
    }
    if t.grid == 0 || t.symbols < 2 {
        return Err(invalid(format!("degenerate task {t:?}")));
    }
    if !(0.0..=1.0).contains(&cfg.cell_fraction) {
        return Err(invalid(format!("cell_fraction {} outside [0, 1]", cfg.cell_fraction)));
    }
    let distinct = (t.symbols as u128).checked_pow((t.grid * t.grid) as u32);
    if distinct.is_some_and(|d| d < cfg.size as u128) {
        return Err(invalid(format!(
            "only {}^{} distinct grids, cannot fill {} samples",
            t.symbols,
            t.grid * t.grid,
            cfg.size
        )));
    }
    if cfg.cell_fraction < 1.0 && t.grid >= 2 && t.symbols - 1 < t.grid - 2 {
        return Err(invalid("alphabet too small for unique row majorities"));
    }
    let n_val = ((cfg.size as f64 * cfg.val_fraction).round() as usize).max(1);
    let n_test = ((cfg.size as f64 * cfg.test_fraction).round() as usize).max(1);
    let n_train = cfg
        .size
        .checked_sub(n_val + n_test)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid("split fractions leave no training samples"))?;

    let mut rng = Rng::new(cfg.seed);
    let mut seen = HashSet::new();
    let mut make = |n: usize, rng: &mut Rng| -> Result<Vec<GridSample>> {
        let n_cell = (n as f64 * cfg.cell_fraction).round() as usize;
        let mut plan: Vec<(QueryType, usize)> = (0..n_cell)
            .map(|k| (QueryType::Cell, k % t.symbols))
            .chain((0..n - n_cell).map(|k| (QueryType::Row, k % t.symbols)))
            .collect();
        rng.shuffle(&mut plan);
        let mut out = Vec::with_capacity(n);
        for (q, a) in plan {
            let mut attempts = 0;
            loop {
                let s = sample_with_answer(&t, q, a, rng);
                if seen.insert(s.grid_hash()) {
                    out.push(s);
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(invalid("ran out of distinct grids"));
                }
            }
        }
        Ok(out)
    };
    let train = make(n_train, &mut rng)?;
    let val = make(n_val, &mut rng)?;
    let test = make(n_test, &mut rng)?;
    Ok(Dataset { task: t, train, val, test })
}

fn sample_with_answer(t: &GridTask, q: QueryType, answer: usize, rng: &mut Rng) -> GridSample {
    let g = t.grid;
    let mut grid: Vec<Vec<usize>> = (0..g).map(|_| (0..g).map(|_| rng.below(t.symbols)).collect()).collect();
    match q {
        QueryType::Cell => {
            let (r, c) = (rng.below(g), rng.below(g));
            grid[r][c] = answer;
            GridSample {
                question_tokens: cell_question(t, r, c),
                answer_token: t.symbol_token(answer),
                args: vec![r, c],
                grid,
                qtype: q,
            }
        }
        QueryType::Row => {
            let r = rng.below(g);
            let copies = if g >= 2 { 2 } else { 1 };
            let mut others: Vec<usize> = (0..t.symbols).filter(|&s| s != answer).collect();
            rng.shuffle(&mut others);
            let mut row: Vec<usize> = std::iter::repeat(answer).take(copies).chain(others.into_iter().take(g - copies)).collect();
            rng.shuffle(&mut row);
            debug_assert_eq!(unique_mode(&row, t.symbols), Some(answer));
            grid[r] = row;
            GridSample {
                question_tokens: row_question(t, r),
                answer_token: t.symbol_token(answer),
                args: vec![r],
                grid,
                qtype: q,
            }
        }
    }
}
