use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use super::{train_gbdt, train_logistic_checkpoints, Matrix, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::labeling::ClassWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Logistic,
    Gbdt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Logistic, ModelKind::Gbdt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Gbdt => "gbdt",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "gbdt" => Ok(ModelKind::Gbdt),
            other => Err(Error::config(format!(
                "unknown model kind `{other}` (expected logistic or gbdt)"
            ))),
        }
    }
}

/// One grid point. `rounds` is boosting rounds for GBDT and epochs for
/// logistic regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub rounds: usize,
    pub learning_rate: f64,
}

impl GridCell {
    pub fn product(rounds: &[usize], learning_rates: &[f64]) -> Vec<GridCell> {
        rounds
            .iter()
            .flat_map(|&r| {
                learning_rates.iter().map(move |&lr| GridCell {
                    rounds: r,
                    learning_rate: lr,
                })
            })
            .collect()
    }

    fn config(&self, kind: ModelKind, base: &TrainConfig) -> TrainConfig {
        let mut cfg = *base;
        cfg.learning_rate = self.learning_rate;
        match kind {
            ModelKind::Logistic => cfg.epochs = self.rounds,
            ModelKind::Gbdt => cfg.rounds = self.rounds,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    /// Validation weighted log-loss, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    /// Rounds actually used after early stopping (GBDT only).
    pub best_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub kind: ModelKind,
    pub rows: Vec<GridRow>,
    pub selected: usize,
}

impl GridReport {
    pub fn selected_cell(&self) -> GridCell {
        self.rows[self.selected].cell
    }

    pub fn selected_loss(&self) -> f64 {
        self.rows[self.selected]
            .outcome
            .clone()
            .expect("selected row succeeded")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rounds,learning_rate,val_loss,best_round,selected,error\n");
        for (i, row) in self.rows.iter().enumerate() {
            let (loss, err) = match &row.outcome {
                Ok(l) => (format!("{l:.10}"), String::new()),
                Err(e) => (String::new(), e.replace(',', ";")),
            };
            let best = row.best_round.map(|b| b.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{loss},{best},{},{err}\n",
                row.cell.rounds,
                row.cell.learning_rate,
                u8::from(i == self.selected)
            ));
        }
        s
    }
}

fn cell_order(a: (&GridCell, f64), b: (&GridCell, f64)) -> Ordering {
    a.1.total_cmp(&b.1)
        .then(a.0.learning_rate.total_cmp(&b.0.learning_rate))
        .then(a.0.rounds.cmp(&b.0.rounds))
}

/// Train every cell, pick the minimal validation weighted log-loss (ties:
/// smaller learning rate, then fewer rounds) and return the selected model,
/// its config and the full report.
///
/// Cells sharing a learning rate share one training run: logistic epochs are
/// checkpoints of a single descent and GBDT rounds are prefixes of a single
/// boosting run, so each cell equals its standalone model.
pub fn grid_search(
    kind: ModelKind,
    cells: &[GridCell],
    base: &TrainConfig,
    train: (&Matrix, &[u8]),
    val: (&Matrix, &[u8]),
    class_weights: &ClassWeights,
) -> Result<(Model, TrainConfig, GridReport)> {
    if cells.is_empty() {
        return Err(Error::config("model grid is empty"));
    }
    let (x, y) = train;
    let (xv, yv) = val;

    let mut models: Vec<std::result::Result<Model, Error>> = Vec::with_capacity(cells.len());
    let mut rates: Vec<f64> = cells.iter().map(|c| c.learning_rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut by_cell: Vec<Option<std::result::Result<Model, String>>> = vec![None; cells.len()];
    for &lr in &rates {
        let members: Vec<usize> = (0..cells.len())
            .filter(|&i| cells[i].learning_rate == lr)
            .collect();
        let mut rounds: Vec<usize> = members.iter().map(|&i| cells[i].rounds).collect();
        rounds.sort_unstable();
        rounds.dedup();
        let max_rounds = *rounds.last().expect("non-empty group");
        let cfg = GridCell {
            rounds: max_rounds,
            learning_rate: lr,
        }
        .config(kind, base);
        match kind {
            ModelKind::Logistic => match train_logistic_checkpoints(x, y, class_weights, &cfg, &rounds) {
                Ok(ms) => {
                    for &i in &members {
                        let pos = rounds.binary_search(&cells[i].rounds).expect("checkpoint");
                        by_cell[i] = Some(Ok(Model::Logistic(ms[pos].clone())));
                    }
                }
                Err(_) => {
                    // a shared run diverging late says nothing about shorter cells
                    for &i in &members {
                        let c = cells[i].config(kind, base);
                        by_cell[i] = Some(
                            train_logistic_checkpoints(x, y, class_weights, &c, &[c.epochs])
                                .map(|mut v| Model::Logistic(v.pop().expect("one")))
                                .map_err(|e| e.to_string()),
                        );
                    }
                }
            },
            ModelKind::Gbdt => match train_gbdt(x, y, class_weights, &cfg, (xv, yv)) {
                Ok(full) => {
                    for &i in &members {
                        by_cell[i] = Some(Ok(Model::Gbdt(full.truncated(cells[i].rounds))));
                    }
                }
                Err(e) => {
                    for &i in &members {
                        by_cell[i] = Some(Err(e.to_string()));
                    }
                }
            },
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for (cell, m) in cells.iter().zip(by_cell) {
        let m = m.expect("every cell trained");
        let (outcome, best_round, model) = match m {
            Ok(model) => {
                let loss = model
                    .predict_proba(xv)
                    .map(|p| p.weighted_log_loss(yv, class_weights));
                let best_round = match &model {
                    Model::Gbdt(g) => Some(g.best_round),
                    Model::Logistic(_) => None,
                };
                match loss {
                    Ok(l) if l.is_finite() => (Ok(l), best_round, Ok(model)),
                    Ok(_) => (
                        Err("non-finite validation loss".to_string()),
                        best_round,
                        Err(Error::Divergence("non-finite validation loss".into())),
                    ),
                    Err(e) => (Err(e.to_string()), best_round, Err(e)),
                }
            }
            Err(msg) => (Err(msg.clone()), None, Err(Error::Divergence(msg))),
        };
        rows.push(GridRow {
            cell: *cell,
            outcome,
            best_round,
        });
        models.push(model);
    }

    let selected = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.outcome.as_ref().ok().map(|&l| (i, l)))
        .min_by(|a, b| cell_order((&cells[a.0], a.1), (&cells[b.0], b.1)))
        .map(|(i, _)| i);
    let Some(selected) = selected else {
        let first = rows[0].outcome.clone().err().unwrap_or_default();
        return Err(Error::Divergence(format!(
            "every grid cell failed; first failure: {first}"
        )));
    };
    let model = models.swap_remove(selected).expect("selected model succeeded");
    let cfg = cells[selected].config(kind, base);
    Ok((
        model,
        cfg,
        GridReport {
            kind,
            rows,
            selected,
        },
    ))
}
