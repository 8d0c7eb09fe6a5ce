//! Directional ablation suite: each cell is one training run from a
//! variation of a base config on one of the synthetic datasets.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gla::AttentionMode;
use crate::harness::config::RunConfig;
use crate::harness::metrics::EpochMetrics;
use crate::harness::train::train;
use crate::model::Variant;
use crate::projection::ProjectionMode;
use crate::synthdata::Dataset;

/// Named datasets the suite draws from.
pub struct AblationData<'a> {
    /// Default async class table.
    pub asynchronous: &'a Dataset,
    /// Tight table rendered in sync mode.
    pub synchronous: Option<&'a Dataset>,
    /// Async table whose classes differ in motion scale.
    pub motion_scale: Option<&'a Dataset>,
}

impl<'a> AblationData<'a> {
    fn get(&self, name: &str) -> Option<&'a Dataset> {
        match name {
            "async" => Some(self.asynchronous),
            "sync" => self.synchronous,
            "motion-scale" => self.motion_scale,
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub group: &'static str,
    pub cell: &'static str,
    pub dataset: &'static str,
    pub config: RunConfig,
}

/// Every cell of the suite, derived from `base`.
pub fn ablation_cells(base: &RunConfig) -> Vec<AblationCell> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        c.out_dir = None;
        f(&mut c);
        c
    };
    let gla = with(&|c| c.model.variant = Variant::Gla);
    let variant = |v: Variant| with(&|c| c.model.variant = v);
    let cell = |group, cell, dataset, config: RunConfig| AblationCell {
        group,
        cell,
        dataset,
        config,
    };
    vec![
        cell(
            "stream",
            "leader-only",
            "async",
            variant(Variant::LeaderOnly),
        ),
        cell(
            "stream",
            "assistant-only",
            "async",
            variant(Variant::AssistantOnly),
        ),
        cell(
            "stream",
            "late-fusion",
            "async",
            variant(Variant::LateFusion),
        ),
        cell("stream", "gla", "async", gla.clone()),
        cell("swap", "leader-queries", "async", gla.clone()),
        cell(
            "swap",
            "assistant-queries",
            "async",
            with(&|c| c.model.swap_inputs = true),
        ),
        cell(
            "blocks",
            "block5",
            "motion-scale",
            with(&|c| c.model.projection.blocks = vec![5]),
        ),
        cell(
            "blocks",
            "block3-4-5",
            "motion-scale",
            with(&|c| c.model.projection.blocks = vec![3, 4, 5]),
        ),
        cell("attention", "cross", "async", gla.clone()),
        cell(
            "attention",
            "self",
            "async",
            with(&|c| c.model.gla.attention = AttentionMode::SelfAblation),
        ),
        cell("modules", "one", "async", gla.clone()),
        cell(
            "modules",
            "two",
            "async",
            with(&|c| c.model.gla.modules = 2),
        ),
        cell(
            "components",
            "no-ap-no-gla",
            "async",
            variant(Variant::PooledConcat),
        ),
        cell(
            "components",
            "ap-no-gla",
            "async",
            variant(Variant::ProjectedConcat),
        ),
        cell("components", "ap-gla", "async", gla.clone()),
        cell("variant", "abstract-sync", "sync", gla.clone()),
        cell(
            "variant",
            "temporal-sync",
            "sync",
            with(&|c| c.model.projection.mode = ProjectionMode::Temporal),
        ),
        cell("variant", "abstract-async", "async", gla),
        cell(
            "variant",
            "temporal-async",
            "async",
            with(&|c| c.model.projection.mode = ProjectionMode::Temporal),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub cell: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub params: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, group: &str, cell: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.cell == cell)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("group,cell,dataset,seed,epochs,params,train_accuracy,test_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6}\n",
                r.group,
                r.cell,
                r.dataset,
                r.seed,
                r.epochs,
                r.params,
                r.train_accuracy,
                r.test_accuracy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains every cell whose group is in `groups` (all when `None`). Cells
/// with identical config and dataset are trained once and shared; cells
/// whose dataset is missing are skipped.
pub fn run_ablation_suite(
    base: &RunConfig,
    data: &AblationData<'_>,
    groups: Option<&[&str]>,
    mut progress: impl FnMut(&AblationCell, Option<&EpochMetrics>),
) -> Result<AblationReport> {
    let mut cache: HashMap<(String, &'static str), AblationRow> = HashMap::new();
    let mut report = AblationReport::default();
    for cell in ablation_cells(base) {
        if groups.is_some_and(|g| !g.contains(&cell.group)) {
            continue;
        }
        let Some(dataset) = data.get(cell.dataset) else {
            continue;
        };
        let mut config = cell.config.clone();
        config.model.classes = dataset.num_classes();
        let key = (config.to_json(), cell.dataset);
        let row = match cache.get(&key) {
            Some(row) => row.clone(),
            None => {
                progress(&cell, None);
                let outcome = train(&config, dataset, |m| progress(&cell, Some(m)))?;
                let last = outcome.history.last();
                let row = AblationRow {
                    group: String::new(),
                    cell: String::new(),
                    dataset: cell.dataset.to_string(),
                    seed: config.seed,
                    epochs: config.epochs,
                    params: outcome.checkpoint.params.iter().map(|(_, t)| t.len()).sum(),
                    train_accuracy: last.map_or(0.0, |m| m.train_accuracy),
                    test_accuracy: outcome.test.accuracy,
                };
                cache.insert(key, row.clone());
                row
            }
        };
        report.rows.push(AblationRow {
            group: cell.group.to_string(),
            cell: cell.cell.to_string(),
            ..row
        });
    }
    Ok(report)
}
