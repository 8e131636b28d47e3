//! The ablation matrix: conditioning strategies, ViCiCo and the
//! swap-to-one collapse schedule trained at equal budget.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{RunConfig, SwapSchedule};
use super::run::{cmd_eval, cmd_train, list_checkpoints, load_model, stamp_tsv, Session};
use crate::conditioning::StrategyKind;
use crate::error::{Error, Result};
use crate::metrics::{fmt_fid, ProtocolKind};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: &'static str,
    pub strategy: StrategyKind,
    pub vicico: bool,
    pub p_swap: SwapSchedule,
}

/// The six cells; the swap schedule switches to 1 halfway through.
pub fn ablation_cells(total_kimg: f64) -> Vec<AblationCell> {
    let cell = |name, strategy, vicico, p_swap| AblationCell {
        name,
        strategy,
        vicico,
        p_swap,
    };
    vec![
        cell("view", StrategyKind::View, false, SwapSchedule::Auto),
        cell("view_semantic", StrategyKind::ViewSemantic, false, SwapSchedule::Auto),
        cell("semantic", StrategyKind::SemanticFront, false, SwapSchedule::Auto),
        cell("semantic_vicico", StrategyKind::SemanticFront, true, SwapSchedule::Auto),
        cell("unconditional", StrategyKind::Unconditional, false, SwapSchedule::Auto),
        cell("view_swap1", StrategyKind::View, false, SwapSchedule::swap_to_one(total_kimg / 2.0)),
    ]
}

impl AblationCell {
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.name = format!("{}_{}", base.name, self.name);
        c.strategy = self.strategy;
        c.vicico = self.vicico;
        c.p_swap = self.p_swap.clone();
        c.protocols = ProtocolKind::ALL.to_vec();
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub fid_view: Option<f64>,
    pub fid_random: f64,
    pub fid_front: f64,
    /// Diversity of random-view samples at the final checkpoint.
    pub mknnd: f64,
    pub collapsed: bool,
    pub collapse_kimg: Option<f64>,
    pub checkpoint: PathBuf,
    pub config_hash: String,
}

impl AblationRow {
    /// Directional bias: FID-random over FID-front.
    pub fn bias_ratio(&self) -> f64 {
        self.fid_random / self.fid_front
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Cells that produced no result, with the reason.
    pub missing: Vec<(String, String)>,
}

impl AblationReport {
    pub const HEADER: &'static str =
        "cell\tfid_view\tfid_random\tfid_front\tmknnd\tbias_ratio\tcollapsed\tcollapse_kimg\tcheckpoint\tcell_config_hash";

    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\n",
                r.cell,
                fmt_fid(r.fid_view),
                r.fid_random,
                r.fid_front,
                r.mknnd,
                r.bias_ratio(),
                r.collapsed,
                r.collapse_kimg.map_or_else(|| "—".to_string(), |k| format!("{k}")),
                r.checkpoint.display(),
                r.config_hash
            ));
        }
        s
    }

    pub fn missing_tsv(&self) -> String {
        let mut s = String::from("cell\treason\n");
        for (c, why) in &self.missing {
            s.push_str(&format!("{c}\t{}\n", why.replace(['\t', '\n'], " ")));
        }
        s
    }

    /// FID-random(view) > FID-random(semantic) > FID-random(semantic+ViCiCo).
    pub fn ordering_holds(&self) -> Option<bool> {
        let f = |c: &str| self.row(c).map(|r| r.fid_random);
        Some(f("view")? > f("semantic")? && f("semantic")? > f("semantic_vicico")?)
    }
}

fn run_cell(base: &RunConfig, ds: &Dataset, cell: &AblationCell, dir: &Path) -> Result<AblationRow> {
    let cfg = cell.config(base);
    let session = Session::new(cfg, ds.clone())?;
    let resume = !list_checkpoints(dir)?.is_empty();
    let summary = cmd_train(&session, dir, resume)?;
    let model = load_model(&summary.final_checkpoint)?;
    let report = cmd_eval(&model, &session, Some(&dir.join("eval.tsv")))?;
    let need = |k: ProtocolKind| {
        report
            .fid(k)
            .ok_or_else(|| Error::invalid(format!("cell {} has no {k}", cell.name)))
    };
    let mknnd = report
        .rows
        .iter()
        .find(|r| r.protocol == ProtocolKind::FidRandom)
        .map(|r| r.mknnd)
        .unwrap_or(f64::NAN);
    Ok(AblationRow {
        cell: cell.name.to_string(),
        fid_view: report.fid(ProtocolKind::FidView),
        fid_random: need(ProtocolKind::FidRandom)?,
        fid_front: need(ProtocolKind::FidFront)?,
        mknnd,
        collapsed: summary.collapse.as_ref().is_some_and(|c| c.collapsed()),
        collapse_kimg: summary.collapse_kimg(),
        checkpoint: summary.final_checkpoint.clone(),
        config_hash: summary.config_hash,
    })
}

/// Trains and evaluates every cell under `out_dir/<cell>`, resuming cells
/// that already have checkpoints. Failed cells are listed as missing; the
/// report is written to `ablation.tsv` and `missing.tsv`.
pub fn cmd_ablate(base: &RunConfig, ds: &Dataset, cells: &[AblationCell], out_dir: &Path) -> Result<AblationReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = AblationReport::default();
    for cell in cells {
        match run_cell(base, ds, cell, &out_dir.join(cell.name)) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.missing.push((cell.name.to_string(), e.to_string())),
        }
    }
    let base_hash = base.hash();
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, stamp_tsv(&text, &base_hash)).map_err(|e| Error::io(&p, e))
    };
    write("ablation.tsv", report.to_tsv())?;
    write("missing.tsv", report.missing_tsv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::tests::tiny_run_config;
    use crate::harness::run::load_dataset;

    #[test]
    fn cells_cover_the_matrix() {
        let cells = ablation_cells(300.0);
        assert_eq!(cells.len(), 6);
        let swap = cells.iter().find(|c| c.name == "view_swap1").unwrap();
        assert_eq!(swap.p_swap, SwapSchedule::Steps(vec![(0.0, 0.5), (150.0, 1.0)]));
        let base = RunConfig::default();
        let hashes: std::collections::BTreeSet<String> = cells.iter().map(|c| c.config(&base).hash()).collect();
        assert_eq!(hashes.len(), 6);
    }

    #[test]
    fn semantic_cells_leave_fid_view_blank_and_failures_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny_run_config();
        base.total_kimg = 0.002;
        base.subjects = 70;
        base.views = 2;
        base.n_eval = 256;
        let ds = load_dataset(&base).unwrap();
        let mut cells = ablation_cells(base.total_kimg);
        cells.retain(|c| c.name == "semantic" || c.name == "view");
        let mut broken = cells[0].clone();
        broken.name = "broken";
        cells.push(broken);
        // a plain file where the cell directory should go
        fs::write(dir.path().join("broken"), "x").unwrap();
        let report = cmd_ablate(&base, &ds, &cells, dir.path()).unwrap();
        assert!(report.row("semantic").unwrap().fid_view.is_none());
        assert!(report.row("view").unwrap().fid_view.is_some());
        assert!(report.to_tsv().contains("semantic\t—"));
        assert_eq!(report.missing.len(), 1);
        assert_eq!(report.missing[0].0, "broken");
        assert!(dir.path().join("ablation.tsv").exists());
        assert!(fs::read_to_string(dir.path().join("missing.tsv")).unwrap().contains("broken"));
    }
}
