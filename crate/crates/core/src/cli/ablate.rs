//! Grid ablations: one train+eval run per (cell, seed), a CSV of results,
//! and paired t-tests between cells that differ along one axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{train_and_eval, write_file, write_run, RunOutcome};
use crate::datakit::LeaveOneOut;
use crate::error::{Error, Result};
use crate::evalkit::{paired_t_test, MetricsJson, TTest};
use crate::fusion::FusionMethod;
use crate::hscache::HiddenSource;
use crate::modality::{parse_subset, subset_tag};
use crate::sidenet::SideVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    Variant,
    Fusion,
    TopK,
    Modalities,
    Lr,
    DSide,
}

/// Values to sweep. An empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub variant: Vec<SideVariant>,
    pub fusion: Vec<FusionMethod>,
    pub top_k: Vec<usize>,
    /// Subset tags such as `TI` or `TIVA`.
    pub modalities: Vec<String>,
    pub lr: Vec<f64>,
    pub d_side: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Axis along which cells are paired for t-tests; defaults to the first
    /// axis with more than one value.
    pub compare: Option<GridAxis>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }

    fn axis_len(&self, a: GridAxis) -> usize {
        match a {
            GridAxis::Variant => self.variant.len(),
            GridAxis::Fusion => self.fusion.len(),
            GridAxis::TopK => self.top_k.len(),
            GridAxis::Modalities => self.modalities.len(),
            GridAxis::Lr => self.lr.len(),
            GridAxis::DSide => self.d_side.len(),
        }
    }

    pub fn compare_axis(&self) -> Option<GridAxis> {
        use GridAxis::*;
        self.compare
            .or_else(|| [Variant, Fusion, TopK, Modalities, Lr, DSide].into_iter().find(|&a| self.axis_len(a) > 1))
    }
}

/// The swept settings of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLabels {
    pub variant: SideVariant,
    pub fusion: FusionMethod,
    pub top_k: usize,
    pub modalities: String,
    pub lr: f64,
    pub d_side: usize,
}

impl CellLabels {
    pub fn id(&self) -> String {
        format!(
            "{}-{}-k{}-{}-lr{}-d{}",
            self.variant, self.fusion, self.top_k, self.modalities, self.lr, self.d_side
        )
    }

    /// Identity with `axis` blanked, used to pair cells.
    fn key_without(&self, axis: GridAxis) -> String {
        let mut c = self.clone();
        match axis {
            GridAxis::Variant => c.variant = SideVariant::Cross,
            GridAxis::Fusion => c.fusion = FusionMethod::Momef,
            GridAxis::TopK => c.top_k = 0,
            GridAxis::Modalities => c.modalities.clear(),
            GridAxis::Lr => c.lr = 0.0,
            GridAxis::DSide => c.d_side = 0,
        }
        c.id()
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub labels: CellLabels,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub cell: String,
    pub reason: String,
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Expand the grid over `base`. Cells whose config does not validate (for
/// example `top_k` above the modality count) are skipped with the reason.
pub fn expand_grid(base: &RunConfig, grid: &AblationGrid) -> Result<(Vec<Cell>, Vec<Skipped>)> {
    let subsets = or_base(&grid.modalities, subset_tag(&base.sidenet.modalities));
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &variant in &or_base(&grid.variant, base.sidenet.variant) {
        for &fusion in &or_base(&grid.fusion, base.fusion.method) {
            for &top_k in &or_base(&grid.top_k, base.fusion.top_k) {
                for tag in &subsets {
                    let ms = parse_subset(tag)?;
                    for &lr in &or_base(&grid.lr, base.train.optimizer.lr) {
                        for &d_side in &or_base(&grid.d_side, base.sidenet.d_side) {
                            let mut c = base.clone();
                            c.sidenet.variant = variant;
                            c.sidenet.modalities = ms.clone();
                            c.sidenet.d_side = d_side;
                            if !grid.d_side.is_empty() {
                                c.sidenet.bottleneck = None;
                            }
                            c.fusion.method = fusion;
                            c.fusion.top_k = top_k;
                            c.train.optimizer.lr = lr;
                            let labels = CellLabels {
                                variant,
                                fusion,
                                top_k,
                                modalities: subset_tag(&ms),
                                lr,
                                d_side,
                            };
                            match c.validate() {
                                Ok(()) => cells.push(Cell { labels, config: c }),
                                Err(e) => {
                                    log::warn!("skipping cell {}: {e}", labels.id());
                                    skipped.push(Skipped {
                                        cell: labels.id(),
                                        reason: e.to_string(),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((cells, skipped))
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub cell: usize,
    pub seed: u64,
    pub metrics: MetricsJson,
    pub per_user_hr10: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PairTest {
    pub axis: GridAxis,
    pub a: String,
    pub b: String,
    pub test: TTest,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub cells: Vec<Cell>,
    pub skipped: Vec<Skipped>,
    pub seeds: Vec<u64>,
    /// Cell-major, then seed order.
    pub runs: Vec<CellRun>,
    pub tests: Vec<PairTest>,
}

impl AblationResult {
    pub fn runs_of(&self, cell: usize) -> impl Iterator<Item = &CellRun> {
        self.runs.iter().filter(move |r| r.cell == cell)
    }

    pub fn mean_hr10(&self, cell: usize) -> f64 {
        let v: Vec<f64> = self.runs_of(cell).map(|r| r.metrics.hr10).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("cell,seed,variant,fusion,top_k,modalities,lr,d_side,HR@10,HR@20,NDCG@10,NDCG@20\n");
        for r in &self.runs {
            let l = &self.cells[r.cell].labels;
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                l.id(),
                r.seed,
                l.variant,
                l.fusion,
                l.top_k,
                l.modalities,
                l.lr,
                l.d_side,
                m.hr10,
                m.hr20,
                m.ndcg10,
                m.ndcg20
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("cell,variant,fusion,top_k,modalities,lr,d_side,seeds,mean_HR@10,mean_NDCG@10,HR@10_per_seed\n");
        for (i, c) in self.cells.iter().enumerate() {
            let l = &c.labels;
            let runs: Vec<&CellRun> = self.runs_of(i).collect();
            let n = runs.len().max(1) as f64;
            let ndcg = runs.iter().map(|r| r.metrics.ndcg10).sum::<f64>() / n;
            let per: Vec<String> = runs.iter().map(|r| r.metrics.hr10.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.id(),
                l.variant,
                l.fusion,
                l.top_k,
                l.modalities,
                l.lr,
                l.d_side,
                runs.len(),
                self.mean_hr10(i),
                ndcg,
                per.join("|")
            );
        }
        s
    }

    pub fn ttests_csv(&self) -> String {
        let mut s = String::from("axis,cell_a,cell_b,n,mean_diff,t,p,degenerate\n");
        for p in &self.tests {
            let t = &p.test;
            let axis = serde_json::to_string(&p.axis).expect("enum");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                axis.trim_matches('"'),
                p.a,
                p.b,
                t.n,
                t.mean_diff,
                t.t,
                t.p,
                t.degenerate
            );
        }
        s
    }
}

/// Run every (cell, seed) pair, up to `jobs` at a time. When `out` is given
/// each run is written to `out/<cell>/seed<seed>/` along with the CSVs.
pub fn ablate(
    base: &RunConfig,
    grid: &AblationGrid,
    split: &LeaveOneOut,
    source: &(dyn HiddenSource + Sync),
    dataset_hash: u64,
    jobs: usize,
    out: Option<&Path>,
) -> Result<AblationResult> {
    let (cells, skipped) = expand_grid(base, grid)?;
    let seeds = if grid.seeds.is_empty() { vec![0] } else { grid.seeds.clone() };
    let work: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellRun>>>> = Mutex::new((0..work.len()).map(|_| None).collect());

    let run_one = |(c, seed): (usize, u64)| -> Result<CellRun> {
        let cell = &cells[c];
        log::info!("ablate: cell {} seed {seed}", cell.labels.id());
        let o: RunOutcome = train_and_eval(&cell.config, split, source, dataset_hash, seed)?;
        if let Some(dir) = out {
            write_run(&dir.join(cell.labels.id()).join(format!("seed{seed}")), &cell.config, &o, dataset_hash)?;
        }
        Ok(CellRun {
            cell: c,
            seed,
            per_user_hr10: o.eval.per_user_hr10(),
            metrics: o.metrics,
        })
    };

    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= work.len() {
                    break;
                }
                let r = run_one(work[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let runs = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>>>()?;

    let mut result = AblationResult {
        cells,
        skipped,
        seeds,
        runs,
        tests: Vec::new(),
    };
    if let Some(axis) = grid.compare_axis() {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in result.cells.iter().enumerate() {
            groups.entry(c.labels.key_without(axis)).or_default().push(i);
        }
        for members in groups.values() {
            let first = members[0];
            let a: Vec<f64> = result.runs_of(first).flat_map(|r| r.per_user_hr10.clone()).collect();
            for &other in &members[1..] {
                let b: Vec<f64> = result.runs_of(other).flat_map(|r| r.per_user_hr10.clone()).collect();
                result.tests.push(PairTest {
                    axis,
                    a: result.cells[first].labels.id(),
                    b: result.cells[other].labels.id(),
                    test: paired_t_test(&a, &b)?,
                });
            }
        }
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        base.write_resolved(dir)?;
        write_file(&dir.join("runs.csv"), &result.runs_csv())?;
        write_file(&dir.join("summary.csv"), &result.summary_csv())?;
        write_file(&dir.join("ttests.csv"), &result.ttests_csv())?;
        let mut s = String::from("cell,reason\n");
        for k in &result.skipped {
            let _ = writeln!(s, "{},\"{}\"", k.cell, k.reason.replace('"', "'"));
        }
        write_file(&dir.join("skipped.csv"), &s)?;
    }
    Ok(result)
}
