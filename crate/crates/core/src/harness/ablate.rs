//! Ablation grids: each cell is one model configuration trained and
//! evaluated with a shared seed and budget.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::evaluate::{evaluate, EvalReport};
use super::shapeworld::Dataset;
use super::train::{smoothed_loss, TrainConfig, Trainer};
use crate::backbone::{CONV3_3, CONV4_3, CONV7_2, FC_7};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionOp, PyramidVariant};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Budget of the no-fusion run that warm-starting cells load from;
    /// `train.iterations` when unset.
    pub pretrain_iterations: Option<usize>,
    /// Fraction of `train.iterations` given to cells that start from the
    /// pre-trained detector.
    pub warm_start_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0],
            pretrain_iterations: None,
            warm_start_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    None,
    /// Backbone weights of the pre-trained detector only.
    Backbone,
    /// Every same-named, same-shaped tensor of the pre-trained detector.
    Detector,
}

/// Named source sets used in the tables.
pub fn source_set(name: &str) -> Result<Vec<String>> {
    let v: &[&str] = match name {
        "conv3-conv7" => &[CONV3_3, CONV4_3, FC_7, CONV7_2],
        "conv4-conv7" => &[CONV4_3, FC_7, CONV7_2],
        "conv4-fc7" => &[CONV4_3, FC_7],
        custom => return Ok(custom.split('+').map(str::to_string).collect()),
    };
    Ok(v.iter().map(|s| s.to_string()).collect())
}

fn source_label(sources: &[String]) -> String {
    for name in ["conv3-conv7", "conv4-conv7", "conv4-fc7"] {
        if source_set(name).is_ok_and(|s| s == sources) {
            return name.to_string();
        }
    }
    sources.join("+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub model: ModelConfig,
    pub warm_start: WarmStart,
}

impl Cell {
    fn fusion(base: &ModelConfig, f: FusionConfig, warm_start: WarmStart, label: String) -> Cell {
        Cell {
            label,
            model: ModelConfig {
                fusion: Some(f),
                ..base.clone()
            },
            warm_start,
        }
    }

    pub fn baseline(base: &ModelConfig) -> Cell {
        Cell {
            label: "no-fusion".into(),
            model: ModelConfig {
                fusion: None,
                ..base.clone()
            },
            warm_start: WarmStart::None,
        }
    }

    pub fn bn(&self) -> Option<bool> {
        self.model.fusion.as_ref().map(|f| f.normalize_after_fusion)
    }

    pub fn fusion_name(&self) -> &'static str {
        match self.model.fusion.as_ref().map(|f| f.fusion_op) {
            Some(FusionOp::Concat) => "Concat",
            Some(FusionOp::ElementSum) => "ele-sum",
            None => "none",
        }
    }

    pub fn layers(&self) -> String {
        match &self.model.fusion {
            Some(f) => source_label(&f.source_layers),
            None => source_label(&self.model.plain.source_layers),
        }
    }

    pub fn structure(&self) -> String {
        match &self.model.fusion {
            Some(f) => format!("{:?}", f.pyramid_variant),
            None => "plain".into(),
        }
    }
}

/// Projection width for a source set, keeping the base width of the
/// template fusion config.
fn with_sources(base: &FusionConfig, sources: &[String]) -> FusionConfig {
    let width = base.projection_channels.first().copied().unwrap_or(256);
    let names: Vec<&str> = sources.iter().map(String::as_str).collect();
    base.clone().with_sources(&names, width)
}

fn template(base: &ModelConfig) -> FusionConfig {
    base.fusion.clone().unwrap_or_default()
}

/// The seven rows of the fusion ablation table, in order.
pub fn table2(base: &ModelConfig) -> Vec<Cell> {
    let t = template(base);
    let rows: [(bool, WarmStart, FusionOp, &str); 7] = [
        (true, WarmStart::None, FusionOp::Concat, "conv3-conv7"),
        (true, WarmStart::Detector, FusionOp::Concat, "conv3-conv7"),
        (true, WarmStart::Detector, FusionOp::Concat, "conv4-conv7"),
        (true, WarmStart::Detector, FusionOp::Concat, "conv4-fc7"),
        (true, WarmStart::Backbone, FusionOp::Concat, "conv3-conv7"),
        (false, WarmStart::Detector, FusionOp::Concat, "conv3-conv7"),
        (true, WarmStart::Detector, FusionOp::ElementSum, "conv3-conv7"),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(bn, ws, op, layers))| {
            let mut f = with_sources(&t, &source_set(layers).expect("named set"));
            f.normalize_after_fusion = bn;
            f.fusion_op = op;
            Cell::fusion(base, f, ws, format!("row{}", i + 1))
        })
        .collect()
}

/// One row per pyramid structure.
pub fn table1(base: &ModelConfig) -> Vec<Cell> {
    let t = template(base);
    [PyramidVariant::A, PyramidVariant::B, PyramidVariant::C]
        .into_iter()
        .map(|v| {
            let f = FusionConfig {
                pyramid_variant: v,
                ..t.clone()
            };
            Cell::fusion(base, f, WarmStart::None, format!("variant {v:?}"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    FusionOp(Vec<FusionOp>),
    NormalizeAfterFusion(Vec<bool>),
    SourceLayers(Vec<Vec<String>>),
    PyramidVariant(Vec<PyramidVariant>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxesSpec {
    Table1,
    Table2,
    Grid { axes: Vec<Axis>, baseline: bool },
}

impl FromStr for AxesSpec {
    type Err = Error;

    /// `table1`, `table2`, or `;`-separated `axis=v1,v2` terms over
    /// `fusion_op`, `normalize_after_fusion`, `source_layers`,
    /// `pyramid_variant`, plus a bare `baseline` term for the no-fusion cell.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("axes `{s}`: {m}"));
        match s.trim() {
            "table1" => return Ok(AxesSpec::Table1),
            "table2" => return Ok(AxesSpec::Table2),
            _ => {}
        }
        let mut axes = Vec::new();
        let mut baseline = false;
        for term in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            if term == "baseline" || term == "no_fusion" {
                baseline = true;
                continue;
            }
            let (key, values) = term.split_once('=').ok_or_else(|| bad(format!("`{term}` is not key=values")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(bad(format!("`{key}` has no values")));
            }
            let axis = match key.trim() {
                "fusion_op" => Axis::FusionOp(
                    values
                        .iter()
                        .map(|v| match *v {
                            "concat" => Ok(FusionOp::Concat),
                            "element_sum" | "ele-sum" => Ok(FusionOp::ElementSum),
                            o => Err(bad(format!("unknown fusion_op `{o}`"))),
                        })
                        .collect::<Result<_>>()?,
                ),
                "normalize_after_fusion" | "bn" => Axis::NormalizeAfterFusion(
                    values
                        .iter()
                        .map(|v| v.parse::<bool>().map_err(|_| bad(format!("`{v}` is not a bool"))))
                        .collect::<Result<_>>()?,
                ),
                "source_layers" => {
                    Axis::SourceLayers(values.iter().map(|v| source_set(v)).collect::<Result<_>>()?)
                }
                "pyramid_variant" => Axis::PyramidVariant(
                    values
                        .iter()
                        .map(|v| match *v {
                            "A" | "a" => Ok(PyramidVariant::A),
                            "B" | "b" => Ok(PyramidVariant::B),
                            "C" | "c" => Ok(PyramidVariant::C),
                            o => Err(bad(format!("unknown pyramid_variant `{o}`"))),
                        })
                        .collect::<Result<_>>()?,
                ),
                other => return Err(bad(format!("unknown axis `{other}`"))),
            };
            axes.push(axis);
        }
        if axes.is_empty() && !baseline {
            return Err(bad("no axes".into()));
        }
        Ok(AxesSpec::Grid { axes, baseline })
    }
}

impl AxesSpec {
    pub fn cells(&self, base: &ModelConfig) -> Vec<Cell> {
        match self {
            AxesSpec::Table1 => table1(base),
            AxesSpec::Table2 => table2(base),
            AxesSpec::Grid { axes, baseline } => {
                let mut configs = vec![template(base)];
                for axis in axes {
                    configs = configs
                        .into_iter()
                        .flat_map(|f| -> Vec<FusionConfig> {
                            match axis {
                                Axis::FusionOp(v) => {
                                    v.iter().map(|&op| FusionConfig { fusion_op: op, ..f.clone() }).collect()
                                }
                                Axis::NormalizeAfterFusion(v) => v
                                    .iter()
                                    .map(|&bn| FusionConfig {
                                        normalize_after_fusion: bn,
                                        ..f.clone()
                                    })
                                    .collect(),
                                Axis::SourceLayers(v) => v.iter().map(|s| with_sources(&f, s)).collect(),
                                Axis::PyramidVariant(v) => v
                                    .iter()
                                    .map(|&p| FusionConfig {
                                        pyramid_variant: p,
                                        ..f.clone()
                                    })
                                    .collect(),
                            }
                        })
                        .collect();
                }
                let mut cells: Vec<Cell> = if axes.is_empty() {
                    Vec::new()
                } else {
                    configs
                        .into_iter()
                        .enumerate()
                        .map(|(i, f)| Cell::fusion(base, f, WarmStart::None, format!("cell{}", i + 1)))
                        .collect()
                };
                if *baseline {
                    cells.push(Cell::baseline(base));
                }
                cells
            }
        }
    }

    fn needs_pretraining(cells: &[Cell]) -> bool {
        cells.iter().any(|c| c.warm_start != WarmStart::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub iterations: usize,
    pub map: f64,
    pub small_ap: Option<f64>,
    pub large_ap: Option<f64>,
    /// Mean loss over the last 50 iterations.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub bn: Option<bool>,
    pub pretrained_vgg: bool,
    pub pretrained_ssd: bool,
    pub fusion: String,
    pub fusion_layers: String,
    pub structure: String,
    pub map: f64,
    pub small_ap: Option<f64>,
    pub large_ap: Option<f64>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axes: AxesSpec,
    pub rows: Vec<AblationRow>,
    pub table: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "×"
    }
}

/// Markdown table; the columns follow the kind of grid.
pub fn render_table(axes: &AxesSpec, rows: &[AblationRow]) -> String {
    let mut s = String::new();
    match axes {
        AxesSpec::Table1 => {
            s.push_str("| structure | mAP | small AP | large AP |\n|---|---|---|---|\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.structure,
                    fmt_ap(Some(r.map)),
                    fmt_ap(r.small_ap),
                    fmt_ap(r.large_ap)
                );
            }
        }
        _ => {
            s.push_str(
                "| cell | BN | pre-trained VGG | pre-trained SSD | feature fusion | fusion layers | structure | mAP | small AP | large AP |\n|---|---|---|---|---|---|---|---|---|---|\n",
            );
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.label,
                    r.bn.map_or("-", mark),
                    mark(r.pretrained_vgg),
                    mark(r.pretrained_ssd),
                    r.fusion,
                    r.fusion_layers,
                    r.structure,
                    fmt_ap(Some(r.map)),
                    fmt_ap(r.small_ap),
                    fmt_ap(r.large_ap)
                );
            }
        }
    }
    s
}

/// Progress notifications from [`run_ablation`].
#[derive(Debug, Clone)]
pub enum Progress<'a> {
    Pretrain { seed: u64 },
    Cell { label: &'a str, seed: u64 },
    Done { label: &'a str, seed: u64, report: &'a EvalReport },
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(
    cell: &Cell,
    train: &TrainConfig,
    run: &RunConfig,
    pretrained: Option<&Checkpoint>,
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<(SeedResult, EvalReport)> {
    let mut tc = train.clone();
    tc.init_checkpoint = None;
    tc.resume = false;
    let init = match cell.warm_start {
        WarmStart::None => None,
        WarmStart::Backbone => {
            tc.init_prefixes = vec!["backbone.".into()];
            pretrained
        }
        WarmStart::Detector => {
            tc.init_prefixes = Vec::new();
            let frac = run.ablate.warm_start_fraction;
            tc.iterations = ((tc.iterations as f64 * frac).round() as usize).max(1);
            tc.lr_steps = tc.lr_steps.iter().map(|&s| (s as f64 * frac).round() as usize).collect();
            pretrained
        }
    };
    if cell.warm_start != WarmStart::None && init.is_none() {
        return Err(Error::Config(format!("cell `{}` needs a pre-trained checkpoint", cell.label)));
    }
    let mut t = Trainer::with_init(cell.model.clone(), tc, train_data, init)?;
    t.run(|_, _| {})?;
    let report = evaluate(&t.detector, &mut t.store, test_data, &run.eval)?;
    let n = t.log.len();
    Ok((
        SeedResult {
            seed: t.config.seed,
            iterations: n,
            map: report.map,
            small_ap: report.small.map,
            large_ap: report.large.map,
            final_loss: smoothed_loss(&t.log, n, 50).unwrap_or(f64::NAN),
        },
        report,
    ))
}

/// The no-fusion detector that warm-starting cells load from.
pub fn pretrain(run: &RunConfig, seed: u64, train_data: &Dataset) -> Result<Checkpoint> {
    let mut tc = run.train.clone();
    tc.seed = seed;
    tc.init_checkpoint = None;
    tc.resume = false;
    if let Some(n) = run.ablate.pretrain_iterations {
        tc.iterations = n;
    }
    let mut t = Trainer::with_init(Cell::baseline(&run.model).model, tc, train_data, None)?;
    t.run(|_, _| {})?;
    Ok(t.checkpoint())
}

pub fn run_ablation(
    run: &RunConfig,
    axes: &AxesSpec,
    train_data: &Dataset,
    test_data: &Dataset,
    mut progress: impl FnMut(Progress),
) -> Result<AblationReport> {
    let cells = axes.cells(&run.model);
    for c in &cells {
        let f = c.model.fusion.as_ref();
        match f {
            Some(f) => f.validate(&c.model.backbone)?,
            None => c.model.plain.validate(&c.model.backbone)?,
        }
    }
    let seeds = if run.ablate.seeds.is_empty() { vec![run.train.seed] } else { run.ablate.seeds.clone() };
    let mut results: Vec<Vec<SeedResult>> = vec![Vec::new(); cells.len()];
    for &seed in &seeds {
        let pretrained = if AxesSpec::needs_pretraining(&cells) {
            progress(Progress::Pretrain { seed });
            Some(pretrain(run, seed, train_data)?)
        } else {
            None
        };
        let tc = TrainConfig {
            seed,
            ..run.train.clone()
        };
        for (cell, out) in cells.iter().zip(results.iter_mut()) {
            progress(Progress::Cell {
                label: &cell.label,
                seed,
            });
            let (r, report) = run_cell(cell, &tc, run, pretrained.as_ref(), train_data, test_data)?;
            progress(Progress::Done {
                label: &cell.label,
                seed,
                report: &report,
            });
            out.push(r);
        }
    }
    let rows: Vec<AblationRow> = cells
        .iter()
        .zip(results)
        .map(|(c, seeds)| AblationRow {
            label: c.label.clone(),
            bn: c.bn(),
            pretrained_vgg: c.warm_start == WarmStart::Backbone,
            pretrained_ssd: c.warm_start == WarmStart::Detector,
            fusion: c.fusion_name().into(),
            fusion_layers: c.layers(),
            structure: c.structure(),
            map: mean(seeds.iter().map(|s| s.map)).unwrap_or(f64::NAN),
            small_ap: mean(seeds.iter().filter_map(|s| s.small_ap)),
            large_ap: mean(seeds.iter().filter_map(|s| s.large_ap)),
            seeds,
        })
        .collect();
    Ok(AblationReport {
        axes: axes.clone(),
        table: render_table(axes, &rows),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_rows_are_distinct_and_valid() {
        let base = ModelConfig::default();
        let cells = table2(&base);
        assert_eq!(cells.len(), 7);
        for (i, a) in cells.iter().enumerate() {
            a.model.fusion.as_ref().unwrap().validate(&a.model.backbone).unwrap();
            for b in &cells[..i] {
                assert!(a.model != b.model || a.warm_start != b.warm_start);
            }
        }
        let f = cells[2].model.fusion.as_ref().unwrap();
        assert_eq!(f.source_layers, vec!["conv4_3", "fc_7", "conv7_2"]);
        let f = cells[6].model.fusion.as_ref().unwrap();
        assert_eq!(f.fusion_op, FusionOp::ElementSum);
        assert_eq!(f.source_layers.len(), 4);
        assert_eq!(cells[4].warm_start, WarmStart::Backbone);
        assert!(!cells[5].model.fusion.as_ref().unwrap().normalize_after_fusion);
    }

    #[test]
    fn table1_is_the_three_variants() {
        let cells = table1(&ModelConfig::default());
        let v: Vec<_> = cells.iter().map(|c| c.model.fusion.as_ref().unwrap().pyramid_variant).collect();
        assert_eq!(v, vec![PyramidVariant::A, PyramidVariant::B, PyramidVariant::C]);
    }

    #[test]
    fn grid_parsing_and_expansion() {
        let spec: AxesSpec = "fusion_op=concat,element_sum; normalize_after_fusion=true,false; baseline".parse().unwrap();
        let cells = spec.cells(&ModelConfig::default());
        assert_eq!(cells.len(), 5);
        assert!(cells[4].model.fusion.is_none());
        let only: AxesSpec = "baseline".parse().unwrap();
        assert_eq!(only.cells(&ModelConfig::default()).len(), 1);
        let layers: AxesSpec = "source_layers=conv4-fc7,conv4_3+conv7_2".parse().unwrap();
        let cells = layers.cells(&ModelConfig::default());
        assert_eq!(cells[1].model.fusion.as_ref().unwrap().source_layers, vec!["conv4_3", "conv7_2"]);
        assert!("depth=3".parse::<AxesSpec>().is_err());
        assert!("fusion_op=max".parse::<AxesSpec>().is_err());
    }

    #[test]
    fn table_render_has_one_line_per_row() {
        let cells = table2(&ModelConfig::default());
        let rows: Vec<AblationRow> = cells
            .iter()
            .map(|c| AblationRow {
                label: c.label.clone(),
                bn: c.bn(),
                pretrained_vgg: c.warm_start == WarmStart::Backbone,
                pretrained_ssd: c.warm_start == WarmStart::Detector,
                fusion: c.fusion_name().into(),
                fusion_layers: c.layers(),
                structure: c.structure(),
                map: 0.5,
                small_ap: None,
                large_ap: Some(0.25),
                seeds: vec![],
            })
            .collect();
        let t = render_table(&AxesSpec::Table2, &rows);
        assert_eq!(t.lines().count(), 9);
        assert!(t.contains("| row7 | ✓ | × | ✓ | ele-sum | conv3-conv7 | B | 50.0 | - | 25.0 |"));
    }
}
