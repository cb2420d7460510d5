use std::fs;
use std::time::Instant;

use crate::apf::{FusionFlags, Normalization};
use crate::error::{Error, Result};
use crate::spg::{InitStrategy, Variant};

use super::config::ExperimentConfig;
use super::lab::{CellKey, Frozen, Lab, BASELINE, SAGE};
use super::report::{AttentionReport, ComparisonRow, ComparisonTable, MetricsReport};
use super::workspace::{write_file, Workspace, World};

/// Which ablation grid to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Generators,
    Init,
    Fusion,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generators" => Ok(Suite::Generators),
            "init" => Ok(Suite::Init),
            "fusion" => Ok(Suite::Fusion),
            _ => Err(Error::Config(format!("unknown ablation suite `{s}` (generators, init, fusion)"))),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Generators => "generators",
            Suite::Init => "init",
            Suite::Fusion => "fusion",
        }
    }
}

pub fn init_label(init: InitStrategy) -> &'static str {
    match init {
        InitStrategy::Zero => "Zero",
        InitStrategy::Uniform => "Uniform",
        InitStrategy::Normal => "Normal",
        InitStrategy::Meta => "Meta",
    }
}

/// Component list of a fusion flag set, e.g. `PN+softmax+tanh`.
pub fn fusion_label(flags: &FusionFlags) -> String {
    let mut parts = Vec::new();
    match flags.normalization {
        Normalization::PerChannel => parts.push("PN"),
        Normalization::WholeTensor => parts.push("PN(whole)"),
        Normalization::None => {}
    }
    if flags.softmax {
        parts.push("softmax");
    }
    if flags.tanh {
        parts.push("tanh");
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

fn empty_table(lab: &Lab, title: &str, row_header: &str, seeds: &[u64]) -> Result<ComparisonTable> {
    let mut columns = lab.target_names();
    columns.push("avg".into());
    Ok(ComparisonTable {
        title: title.into(),
        row_header: row_header.into(),
        columns,
        seeds: seeds.to_vec(),
        rows: Vec::new(),
        oracle_fingerprint: format!("{:016x}", lab.frozen.oracle.fingerprint()),
        encoder_fingerprint: format!("{:016x}", lab.frozen.encoder.fingerprint()),
        data_digest: lab.data_digest()?,
    })
}

fn target_row(lab: &mut Lab, key: CellKey) -> Result<Vec<f64>> {
    let targets = lab.target_names();
    let cell = lab.cell(key)?;
    let mut v: Vec<f64> = targets
        .iter()
        .map(|t| cell.scores.iter().find(|s| &s.domain == t).map(|s| s.miou).unwrap_or(f64::NAN))
        .collect();
    v.push(cell.target_mean(&targets));
    Ok(v)
}

fn grid<T: Copy>(
    lab: &mut Lab,
    table: &mut ComparisonTable,
    seeds: &[u64],
    items: &[T],
    label: impl Fn(T) -> String,
    key: impl Fn(&Lab, u64, T) -> CellKey,
) -> Result<()> {
    for &item in items {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let k = key(lab, seed, item);
            per_seed.push(target_row(lab, k)?);
        }
        table.rows.push(ComparisonRow { label: label(item), per_seed });
    }
    Ok(())
}

/// Generator variants under the configured init and fusion.
pub fn ablate_generators(lab: &mut Lab, seeds: &[u64], variants: &[Variant]) -> Result<ComparisonTable> {
    let mut table = empty_table(lab, "Generator variants", "Variant", seeds)?;
    grid(lab, &mut table, seeds, variants, |v| v.label().to_string(), |lab, seed, variant| CellKey {
        variant,
        ..lab.default_key(seed)
    })?;
    Ok(table)
}

/// Template init strategies under the configured variant and fusion.
pub fn ablate_init(lab: &mut Lab, seeds: &[u64], inits: &[InitStrategy]) -> Result<ComparisonTable> {
    let mut table = empty_table(lab, "Template initialization", "Init", seeds)?;
    grid(lab, &mut table, seeds, inits, |i| init_label(i).to_string(), |lab, seed, init| CellKey {
        init,
        ..lab.default_key(seed)
    })?;
    Ok(table)
}

/// Fusion component combinations over one shared generator set per seed.
pub fn ablate_fusion(lab: &mut Lab, seeds: &[u64], combos: &[FusionFlags]) -> Result<ComparisonTable> {
    let mut table = empty_table(lab, "Fusion components", "Components", seeds)?;
    grid(lab, &mut table, seeds, combos, |f| fusion_label(&f), |lab, seed, flags| CellKey {
        flags,
        ..lab.default_key(seed)
    })?;
    Ok(table)
}

pub fn run_suite(lab: &mut Lab, suite: Suite, seeds: &[u64]) -> Result<ComparisonTable> {
    match suite {
        Suite::Generators => ablate_generators(lab, seeds, &Variant::ALL),
        Suite::Init => ablate_init(lab, seeds, &InitStrategy::ALL),
        Suite::Fusion => ablate_fusion(lab, seeds, &FusionFlags::grid()),
    }
}

/// Mean fusion weight per style on every stylized validation split, the
/// source validation split and each target domain.
pub fn attention_report(lab: &mut Lab, seeds: &[u64]) -> Result<AttentionReport> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let key = lab.default_key(seed);
        let generators = lab.generators(seed, key.variant, key.init)?.generators.clone();
        let heads = lab.cell(key)?.heads.clone();
        let mut domains: Vec<_> = lab.world.styled_val.iter().collect();
        domains.extend(lab.world.eval_domains());
        let (_, rows) = lab.evaluate_fusion(&generators, &heads, &domains)?;
        per_seed.push(rows);
    }
    Ok(AttentionReport { styles: lab.style_names(), seeds: seeds.to_vec(), per_seed })
}

/// SAGE against the frozen baseline, one column per evaluation domain.
pub fn summary_table(lab: &mut Lab, reports: &[MetricsReport]) -> Result<ComparisonTable> {
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    let mut table = empty_table(lab, "SAGE vs frozen baseline", "Method", &seeds)?;
    let mut domains = vec![lab.world.source_val.name.clone()];
    domains.extend(lab.target_names());
    table.columns = domains.clone();
    table.columns.push("target avg".into());
    let targets = lab.target_names();
    for method in [BASELINE, SAGE] {
        let per_seed = reports
            .iter()
            .map(|r| {
                let mut v: Vec<f64> = domains.iter().map(|d| r.score(d, method).unwrap_or(f64::NAN)).collect();
                let t: Vec<f64> = targets.iter().map(|d| r.score(d, method).unwrap_or(f64::NAN)).collect();
                v.push(t.iter().sum::<f64>() / t.len().max(1) as f64);
                v
            })
            .collect();
        table.rows.push(ComparisonRow { label: method.into(), per_seed });
    }
    Ok(table)
}

/// Builds the datasets, pretrains and seals the oracle, and returns a lab
/// bound to `ws`. Failures name the stage.
pub fn prepare(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Lab> {
    cfg.validate()?;
    let start = Instant::now();
    let world = World::generate(cfg).map_err(|e| e.in_stage("gen-data"))?;
    world.save(ws).map_err(|e| e.in_stage("gen-data"))?;
    let data_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (frozen, _) = Frozen::pretrain(cfg, &world, Some(ws)).map_err(|e| e.in_stage("pretrain-oracle"))?;
    let oracle_secs = start.elapsed().as_secs_f64();
    let mut lab = Lab::new(cfg.clone(), world, frozen, Some(ws.clone()));
    lab.record_time("gen-data", data_secs);
    lab.record_time("pretrain-oracle", oracle_secs);
    Ok(lab)
}

/// The whole pipeline for every seed: data, oracle, generators, fusion,
/// evaluation. Writes per-seed reports, summary tables and a separate
/// timing file.
pub fn run_all(cfg: &ExperimentConfig, ws: &Workspace, seeds: &[u64]) -> Result<(Lab, Vec<MetricsReport>)> {
    let mut lab = prepare(cfg, ws)?;
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let key = lab.default_key(seed);
        lab.generators(seed, key.variant, key.init).map_err(|e| e.in_stage("train-spg"))?;
        lab.cell(key).map_err(|e| e.in_stage("train-apf"))?;
        let report = lab.report(seed).map_err(|e| e.in_stage("eval"))?;
        write_file(&ws.report_path(seed), &report.to_json()?)?;
        reports.push(report);
    }
    let table = summary_table(&mut lab, &reports)?;
    write_table(ws, "summary", &table)?;
    write_timings(&lab, ws)?;
    Ok((lab, reports))
}

pub fn write_table(ws: &Workspace, stem: &str, table: &ComparisonTable) -> Result<()> {
    fs::create_dir_all(ws.reports_dir())?;
    write_file(&ws.reports_dir().join(format!("{stem}.md")), table.to_markdown().as_bytes())?;
    write_file(&ws.reports_dir().join(format!("{stem}.csv")), table.to_csv().as_bytes())
}

pub fn write_attention(ws: &Workspace, report: &AttentionReport) -> Result<()> {
    write_file(&ws.reports_dir().join("attention.md"), report.to_markdown().as_bytes())?;
    write_file(&ws.reports_dir().join("attention.csv"), report.to_csv().as_bytes())
}

/// Wall-clock seconds per stage, kept apart from the reports.
pub fn write_timings(lab: &Lab, ws: &Workspace) -> Result<()> {
    let mut v = serde_json::to_vec_pretty(lab.timings())?;
    v.push(b'\n');
    write_file(&ws.timing_path(), &v)
}
