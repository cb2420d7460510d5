use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sage::apf::{FusionFlags, FusionHeads, Normalization, PromptFusion};
use sage::checkpoint::{Checkpoint, Kind};
use sage::harness::{
    attention_report, fusion_label, init_label, run_all, run_suite, write_attention, write_table, write_timings,
    ExperimentConfig, Frozen, Lab, Suite, Workspace, World, OUTPUT_ROOT_ENV,
};
use sage::spg::{InitStrategy, Variant};
use sage::world::{masks_to_ppm, Dataset, Sample};

#[derive(Parser)]
#[command(name = "sage", version, about = "Style-adaptive prompts for a frozen segmentation model")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the built-in desk setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render every dataset and write it under the output root.
    GenData,
    /// Pretrain the segmentation model on the base domain and seal it.
    PretrainOracle,
    /// Train style-prompt generators against the sealed oracle.
    TrainSpg {
        /// Train only this style index.
        #[arg(long)]
        style: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        init: Option<InitStrategy>,
    },
    /// Train the fusion heads over the trained generators.
    TrainApf {
        #[arg(long)]
        no_pn: bool,
        #[arg(long)]
        no_softmax: bool,
        #[arg(long)]
        no_tanh: bool,
    },
    /// Score the frozen baseline and the fused prompts.
    Eval {
        /// Restrict the printout to one domain.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Predict masks for every image of a dataset file.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Dataset file holding the input images and the predicted masks.
        #[arg(long)]
        out: PathBuf,
        /// Optional color-mapped rendering of the predictions (PPM).
        #[arg(long)]
        color: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        #[arg(long)]
        suite: Suite,
    },
    /// Mean fusion weight per style on every domain.
    AttentionReport,
    /// Everything, end to end.
    RunAll {
        /// Comma-separated seeds, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let ws = Workspace::resolve(&cfg);
    match cli.command {
        Command::GenData => gen_data(&cfg, &ws),
        Command::PretrainOracle => pretrain(&cfg, &ws),
        Command::TrainSpg { style, variant, init } => train_spg(&cfg, &ws, style, variant, init),
        Command::TrainApf { no_pn, no_softmax, no_tanh } => {
            let flags = FusionFlags {
                normalization: if no_pn { Normalization::None } else { cfg.apf.flags.normalization },
                softmax: cfg.apf.flags.softmax && !no_softmax,
                tanh: cfg.apf.flags.tanh && !no_tanh,
            };
            train_apf(&cfg, &ws, flags)
        }
        Command::Eval { domain } => eval(&cfg, &ws, domain.as_deref()),
        Command::Infer { input, out, color } => infer(&cfg, &ws, &input, &out, color.as_deref()),
        Command::Ablate { suite } => ablate(&cfg, &ws, suite),
        Command::AttentionReport => attention(&cfg, &ws),
        Command::RunAll { seeds } => {
            if cli.config.is_none() {
                bail!("run-all needs --config <file>");
            }
            let seeds = match (seeds, cli.seed) {
                (_, Some(seed)) => vec![seed],
                (Some(seeds), None) => seeds,
                (None, None) => cfg.seeds.clone(),
            };
            cfg.seeds = seeds.clone();
            run(&cfg, &ws, &seeds)
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let world = World::generate(cfg)?;
    world.save(ws)?;
    for (name, digest) in world.digests()? {
        println!("{name:<16} {}", &digest[..16]);
    }
    println!("datasets written to {}", ws.data_dir().display());
    Ok(())
}

fn load_world(cfg: &ExperimentConfig, ws: &Workspace) -> Result<World> {
    World::load(cfg, ws).with_context(|| format!("reading datasets under {} (run `sage gen-data` first)", ws.data_dir().display()))
}

fn open_lab(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Lab> {
    let world = load_world(cfg, ws)?;
    let frozen = Frozen::load(ws)
        .with_context(|| format!("reading {} (run `sage pretrain-oracle` first)", ws.oracle_path().display()))?;
    let mut lab = Lab::new(cfg.clone(), world, frozen, Some(ws.clone()));
    lab.reuse_checkpoints(true);
    Ok(lab)
}

fn pretrain(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let world = load_world(cfg, ws)?;
    let (frozen, losses) = Frozen::pretrain(cfg, &world, Some(ws))?;
    let base = sage::harness::evaluate_domain(&frozen.oracle, &world.base_val, None, cfg.eval_batch)?;
    println!(
        "oracle {:016x}: {} params, loss {:.3} -> {:.3}, base-val mIoU {:.4}",
        frozen.oracle.fingerprint(),
        frozen.oracle.num_params(),
        sage::harness::smoothed_head(&losses),
        sage::harness::smoothed_tail(&losses),
        base.iou.mean
    );
    println!("encoder {:016x} written to {}", frozen.encoder.fingerprint(), ws.encoder_path().display());
    Ok(())
}

fn train_spg(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    style: Option<usize>,
    variant: Option<Variant>,
    init: Option<InitStrategy>,
) -> Result<()> {
    let lab = open_lab(cfg, ws)?;
    let (variant, init) = (variant.unwrap_or(cfg.spg.variant), init.unwrap_or(cfg.spg.init));
    let styles: Vec<usize> = match style {
        Some(i) if i < cfg.world.styles.len() => vec![i],
        Some(i) => bail!("style index {i} out of range (0..{})", cfg.world.styles.len()),
        None => (0..cfg.world.styles.len()).collect(),
    };
    for &seed in &cfg.seeds {
        let set = lab.train_generators(seed, variant, init, Some(&styles))?;
        for (g, losses) in set.generators.iter().zip(&set.losses) {
            println!(
                "seed {seed} {:<10} {} {}: loss {:.3} -> {:.3}",
                cfg.world.styles[g.style].name,
                variant.label(),
                init_label(init),
                sage::harness::smoothed_head(losses),
                sage::harness::smoothed_tail(losses)
            );
        }
    }
    Ok(())
}

fn train_apf(cfg: &ExperimentConfig, ws: &Workspace, flags: FusionFlags) -> Result<()> {
    let lab = open_lab(cfg, ws)?;
    let (variant, init) = (cfg.spg.variant, cfg.spg.init);
    for &seed in &cfg.seeds {
        let generators = lab
            .load_generators(seed, variant, init)
            .with_context(|| format!("loading generators for seed {seed} (run `sage train-spg` first)"))?;
        let (heads, losses) = lab.train_heads(seed, &generators, flags)?;
        let path = ws.heads_path(seed, variant, init, &flags);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        heads.to_checkpoint()?.save(&path)?;
        println!(
            "seed {seed} [{}]: loss {:.3} -> {:.3}, heads written to {}",
            fusion_label(&flags),
            sage::harness::smoothed_head(&losses),
            sage::harness::smoothed_tail(&losses),
            path.display()
        );
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, ws: &Workspace, domain: Option<&str>) -> Result<()> {
    let mut lab = open_lab(cfg, ws)?;
    if let Some(d) = domain {
        let known = lab.world.eval_domains().iter().any(|x| x.name == d);
        if !known {
            let names: Vec<String> = lab.world.eval_domains().iter().map(|x| x.name.clone()).collect();
            bail!("unknown evaluation domain `{d}` (one of {})", names.join(", "));
        }
    }
    for &seed in &cfg.seeds {
        let report = lab.report(seed)?;
        let path = ws.report_path(seed);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, report.to_json()?)?;
        for row in report.rows.iter().filter(|r| domain.is_none_or(|d| r.domain == d)) {
            println!("seed {seed} {:<12} {:<9} mIoU {:.4}", row.domain, row.method, row.miou);
        }
    }
    write_timings(&lab, ws)?;
    Ok(())
}

fn infer(cfg: &ExperimentConfig, ws: &Workspace, input: &Path, out: &Path, color: Option<&Path>) -> Result<()> {
    let seed = cfg.seeds[0];
    let (variant, init, flags) = (cfg.spg.variant, cfg.spg.init, cfg.apf.flags);
    let frozen = Frozen::load(ws).context("loading the sealed oracle and encoder")?;
    let lab = Lab::new(cfg.clone(), load_world_or_empty(cfg, ws), frozen, Some(ws.clone()));
    let generators = lab.load_generators(seed, variant, init)?;
    let heads = FusionHeads::from_checkpoint(&Checkpoint::load(&ws.heads_path(seed, variant, init, &flags), Kind::Heads)?)?;
    let fusion = PromptFusion::new(&generators, &lab.frozen.encoder, &heads)?;
    let data = Dataset::load(input)?;
    let mut predicted = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(cfg.eval_batch.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let masks = fusion.infer(&x, &lab.frozen.oracle)?;
        let plane = x.shape()[2] * x.shape()[3];
        for (k, &i) in chunk.iter().enumerate() {
            let s = &data.samples[i];
            predicted.push(Sample {
                image: s.image.clone(),
                mask: masks[k * plane..(k + 1) * plane].to_vec(),
                classes: lab.frozen.oracle.classes(),
            });
        }
    }
    Dataset { name: "predicted".into(), samples: predicted.clone() }.save(out)?;
    if let (Some(path), Some(first)) = (color, predicted.first()) {
        let masks: Vec<&[u8]> = predicted.iter().map(|s| s.mask.as_slice()).collect();
        fs::write(path, masks_to_ppm(&masks, first.height(), first.width())?)?;
    }
    println!("{} masks written to {}", predicted.len(), out.display());
    Ok(())
}

/// Inference needs no datasets; fall back to an empty world when none
/// were generated.
fn load_world_or_empty(cfg: &ExperimentConfig, ws: &Workspace) -> World {
    World::load(cfg, ws).unwrap_or_else(|_| World {
        base_train: empty(),
        base_val: empty(),
        source_train: empty(),
        source_val: empty(),
        styled_train: Vec::new(),
        styled_val: Vec::new(),
        targets: Vec::new(),
    })
}

fn empty() -> Dataset {
    Dataset { name: String::new(), samples: Vec::new() }
}

fn ablate(cfg: &ExperimentConfig, ws: &Workspace, suite: Suite) -> Result<()> {
    let mut lab = open_lab(cfg, ws)?;
    let table = run_suite(&mut lab, suite, &cfg.seeds)?;
    write_table(ws, &format!("ablation-{}", suite.name()), &table)?;
    write_timings(&lab, ws)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn attention(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let mut lab = open_lab(cfg, ws)?;
    let report = attention_report(&mut lab, &cfg.seeds)?;
    write_attention(ws, &report)?;
    write_timings(&lab, ws)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run(cfg: &ExperimentConfig, ws: &Workspace, seeds: &[u64]) -> Result<()> {
    eprintln!("output root {} (override with {OUTPUT_ROOT_ENV})", ws.root.display());
    cfg.save(&ws.root.join("config.json"))?;
    let (mut lab, reports) = run_all(cfg, ws, seeds)?;
    let table = sage::harness::summary_table(&mut lab, &reports)?;
    print!("{}", table.to_markdown());
    Ok(())
}
