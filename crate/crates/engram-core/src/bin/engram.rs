//! Command-line front end: registry inspection, adapter training, matched
//! seed generation and comparison, and deterministic plots.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when an
//! audit assertion fails (a no-trigger prompt moved, or a double render
//! diverged).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use engram_core::backbone::Topology;
use engram_core::config::RunConfig;
use engram_core::error::{EngramError, Result};
use engram_core::eval::{
    compare_matched_seed, eval_threads, make_dataset, write_report_csv, write_report_jsonl,
};
use engram_core::plot::{read_train_log, render_distance_histogram, render_loss_curve};
use engram_core::registry::registry_digest;
use engram_core::train::{load_adapter, run_training, save_adapter};
use engram_core::util::component_seed;

const EXIT_USAGE: u8 = 1;
const EXIT_AUDIT: u8 = 2;

#[derive(Parser)]
#[command(
    name = "engram",
    version,
    about = "Trigger-indexed concept memories for frozen toy diffusion backbones"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    SingleStream,
    TriStreamLayout,
    ProjectedStream,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::SingleStream => Topology::SingleStream,
            TopologyArg::TriStreamLayout => Topology::TriStreamLayout,
            TopologyArg::ProjectedStream => Topology::ProjectedStream,
        }
    }
}

/// Every run is described either by a TOML config file or by the built-in
/// desk defaults for a topology. Giving both asserts they agree.
#[derive(Args)]
struct ConfigSource {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use desk defaults for this topology instead of a config file.
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, self.topology) {
            (Some(path), None) => RunConfig::load(path),
            (None, Some(t)) => Ok(RunConfig::desk_default(t.into())),
            (Some(path), Some(t)) => {
                let cfg = RunConfig::load(path)?;
                if cfg.topology != Topology::from(t) {
                    return Err(EngramError::InvalidConfig(format!(
                        "config topology {:?} does not match --topology",
                        cfg.topology
                    )));
                }
                Ok(cfg)
            }
            (None, None) => Err(EngramError::InvalidConfig(
                "pass --config FILE or --topology NAME".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print every stream's n-gram registry and its digest.
    InspectRegistry {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Train the adapter and write a checkpoint plus a line-delimited log.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory for adapter.ckpt and train_log.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample latents for each (prompt, seed) pair with the memory active.
    Generate {
        #[command(flatten)]
        source: ConfigSource,
        /// Adapter checkpoint to load; omitted means the fresh zero-scale
        /// adapter, which generates exactly the frozen base.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Prompt file, one prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Comma-separated sampling seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output JSONL file of latents.
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-seed base-vs-memory comparison over a prompt file.
    Compare {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Prompt file, one prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output directory for report.jsonl and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a training log or comparison report as SVG.
    Plot {
        /// Training log (train_log.jsonl) or comparison report
        /// (report.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if prompts.is_empty() {
        return Err(EngramError::InvalidConfig(format!(
            "no prompts in {}",
            path.display()
        )));
    }
    Ok(prompts)
}

fn build_with_adapter(cfg: &RunConfig, adapter: &Option<PathBuf>) -> Result<engram_core::Pipeline> {
    let mut pipeline = cfg.build_pipeline()?;
    if let Some(path) = adapter {
        let ckpt = load_adapter(path)?;
        ckpt.apply(&mut pipeline.memory)?;
    }
    Ok(pipeline)
}

fn cmd_inspect_registry(source: &ConfigSource) -> Result<u8> {
    let cfg = source.load()?;
    let pipeline = cfg.build_pipeline()?;
    println!("trigger: {:?}", cfg.trigger);
    println!("max_n: {}", cfg.max_n);
    for (idx, mem) in pipeline.memory.streams.iter().enumerate() {
        let reg = &mem.registry;
        let tok = pipeline.tokenizer(idx);
        println!(
            "stream {} ({} keys, vocab {}, digest {})",
            reg.stream_id(),
            reg.entry_count(),
            tok.vocab_size(),
            registry_digest(reg)
        );
        for (k, key) in reg.entries().iter().enumerate() {
            let words: Vec<&str> = key
                .span()
                .iter()
                .map(|&id| tok.decode_id(id).unwrap_or("<unk>"))
                .collect();
            println!(
                "  [{k}] n={} ids={:?} text={:?}",
                key.len(),
                key.span(),
                words.join(" ")
            );
        }
    }
    Ok(0)
}

fn cmd_train(source: &ConfigSource, out: &Path) -> Result<u8> {
    let cfg = source.load()?;
    std::fs::create_dir_all(out)?;
    let mut pipeline = cfg.build_pipeline()?;
    let data = make_dataset(
        &cfg.concept,
        cfg.n_pairs,
        component_seed(cfg.train.seed, "dataset"),
    )?;
    let records = run_training(&mut pipeline, &data, &cfg.train)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = String::new();
    for r in &records {
        log.push_str(
            &serde_json::to_string(r).map_err(|e| EngramError::MalformedReport(e.to_string()))?,
        );
        log.push('\n');
    }
    std::fs::write(&log_path, log)?;
    let ckpt_path = out.join("adapter.ckpt");
    save_adapter(&pipeline.memory, &cfg.train, cfg.train.steps, &ckpt_path)?;
    let first = records.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} pairs: loss {first:.6} -> {last:.6}",
        records.len(),
        data.len()
    );
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(0)
}

fn cmd_generate(
    source: &ConfigSource,
    adapter: &Option<PathBuf>,
    prompts_path: &Path,
    seeds: &[u64],
    out: &Path,
) -> Result<u8> {
    let cfg = source.load()?;
    let pipeline = build_with_adapter(&cfg, adapter)?;
    let prompts = read_prompts(prompts_path)?;
    let mut lines = String::new();
    for prompt in &prompts {
        for &seed in seeds {
            let latent = pipeline.sample(std::slice::from_ref(prompt), seed, true)?;
            let row: Vec<f64> = latent.row(0).to_vec();
            let obj = serde_json::json!({ "prompt": prompt, "seed": seed, "latent": row });
            lines.push_str(&obj.to_string());
            lines.push('\n');
        }
    }
    std::fs::write(out, lines)?;
    println!(
        "wrote {} latents ({} prompts x {} seeds) to {}",
        prompts.len() * seeds.len(),
        prompts.len(),
        seeds.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_compare(
    source: &ConfigSource,
    adapter: &Option<PathBuf>,
    prompts_path: &Path,
    seeds: &[u64],
    out: &Path,
) -> Result<u8> {
    let cfg = source.load()?;
    let pipeline = build_with_adapter(&cfg, adapter)?;
    let prompts = read_prompts(prompts_path)?;
    let report = compare_matched_seed(&pipeline, &prompts, seeds)?;
    std::fs::create_dir_all(out)?;
    write_report_jsonl(&report, &out.join("report.jsonl"))?;
    write_report_csv(&report, &out.join("report.csv"))?;
    let s = &report.summary;
    println!(
        "{} records ({} trigger, {} control, {} thread(s))",
        s.num_records,
        s.num_trigger,
        s.num_control,
        eval_threads()
    );
    println!(
        "controls bitwise: {}; max control distance {:.3e}; mean trigger distance {:.6}",
        s.controls_all_bitwise, s.max_control_distance, s.mean_trigger_distance
    );
    if !report.boundary_holds() {
        eprintln!("audit failure: a prompt without trigger spans was modified");
        return Ok(EXIT_AUDIT);
    }
    Ok(0)
}

fn cmd_plot(input: &Path, out: &Path) -> Result<u8> {
    // Sniff the input type: a training log line has a "grad_norm" field.
    let rendered = match read_train_log(input) {
        Ok(log) => render_loss_curve(&log, "training loss")?,
        Err(EngramError::Io(e)) => return Err(EngramError::Io(e)),
        Err(_) => {
            let report = engram_core::eval::read_report_jsonl(input)?;
            render_distance_histogram(&report, "base vs engram distance")?
        }
    };
    // Determinism audit: a second render must produce identical bytes.
    let again = match read_train_log(input) {
        Ok(log) => render_loss_curve(&log, "training loss")?,
        Err(_) => {
            let report = engram_core::eval::read_report_jsonl(input)?;
            render_distance_histogram(&report, "base vs engram distance")?
        }
    };
    if rendered != again {
        eprintln!("audit failure: double render produced different bytes");
        return Ok(EXIT_AUDIT);
    }
    std::fs::write(out, &rendered)?;
    println!("wrote {} ({} bytes)", out.display(), rendered.len());
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.cmd {
        Cmd::InspectRegistry { source } => cmd_inspect_registry(source),
        Cmd::Train { source, out } => cmd_train(source, out),
        Cmd::Generate {
            source,
            adapter,
            prompts,
            seeds,
            out,
        } => cmd_generate(source, adapter, prompts, seeds, out),
        Cmd::Compare {
            source,
            adapter,
            prompts,
            seeds,
            out,
        } => cmd_compare(source, adapter, prompts, seeds, out),
        Cmd::Plot { input, out } => cmd_plot(input, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(EngramError::LocalityViolation { batch, pos, channel }) => {
            eprintln!(
                "audit failure: locality violation at batch {batch}, pos {pos}, channel {channel}"
            );
            ExitCode::from(EXIT_AUDIT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
