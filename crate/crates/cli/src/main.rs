use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rxncond::dataset::{
    load_500mt_csv, load_condition_csv, slot_label_counts, sparsity_report, species_counts, ColumnMap, LoadMode, Loaded,
    SparsityReport,
};
use rxncond::gradcheck::{run_suite, SuiteOptions, REL_TOL};
use rxncond::metrics::emit_report;
use rxncond::model::Task;
use rxncond::powerlaw::{power_law_fit, PowerLawFit};
use rxncond::prompts::{build_qa_dataset, write_jsonl, TemplateBank};
use rxncond::reaction::{Grouping, Slot};
use rxncond::retrieval::{CorpusIndex, DEFAULT_HASH_SEED, DEFAULT_WIDTH};
use rxncond::train::{evaluate, recommend, train, SplitName, TrainConfig};
use rxncond::{Precision, Scalar};

#[derive(Parser)]
#[command(name = "rxncond", version, about = "Reaction-condition recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlavorArg {
    Condition,
    #[value(name = "500mt")]
    Joined,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a reaction CSV into a JSONL instruction dataset.
    BuildData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "condition")]
        flavor: FlavorArg,
        /// Template file, one template per line; the bundled bank otherwise.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prompts per record.
        #[arg(long, default_value_t = 1)]
        expand: usize,
        #[arg(long, short, default_value = "dataset.jsonl")]
        output: PathBuf,
        /// JSONL corpus pool; each record gets its most similar corpus.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        grouping: Option<PathBuf>,
        /// Fail on the first malformed row instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Slot sparsity and power-law fits of label frequencies, as JSON.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "condition")]
        flavor: FlavorArg,
        #[arg(long)]
        grouping: Option<PathBuf>,
    },
    /// Train a model from a TOML config; flags override the file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, num_args = 1..)]
        freeze: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write `report-<split>.{json,csv}`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        topk: Vec<usize>,
        /// Dataset override; the training dataset otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; the checkpoint directory otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank conditions for one reaction.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reaction: String,
        /// Slot to rank for classification models.
        #[arg(long)]
        role: Option<String>,
        /// File with one candidate per line.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Run the finite-difference gradient suite.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
}

fn load_records(input: &Path, flavor: FlavorArg, grouping: &Grouping, strict: bool) -> anyhow::Result<Loaded> {
    let mode = if strict { LoadMode::Strict } else { LoadMode::Lenient };
    let map = ColumnMap::default();
    let loaded = match flavor {
        FlavorArg::Condition => load_condition_csv(input, &map, mode),
        FlavorArg::Joined => load_500mt_csv(input, &map, grouping, mode),
    }
    .with_context(|| format!("reading {}", input.display()))?;
    if loaded.skipped > 0 {
        log::warn!("skipped {} malformed rows", loaded.skipped);
    }
    Ok(loaded)
}

fn grouping_from(path: Option<&Path>) -> anyhow::Result<Grouping> {
    Ok(match path {
        Some(p) => Grouping::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Grouping::bundled(),
    })
}

fn print_json<S: Serialize>(v: &S) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum FitOrError {
    Fit(PowerLawFit),
    Error { error: String },
}

fn fit(counts: impl IntoIterator<Item = usize>) -> FitOrError {
    let xs: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
    match power_law_fit(&xs) {
        Ok(f) => FitOrError::Fit(f),
        Err(e) => FitOrError::Error { error: e.to_string() },
    }
}

#[derive(Serialize)]
struct Stats {
    records: usize,
    skipped: usize,
    sparsity: Option<SparsityReport>,
    power_law: BTreeMap<String, FitOrError>,
}

fn precision() -> anyhow::Result<Precision> {
    Precision::from_env(Precision::F32).map_err(anyhow::Error::msg)
}

fn run_evaluate<T: Scalar>(
    checkpoint: &Path,
    split: SplitName,
    ks: &[usize],
    data: Option<&Path>,
    out: &Path,
    stem: &str,
) -> anyhow::Result<()> {
    let report = evaluate::<T>(checkpoint, split, ks, data)?;
    let (json, csv) = emit_report(&report, out, stem)?;
    log::info!("wrote {} and {}", json.display(), csv.display());
    print_json(&report)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::BuildData {
            input,
            flavor,
            templates,
            seed,
            expand,
            output,
            pool,
            grouping,
            strict,
        } => {
            let grouping = grouping_from(grouping.as_deref())?;
            let mut records = load_records(&input, flavor, &grouping, strict)?.records;
            if let Some(pool) = pool {
                let index = CorpusIndex::load_jsonl(&pool, DEFAULT_WIDTH, DEFAULT_HASH_SEED)
                    .with_context(|| format!("reading pool {}", pool.display()))?;
                for r in &mut records {
                    let hit = index.retrieve_similar(&r.raw, r.corpus.as_deref(), 1)?;
                    r.corpus = hit.into_iter().next().map(|(c, _)| c);
                }
            }
            let bank = match templates {
                Some(p) => TemplateBank::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => TemplateBank::bundled(),
            };
            let examples = build_qa_dataset(&records, &bank, seed, expand)?;
            let f = BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            write_jsonl(f, &examples)?;
            eprintln!("{} examples from {} records -> {}", examples.len(), records.len(), output.display());
        }
        Command::Stats { input, flavor, grouping } => {
            let grouping = grouping_from(grouping.as_deref())?;
            let loaded = load_records(&input, flavor, &grouping, false)?;
            let mut power_law = BTreeMap::new();
            let sparsity = match flavor {
                FlavorArg::Condition => {
                    for (slot, counts) in Slot::ALL.iter().zip(slot_label_counts(&loaded.records)) {
                        power_law.insert(slot.name().to_string(), fit(counts.into_values()));
                    }
                    Some(sparsity_report(&loaded.records)?)
                }
                FlavorArg::Joined => None,
            };
            power_law.insert("species".into(), fit(species_counts(&loaded.records).into_values()));
            print_json(&Stats {
                records: loaded.records.len(),
                skipped: loaded.skipped,
                sparsity,
                power_law,
            })?;
        }
        Command::Train {
            config,
            task,
            freeze,
            seed,
            epochs,
            data,
            out_dir,
        } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(t) = task {
                cfg.task = Task::parse(&t)?;
            }
            if !freeze.is_empty() {
                cfg.freeze = freeze;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(o) = out_dir {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let outcome = match precision()? {
                Precision::F32 => train::<f32>(&cfg)?,
                Precision::F64 => train::<f64>(&cfg)?,
            };
            print_json(&outcome)?;
        }
        Command::Evaluate {
            checkpoint,
            split,
            topk,
            data,
            out,
        } => {
            let split_name = SplitName::parse(&split)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            let stem = format!("report-{split}");
            match precision()? {
                Precision::F32 => run_evaluate::<f32>(&checkpoint, split_name, &topk, data.as_deref(), &out, &stem)?,
                Precision::F64 => run_evaluate::<f64>(&checkpoint, split_name, &topk, data.as_deref(), &out, &stem)?,
            }
        }
        Command::Recommend {
            checkpoint,
            reaction,
            role,
            candidates,
            topk,
        } => {
            let cands = match candidates {
                Some(p) => Some(
                    std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let ranked = match precision()? {
                Precision::F32 => recommend::<f32>(&checkpoint, &reaction, role.as_deref(), cands.as_deref(), topk)?,
                Precision::F64 => recommend::<f64>(&checkpoint, &reaction, role.as_deref(), cands.as_deref(), topk)?,
            };
            print_json(&ranked)?;
        }
        Command::CheckGrad { seed, configs } => {
            if configs == 0 {
                bail!("--configs must be positive");
            }
            let opts = SuiteOptions {
                seed,
                configs,
                ..SuiteOptions::default()
            };
            let results = run_suite(&opts)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<5} {:<30} configs={:<3} coords={:<6} max_rel_err={:.3e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.configs,
                    r.coords,
                    r.max_rel_err
                );
            }
            println!("{} of {} checks below {REL_TOL:e}", results.iter().filter(|r| r.passed()).count(), results.len());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
