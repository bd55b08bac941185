use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sue_core::ablation::{run_ablation, seed_range, AblationKind};
use sue_core::data::{export_split, Protocol};
use sue_core::train::{
    build_split, eval_record, evaluate, export_embeddings, load_bank, train_on, write_jsonl,
};
use sue_core::{Checkpoint, Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "suede", version, about = "Shared-unified-expert dual encoder experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["p1", "p2.1", "p2.2"])]
    protocol: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Warm-up, convert and train; writes checkpoint, history and test metrics.
    Train,
    /// Evaluates a checkpoint on the test split.
    Eval,
    /// Runs one ablation study over several seeds.
    Ablate {
        #[arg(long, value_parser = ["expert_count", "layer_placement", "modality_placement", "vit_vs_moe", "renormalize"])]
        kind: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Writes image embeddings of one split as JSON lines.
    ExportEmbeddings {
        #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
        split: String,
    },
    /// Writes the synthetic protocol splits to disk.
    GenData,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", json!({"error": "usage", "message": msg.lines().next().unwrap_or("")}));
            eprint!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.code(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train => train(c),
        Command::Eval => eval(c),
        Command::Ablate { kind, seeds } => ablate(c, kind.parse()?, *seeds),
        Command::ExportEmbeddings { split } => export(c, split),
        Command::GenData => gen_data(c),
    }
}

/// Config file (or defaults) with the command-line overrides applied.
fn resolve(c: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut config = match (&c.config, base) {
        (Some(p), _) => ExperimentConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        (None, Some(b)) => b,
        (None, None) => ExperimentConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        config.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(p) = &c.protocol {
        config.protocol = p.parse::<Protocol>()?;
    }
    if let Some(o) = &c.out {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path> {
    let d = config.out_dir.as_path();
    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    Ok(d)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn render_record(title: &str, record: &Value) -> String {
    let mut s = format!("{title}\n");
    if let Value::Object(m) = record {
        for (k, v) in m {
            let cell = match v {
                Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap_or(f64::NAN)),
                Value::String(t) => t.clone(),
                other => other.to_string(),
            };
            s.push_str(&format!("  {k:<16} {cell}\n"));
        }
    }
    s
}

fn emit(dir: &Path, title: &str, records: &[Value]) -> Result<()> {
    write_jsonl(&dir.join("metrics.jsonl"), records)?;
    let text: String = records.iter().map(|r| render_record(title, r)).collect();
    print!("{text}");
    let path = dir.join("metrics.txt");
    let mut old = fs::read_to_string(&path).unwrap_or_default();
    old.push_str(&text);
    write_text(&path, &old)
}

fn train(c: &Common) -> Result<()> {
    let config = resolve(c, None)?;
    let dir = out_dir(&config)?.to_path_buf();
    let split = build_split(&config)?;
    let bank = load_bank(&config)?;
    let outcome = train_on(&config, &split, &bank)?;
    write_text(&dir.join("config.txt"), &config.to_text())?;
    outcome.checkpoint.save(&dir.join("checkpoint.sued"))?;
    let history: Vec<Value> = outcome
        .history
        .epochs
        .iter()
        .map(|e| serde_json::to_value(e).expect("serializable record"))
        .collect();
    let _ = fs::remove_file(dir.join("history.jsonl"));
    write_jsonl(&dir.join("history.jsonl"), &history)?;
    for e in &outcome.history.epochs {
        eprintln!(
            "epoch {} [{}] l_ce {:.4} l_z {:.4} l_b {:.4} total {:.4} dev auc {:.4}",
            e.epoch, e.phase, e.l_ce, e.l_z, e.l_b, e.total, e.dev.auc
        );
    }
    let eval = evaluate(&outcome.model, &config, &split, &bank)?;
    let record = eval_record(
        &[
            ("command", Value::from("train")),
            ("protocol", Value::from(config.protocol.to_string())),
            ("seed", Value::from(config.seed)),
            ("split", Value::from("test")),
            ("best_epoch", outcome.best_epoch.map_or(Value::Null, Value::from)),
        ],
        &eval,
    );
    emit(&dir, "train", &[record])
}

fn load_checkpoint(c: &Common) -> Result<Checkpoint> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    Checkpoint::load(path)
}

fn eval(c: &Common) -> Result<()> {
    let ck = load_checkpoint(c)?;
    let config = resolve(c, Some(ck.config.clone()))?;
    let model = ck.model()?;
    let split = build_split(&config)?;
    let bank = load_bank(&config)?;
    let eval = evaluate(&model, &config, &split, &bank)?;
    let record = eval_record(
        &[
            ("command", Value::from("eval")),
            ("protocol", Value::from(config.protocol.to_string())),
            ("seed", Value::from(config.seed)),
            ("split", Value::from("test")),
            ("checkpoint_epoch", Value::from(ck.epoch)),
        ],
        &eval,
    );
    let dir = out_dir(&config)?.to_path_buf();
    emit(&dir, "eval", &[record])
}

fn ablate(c: &Common, kind: AblationKind, seeds: usize) -> Result<()> {
    let config = resolve(c, None)?;
    let dir = out_dir(&config)?.to_path_buf();
    let seeds = seed_range(config.seed, seeds);
    let table = run_ablation(kind, &config, &seeds, |variant, seed, eval| {
        eprintln!("{kind} {variant} seed {seed}: test auc {:.4}", eval.report.auc);
    })?;
    let text = table.to_text();
    print!("{text}");
    write_text(&dir.join(format!("ablation_{kind}.txt")), &text)?;
    let path = dir.join(format!("ablation_{kind}.jsonl"));
    let _ = fs::remove_file(&path);
    write_jsonl(&path, &table.records)?;
    let path = dir.join(format!("ablation_{kind}_summary.jsonl"));
    let _ = fs::remove_file(&path);
    write_jsonl(&path, &table.summary_records())
}

fn export(c: &Common, split_name: &str) -> Result<()> {
    let ck = load_checkpoint(c)?;
    let config = resolve(c, Some(ck.config.clone()))?;
    let model = ck.model()?;
    let split = build_split(&config)?;
    let bank = load_bank(&config)?;
    let dir = out_dir(&config)?;
    let path = dir.join(format!("embeddings_{split_name}.jsonl"));
    let n = export_embeddings(&model, &config, split.part(split_name)?, &bank, &path)?;
    println!("{}", json!({"path": path, "records": n}));
    Ok(())
}

fn gen_data(c: &Common) -> Result<()> {
    let config = resolve(c, None)?;
    let dir = out_dir(&config)?;
    let split = build_split(&config)?;
    for name in ["train", "dev", "test"] {
        let samples = split.part(name)?;
        export_split(&dir.join(name), samples)?;
        println!("{}", json!({"split": name, "samples": samples.len(), "dir": dir.join(name)}));
    }
    Ok(())
}
