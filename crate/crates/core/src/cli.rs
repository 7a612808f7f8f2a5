//! Command-line front end: `analyze`, `gradcheck`, `train`, `eval`, `infer`
//! and `synth`.
//!
//! Every command reads an optional TOML [`RunConfig`] (`--config FILE`),
//! applies `--key value` overrides, writes the fully-defaulted result to
//! `<out_dir>/config.toml`, and only then starts working. Override keys are
//! either dotted (`--model.decoder lw`) or bare field names when unambiguous
//! (`--decoder lw`, `--lr 1e-3`); `--variant` is an alias for
//! `model.decoder`.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::data::{self, ChangeSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::network::{self, checkpoint, ModelConfig};
use crate::train::{self, TrainConfig};
use crate::verify;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `<split>/{A,B,label}`; synthetic data when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_split: "train".into(),
            eval_split: "test".into(),
            synthetic_count: 8,
            synthetic_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub out_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { out_dir: PathBuf::from("runs/latest") }
    }
}

/// Everything a command needs, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

const ALIASES: [(&str, &str); 1] = [("variant", "model.decoder")];

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Resolves a bare or dotted override key to a path in the config table.
fn resolve_key(key: &str, defaults: &toml::Table) -> Result<Vec<String>> {
    let key = key.replace('-', "_");
    if let Some((_, to)) = ALIASES.iter().find(|(from, _)| *from == key) {
        return Ok(to.split('.').map(str::to_owned).collect());
    }
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_owned).collect());
    }
    let sections: Vec<&String> = defaults
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(&key)))
        .map(|(k, _)| k)
        .collect();
    match sections.as_slice() {
        [one] => Ok(vec![(*one).clone(), key]),
        [] if key == "root" => Ok(vec!["data".into(), key]),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "key `{key}` is ambiguous; qualify it as one of {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses `--key value` pairs into the config table.
pub fn apply_overrides(table: &mut toml::Table, args: &[String]) -> Result<()> {
    let defaults = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Error::Usage(format!("expected `--key value`, found `{flag}`")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("missing value for `--{key}`")))?;
                (key.to_owned(), v.clone())
            }
        };
        let path = resolve_key(&key, &defaults)?;
        set_path(table, &path, parse_value(&raw))?;
    }
    Ok(())
}

/// Reads `file` (if any), applies overrides and validates.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(name = "elgcnet", version, about = "ELGC-Net change detection on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides of configuration entries.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter, MAC/FLOP and activation-memory report.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient suite in 64-bit mode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch and write a checkpoint and epoch log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Change-class IoU, F1 and OA of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the binary change map of one image pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset split to disk.
    Synth {
        #[arg(long)]
        dest: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = load_config(common.config.as_deref(), &common.overrides)?;
    let dir = &cfg.output.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset(cfg: &RunConfig, split: &str) -> Result<Vec<ChangeSample>> {
    match &cfg.data.root {
        Some(root) => data::load_all(&data::scan(root, split)?),
        None => {
            let [h, w, _] = cfg.model.input_size;
            if h != w {
                return Err(Error::Config("synthetic data needs a square input_size".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.synthetic_seed);
            data::synth(&mut rng, cfg.data.synthetic_count, h)
        }
    }
}

fn metrics_line(c: &ConfusionCounts) -> String {
    format!(
        "iou={:.6} f1={:.6} oa={:.6} tp={} fp={} fn={} tn={}",
        c.iou(),
        c.f1(),
        c.oa(),
        c.tp,
        c.fp,
        c.fn_,
        c.tn
    )
}

fn analyze(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let report = analysis::cost_report(&cfg.model, cfg.model.input_size)?;
    write_file(&cfg.output.out_dir.join("cost_report.jsonl"), &report.to_json_lines())?;
    write!(out, "{}", report.to_table()).ok();
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let rows = verify::full_suite(cfg.train.seed)?;
    write!(out, "{}", verify::format_table(&rows)).ok();
    let lines: String = rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
    write_file(&cfg.output.out_dir.join("gradcheck.jsonl"), &lines)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        writeln!(out, "all {} checks passed", rows.len()).ok();
        Ok(())
    } else {
        Err(Error::GradientCheck(failed.join(", ")))
    }
}

fn train_cmd(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let samples = dataset(cfg, &cfg.data.train_split)?;
    let log_path = cfg.output.out_dir.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let outcome = train::train_loop(&cfg.model, &cfg.train, &samples, |rec| {
        let line = serde_json::to_string(rec).expect("serializable");
        writeln!(out, "{line}").ok();
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let ckpt = cfg.output.out_dir.join("checkpoint.elgc");
    checkpoint::save(&ckpt, &cfg.model, &outcome.params)?;
    writeln!(out, "checkpoint written to {}", ckpt.display()).ok();
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, ckpt: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    let params = checkpoint::load_matching(ckpt, &cfg.model)?;
    let samples = dataset(cfg, &cfg.data.eval_split)?;
    let res = train::evaluate(&cfg.model, &params, &samples)?;
    let line = metrics_line(&res.counts);
    writeln!(out, "{line}").ok();
    let record = serde_json::json!({
        "iou": res.counts.iou(),
        "f1": res.counts.f1(),
        "oa": res.counts.oa(),
        "counts": res.counts,
        "loss": res.loss,
        "samples": samples.len(),
    });
    write_file(&cfg.output.out_dir.join("metrics.json"), &format!("{record}\n"))
}

fn infer_cmd(cfg: &RunConfig, ckpt: &Path, pre: &Path, post: &Path, dest: &Path, out: &mut dyn std::io::Write) -> Result<()> {
    let params = checkpoint::load_matching(ckpt, &cfg.model)?;
    let a = data::read_rgb(pre)?;
    let b = data::read_rgb(post)?;
    let logits = network::predict(&cfg.model, &params, &a, &b)?;
    let mask = train::logits_to_mask(&logits)?;
    data::write_mask(dest, &mask)?;
    writeln!(out, "changed_pixels={} total_pixels={} out={}", mask.changed(), mask.data.len(), dest.display()).ok();
    Ok(())
}

fn synth_cmd(cfg: &RunConfig, dest: &Path, split: &str, out: &mut dyn std::io::Write) -> Result<()> {
    let [h, w, _] = cfg.model.input_size;
    if h != w {
        return Err(Error::Config("synthetic data needs a square input_size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.synthetic_seed);
    let samples = data::synth(&mut rng, cfg.data.synthetic_count, h)?;
    data::write_split(dest, split, &samples)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), dest.join(split).display()).ok();
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Analyze { common } => analyze(&prepare(&common)?, out),
        Command::Gradcheck { common } => gradcheck(&prepare(&common)?, out),
        Command::Train { common } => train_cmd(&prepare(&common)?, out),
        Command::Eval { checkpoint, common } => eval_cmd(&prepare(&common)?, &checkpoint, out),
        Command::Infer { checkpoint, pre, post, out: dest, common } => {
            infer_cmd(&prepare(&common)?, &checkpoint, &pre, &post, &dest, out)
        }
        Command::Synth { dest, split, common } => synth_cmd(&prepare(&common)?, &dest, &split, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are printed to stderr as a single
/// line starting with the error code.
/// Options that belong to the subcommands themselves; every other `--key`
/// is a configuration override.
const NAMED_FLAGS: &[&str] = &["config", "checkpoint", "pre", "post", "out", "dest", "split"];

/// Moves subcommand options in front of the overrides and puts the
/// overrides behind `--`, so the two may be interleaved in any order.
fn hoist_named_flags(args: Vec<OsString>) -> Vec<OsString> {
    if args.len() < 3 {
        return args;
    }
    let mut named = args[..2].to_vec();
    let mut rest = Vec::new();
    let mut it = args.into_iter().skip(2);
    while let Some(a) = it.next() {
        let text = a.to_string_lossy();
        if text == "--" {
            rest.extend(it.by_ref());
            break;
        }
        let name = text.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        match name {
            Some(n) if NAMED_FLAGS.contains(&n) => {
                let inline = text.contains('=');
                named.push(a);
                if !inline {
                    named.extend(it.next());
                }
            }
            _ if text == "-h" || text == "--help" => named.push(a),
            _ => rest.push(a),
        }
    }
    if !rest.is_empty() {
        named.push("--".into());
        named.extend(rest);
    }
    named
}

pub fn main_with<I, S>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(hoist_named_flags(args.into_iter().map(Into::into).collect())) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").ok();
                return 0;
            }
            let text = e.to_string();
            let first: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            writeln!(err, "E2-usage: {}", first.join(" ").trim_start_matches("error: ")).ok();
            return 2;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            writeln!(err, "{}: {msg}", e.code()).ok();
            e.exit_code()
        }
    }
}
