//! Command-line front end.
//!
//! Five subcommands: `synth` writes a synthetic manifest, `train` runs one
//! config, `loo` runs the five-way hold-out protocol, `ablate` runs a list
//! of domain subsets, and `report` re-renders tables from a results file.
//! Config comes from an optional TOML file plus repeatable `--set
//! key=value` overrides with dotted paths; `--seed` beats both. Every run
//! writes into its own directory named by a config hash and the seed, and
//! everything except wall-clock time is a pure function of (config, seed).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::backbone::save_checkpoint;
use crate::data::{write_manifest, AgeGroup, Sample, SynthSpec};
use crate::error::AgedgError;
use crate::harness::{
    leave_one_domain_out_full, subset_ablation_full, train_and_select_full, TrainConfig,
};
use crate::report::{emit_table, load_records, persist_records, TableFormat, TableLayout};

#[derive(Parser)]
#[command(
    name = "agedg",
    version,
    about = "Domain-generalisation training and evaluation across age groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a manifest.
    Synth(SynthArgs),
    /// Train one configuration and record its evaluation.
    Train(TrainArgs),
    /// Run the leave-one-domain-out protocol (five runs).
    Loo(LooArgs),
    /// Run budget-matched training over listed domain subsets.
    Ablate(AblateArgs),
    /// Re-render result tables from a records file.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, dotted paths allowed; repeatable and
    /// applied in order after the file and after --algorithm.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Update rule shorthand for --set algorithm.algorithm=...
    #[arg(long)]
    algorithm: Option<String>,
    /// Run seed; wins over the config file and --set.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $AGEDG_OUT, then ./agedg-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct LooArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Table rendering for the summary: markdown or csv.
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training subset as comma-separated age groups, e.g.
    /// "18-30,30-40,40-50"; repeatable. Overrides a config `subsets` list.
    #[arg(long = "subset", value_name = "GROUPS")]
    subset: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of age-group domains; the protocol is defined for 5.
    #[arg(long)]
    domains: Option<usize>,
    /// Samples generated per domain.
    #[arg(long = "per-domain")]
    per_domain: Option<usize>,
    /// Rotation angle per ordinal step between adjacent domains.
    #[arg(long)]
    shift: Option<f64>,
    /// TOML file of generator fields; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Records file written by train/loo/ablate.
    #[arg(long)]
    records: PathBuf,
    /// One of: loo-comparison, four-vs-five, loss-diff, sizes, subset.
    #[arg(long)]
    layout: String,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    /// Bad flags or config: exit 2.
    Usage(String),
    /// Failure while running: exit 1.
    Runtime(String),
}

impl From<AgedgError> for CliError {
    fn from(e: AgedgError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses and runs one invocation; argv includes the program name.
pub fn run_cli(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Loo(args) => cmd_loo(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

// ---------------------------------------------------------------------------
// Config plumbing

fn load_table(path: Option<&Path>) -> Result<toml::Table, CliError> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("reading {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

/// `KEY=VALUE` with a dotted key; the value is parsed as a TOML literal
/// when possible and taken as a string otherwise.
fn apply_override(tbl: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set {spec:?}: expected KEY=VALUE")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("--set {spec:?}: empty key segment")));
    }
    let mut cur = tbl;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("--set {spec:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()))
}

/// File, then --algorithm, then --set in order, then --seed.
fn resolve_train_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut tbl = load_table(args.config.as_deref())?;
    if let Some(alg) = &args.algorithm {
        apply_override(&mut tbl, &format!("algorithm.algorithm={alg}"))?;
    }
    for spec in &args.set {
        apply_override(&mut tbl, spec)?;
    }
    let mut cfg: TrainConfig = toml::Value::Table(tbl)
        .try_into()
        .map_err(|e| usage(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("AGEDG_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("agedg-out"))
}

/// `<root>/<kind>-<hash8>-s<seed>`; the hash covers the resolved config
/// text so distinct configs never share a directory.
fn run_dir(root: &Path, kind: &str, config_text: &str, seed: u64) -> Result<PathBuf, CliError> {
    let digest = Sha256::digest(config_text.as_bytes());
    let dir = root.join(format!("{kind}-{}-s{seed}", hex::encode(&digest[..4])));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Records files are rewritten, not appended, so re-running an identical
/// invocation leaves identical bytes.
fn write_records(dir: &Path, records: &[crate::harness::RunRecord]) -> Result<PathBuf, CliError> {
    let path = dir.join("records.jsonl");
    match fs::remove_file(&path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => {
            return Err(CliError::Runtime(format!(
                "clearing {}: {e}",
                path.display()
            )))
        }
    }
    persist_records(records, &path)?;
    Ok(path)
}

fn parse_format(s: &str) -> Result<TableFormat, CliError> {
    s.parse::<TableFormat>().map_err(usage)
}

fn table_file_name(format: TableFormat) -> &'static str {
    match format {
        TableFormat::Markdown => "table.md",
        TableFormat::Csv => "table.csv",
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    if let Some(d) = args.domains {
        if d != crate::data::DOMAIN_COUNT {
            return Err(usage(format!(
                "--domains {d}: the age-group protocol is defined for exactly 5 domains"
            )));
        }
    }
    let mut tbl = load_table(args.config.as_deref())?;
    for spec in &args.set {
        apply_override(&mut tbl, spec)?;
    }
    if let Some(n) = args.per_domain {
        let row = toml::Value::Array(vec![toml::Value::Integer(n as i64); crate::data::DOMAIN_COUNT]);
        tbl.insert("counts".into(), row);
    }
    if let Some(s) = args.shift {
        tbl.insert("shift".into(), toml::Value::Float(s));
    }
    let spec: SynthSpec = toml::Value::Table(tbl)
        .try_into()
        .map_err(|e| usage(format!("generator config: {e}")))?;
    let split = crate::data::synthesize_dataset(&spec, args.seed)?;

    let config_text = format!("seed = {}\n{}", args.seed, toml::to_string_pretty(&spec).map_err(|e| CliError::Runtime(e.to_string()))?);
    let dir = run_dir(&out_root(args.out.as_deref()), "synth", &config_text, args.seed)?;
    write_text(&dir.join("config.toml"), &config_text)?;

    let mut samples: Vec<Sample> = Vec::new();
    for g in AgeGroup::ALL {
        let d = split.domain(g);
        samples.extend(d.train.iter().cloned());
        samples.extend(d.val.iter().cloned());
        samples.extend(d.test.iter().cloned());
    }
    let manifest = dir.join("data.csv");
    write_manifest(&samples, split.shape, &manifest)?;
    println!(
        "wrote {} samples across {} domains to {}",
        samples.len(),
        crate::data::DOMAIN_COUNT,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args.cfg)?;
    let config_text =
        toml::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = run_dir(&out_root(args.cfg.out.as_deref()), "train", &config_text, cfg.seed)?;
    write_text(&dir.join("config.toml"), &config_text)?;

    let data = cfg.source.load(cfg.seed)?;
    let (record, model) = train_and_select_full(&cfg, &data)?;
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;
    let records_path = write_records(&dir, std::slice::from_ref(&record))?;
    let mean = record.report.mean();
    println!(
        "selected step {} (score {:.6}); mean test: arousal ccc {:.3}, valence ccc {:.3}, accuracy {:.3}, loss {:.3}",
        record.selected_step, record.selection_score, mean.arousal_ccc, mean.valence_ccc, mean.accuracy, mean.loss
    );
    println!("record: {}", records_path.display());
    Ok(())
}

fn cmd_loo(args: LooArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args.cfg)?;
    let format = parse_format(&args.format)?;
    let config_text =
        toml::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = run_dir(&out_root(args.cfg.out.as_deref()), "loo", &config_text, cfg.seed)?;
    write_text(&dir.join("config.toml"), &config_text)?;

    let data = cfg.source.load(cfg.seed)?;
    let pairs = leave_one_domain_out_full(&cfg, &data, args.jobs)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, (record, model)) in pairs.into_iter().enumerate() {
        save_checkpoint(
            &model,
            &dir.join(format!("checkpoint-heldout-{}.json", AgeGroup::ALL[i])),
        )?;
        records.push(record);
    }
    let records_path = write_records(&dir, &records)?;
    let table = emit_table(&records, TableLayout::LooComparison, format)?;
    write_text(&dir.join(table_file_name(format)), &table)?;
    print!("{table}");
    println!("records: {}", records_path.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut tbl = load_table(args.cfg.config.as_deref())?;
    if let Some(alg) = &args.cfg.algorithm {
        apply_override(&mut tbl, &format!("algorithm.algorithm={alg}"))?;
    }
    for spec in &args.cfg.set {
        apply_override(&mut tbl, spec)?;
    }
    // `subsets` lives beside the run config in the file; pull it out
    // before the strict config parse.
    let config_subsets = tbl.remove("subsets");
    let mut cfg: TrainConfig = toml::Value::Table(tbl)
        .try_into()
        .map_err(|e| usage(format!("config: {e}")))?;
    if let Some(seed) = args.cfg.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;

    let subsets: Vec<Vec<AgeGroup>> = if !args.subset.is_empty() {
        args.subset
            .iter()
            .map(|spec| {
                spec.split(',')
                    .map(|part| part.trim().parse::<AgeGroup>())
                    .collect::<std::result::Result<Vec<AgeGroup>, _>>()
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(usage)?
    } else if let Some(value) = config_subsets {
        value
            .try_into()
            .map_err(|e| usage(format!("config subsets: {e}")))?
    } else {
        return Err(usage(
            "ablate needs --subset flags or a `subsets` list in the config",
        ));
    };

    let format = parse_format(&args.format)?;
    let config_text = format!(
        "{}subsets = {}\n",
        toml::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
        toml::Value::Array(
            subsets
                .iter()
                .map(|s| toml::Value::Array(
                    s.iter()
                        .map(|g| toml::Value::String(g.to_string()))
                        .collect()
                ))
                .collect()
        )
    );
    let dir = run_dir(&out_root(args.cfg.out.as_deref()), "ablate", &config_text, cfg.seed)?;
    write_text(&dir.join("config.toml"), &config_text)?;

    let data = cfg.source.load(cfg.seed)?;
    let pairs = subset_ablation_full(&cfg, &data, &subsets, args.jobs)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, (record, model)) in pairs.into_iter().enumerate() {
        save_checkpoint(&model, &dir.join(format!("checkpoint-{i}.json")))?;
        records.push(record);
    }
    let records_path = write_records(&dir, &records)?;
    let table = emit_table(&records, TableLayout::Subset, format)?;
    write_text(&dir.join(table_file_name(format)), &table)?;
    print!("{table}");
    println!("records: {}", records_path.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let layout = args.layout.parse::<TableLayout>().map_err(usage)?;
    let format = parse_format(&args.format)?;
    let records = load_records(&args.records)?;
    let table = emit_table(&records, layout, format)?;
    match &args.out {
        Some(path) => write_text(path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DOMAIN_COUNT;
    use crate::report::load_records as load_records_file;

    fn run(args: &[&str]) -> i32 {
        run_cli(args.iter().map(|s| s.to_string()))
    }

    /// Replaces the wall-clock value in each record line so byte
    /// comparisons see only the deterministic fields.
    fn scrub_wall_clock(text: &str) -> String {
        let key = "\"wall_clock_secs\":";
        let mut out = String::new();
        for line in text.lines() {
            match line.find(key) {
                Some(pos) => {
                    let vstart = pos + key.len();
                    let rest = &line[vstart..];
                    let vend = rest
                        .char_indices()
                        .find(|(_, c)| *c == ',' || *c == '}')
                        .map(|(i, _)| i)
                        .unwrap_or(rest.len());
                    out.push_str(&line[..vstart]);
                    out.push('0');
                    out.push_str(&rest[vend..]);
                }
                None => out.push_str(line),
            }
            out.push('\n');
        }
        out
    }

    fn tiny_overrides(out: &Path, seed: u64) -> Vec<String> {
        vec![
            "--set".into(),
            "source.synth.counts=[40,40,40,40,40]".into(),
            "--set".into(),
            "source.synth.input_dim=6".into(),
            "--set".into(),
            "model.hidden=[8]".into(),
            "--set".into(),
            "model.feature_dim=5".into(),
            "--set".into(),
            "steps=4".into(),
            "--set".into(),
            "eval_every=2".into(),
            "--set".into(),
            "batch_size=8".into(),
            "--seed".into(),
            seed.to_string(),
            "--out".into(),
            out.display().to_string(),
        ]
    }

    fn find_file(root: &Path, name: &str) -> PathBuf {
        fn walk(dir: &Path, name: &str, hits: &mut Vec<PathBuf>) {
            for entry in fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    walk(&p, name, hits);
                } else if p.file_name().map(|f| f == name).unwrap_or(false) {
                    hits.push(p);
                }
            }
        }
        let mut hits = Vec::new();
        walk(root, name, &mut hits);
        assert_eq!(hits.len(), 1, "expected exactly one {name} under {}", root.display());
        hits.remove(0)
    }

    #[test]
    fn synth_writes_the_expected_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let args: Vec<String> = [
            "agedg", "synth", "--domains", "5", "--per-domain", "30", "--shift", "0.4",
            "--set", "input_dim=6",
            "--seed", "3",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain(["--out".to_string(), dir.path().display().to_string()])
        .collect();
        assert_eq!(run_cli(args), 0);
        let manifest = find_file(dir.path(), "data.csv");
        let text = fs::read_to_string(&manifest).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 * 30);
        let config = find_file(dir.path(), "config.toml");
        let cfg_text = fs::read_to_string(&config).unwrap();
        assert!(cfg_text.contains("seed = 3"), "{cfg_text}");
    }

    #[test]
    fn synth_rejects_a_non_five_domain_count() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(&[
            "agedg",
            "synth",
            "--domains",
            "4",
            "--out",
            &dir.path().display().to_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn train_writes_record_checkpoint_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["agedg".to_string(), "train".to_string()];
        args.extend(tiny_overrides(dir.path(), 11));
        assert_eq!(run_cli(args), 0);
        let records = load_records_file(&find_file(dir.path(), "records.jsonl")).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].config.seed, 11);
        assert_eq!(records[0].config.steps, 4);
        let state = crate::backbone::load_checkpoint(&find_file(dir.path(), "checkpoint.json")).unwrap();
        assert_eq!(state.feature_dim, 5);
        let cfg_text = fs::read_to_string(find_file(dir.path(), "config.toml")).unwrap();
        assert!(cfg_text.contains("seed = 11"), "{cfg_text}");
    }

    #[test]
    fn seed_flag_beats_config_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["agedg".to_string(), "train".to_string()];
        args.extend(tiny_overrides(dir.path(), 7));
        args.extend(["--set".to_string(), "seed=123".to_string()]);
        assert_eq!(run_cli(args), 0);
        let records = load_records_file(&find_file(dir.path(), "records.jsonl")).unwrap();
        assert_eq!(records[0].config.seed, 7);
    }

    #[test]
    fn unknown_config_keys_exit_with_usage_code() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(&[
            "agedg",
            "train",
            "--set",
            "stepz=5",
            "--out",
            &dir.path().display().to_string(),
        ]);
        assert_eq!(code, 2);
        let code = run(&[
            "agedg",
            "train",
            "--set",
            "algorithm.warp=9",
            "--out",
            &dir.path().display().to_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn loo_twice_is_byte_identical_modulo_wall_clock() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let mut args = vec![
                "agedg".to_string(),
                "loo".to_string(),
                "--algorithm".to_string(),
                "erm".to_string(),
            ];
            args.extend(tiny_overrides(dir.path(), 7));
            assert_eq!(run_cli(args), 0);
        }
        let rec_a = fs::read_to_string(find_file(dir_a.path(), "records.jsonl")).unwrap();
        let rec_b = fs::read_to_string(find_file(dir_b.path(), "records.jsonl")).unwrap();
        assert_ne!(rec_a, rec_b, "wall clock should differ between runs");
        assert_eq!(scrub_wall_clock(&rec_a), scrub_wall_clock(&rec_b));
        let table_a = fs::read_to_string(find_file(dir_a.path(), "table.md")).unwrap();
        let table_b = fs::read_to_string(find_file(dir_b.path(), "table.md")).unwrap();
        assert_eq!(table_a, table_b);
        assert!(table_a.contains("ERM"), "{table_a}");
        let ck_a = fs::read_to_string(find_file(dir_a.path(), "checkpoint-heldout-60-85.json")).unwrap();
        let ck_b = fs::read_to_string(find_file(dir_b.path(), "checkpoint-heldout-60-85.json")).unwrap();
        assert_eq!(ck_a, ck_b);
        let records = load_records_file(&find_file(dir_a.path(), "records.jsonl")).unwrap();
        assert_eq!(records.len(), DOMAIN_COUNT);
    }

    #[test]
    fn ablate_takes_subsets_from_flags_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec![
            "agedg".to_string(),
            "ablate".to_string(),
            "--subset".to_string(),
            "18-30,30-40,40-50,60-85".to_string(),
            "--subset".to_string(),
            "18-30,30-40,60-85".to_string(),
        ];
        args.extend(tiny_overrides(dir.path(), 5));
        assert_eq!(run_cli(args), 0);
        let records = load_records_file(&find_file(dir.path(), "records.jsonl")).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(
            records[0].train_sizes.iter().sum::<usize>(),
            records[1].train_sizes.iter().sum::<usize>()
        );
        let table = fs::read_to_string(find_file(dir.path(), "table.md")).unwrap();
        assert!(table.contains("Without [40-50] & [50-60]"), "{table}");
    }

    #[test]
    fn ablate_without_subsets_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["agedg".to_string(), "ablate".to_string()];
        args.extend(tiny_overrides(dir.path(), 5));
        assert_eq!(run_cli(args), 2);
    }

    #[test]
    fn report_rerenders_tables_from_a_records_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec![
            "agedg".to_string(),
            "loo".to_string(),
            "--algorithm".to_string(),
            "erm".to_string(),
        ];
        args.extend(tiny_overrides(dir.path(), 13));
        assert_eq!(run_cli(args), 0);
        let records_path = find_file(dir.path(), "records.jsonl");
        let out_csv = dir.path().join("sizes.csv");
        let code = run(&[
            "agedg",
            "report",
            "--records",
            &records_path.display().to_string(),
            "--layout",
            "sizes",
            "--format",
            "csv",
            "--out",
            &out_csv.display().to_string(),
        ]);
        assert_eq!(code, 0);
        let table = fs::read_to_string(&out_csv).unwrap();
        assert!(table.contains("Total"), "{table}");
        // A layout the records cannot fill is a runtime failure.
        let code = run(&[
            "agedg",
            "report",
            "--records",
            &records_path.display().to_string(),
            "--layout",
            "four-vs-five",
        ]);
        assert_eq!(code, 1);
        // An unknown layout is a usage failure.
        let code = run(&[
            "agedg",
            "report",
            "--records",
            &records_path.display().to_string(),
            "--layout",
            "sideways",
        ]);
        assert_eq!(code, 2);
    }
}
