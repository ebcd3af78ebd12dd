use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use complabel::baselines::calibration_report;
use complabel::checks::{run_suite, CheckOptions, Suite};
use complabel::data::{
    generate_complementary, load_csv, load_idx, read_complementary_csv, split, synth_gaussians,
    write_complementary_csv, write_ordinary_csv, CsvSchema,
};
use complabel::manifest::RunManifest;
use complabel::trainer::{evaluate_accuracy, select_hyperparameters, train, TrainerConfig};
use complabel::{checkpoint, ComplementaryDataset64, OrdinaryDataset64};

#[derive(Parser)]
#[command(
    name = "complabel",
    version,
    about = "Learning classifiers from complementary labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one complementary label per pattern of an ordinary dataset.
    GenComp(GenCompArgs),
    /// Train a model on a complementary dataset.
    Train(TrainArgs),
    /// Run the built-in identity and gradient checks.
    Check(CheckArgs),
    /// Train every candidate of a grid and select by validation free-risk.
    Sweep(SweepArgs),
    /// Test accuracy and calibration of a checkpoint.
    Eval(EvalArgs),
    /// Split a complementary dataset into two parts.
    Split(SplitArgs),
    /// Write a synthetic Gaussian-mixture dataset with ordinary labels.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Idx,
}

/// An ordinary dataset: a CSV file, or an IDX image file plus `--*-labels`.
#[derive(Args, Clone)]
struct OrdinaryInput {
    #[arg(long = "format", value_enum, default_value = "csv")]
    format: Format,
    /// IDX label file (with `--format idx`).
    #[arg(long = "labels")]
    labels: Option<PathBuf>,
    /// Number of classes for CSV input (default: largest label).
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct GenCompArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    source: OrdinaryInput,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TestInput {
    /// Ordinary test set (CSV, or IDX images with `--test-format idx`).
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    test_format: Format,
    #[arg(long)]
    test_labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML file with trainer settings; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[command(flatten)]
    test: TestInput,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Checkpoint path (default: next to the metrics file).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also print metric records to standard output.
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite to run; all suites when absent.
    #[arg(long, value_parser = ["unbiasedness", "gradients", "corollary2", "bounds"])]
    suite: Option<String>,
    /// Use a deliberately broken complement transform.
    #[arg(long)]
    mutate: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the results as JSON (with a manifest alongside).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML with a `[base]` table of settings and a `[grid]` table of value lists.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[command(flatten)]
    test: TestInput,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Checkpoint of the selected candidate (default: next to the CSV).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    test: TestInput,
    /// Write a reliability table (CSV, plus JSON alongside).
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Also write the result as JSON (with a manifest alongside).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fraction of rows in the first output.
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    second: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<complabel::Error>() {
            Some(complabel::Error::Config(_) | complabel::Error::ConfigFields(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<complabel::Error> for Failure {
    fn from(e: complabel::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

type CmdResult = Result<(), Failure>;

/// State carried into a replayed command.
#[derive(Default)]
struct Replay {
    config: Option<toml::Table>,
    hashes: std::collections::BTreeMap<String, String>,
}

impl Replay {
    fn verify(&self, role: &str, hash: &str) -> CmdResult {
        match self.hashes.get(role) {
            Some(expected) if expected != hash => Err(Failure {
                code: 1,
                error: anyhow!(
                    "{role} dataset changed since the manifest was written (hash {hash}, recorded {expected})"
                ),
            }),
            _ => Ok(()),
        }
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} `{}` does not exist", path.display())))
    }
}

fn load_ordinary(
    path: &Path,
    format: Format,
    labels: Option<&Path>,
    classes: Option<usize>,
) -> Result<OrdinaryDataset64, Failure> {
    require_file(path, "input")?;
    let ds = match format {
        Format::Csv => load_csv(
            path,
            &CsvSchema {
                classes,
                ..CsvSchema::default()
            },
        ),
        Format::Idx => {
            let labels = labels.ok_or_else(|| usage(anyhow!("IDX input needs a label file")))?;
            require_file(labels, "label file")?;
            load_idx(path, labels)
        }
    };
    Ok(ds.with_context(|| format!("reading {}", path.display()))?)
}

fn load_test(t: &TestInput) -> Result<Option<OrdinaryDataset64>, Failure> {
    t.test
        .as_deref()
        .map(|p| load_ordinary(p, t.test_format, t.test_labels.as_deref(), None))
        .transpose()
}

fn load_comp(path: &Path) -> Result<ComplementaryDataset64, Failure> {
    require_file(path, "complementary dataset")?;
    Ok(read_complementary_csv(path).with_context(|| format!("reading {}", path.display()))?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_comp(a: &GenCompArgs, mut m: RunManifest, replay: &Replay) -> CmdResult {
    let ds = load_ordinary(&a.input, a.source.format, a.source.labels.as_deref(), a.source.classes)?;
    replay.verify("input", &ds.content_hash())?;
    let comp = generate_complementary(&ds, a.seed)?;
    write_complementary_csv(&a.out, &comp).with_context(|| format!("writing {}", a.out.display()))?;
    m.seed = Some(a.seed);
    m.dataset_hashes.insert("input".into(), ds.content_hash());
    m.dataset_hashes.insert("output".into(), comp.content_hash());
    m.outputs.insert("complementary".into(), display(&a.out));
    m.save(&sibling(&a.out, ".manifest.json"))?;
    eprintln!(
        "wrote {} rows (K={}) to {}",
        comp.len(),
        comp.classes(),
        a.out.display()
    );
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<TrainerConfig, Failure> {
    match path {
        None => Ok(TrainerConfig::default()),
        Some(p) => {
            require_file(p, "config file")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainerConfig::from_toml_str(&text)?)
        }
    }
}

fn cmd_train(a: &TrainArgs, mut m: RunManifest, replay: &Replay) -> CmdResult {
    let mut cfg = match &replay.config {
        Some(t) => TrainerConfig::from_table(t)?,
        None => read_config(a.config.as_deref())?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let train_set = load_comp(&a.train)?;
    let valid = a.valid.as_deref().map(load_comp).transpose()?;
    let test = load_test(&a.test)?;
    replay.verify("train", &train_set.content_hash())?;
    if let Some(v) = &valid {
        replay.verify("valid", &v.content_hash())?;
    }
    if let Some(t) = &test {
        replay.verify("test", &t.content_hash())?;
    }

    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| sibling(&a.metrics, ".checkpoint.json"));
    let final_ckpt = sibling(&ckpt, ".final.json");
    let summary_path = sibling(&a.metrics, ".summary.json");
    let mut out = std::io::BufWriter::new(
        fs::File::create(&a.metrics).with_context(|| format!("creating {}", a.metrics.display()))?,
    );
    let echo = a.stdout;
    let outcome = train(&cfg, &train_set, valid.as_ref(), test.as_ref(), |rec| {
        let line = serde_json::to_string(rec)?;
        writeln!(out, "{line}")?;
        if echo {
            println!("{line}");
        }
        Ok(())
    })?;
    out.flush().context("writing metrics")?;
    checkpoint::save(outcome.selected_model(), &ckpt)?;
    checkpoint::save(&outcome.final_model, &final_ckpt)?;
    write_json(&summary_path, &outcome.summary)?;

    m.seed = Some(cfg.seed);
    m.config = Some(toml::Table::try_from(&cfg).context("serializing config")?);
    m.dataset_hashes.insert("train".into(), train_set.content_hash());
    if let Some(v) = &valid {
        m.dataset_hashes.insert("valid".into(), v.content_hash());
    }
    if let Some(t) = &test {
        m.dataset_hashes.insert("test".into(), t.content_hash());
    }
    m.outputs.insert("metrics".into(), display(&a.metrics));
    m.outputs.insert("checkpoint".into(), display(&ckpt));
    m.outputs.insert("final_checkpoint".into(), display(&final_ckpt));
    m.outputs.insert("summary".into(), display(&summary_path));
    m.save(&sibling(&a.metrics, ".manifest.json"))?;
    println!("{}", serde_json::to_string(&outcome.summary).context("summary")?);
    Ok(())
}

fn cmd_check(a: &CheckArgs, mut m: RunManifest) -> CmdResult {
    let suites: Vec<Suite> = match &a.suite {
        Some(s) => vec![Suite::parse(s).ok_or_else(|| usage(anyhow!("unknown suite {s}")))?],
        None => Suite::ALL.to_vec(),
    };
    let opts = CheckOptions {
        seed: a.seed,
        mutate: a.mutate,
    };
    let mut failed = 0;
    let mut results = Vec::new();
    for s in suites {
        for r in run_suite(s, opts)? {
            println!("{r}");
            failed += usize::from(!r.passed);
            results.push(r);
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &results)?;
        m.seed = Some(a.seed);
        m.outputs.insert("report".into(), display(out));
        m.save(&sibling(out, ".manifest.json"))?;
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            error: anyhow!("{failed} check(s) failed"),
        });
    }
    Ok(())
}

/// Expands `[base]` and `[grid]` into candidate configurations, in key order
/// with the last key varying fastest. Returns the grid keys too.
fn expand_grid(text: &str) -> Result<(Vec<String>, Vec<TrainerConfig>), Failure> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| usage(anyhow!("grid file: {}", e.message())))?;
    for key in doc.keys() {
        if key != "base" && key != "grid" {
            return Err(usage(anyhow!("grid file: unknown table `{key}`")));
        }
    }
    let table = |name: &str| -> Result<toml::Table, Failure> {
        match doc.get(name) {
            None => Ok(toml::Table::new()),
            Some(toml::Value::Table(t)) => Ok(t.clone()),
            Some(_) => Err(usage(anyhow!("grid file: `{name}` must be a table"))),
        }
    };
    let base = table("base")?;
    let grid = table("grid")?;
    let mut axes = Vec::new();
    for (k, v) in &grid {
        match v {
            toml::Value::Array(values) if !values.is_empty() => axes.push((k.clone(), values.clone())),
            _ => return Err(usage(anyhow!("grid.{k} must be a non-empty list"))),
        }
    }
    let mut combos: Vec<toml::Table> = vec![base];
    for (k, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|t| {
                values.iter().map(move |v| {
                    let mut t = t.clone();
                    t.insert(k.clone(), v.clone());
                    t
                })
            })
            .collect();
    }
    let configs = combos
        .iter()
        .map(TrainerConfig::from_table)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((axes.into_iter().map(|(k, _)| k).collect(), configs))
}

fn csv_value(cfg: &TrainerConfig, key: &str) -> String {
    match toml::Table::try_from(cfg).ok().and_then(|t| t.get(key).cloned()) {
        Some(toml::Value::String(s)) => s,
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_sweep(a: &SweepArgs, mut m: RunManifest, replay: &Replay) -> CmdResult {
    require_file(&a.grid, "grid file")?;
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let (keys, grid) = expand_grid(&text)?;
    let train_set = load_comp(&a.train)?;
    let valid = load_comp(&a.valid)?;
    let test = load_test(&a.test)?;
    replay.verify("train", &train_set.content_hash())?;
    replay.verify("valid", &valid.content_hash())?;
    let res = select_hyperparameters(&grid, &train_set, &valid, test.as_ref(), a.jobs.max(1))?;

    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut header = vec!["index".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(["best_epoch", "valid_free_risk", "test_accuracy", "selected", "error"].map(String::from));
    w.write_record(&header).context("writing sweep CSV")?;
    for c in &res.candidates {
        let mut row = vec![c.index.to_string()];
        row.extend(keys.iter().map(|k| csv_value(&c.config, k)));
        row.push(opt(c.best_epoch));
        row.push(opt(c.valid_free_risk));
        row.push(opt(c.test_accuracy));
        row.push(u8::from(c.index == res.selected).to_string());
        row.push(c.error.clone().unwrap_or_default());
        w.write_record(&row).context("writing sweep CSV")?;
    }
    w.flush().context("writing sweep CSV")?;

    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".checkpoint.json"));
    checkpoint::save(&res.checkpoint.model, &ckpt)?;
    let summary = serde_json::json!({
        "selected": res.selected,
        "best_epoch": res.checkpoint.epoch,
        "best_valid_risk": res.checkpoint.valid_free_risk,
        "rank_correlation": res.rank_correlation,
        "candidates": res.candidates.len(),
        "failed": res.candidates.iter().filter(|c| c.error.is_some()).count(),
    });
    let summary_path = sibling(&a.out, ".summary.json");
    write_json(&summary_path, &summary)?;

    m.dataset_hashes.insert("train".into(), train_set.content_hash());
    m.dataset_hashes.insert("valid".into(), valid.content_hash());
    if let Some(t) = &test {
        m.dataset_hashes.insert("test".into(), t.content_hash());
    }
    m.outputs.insert("table".into(), display(&a.out));
    m.outputs.insert("checkpoint".into(), display(&ckpt));
    m.outputs.insert("summary".into(), display(&summary_path));
    m.save(&sibling(&a.out, ".manifest.json"))?;
    println!("{summary}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs, mut m: RunManifest, replay: &Replay) -> CmdResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let model = checkpoint::load::<f64>(&a.checkpoint).map_err(|e| usage(anyhow!("checkpoint: {e}")))?;
    let test = load_test(&a.test)?.ok_or_else(|| usage(anyhow!("eval needs --test")))?;
    replay.verify("test", &test.content_hash())?;
    let accuracy = evaluate_accuracy(&model, &test)?;
    let mut result = serde_json::json!({ "accuracy": accuracy, "n": test.len() });
    m.dataset_hashes.insert("test".into(), test.content_hash());
    if let Some(path) = &a.calibration {
        if a.bins < 2 {
            return Err(usage(anyhow!("--bins must be at least 2")));
        }
        let report = calibration_report(&model, &test, a.bins)?;
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        let json_path = path.with_extension("json");
        write_json(&json_path, &report)?;
        result["ece"] = report.ece.into();
        m.outputs.insert("calibration_csv".into(), display(path));
        m.outputs.insert("calibration_json".into(), display(&json_path));
    }
    if let Some(out) = &a.out {
        write_json(out, &result)?;
        m.outputs.insert("result".into(), display(out));
    }
    if let Some(main) = a.out.as_ref().or(a.calibration.as_ref()) {
        m.save(&sibling(main, ".manifest.json"))?;
    }
    println!("{result}");
    Ok(())
}

fn cmd_split(a: &SplitArgs, mut m: RunManifest) -> CmdResult {
    let ds = load_comp(&a.input)?;
    let (first, second) = split(&ds, a.ratio, a.seed)?;
    write_complementary_csv(&a.first, &first)?;
    write_complementary_csv(&a.second, &second)?;
    m.seed = Some(a.seed);
    m.dataset_hashes.insert("input".into(), ds.content_hash());
    m.outputs.insert("first".into(), display(&a.first));
    m.outputs.insert("second".into(), display(&a.second));
    m.save(&sibling(&a.first, ".manifest.json"))?;
    eprintln!("split {} rows into {} + {}", ds.len(), first.len(), second.len());
    Ok(())
}

fn cmd_synth(a: &SynthArgs, mut m: RunManifest) -> CmdResult {
    if a.classes < 2 {
        return Err(usage(anyhow!("--classes must be at least 2")));
    }
    let ds = synth_gaussians::<f64>(a.classes, a.n, a.dim, a.separation, a.seed)?;
    write_ordinary_csv(&a.out, &ds)?;
    m.seed = Some(a.seed);
    m.dataset_hashes.insert("output".into(), ds.content_hash());
    m.outputs.insert("dataset".into(), display(&a.out));
    m.save(&sibling(&a.out, ".manifest.json"))?;
    Ok(())
}

fn run(argv: Vec<String>, replay: Option<Replay>) -> CmdResult {
    let cli = match Cli::try_parse_from(std::iter::once("complabel".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return if code == 0 {
                Ok(())
            } else {
                Err(Failure {
                    code,
                    error: anyhow!("invalid arguments"),
                })
            };
        }
    };
    let manifest = |name: &str| RunManifest::new(name, argv.clone());
    let nested = replay.is_some();
    let replay = replay.unwrap_or_default();
    match &cli.command {
        Command::GenComp(a) => gen_comp(a, manifest("gen-comp"), &replay),
        Command::Train(a) => cmd_train(a, manifest("train"), &replay),
        Command::Check(a) => cmd_check(a, manifest("check")),
        Command::Sweep(a) => cmd_sweep(a, manifest("sweep"), &replay),
        Command::Eval(a) => cmd_eval(a, manifest("eval"), &replay),
        Command::Split(a) => cmd_split(a, manifest("split")),
        Command::Synth(a) => cmd_synth(a, manifest("synth")),
        Command::Replay(a) => {
            if nested {
                return Err(usage(anyhow!("a manifest cannot replay another replay")));
            }
            require_file(&a.manifest, "manifest")?;
            let recorded = RunManifest::load(&a.manifest).map_err(|e| usage(anyhow!("manifest: {e}")))?;
            run(
                recorded.argv,
                Some(Replay {
                    config: recorded.config,
                    hashes: recorded.dataset_hashes,
                }),
            )
        }
    }
}

fn main() -> ExitCode {
    match run(std::env::args().skip(1).collect(), None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if f.error.to_string() != "invalid arguments" {
                eprintln!("error: {:#}", f.error);
            }
            ExitCode::from(f.code)
        }
    }
}
