//! Command-line orchestration.
//!
//! Every command resolves its configuration (defaults < `--config` file <
//! `--seed` < `key=value` overrides), writes `resolved_config.toml` and
//! `run.json` into the output directory before doing any work, and finishes
//! with a `manifest.json` index of the artifacts it produced. Failures write
//! `error.json` and map to distinct exit codes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{load_manifest, write_synthetic_dataset, PairSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_cam_overlays, export_roc, semantic_panel, Modality};
use crate::experiment::{cross_validate, oracle_check, standard_variants, CvEvent};
use crate::imaging::{resize_image, save_png};
use crate::model::ClassifierHandle;
use crate::objective::{initial_classifier, train_student, train_teacher, StepRecord, TrainConfig};
use crate::srg::build_relations;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

const DETERMINISM_NOTE: &str = "single-threaded CPU kernels with seeded initialization and shuffling; \
training logs are reproducible on the same build and machine, floating-point results may differ across CPUs";

#[derive(Debug, Parser)]
#[command(name = "alignfree", version, about = "Alignment-free dense distillation between paired image modalities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// TOML file with training configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long, default_value = "run")]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityArg {
    Wli,
    Nbi,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Wli => Modality::Wli,
            ModalityArg::Nbi => Modality::Nbi,
        }
    }
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Write a synthetic misaligned paired dataset.
    GenData {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        warp: f64,
        /// Image side; defaults to the configured input size.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
        /// `key=value` configuration overrides.
        overrides: Vec<String>,
    },
    /// Train the teacher-modality classifier (classification loss only).
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        overrides: Vec<String>,
    },
    /// Distill a frozen teacher into a student-modality classifier.
    TrainStudent {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
        overrides: Vec<String>,
    },
    /// Score a checkpoint, or cross-validate teacher and distillation variants.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to evaluate (not needed with --cross-validate).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Teacher checkpoint; enables CAM overlays next to the metrics.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "wli")]
        modality: ModalityArg,
        /// Patient-level cross-validation of the distillation variants.
        #[arg(long)]
        cross_validate: bool,
        /// Comma-separated subset of add+srg, add, logit, cic.
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        common: Common,
        overrides: Vec<String>,
    },
    /// Compare the tensor affinity pipeline with the scalar reference.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        overrides: Vec<String>,
    },
    /// Render activation maps, refined maps and relation masks per sample.
    Visualize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Feature stage whose masks are drawn; defaults to the deepest tap.
        #[arg(long)]
        stage: Option<usize>,
        #[command(flatten)]
        common: Common,
        overrides: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainStudent { .. } => "train-student",
            Command::Evaluate { .. } => "evaluate",
            Command::OracleCheck { .. } => "oracle-check",
            Command::Visualize { .. } => "visualize",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainTeacher { common, .. }
            | Command::TrainStudent { common, .. }
            | Command::Evaluate { common, .. }
            | Command::OracleCheck { common, .. }
            | Command::Visualize { common, .. } => common,
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData { overrides, .. }
            | Command::TrainTeacher { overrides, .. }
            | Command::TrainStudent { overrides, .. }
            | Command::Evaluate { overrides, .. }
            | Command::OracleCheck { overrides, .. }
            | Command::Visualize { overrides, .. } => overrides,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` pairs to a table; values use TOML literal syntax, bare words are strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override '{o}' has an empty key segment")));
        }
        let mut cursor = &mut *table;
        for p in &parts[..parts.len() - 1] {
            cursor = cursor
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override '{o}': '{p}' is not a table")))?;
        }
        cursor.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// Defaults, then the config file, then `seed`, then the overrides.
pub fn resolve_config(config_path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = match config_path {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::MissingInput(p.to_path_buf()));
            }
            std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    apply_overrides(&mut table, overrides)?;
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Contract(_)
        | Error::RejectedInput(_)
        | Error::ManifestSchema { .. }
        | Error::InvalidLabel { .. }
        | Error::DuplicateKey { .. }
        | Error::TooFewPatients { .. } => EXIT_CONFIG,
        Error::MissingInput(_) | Error::DanglingImage { .. } | Error::MissingWarp => EXIT_MISSING_INPUT,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_INPUT,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INTERNAL,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::RejectedInput(_) => "rejected-input",
        Error::Contract(_) => "contract",
        Error::FrozenParameters => "frozen-parameters",
        Error::Config(_) => "config",
        Error::MissingInput(_) => "missing-input",
        Error::ManifestSchema { .. } => "manifest-schema",
        Error::InvalidLabel { .. } => "invalid-label",
        Error::DuplicateKey { .. } => "duplicate-key",
        Error::DanglingImage { .. } => "dangling-image",
        Error::TooFewPatients { .. } => "too-few-patients",
        Error::MissingWarp => "missing-warp",
        Error::AucUndefined => "auc-undefined",
        Error::Divergence { .. } => "divergence",
        Error::Invariant(_) => "invariant",
        Error::Tensor(_) => "tensor",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Image(_) => "image",
    }
}

/// Output directory plus the list of artifacts written so far.
struct Run {
    dir: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?)?;
        self.record(p);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut index = BTreeMap::new();
        for p in &self.artifacts {
            let bytes = std::fs::read(p)?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            let rel = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned();
            index.insert(rel, serde_json::json!({ "sha256": digest, "bytes": bytes.len() }));
        }
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "artifacts": index }))?,
        )?;
        Ok(())
    }
}

/// JSON-lines writer for per-step loss records.
struct LossLog {
    file: BufWriter<File>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: BufWriter::new(File::create(path)?),
        })
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.file, value)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

fn step_printer(label: &str, record: &StepRecord, every: usize) {
    if record.step % every == 0 {
        eprintln!(
            "[{label}] epoch {} step {}: total {:.4} (dist {:.4}, logit {:.4}, cls {:.4})",
            record.epoch, record.step, record.l_total, record.l_dist, record.l_logit, record.l_cls
        );
    }
}

fn execute(cmd: &Command, cfg: &TrainConfig, run: &mut Run) -> Result<()> {
    match cmd {
        Command::GenData { n, warp, size, .. } => {
            let spec = SyntheticSpec {
                n: *n,
                warp_magnitude: *warp,
                seed: cfg.seed,
                size: size.unwrap_or(cfg.input_size),
            };
            let ds = write_synthetic_dataset(&run.dir, &spec)?;
            for e in &ds.entries {
                run.record(run.dir.join(&e.wli_path));
                run.record(run.dir.join(&e.nbi_path));
            }
            run.record(ds.manifest_path);
            run.record(ds.sidecar_path);
            eprintln!("wrote {} pairs to {}", ds.entries.len(), run.dir.display());
        }
        Command::TrainTeacher { manifest, .. } => {
            let data = load_manifest(manifest)?;
            let tcfg = cfg.teacher_variant();
            let teacher = initial_classifier(&tcfg, cfg.seed)?;
            let log_path = run.path("loss_log.jsonl");
            let mut log = LossLog::create(&log_path)?;
            let result = train_teacher(&teacher, &data, &tcfg, &mut |r| {
                step_printer("teacher", r, 10);
                log.write(r)
            });
            run.record(log_path);
            result?;
            let ckpt = run.path("teacher.safetensors");
            teacher.save(&ckpt)?;
            run.record(ckpt.clone());
            run.record(crate::model::sidecar_path(&ckpt));
        }
        Command::TrainStudent { manifest, teacher, .. } => {
            let data = load_manifest(manifest)?;
            let teacher = ClassifierHandle::load(teacher, false)?.with_stage_taps(&cfg.stage_taps)?;
            let student = initial_classifier(cfg, cfg.seed.wrapping_add(1))?;
            let log_path = run.path("loss_log.jsonl");
            let mut log = LossLog::create(&log_path)?;
            let result = train_student(&student, &teacher, &data, cfg, &mut |r| {
                step_printer("student", r, 10);
                log.write(r)
            });
            run.record(log_path);
            result?;
            let ckpt = run.path("student.safetensors");
            student.save(&ckpt)?;
            run.record(ckpt.clone());
            run.record(crate::model::sidecar_path(&ckpt));
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            teacher,
            modality,
            cross_validate: cv,
            variants,
            ..
        } => {
            let data = load_manifest(manifest)?;
            if *cv {
                run_cross_validation(&data, cfg, variants.as_deref(), run)?;
            } else {
                let ckpt = checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Config("evaluate needs --checkpoint or --cross-validate".into()))?;
                let model = ClassifierHandle::load(ckpt, false)?;
                let report = evaluate(&model, &data, (*modality).into(), cfg.batch_size)?;
                let summary = crate::eval::aggregate_folds(std::slice::from_ref(&report))?;
                run.write_json("metrics.json", &summary.to_json())?;
                let roc = run.path("roc.csv");
                if !report.roc_points.is_empty() {
                    let png = export_roc(&report, &roc)?;
                    run.record(roc);
                    run.record(png);
                }
                if let Some(t) = teacher {
                    let t = ClassifierHandle::load(t, false)?;
                    let samples = (0..data.len().min(8)).map(|i| data.load(i)).collect::<Result<Vec<_>>>()?;
                    let p = run.path("cam_overlays.png");
                    export_cam_overlays(&samples, &model, &t, &p)?;
                    run.record(p);
                }
                eprintln!("{}", serde_json::to_string(&report.values)?);
            }
        }
        Command::OracleCheck { .. } => {
            let report = oracle_check(cfg.seed)?;
            run.write_json("oracle.json", &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.relative_deviation >= 1e-5 || report.relative_deviation_unidirectional >= 1e-5 {
                return Err(Error::Invariant(format!(
                    "vectorized loss deviates from the reference by {:.3e}",
                    report.relative_deviation.max(report.relative_deviation_unidirectional)
                )));
            }
        }
        Command::Visualize {
            manifest,
            student,
            teacher,
            count,
            stage,
            ..
        } => {
            let data = load_manifest(manifest)?;
            let student = ClassifierHandle::load(student, false)?.with_stage_taps(&cfg.stage_taps)?;
            let teacher = ClassifierHandle::load(teacher, false)?.with_stage_taps(&cfg.stage_taps)?;
            let stage = stage.unwrap_or(*cfg.stage_taps.iter().max().expect("validated nonempty"));
            let size = student.input_size();
            let mut samples = Vec::new();
            for i in 0..data.len().min(*count) {
                let s = data.load(i)?;
                let iw = resize_image(s.image_w.view(), size, size);
                let inn = resize_image(s.image_n.view(), size, size);
                let maps = build_relations(iw.view(), inn.view(), s.label, &teacher, &student, &cfg.srg_config())?;
                let p = run.path(&format!("semantic_{}.png", s.pair_id));
                save_png(semantic_panel(&iw, &inn, &maps, stage)?.view(), &p)?;
                run.record(p);
                samples.push(s);
            }
            if !samples.is_empty() {
                let p = run.path("cam_overlays.png");
                export_cam_overlays(&samples, &student, &teacher, &p)?;
                run.record(p);
            }
        }
    }
    Ok(())
}

fn run_cross_validation(
    data: &Vec<crate::data::PairDescriptor>,
    cfg: &TrainConfig,
    selection: Option<&str>,
    run: &mut Run,
) -> Result<()> {
    let mut variants = standard_variants(cfg);
    if let Some(sel) = selection {
        let wanted: Vec<&str> = sel.split(',').map(str::trim).collect();
        if let Some(bad) = wanted.iter().find(|w| !variants.iter().any(|(n, _)| n == *w)) {
            return Err(Error::Config(format!("unknown variant '{bad}'")));
        }
        variants.retain(|(n, _)| wanted.contains(&n.as_str()));
    }
    let log_path = run.path("loss_log.jsonl");
    let mut log = LossLog::create(&log_path)?;
    let mut rocs = Vec::new();
    let outcome = cross_validate(data, cfg, &variants, &mut |ev| match ev {
        CvEvent::Step { fold, run: name, record } => {
            step_printer(&format!("fold {fold} {name}"), record, 20);
            log.write(&serde_json::json!({ "fold": fold, "run": name, "record": record }))
        }
        CvEvent::Evaluated { fold, run: name, report } => {
            eprintln!("[fold {fold} {name}] auc {:?} acc {:.3}", report.values.auc, report.values.acc);
            rocs.push((format!("roc_{name}_fold{fold}.csv"), report.clone()));
            Ok(())
        }
    });
    run.record(log_path);
    let outcome = outcome?;
    for (name, report) in rocs {
        if report.roc_points.is_empty() {
            continue;
        }
        let p = run.path(&name);
        let png = export_roc(&report, &p)?;
        run.record(p);
        run.record(png);
    }
    run.write_json("metrics_teacher.json", &outcome.teacher.to_json())?;
    let mut summary = serde_json::Map::new();
    summary.insert("teacher".into(), serde_json::to_value(outcome.teacher.mean)?);
    for (name, s) in &outcome.variants {
        run.write_json(&format!("metrics_{name}.json"), &s.to_json())?;
        summary.insert(name.clone(), serde_json::to_value(s.mean)?);
    }
    run.write_json("summary.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a Command,
    determinism: &'a str,
    version: &'a str,
}

fn run_inner(cmd: &Command, run: &mut Run) -> Result<()> {
    let common = cmd.common();
    let cfg = resolve_config(common.config.as_deref(), common.seed, cmd.overrides())?;
    let snapshot = run.path("resolved_config.toml");
    std::fs::write(
        &snapshot,
        toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    run.record(snapshot);
    run.write_json(
        "run.json",
        &RunRecord {
            command: cmd,
            determinism: DETERMINISM_NOTE,
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    execute(cmd, &cfg, run)
}

/// Runs a parsed command and returns its exit code.
pub fn run(cmd: &Command) -> i32 {
    let dir = cmd.common().output_dir.clone();
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!("error: cannot create {}: {e}", dir.display());
        return EXIT_MISSING_INPUT;
    }
    let mut run = Run {
        dir: dir.clone(),
        artifacts: Vec::new(),
    };
    let result = run_inner(cmd, &mut run).and_then(|_| run.finish());
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let record = serde_json::json!({
                "command": cmd.name(),
                "exit_code": code,
                "kind": error_kind(&e),
                "message": e.to_string(),
            });
            let _ = std::fs::write(dir.join("error.json"), serde_json::to_string_pretty(&record).unwrap_or_default());
            eprintln!("error: {e}");
            code
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli.command),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            }
        }
    }
}
