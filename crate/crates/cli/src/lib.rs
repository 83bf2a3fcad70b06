//! `metabci` command line: ingest, screen, synth, run, analyze, report.
//!
//! Exit codes: 0 success, 1 experiment failure, 2 usage or I/O error.

pub mod config;
pub mod tables;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use metabci_core::model::ModelParams;
use metabci_core::probe;
use metabci_core::quality::{self, ScreeningReport, SelectionPolicy};
use metabci_core::seed;
use metabci_core::synth::{generate, SynthSpec};
use metabci_core::task::{self, SubjectTask};
use metabci_core::train::{self, FoldArtifacts, FoldResult, TrainError};
use metabci_core::Exec;
use metabci_signal::cache::{read_windows, write_windows};
use metabci_signal::dataset;
use metabci_signal::window::ChannelStats;
use metabci_signal::{TaskId, Window};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, DataSource, ExperimentConfig, SCHEMA_VERSION};
use crate::tables::{Provenance, Results, Row};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0:#}")]
    Experiment(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Experiment(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait Classify<T> {
    fn usage(self) -> CliResult<T>;
    fn experiment(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
    fn experiment(self) -> CliResult<T> {
        self.map_err(|e| CliError::Experiment(e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "metabci", version, about = "Meta-learned EEG decoding experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, filter and window a directory of EDF recordings into a cache.
    Ingest {
        /// Data root; defaults to `data.root` from the config.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Checksum manifest (`sha256  relative/path` per line).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Screen subjects of a window cache with the abstaining model.
    Screen {
        #[arg(long)]
        cache: PathBuf,
        /// Keep this fraction of subjects (default 48/104).
        #[arg(long, conflicts_with = "threshold")]
        fraction: Option<f64>,
        /// Keep subjects whose mean outlier probability is at most this.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write the configured synthetic corpus as a window cache.
    Synth,
    /// Leave-one-subject-out evaluation of every strategy on every task.
    Run,
    /// Spectral profile of each checkpoint's dominant temporal filter.
    Analyze {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Sampling rate of the training data.
        #[arg(long, default_value_t = 160.0)]
        fs: f64,
    },
    /// Print the tables of a finished run.
    Report {
        /// `results.json` of a run; defaults to the one in the output dir.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Tab-separated instead of aligned text.
        #[arg(long)]
        tsv: bool,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    provenance: Provenance,
}

impl Ctx {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p).usage()?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.out = o.clone();
        }
        let provenance = Provenance {
            tool: "metabci".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
        };
        Ok(Self {
            out: cfg.out.clone(),
            cfg,
            provenance,
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).usage()?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display())).usage()?;
        Ok(p)
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage(anyhow!("--threads must be at least 1")));
        }
        if !metabci_core::exec::set_threads(n) {
            log::warn!("--threads {n} ignored: thread pool already running or built without parallelism");
        }
    }
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Ingest { root, manifest } => cmd_ingest(&ctx, root.as_deref(), manifest.as_deref()),
        Command::Screen {
            cache,
            fraction,
            threshold,
        } => {
            let policy = match (fraction, threshold) {
                (_, Some(t)) => SelectionPolicy::Threshold(*t),
                (Some(f), None) => SelectionPolicy::Fraction(*f),
                (None, None) => ctx.cfg.screening.policy,
            };
            cmd_screen(&ctx, cache, policy)
        }
        Command::Synth => cmd_synth(&ctx),
        Command::Run => cmd_run(&ctx),
        Command::Analyze { checkpoints, fs } => cmd_analyze(&ctx, checkpoints, *fs),
        Command::Report { results, tsv } => cmd_report(&ctx, results.as_deref(), *tsv),
    }
}

/// Checks `sha256  path` lines against files under `root`.
pub fn verify_manifest(root: &Path, manifest: &Path) -> anyhow::Result<usize> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let mut bad = Vec::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (want, rel) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| anyhow!("manifest line {}: expected `<sha256>  <path>`", i + 1))?;
        let rel = rel.trim().trim_start_matches('*');
        let path = root.join(rel);
        match fs::read(&path) {
            Ok(bytes) if hex(&Sha256::digest(&bytes)) == want.to_ascii_lowercase() => n += 1,
            Ok(_) => bad.push(format!("{rel}: checksum mismatch")),
            Err(e) => bad.push(format!("{rel}: {e}")),
        }
    }
    if !bad.is_empty() {
        bail!("manifest check failed:\n  {}", bad.join("\n  "));
    }
    Ok(n)
}

fn cmd_ingest(ctx: &Ctx, root: Option<&Path>, manifest: Option<&Path>) -> CliResult<()> {
    let root = root
        .or(ctx.cfg.data.root.as_deref())
        .ok_or_else(|| CliError::Usage(anyhow!("no data root: pass --root or set data.root")))?;
    fs::read_dir(root).with_context(|| format!("reading data root {}", root.display())).usage()?;
    if let Some(m) = manifest.or(ctx.cfg.data.manifest.as_deref()) {
        let n = verify_manifest(root, m).usage()?;
        log::info!("manifest: {n} files verified");
    }
    let tasks = ctx.cfg.task_ids().usage()?;
    let icfg = ctx.cfg.preprocess.ingest_config(&tasks);
    let report = dataset::ingest(root, &icfg).usage()?;
    let windows: Vec<Window> = report
        .subjects
        .iter()
        .flat_map(|s| s.windows.values().flatten().cloned())
        .collect();
    let mut buf = Vec::new();
    write_windows(&mut buf, &windows).usage()?;
    let cache = ctx.write("windows.cache", buf)?;

    let mut text = ctx.provenance.header();
    text.push_str(&format!(
        "{} subjects found, {} kept, {} excluded\n",
        report.subjects_found,
        report.subjects.len(),
        report.subjects_excluded()
    ));
    for s in &report.subjects {
        for (t, n) in &s.trials {
            let w = s.windows.get(t).map_or(0, Vec::len);
            text.push_str(&format!("{}\t{t}\t{n} trials\t{w} windows\n", s.subject_id));
        }
    }
    for e in &report.exclusions {
        text.push_str(&format!("excluded\t{e}\n"));
    }
    for d in &report.deviations {
        text.push_str(&format!(
            "trial count\t{}\t{}\t{} of {}\n",
            d.subject_id, d.task_id, d.trials, d.expected
        ));
    }
    ctx.write("ingest_report.txt", &text)?;
    println!(
        "{} subjects, {} windows -> {}",
        report.subjects.len(),
        windows.len(),
        cache.display()
    );
    Ok(())
}

fn read_cache(path: &Path) -> CliResult<Vec<Window>> {
    let f = File::open(path).with_context(|| format!("opening cache {}", path.display())).usage()?;
    read_windows(BufReader::new(f))
        .with_context(|| format!("reading cache {}", path.display()))
        .usage()
}

/// Screens every task of `windows` separately. A subject's windows get the
/// outlier probabilities of its own task's screening model.
fn screen_windows(
    ctx: &Ctx,
    windows: Vec<Window>,
    policy: SelectionPolicy,
) -> CliResult<(BTreeMap<String, ScreeningReport>, Vec<Window>)> {
    let mut by_task: BTreeMap<TaskId, Vec<Window>> = BTreeMap::new();
    for w in windows {
        by_task.entry(w.task_id).or_default().push(w);
    }
    let gcfg = quality::ScreenConfig {
        seed: ctx.cfg.seed,
        ..ctx.cfg.screening.gambler.clone()
    };
    let mut reports = BTreeMap::new();
    let mut out = Vec::new();
    for (t, ws) in by_task {
        let mut subjects: Vec<(String, Vec<Window>)> = task::group_by_subject(ws).into_iter().collect();
        let screens = quality::screen_all(&mut subjects, &ctx.cfg.model, &gcfg, Exec::default()).experiment()?;
        let report = quality::select_subjects(screens, policy, gcfg.payoff).experiment()?;
        reports.insert(t.to_string(), report);
        out.extend(subjects.into_iter().flat_map(|(_, w)| w));
    }
    Ok((reports, out))
}

fn cmd_screen(ctx: &Ctx, cache: &Path, policy: SelectionPolicy) -> CliResult<()> {
    let windows = read_cache(cache)?;
    let (reports, screened) = screen_windows(ctx, windows, policy)?;
    let json = serde_json::to_string_pretty(&reports).experiment()?;
    let path = ctx.write("screening_report.json", json + "\n")?;
    let mut buf = Vec::new();
    write_windows(&mut buf, &screened).usage()?;
    ctx.write("screened.cache", buf)?;
    for (t, r) in &reports {
        println!(
            "{t}: {} of {} subjects selected ({})",
            r.selected.len(),
            r.subjects.len(),
            r.selected.join(" ")
        );
    }
    println!("report -> {}", path.display());
    Ok(())
}

fn synth_spec(cfg: &ExperimentConfig, t: TaskId) -> SynthSpec {
    SynthSpec {
        task_id: t,
        seed: seed::derive(cfg.seed, &[seed::tag(&t.to_string())]),
        ..cfg.synth.clone()
    }
}

fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let mut windows = Vec::new();
    for t in ctx.cfg.task_ids().usage()? {
        for task in generate(&synth_spec(&ctx.cfg, t)).usage()? {
            windows.extend(task.support.into_iter().chain(task.query));
        }
    }
    let mut buf = Vec::new();
    write_windows(&mut buf, &windows).usage()?;
    let p = ctx.write("synth.cache", buf)?;
    println!("{} windows -> {}", windows.len(), p.display());
    Ok(())
}

/// Real-data tasks: split by session, standardise on the support set, cap
/// the support size. Subjects that cannot form a task are skipped.
fn tasks_from_windows(cfg: &ExperimentConfig, t: TaskId, windows: Vec<Window>) -> Vec<SubjectTask> {
    let ev = &cfg.evaluation;
    let mut out = Vec::new();
    for (id, ws) in task::group_by_subject(windows.into_iter().filter(|w| w.task_id == t).collect()) {
        let mut st = match task::split_by_session(&id, t, ws, &ev.support_sessions) {
            Ok(st) => st,
            Err(e) => {
                log::warn!("{id} {t}: skipped: {e}");
                continue;
            }
        };
        if cfg.preprocess.standardize {
            match ChannelStats::fit(&st.support) {
                Ok(stats) => {
                    for w in st.support.iter_mut().chain(st.query.iter_mut()) {
                        stats.apply(w).expect("same montage");
                    }
                }
                Err(e) => {
                    log::warn!("{id} {t}: skipped: {e}");
                    continue;
                }
            }
        }
        if ev.support_per_class > 0 {
            st = task::limit_support(&st, ev.support_per_class);
        }
        out.push(st);
    }
    out
}

fn load_tasks(ctx: &Ctx, t: TaskId, loaded: &mut Option<Vec<Window>>) -> CliResult<Vec<SubjectTask>> {
    let cfg = &ctx.cfg;
    let windows = match cfg.data.source {
        DataSource::Synth => return generate(&synth_spec(cfg, t)).usage(),
        DataSource::Cache => {
            if loaded.is_none() {
                *loaded = Some(read_cache(cfg.data.cache.as_ref().expect("validated"))?);
            }
            loaded.clone().unwrap_or_default()
        }
        DataSource::Physionet => {
            if loaded.is_none() {
                let root = cfg.data.root.as_ref().expect("validated");
                if let Some(m) = &cfg.data.manifest {
                    verify_manifest(root, m).usage()?;
                }
                let report = dataset::ingest(root, &cfg.preprocess.ingest_config(&cfg.task_ids().usage()?)).usage()?;
                for e in &report.exclusions {
                    log::warn!("{e}");
                }
                *loaded = Some(
                    report
                        .subjects
                        .into_iter()
                        .flat_map(|s| s.windows.into_values().flatten())
                        .collect(),
                );
            }
            loaded.clone().unwrap_or_default()
        }
    };
    Ok(tasks_from_windows(cfg, t, windows))
}

fn fold_line(task: &str, f: &FoldResult) -> String {
    format!(
        "{task}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{:.6}\t{}\n",
        f.strategy,
        f.subject_id,
        f.accuracy,
        f.filtered.accepted_accuracy.map_or_else(|| "NA".into(), |v| format!("{v:.6}")),
        f.filtered.acceptance_rate,
        f.support_accuracy,
        f.epochs_to_target.map_or_else(|| "NA".into(), |v| v.to_string()),
    )
}

/// Sink for per-fold artifacts: checkpoint, training log, and a line in the
/// incremental fold table so that partial results survive a failure.
struct FoldWriter<'a> {
    ctx: &'a Ctx,
    task: String,
    folds: BufWriter<File>,
}

#[derive(Debug, Error)]
enum SinkError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0:#}")]
    Io(anyhow::Error),
}

impl FoldWriter<'_> {
    fn write(&mut self, a: FoldArtifacts<'_>) -> Result<(), SinkError> {
        let io = |e: anyhow::Error| SinkError::Io(e);
        let dir = self.ctx.path(format!("checkpoints/{}/{}", self.task, a.fold.strategy));
        fs::create_dir_all(&dir).map_err(|e| io(e.into()))?;
        let ckpt = dir.join(format!("{}.ckpt", a.fold.subject_id));
        let f = File::create(&ckpt).with_context(|| ckpt.display().to_string()).map_err(io)?;
        a.finetuned.params.save(BufWriter::new(f)).map_err(|e| io(e.into()))?;

        let dir = self.ctx.path(format!("logs/{}/{}", self.task, a.fold.strategy));
        fs::create_dir_all(&dir).map_err(|e| io(e.into()))?;
        let mut log = String::new();
        for rec in a.pretrain_log {
            log.push_str(&serde_json::to_string(rec).map_err(|e| io(e.into()))?);
            log.push('\n');
        }
        fs::write(dir.join(format!("{}.jsonl", a.fold.subject_id)), log).map_err(|e| io(e.into()))?;

        self.folds
            .write_all(fold_line(&self.task, a.fold).as_bytes())
            .and_then(|_| self.folds.flush())
            .map_err(|e| io(e.into()))
    }
}

fn cmd_run(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    cfg.validate().usage()?;
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display())).usage()?;
    let folds_path = ctx.path("folds.tsv");
    let mut folds_file = BufWriter::new(File::create(&folds_path).with_context(|| folds_path.display().to_string()).usage()?);
    folds_file.write_all(ctx.provenance.header().as_bytes()).usage()?;
    folds_file
        .write_all(b"task\tstrategy\tsubject\taccuracy\taccepted_accuracy\tacceptance_rate\tsupport_accuracy\tepochs_to_target\n")
        .usage()?;

    let mut loaded = None;
    let mut rows = Vec::new();
    let mut screening = BTreeMap::new();
    let mut folds_file = Some(folds_file);
    for t in cfg.task_ids().usage()? {
        let mut tasks = load_tasks(ctx, t, &mut loaded)?;
        if cfg.screening.enabled {
            let windows: Vec<Window> = tasks.iter().flat_map(|s| s.windows().cloned()).collect();
            let (reports, _) = screen_windows(ctx, windows, cfg.screening.policy)?;
            let report = reports.into_values().next().expect("one task screened");
            tasks.retain(|s| report.selected.contains(&s.subject_id));
            screening.insert(t.to_string(), report);
        }
        if tasks.len() < 2 {
            return Err(CliError::Experiment(anyhow!("{t}: {} usable subjects, need at least 2", tasks.len())));
        }
        let held: Vec<usize> = cfg
            .evaluation
            .held_out
            .iter()
            .map(|id| {
                tasks
                    .iter()
                    .position(|s| &s.subject_id == id)
                    .ok_or_else(|| anyhow!("{t}: held-out subject {id} not found"))
            })
            .collect::<anyhow::Result<_>>()
            .usage()?;
        let mut writer = FoldWriter {
            ctx,
            task: t.to_string(),
            folds: folds_file.take().expect("returned below"),
        };
        for &s in &cfg.strategies {
            let tcfg = cfg.train_for(s).usage()?;
            let held = (!held.is_empty()).then_some(held.as_slice());
            let folds = train::leave_one_subject_out_with(&tasks, &cfg.model, &tcfg, &[s], held, |a| writer.write(a))
                .map_err(|e| match e {
                    SinkError::Io(e) => CliError::Usage(e),
                    SinkError::Train(e) => CliError::Experiment(anyhow!("{t} {s}: {e}")),
                })?;
            rows.push(Row::from_folds(&t.to_string(), s, &folds));
        }
        folds_file = Some(writer.folds);
    }
    drop(folds_file);

    let results = Results {
        provenance: ctx.provenance.clone(),
        tasks: cfg.tasks.clone(),
        strategies: cfg.strategies.clone(),
        rows,
    };
    if !screening.is_empty() {
        ctx.write("screening_report.json", serde_json::to_string_pretty(&screening).experiment()? + "\n")?;
    }
    let mut written = vec![
        ctx.write("results.json", serde_json::to_string_pretty(&results).experiment()? + "\n")?,
        ctx.write("table1.txt", results.table1_text())?,
        ctx.write("table1.tsv", results.table1_tsv())?,
        ctx.write("table2.txt", results.table2_text())?,
        ctx.write("table2.tsv", results.table2_tsv())?,
    ];
    written.push(folds_path);
    let mut sums = String::new();
    for p in &written {
        let bytes = fs::read(p).usage()?;
        let name = p.file_name().expect("file").to_string_lossy();
        sums.push_str(&format!("{}  {name}\n", hex(&Sha256::digest(&bytes))));
    }
    ctx.write("SHA256SUMS", sums)?;
    print!("{}\n{}", results.table1_text(), results.table2_text());
    Ok(())
}

fn cmd_analyze(ctx: &Ctx, checkpoints: &[PathBuf], fs_hz: f64) -> CliResult<()> {
    println!("checkpoint\tpeak_hz\tin_alpha\tdegenerate");
    for path in checkpoints {
        let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display())).usage()?;
        // Version mismatches name both versions in the error text.
        let params = ModelParams::load(BufReader::new(f))
            .map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?;
        let prof = probe::profile(&params, fs_hz).experiment()?;
        let stem = path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
        let mut text = ctx.provenance.header();
        text.push_str(&format!(
            "# checkpoint {} | peak {:.4} Hz | in alpha band {} | degenerate {}\n",
            path.display(),
            prof.spectrum.peak_hz,
            prof.spectrum.peak_in_alpha,
            prof.filter.degenerate
        ));
        text.push_str(&probe::spectrum_text(&prof.spectrum));
        ctx.write(format!("{stem}.spectrum.txt"), text)?;
        println!(
            "{}\t{:.4}\t{}\t{}",
            path.display(),
            prof.spectrum.peak_hz,
            prof.spectrum.peak_in_alpha,
            prof.filter.degenerate
        );
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, results: Option<&Path>, tsv: bool) -> CliResult<()> {
    let path = results.map_or_else(|| ctx.path("results.json"), Path::to_path_buf);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).usage()?;
    let r: Results = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).usage()?;
    if tsv {
        print!("{}\n{}", r.table1_tsv(), r.table2_tsv());
    } else {
        print!("{}\n{}", r.table1_text(), r.table2_text());
    }
    Ok(())
}
