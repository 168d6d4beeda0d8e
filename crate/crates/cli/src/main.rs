mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use cardioloop::classifier::{
    build_images, default_classes, evaluate, load_checkpoint, save_checkpoint, stratified_split, train, Model,
    TrainConfig, WindowSelection,
};
use cardioloop::closed_loop::{replay, run_closed_loop, AuditBody, AuditLog, LoopConfig};
use cardioloop::dosing::{Prescription, SafetyGate};
use cardioloop::pathway::{
    generate_report, parse_events_jsonl, EpisodeLog, Pathway, PathwayConfig, PathwayEvent, PatientRecord,
};
use cardioloop::pump::{
    serve, AllowAll, Device, DeviceConfig, DoseAuthorizer, GateAuthorizer, GatewayState, PumpGeometry, ServiceConfig,
};
use cardioloop::signal_sim::{
    load_waveform_csv, read_dataset, simulate_dataset, write_dataset, Channel, RhythmClass, SimConfig,
};
use cardioloop::spectro::{export_image, segment_windows, ImageSidecar, SpectroConfig, Spectrogrammer};
use cardioloop::time::SimClock;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cardioloop::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

type CliResult<T> = Result<T, CliError>;

/// Attaches the path to bare IO errors coming out of the core crate.
fn at(path: &Path) -> impl FnOnce(cardioloop::Error) -> CliError + '_ {
    move |e| match e {
        cardioloop::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => other.into(),
    }
}

#[derive(Parser)]
#[command(name = "cardioloop", version, about = "Arrhythmia screening, dosing and pump toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Windows {
    All,
    EpisodeCentered,
}

impl From<Windows> for WindowSelection {
    fn from(w: Windows) -> Self {
        match w {
            Windows::All => WindowSelection::All,
            Windows::EpisodeCentered => WindowSelection::EpisodeCentered,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled waveform dataset (CSV per record plus manifest.json).
    Simulate {
        /// Simulator settings; overridable with CARDIOLOOP_SIM__<FIELD>.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a waveform CSV into per-window PGM spectrograms with JSON sidecars.
    Spectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Spectrogram settings; overridable with CARDIOLOOP_SPECTRO__<FIELD>.
        #[arg(long)]
        spectro: Option<PathBuf>,
        /// Sampling rate when the CSV header lacks one.
        #[arg(long)]
        fs: Option<f64>,
        /// PPG or ECG1 when the CSV header lacks one.
        #[arg(long)]
        channel: Option<Channel>,
    },
    /// Train the CNN on a simulated dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training settings; overridable with CARDIOLOOP_TRAIN__<FIELD>.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        spectro: Option<PathBuf>,
        /// 2 (NSR vs AFib) or 4; picked from the dataset when omitted.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "all")]
        windows: Windows,
    },
    /// Score a checkpoint on the held-out records of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Training settings the model was trained with (only the split is used).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        spectro: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[arg(long, value_enum, default_value = "all")]
        windows: Windows,
    },
    /// Build the clinician report from a detection log or an audit log.
    Report {
        /// Patient record; overridable with CARDIOLOOP_PATIENT__<FIELD>.
        #[arg(long)]
        patient: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// `.md` writes markdown, anything else JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pump and gateway line-JSON service until killed.
    ServePump {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Overridable with CARDIOLOOP_GEOMETRY__<FIELD>.
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Overridable with CARDIOLOOP_PRESCRIPTION__<FIELD>. Without one every dose is allowed.
        #[arg(long)]
        prescription: Option<PathBuf>,
        /// Append gate decisions to this JSONL file.
        #[arg(long)]
        audit: Option<PathBuf>,
        #[arg(long, default_value = "patient")]
        patient_id: String,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        utc_offset_s: i32,
    },
    /// Run a scripted scenario end to end and write its audit log.
    ClosedLoop {
        /// Overridable with CARDIOLOOP_SCENARIO__<FIELD>.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        audit: PathBuf,
    },
    /// Re-execute an audit log; exits 1 when it is inconsistent.
    Replay {
        #[arg(long)]
        audit: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> CliResult<ExitCode> {
    match cmd {
        Command::Simulate { config, out } => simulate(config.as_deref(), &out),
        Command::Spectrogram { input, out, spectro, fs, channel } => {
            spectrogram(&input, &out, spectro.as_deref(), fs, channel)
        }
        Command::Train { data, out, config, spectro, classes, epochs, lr, seed, windows } => {
            let mut tc: TrainConfig = config::load(config.as_deref(), "TRAIN")?;
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.learning_rate = lr.unwrap_or(tc.learning_rate);
            tc.seed = seed.unwrap_or(tc.seed);
            let sc: SpectroConfig = config::load(spectro.as_deref(), "SPECTRO")?;
            train_cmd(&data, &out, &tc, &sc, classes, windows.into())
        }
        Command::Eval { model, data, report, config, spectro, split, windows } => {
            let tc: TrainConfig = config::load(config.as_deref(), "TRAIN")?;
            let sc: SpectroConfig = config::load(spectro.as_deref(), "SPECTRO")?;
            eval_cmd(&model, &data, &report, &tc, &sc, split, windows.into())
        }
        Command::Report { patient, log, out } => report_cmd(&patient, &log, &out),
        Command::ServePump { bind, geometry, prescription, audit, patient_id, utc_offset_s } => {
            serve_pump(&bind, geometry.as_deref(), prescription.as_deref(), audit.as_deref(), &patient_id, utc_offset_s)
        }
        Command::ClosedLoop { scenario, audit } => closed_loop(scenario.as_deref(), &audit),
        Command::Replay { audit } => replay_cmd(&audit),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn print_json(v: &serde_json::Value) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(cardioloop::Error::from)?;
    writeln!(out).and_then(|_| out.flush()).map_err(cardioloop::Error::from)?;
    Ok(())
}

fn simulate(config: Option<&Path>, out: &Path) -> CliResult<ExitCode> {
    let cfg: SimConfig = config::load(config, "SIM")?;
    cfg.validate()?;
    let ds = simulate_dataset(&cfg)?;
    let manifest = write_dataset(&ds, &cfg, out).map_err(at(out))?;
    let count = |c: RhythmClass| ds.count_class(c);
    print_json(&json!({
        "out": out,
        "channel": manifest.channel,
        "fs": manifest.fs,
        "records": manifest.records.len(),
        "per_class": RhythmClass::ALL.iter().map(|&c| (c.to_string(), count(c))).collect::<std::collections::BTreeMap<_, _>>(),
        "artifacts": ds.artifact_count(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn spectrogram(
    input: &Path,
    out: &Path,
    spectro: Option<&Path>,
    fs: Option<f64>,
    channel: Option<Channel>,
) -> CliResult<ExitCode> {
    let sc: SpectroConfig = config::load(spectro, "SPECTRO")?;
    let rec = load_waveform_csv(input, fs, channel).map_err(at(input))?;
    let sg = Spectrogrammer::new(&sc, rec.channel, rec.fs)?;
    let windows = segment_windows(&rec, sc.window_s, sc.stride_s)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("window");
    for (i, w) in windows.iter().enumerate() {
        let img = sg.window_image(w)?;
        let sidecar =
            ImageSidecar { label: img.label, window_origin: w.origin, fs: w.fs, scales: sg.scales().scales.clone() };
        export_image(&img, &sidecar, out, &format!("{stem}_w{i:03}")).map_err(at(out))?;
    }
    print_json(&json!({ "out": out, "windows": windows.len() }))?;
    Ok(ExitCode::SUCCESS)
}

/// Records of the dataset restricted to `classes`, paired with their record-level label.
fn labeled_records(data: &Path, classes: Option<&[RhythmClass]>) -> CliResult<Vec<(RhythmClass, cardioloop::signal_sim::WaveformRecord)>> {
    let (manifest, records) = read_dataset(data).map_err(at(data))?;
    Ok(manifest
        .records
        .iter()
        .map(|e| e.class)
        .zip(records)
        .filter(|(c, _)| classes.is_none_or(|cs| cs.contains(c)))
        .collect())
}

fn train_cmd(
    data: &Path,
    out: &Path,
    tc: &TrainConfig,
    sc: &SpectroConfig,
    n_classes: Option<usize>,
    windows: WindowSelection,
) -> CliResult<ExitCode> {
    tc.validate()?;
    if sc.height != sc.width {
        return Err(CliError::Config("spectrogram images must be square".into()));
    }
    let all = labeled_records(data, None)?;
    let n_classes = n_classes.unwrap_or_else(|| {
        let binary = all.iter().all(|(c, _)| matches!(c, RhythmClass::Nsr | RhythmClass::AFib));
        if binary { 2 } else { 4 }
    });
    let classes = default_classes(n_classes)?;
    let records: Vec<_> = all.into_iter().filter(|(c, _)| classes.contains(c)).collect();
    let (train_recs, _, _) = stratified_split(records, |(c, _)| *c, tc.split, tc.seed)?;
    let waveforms: Vec<_> = train_recs.into_iter().map(|(_, w)| w).collect();
    let images = build_images(&waveforms, sc, windows)?;
    if images.is_empty() {
        return Err(CliError::Failed("no training images".into()));
    }
    let model = Model::init(classes, sc.height, tc.seed)?;
    let started = std::time::Instant::now();
    let (model, history) = train(&model, &images, tc)?;
    save_checkpoint(&model, out).map_err(at(out))?;
    print_json(&json!({
        "checkpoint": out,
        "classes": model.classes,
        "train_records": waveforms.len(),
        "train_images": images.len(),
        "seconds": started.elapsed().as_secs_f64(),
        "epochs": history,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(
    model: &Path,
    data: &Path,
    report: &Path,
    tc: &TrainConfig,
    sc: &SpectroConfig,
    split: EvalSplit,
    windows: WindowSelection,
) -> CliResult<ExitCode> {
    let m = load_checkpoint(model).map_err(at(model))?;
    let records = labeled_records(data, Some(&m.classes))?;
    let test = match split {
        EvalSplit::Test => stratified_split(records, |(c, _)| *c, tc.split, m.seed)?.2,
        EvalSplit::All => records,
    };
    let waveforms: Vec<_> = test.into_iter().map(|(_, w)| w).collect();
    let images = build_images(&waveforms, sc, windows)?;
    let metrics = evaluate(&m, &images)?;
    write_file(report, &serde_json::to_string_pretty(&metrics).map_err(cardioloop::Error::from)?)?;
    eprintln!(
        "{} images from {} records: accuracy {:.4}, AUC {:.4}",
        images.len(),
        waveforms.len(),
        metrics.accuracy,
        metrics.auc
    );
    Ok(ExitCode::SUCCESS)
}

/// Pathway events from either a detection JSONL or an audit log, plus the
/// pathway settings to replay them with.
fn pathway_events(text: &str) -> CliResult<(Vec<PathwayEvent>, PathwayConfig)> {
    let is_audit = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("kind").is_some());
    if !is_audit {
        let events = parse_events_jsonl(text)?;
        return Ok((events.into_iter().map(PathwayEvent::Detection).collect(), PathwayConfig::default()));
    }
    let log = AuditLog::from_jsonl(text)?;
    let cfg = log.header().map(|h| h.pathway.clone()).unwrap_or_default();
    let events = log
        .records()
        .iter()
        .filter_map(|r| match &r.body {
            AuditBody::Detection(d) => Some(PathwayEvent::Detection(d.clone())),
            AuditBody::Transition(t) => match t.cause {
                cardioloop::closed_loop::TransitionCause::ReportComplete => {
                    Some(PathwayEvent::ReportComplete { ts: r.ts })
                }
                cardioloop::closed_loop::TransitionCause::PrescriptionIssued => {
                    Some(PathwayEvent::PrescriptionIssued { ts: r.ts })
                }
                cardioloop::closed_loop::TransitionCause::Detection => None,
            },
            _ => None,
        })
        .collect();
    Ok((events, cfg))
}

fn report_cmd(patient: &Path, log: &Path, out: &Path) -> CliResult<ExitCode> {
    let patient: PatientRecord = config::load_required(patient, "PATIENT")?;
    let (events, cfg) = pathway_events(&config::read_text(log)?)?;
    let Some(first) = events.first() else {
        return Err(CliError::Failed(format!("{}: no events", log.display())));
    };
    let mut pathway = Pathway::new(patient.patient_id.clone(), first.ts(), cfg.clone());
    let mut episodes = EpisodeLog::new(cfg.merge_gap_s);
    let mut now = first.ts();
    for e in &events {
        if let PathwayEvent::Detection(d) = e {
            episodes.log(d.clone())?;
        }
        pathway.apply(e)?;
        now = e.ts();
    }
    let report = generate_report(&patient, &pathway.state, &episodes, now)?;
    let text = if out.extension().is_some_and(|x| x == "md") { report.to_markdown() } else { report.to_json()? };
    write_file(out, &text)?;
    eprintln!("report for {} at stage {} with {} episodes", report.patient_id, report.stage, report.episodes.len());
    Ok(ExitCode::SUCCESS)
}

fn serve_pump(
    bind: &str,
    geometry: Option<&Path>,
    prescription: Option<&Path>,
    audit: Option<&Path>,
    patient_id: &str,
    utc_offset_s: i32,
) -> CliResult<ExitCode> {
    let geometry: PumpGeometry = config::load(geometry, "GEOMETRY")?;
    geometry.validate()?;
    let offset = cardioloop::time::LocalOffset(utc_offset_s);
    let clock = SimClock::wall();
    let gate = match prescription {
        Some(p) => {
            let rx: Prescription = config::load_required(p, "PRESCRIPTION")?;
            let mut gate = SafetyGate::new(rx, offset, clock.now())?;
            if let Some(a) = audit {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(a)
                    .map_err(|source| CliError::Io { path: a.to_path_buf(), source })?;
                gate = gate.with_audit_sink(Box::new(file));
            }
            Some(Arc::new(gate))
        }
        None => {
            eprintln!("warning: no prescription given, every dose will be allowed");
            None
        }
    };
    let authorizer: Arc<dyn DoseAuthorizer> = match &gate {
        Some(g) => Arc::new(GateAuthorizer { gate: g.clone(), clock: clock.clone() }),
        None => Arc::new(AllowAll),
    };
    let device = Arc::new(Device::new(geometry, DeviceConfig::default(), authorizer)?);
    let gateway = Arc::new(GatewayState::new(patient_id, offset, clock, gate, PathwayConfig::default()));
    let handle = serve(bind, device, gateway, ServiceConfig::default())?;
    // one line so wrappers can read the bound port before the first connection
    println!("{}", json!({ "listening": handle.local_addr().to_string() }));
    std::io::stdout().flush().map_err(cardioloop::Error::from)?;
    handle.join();
    Ok(ExitCode::SUCCESS)
}

fn closed_loop(scenario: Option<&Path>, audit: &Path) -> CliResult<ExitCode> {
    let mut cfg: LoopConfig = config::load(scenario, "SCENARIO")?;
    cfg.validate()?;
    if let Some(p) = scenario {
        cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
    }
    let outcome = run_closed_loop(&cfg)?;
    write_file(audit, &outcome.audit.to_jsonl()?)?;
    print_json(&json!({
        "audit": audit,
        "records": outcome.audit.len(),
        "deliveries": outcome.deliveries,
        "final_stage": outcome.final_stage,
        "final_pump": outcome.final_pump,
        "halted": outcome.halted,
    }))?;
    if let Some(reason) = &outcome.halted {
        eprintln!("loop halted: {reason}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn replay_cmd(audit: &Path) -> CliResult<ExitCode> {
    let log = AuditLog::from_jsonl(&config::read_text(audit)?)?;
    let verdict = replay(&log);
    print_json(&serde_json::to_value(&verdict).map_err(cardioloop::Error::from)?)?;
    if let Some(d) = &verdict.divergence {
        eprintln!("diverged at record {} ({}): {}", d.index, d.kind, d.reason);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
