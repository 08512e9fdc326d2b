//! One function per subcommand.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use bci_core::acquisition::{
    stream_source, synth_stream, LabelSchedule, MontageConfig, SamplingConfig, SourceKind, StreamOptions,
    SynthConfig, SynthSource,
};
use bci_core::dataset::{
    balance, class_counts, consolidate, load_session, save_session, split, ClassLabel, RawRecording, SessionRecord,
};
use bci_core::engine::{
    run_training_session, run_validation, EngineError, IntentFollower, NullObserver, Operator, SampleSource,
    ScriptedKeys, SessionConfig, ValidationModel, ValidationOutcome,
};
use bci_core::models::{
    evaluate, load_model, run_sweep, save_model, train_classifier, Evaluation, ModelConfig, ModelKind, SweepDataset,
    TrainConfig,
};

use crate::args::*;
use crate::config::{derive_seed, purpose, Settings};
use crate::error::{CliError, CliResult};

/// Horizontal slack for the box-chasing operator, in game pixels.
const FOLLOW_DEADBAND: f64 = 30.0;
/// Cue block length used by the validation recording.
const VALIDATION_BLOCK_S: f64 = 3.0;

/// Resolved run context shared by every command.
pub struct Ctx {
    pub settings: Settings,
    pub seed: u64,
}

pub fn run(ctx: &Ctx, cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate(a) => simulate(ctx, a),
        Command::Record(a) => record(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Sweep(a) => sweep(ctx, a),
        Command::Validate(a) => validate(ctx, a),
        Command::Replay(a) => replay(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth_config(ctx: &Ctx, mu_depth: Option<f64>, noise: Option<f64>) -> SynthConfig {
    let mut s = ctx.settings.synth.clone();
    if let Some(d) = mu_depth {
        s.mu_depth = d;
    }
    if let Some(n) = noise {
        s.noise_amplitude = n;
    }
    s
}

fn cue_schedule(ctx: &Ctx, block_min: f64, block_max: f64, duration: f64) -> CliResult<LabelSchedule> {
    if !(block_min > 0.0 && block_min <= block_max && block_max.is_finite()) {
        return Err(CliError::Usage(format!("cue blocks need 0 < min <= max, got {block_min}..{block_max}")));
    }
    Ok(LabelSchedule::random(
        &ClassLabel::ALL,
        block_min,
        block_max,
        duration,
        derive_seed(ctx.seed, purpose::SCHEDULE),
    ))
}

fn positive(name: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{name} must be positive, got {v}")))
    }
}

fn open_source(ctx: &Ctx, a: &SourceArgs) -> CliResult<Box<dyn SampleSource>> {
    let sampling = SamplingConfig::default();
    let opts = StreamOptions::default();
    Ok(match &a.source {
        SourceSpec::Synthetic => Box::new(SynthSource::new(
            &sampling,
            &MontageConfig::default(),
            &synth_config(ctx, a.mu_depth, a.noise),
        )?),
        SourceSpec::File(p) => Box::new(stream_source(SourceKind::FileReplay(p.clone()), &sampling, &opts)?),
        SourceSpec::Tcp(addr) => Box::new(stream_source(SourceKind::Tcp(addr.clone()), &sampling, &opts)?),
        SourceSpec::Serial(p) => Box::new(stream_source(SourceKind::Serial(p.clone()), &sampling, &opts)?),
    })
}

fn session_config(ctx: &Ctx, id: Option<String>, subject: Option<String>, default_id: &str) -> SessionConfig {
    SessionConfig {
        session_id: id.unwrap_or_else(|| default_id.to_string()),
        subject_id: subject.unwrap_or_else(|| "subject".into()),
        seed: ctx.seed,
        plan: ctx.settings.plan.clone(),
        ..Default::default()
    }
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> CliResult {
    let duration = positive("duration", a.duration)?;
    let schedule = cue_schedule(ctx, a.block_min, a.block_max, duration)?;
    let sampling = SamplingConfig::default();
    let samples = synth_stream(
        &sampling,
        &MontageConfig::default(),
        &synth_config(ctx, a.mu_depth, a.noise),
        &schedule,
        duration,
    )?;
    ensure_parent(&a.out)?;
    RawRecording::from_samples(sampling, &samples).save(&a.out)?;
    println!("wrote {} ({} samples, {} cue blocks)", a.out.display(), samples.len(), schedule.segments().len());
    Ok(())
}

fn record(ctx: &Ctx, a: RecordArgs) -> CliResult {
    let stem = a.out.file_stem().map_or("record".into(), |s| s.to_string_lossy().into_owned());
    let mut cfg = session_config(ctx, a.session_id, a.subject_id, &stem);
    if let Some(d) = a.duration {
        cfg.plan.training_s = positive("duration", d)?;
    }
    let mut source = open_source(ctx, &a.source)?;
    let mut op: Box<dyn Operator> = match a.operator {
        OperatorChoice::Script => Box::new(ScriptedKeys::new(cue_schedule(
            ctx,
            a.block_min,
            a.block_max,
            cfg.plan.training_s,
        )?)),
        OperatorChoice::Follow => Box::new(IntentFollower::new(FOLLOW_DEADBAND)),
    };
    let (rec, stats) = run_training_session(&cfg, source.as_mut(), op.as_mut(), &mut NullObserver)?;
    ensure_parent(&a.out)?;
    save_session(&rec, &a.out)?;
    let counts = class_counts(&rec.frames);
    println!(
        "wrote {} ({} frames; none/left/right/both = {}/{}/{}/{}; {} key events; {} boxes caught)",
        a.out.display(),
        rec.frames.len(),
        counts[0],
        counts[1],
        counts[2],
        counts[3],
        rec.key_log.len(),
        stats.boxes_caught
    );
    Ok(())
}

/// Expands file arguments and glob patterns, sorted and de-duplicated.
fn expand(patterns: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let matches: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| CliError::Usage(format!("bad pattern {p:?}: {e}")))?
            .filter_map(Result::ok)
            .collect();
        if matches.is_empty() {
            return Err(CliError::Data(format!("no session files match {p:?}")));
        }
        out.extend(matches);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn load_sessions(patterns: &[String]) -> CliResult<Vec<SessionRecord>> {
    expand(patterns)?
        .iter()
        .map(|p| load_session(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect()
}

fn apply_train_args(mut t: TrainConfig, a: &TrainArgsCommon) -> TrainConfig {
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.early_stop.is_some() {
        t.early_stop_accuracy = a.early_stop;
    }
    t
}

fn model_config(ctx: &Ctx, a: &ModelArgs) -> ModelConfig {
    let mut m = ctx.settings.model.clone();
    if let Some(kind) = a.model_kind {
        m.kind = match kind {
            ModelChoice::Knn => ModelKind::Knn,
            ModelChoice::Lda => ModelKind::Lda,
            ModelChoice::Cnn => ModelKind::Cnn,
        };
    }
    if let Some(v) = a.k {
        m.k = v;
    }
    if let Some(v) = a.shrinkage {
        m.shrinkage = v;
    }
    if let Some(v) = a.n_convs {
        m.n_convs = v;
    }
    if let Some(v) = a.dense_len {
        m.dense_len = v;
    }
    m.train = apply_train_args(m.train, &a.train);
    m
}

fn fraction(name: &str, v: f64) -> CliResult<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn print_evaluation(label: &str, e: &Evaluation) {
    if e.n == 0 {
        println!("{label}: n/a (no frames)");
        return;
    }
    println!("{label}: {:.4} (n = {})", e.accuracy, e.n);
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult {
    let split_cfg = &ctx.settings.split;
    let keep = fraction("fraction", a.fraction.unwrap_or(split_cfg.fraction))?;
    let train_fraction = fraction("train fraction", a.train_fraction.unwrap_or(split_cfg.train_fraction))?;
    let mode = a.split.unwrap_or(split_cfg.mode);
    let mcfg = model_config(ctx, &a.model);

    let sessions = load_sessions(&a.sessions)?;
    let examples = consolidate(&sessions, keep, ctx.seed)?;
    let balanced = balance(examples, ctx.seed)?;
    let (train_set, test_set) = split(balanced, train_fraction, mode, ctx.seed)?;
    log::info!("training {} on {} frames, testing on {}", mcfg.kind, train_set.len(), test_set.len());
    let model = train_classifier(&train_set, &mcfg)?;
    let test = evaluate(&model, &test_set)?;

    ensure_parent(&a.out)?;
    save_model(&model, &a.out)?;
    println!("model: {} ({} sessions)", mcfg.kind, sessions.len());
    println!("train_accuracy: {:.4} (n = {})", model.meta.training_accuracy, train_set.len());
    print_evaluation("test_accuracy", &test);
    if test.n > 0 {
        println!("confusion (rows = truth, cols = prediction; none left right both):");
        for (label, row) in ClassLabel::ALL.iter().zip(test.confusion) {
            println!("  {:<5} {:>6} {:>6} {:>6} {:>6}", label, row[0], row[1], row[2], row[3]);
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Parses `n=1..4,l=100,200,400`: `key=` starts a list, bare items extend
/// it, `a..b` is an inclusive range.
pub fn parse_grid(spec: &str) -> CliResult<(Option<Vec<usize>>, Option<Vec<usize>>)> {
    let bad = |m: String| CliError::Usage(format!("grid {spec:?}: {m}"));
    let (mut n, mut l): (Option<Vec<usize>>, Option<Vec<usize>>) = (None, None);
    let mut current: Option<&mut Vec<usize>> = None;
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let value = match token.split_once('=') {
            Some((key, value)) => {
                current = Some(match key.trim() {
                    "n" => n.insert(Vec::new()),
                    "l" => l.insert(Vec::new()),
                    other => return Err(bad(format!("unknown axis {other:?} (use n or l)"))),
                });
                value.trim()
            }
            None => token,
        };
        let list = current.as_deref_mut().ok_or_else(|| bad("values must follow n= or l=".into()))?;
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("{s:?} is not a count")));
        match value.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(bad(format!("empty range {a}..{b}")));
                }
                list.extend(a..=b);
            }
            None => list.push(num(value)?),
        }
    }
    for axis in [&mut n, &mut l].into_iter().flatten() {
        axis.sort_unstable();
        axis.dedup();
    }
    Ok((n, l))
}

#[derive(serde::Serialize)]
struct SummaryRow {
    dataset: String,
    cells: usize,
    best_n: usize,
    best_l: usize,
    best_test_acc: f64,
    mean_test_acc: f64,
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> CliResult {
    let mut cfg = ctx.settings.sweep.clone();
    if let Some(grid) = &a.grid {
        let (n, l) = parse_grid(grid)?;
        if let Some(n) = n {
            cfg.n_values = n;
        }
        if let Some(l) = l {
            cfg.l_values = l;
        }
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if a.max_new_cells.is_some() {
        cfg.max_new_cells = a.max_new_cells;
    }
    if let Some(m) = a.split {
        cfg.split_mode = m;
    }
    if let Some(f) = a.train_fraction {
        cfg.train_fraction = fraction("train fraction", f)?;
    }
    cfg.train = apply_train_args(cfg.train, &a.train);

    let sessions = load_sessions(&a.sessions)?;
    let fractions = a.fractions.unwrap_or_else(|| vec![1.0, 0.1]);
    let mut datasets = Vec::new();
    for f in fractions {
        let f = fraction("fraction", f)?;
        datasets.push(SweepDataset {
            name: format!("f{f}"),
            examples: consolidate(&sessions, f, ctx.seed)?,
        });
    }
    let report = run_sweep(&datasets, &cfg, &a.out)?;

    let mut summary = csv::Writer::from_path(a.out.join("summary.csv")).map_err(csv_err)?;
    for d in &datasets {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.dataset == d.name).collect();
        let finite: Vec<_> = rows.iter().filter(|r| r.test_acc.is_finite()).collect();
        let Some(best) = finite.iter().max_by(|x, y| x.test_acc.total_cmp(&y.test_acc)) else {
            continue;
        };
        summary
            .serialize(SummaryRow {
                dataset: d.name.clone(),
                cells: rows.len(),
                best_n: best.n,
                best_l: best.l,
                best_test_acc: best.test_acc,
                mean_test_acc: finite.iter().map(|r| r.test_acc).sum::<f64>() / finite.len() as f64,
            })
            .map_err(csv_err)?;
    }
    summary.flush()?;

    println!(
        "cells: {} computed, {} already done, {} pending",
        report.computed, report.skipped, report.pending
    );
    for r in &report.rows {
        println!(
            "  {:<6} n={} l={:<4} train {:.4} test {:.4}",
            r.dataset, r.n, r.l, r.train_acc, r.test_acc
        );
    }
    println!("wrote {}", report.csv_path.display());
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(format!("csv: {e}"))
}

fn append_row<T: serde::Serialize>(path: &Path, row: &T) -> CliResult {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn validate(ctx: &Ctx, a: ValidateArgs) -> CliResult {
    let mut cfg = session_config(ctx, a.session_id, a.subject_id, "");
    if cfg.session_id.is_empty() {
        cfg.session_id = format!("validation-{}", ctx.seed);
    }
    if let Some(v) = a.record_s {
        cfg.plan.record_s = positive("record duration", v)?;
    }
    if let Some(v) = a.control_s {
        cfg.plan.control_s = positive("control duration", v)?;
    }
    if let Some(v) = a.smoothing {
        cfg.plan.smoothing = v;
    }
    let mut fresh = ctx.settings.model.clone();
    fresh.train = apply_train_args(fresh.train, &a.train);
    let choice = a.model_kind.unwrap_or(match fresh.kind {
        ModelKind::Knn => ValidateModel::Knn,
        ModelKind::Lda => ValidateModel::Lda,
        ModelKind::Cnn => ValidateModel::Cnn,
    });
    let base = match (choice, &a.model) {
        (ValidateModel::Cnn, Some(p)) => Some(load_model(p)?),
        (ValidateModel::Cnn, None) => {
            return Err(CliError::Usage("--model-kind cnn transfers from a pre-trained CNN; pass --model".into()))
        }
        _ => None,
    };
    let which = match choice {
        ValidateModel::Knn => {
            fresh.kind = ModelKind::Knn;
            ValidationModel::Fresh(&fresh)
        }
        ValidateModel::Lda => {
            fresh.kind = ModelKind::Lda;
            ValidationModel::Fresh(&fresh)
        }
        ValidateModel::Cnn => ValidationModel::Transfer(base.as_ref().expect("loaded above"), &fresh.train),
        ValidateModel::Baseline => ValidationModel::Baseline(ClassLabel::None),
    };

    let mut source = open_source(ctx, &a.source)?;
    let mut op =
        ScriptedKeys::new(LabelSchedule::cycle(&ClassLabel::ALL, VALIDATION_BLOCK_S, cfg.plan.record_s))
            .then_follow(FOLLOW_DEADBAND);
    let mut rating = || a.rating;
    let outcome: ValidationOutcome =
        match run_validation(which, &cfg, source.as_mut(), &mut op, &mut NullObserver, &mut rating) {
            Ok(o) => o,
            Err(EngineError::RatingMissing(o)) => *o,
            Err(e) => return Err(e.into()),
        };

    std::fs::create_dir_all(&a.out)?;
    let session_path = a.out.join(format!("{}.bcis", cfg.session_id));
    save_session(&outcome.record, &session_path)?;
    append_row(&a.out.join("validation.csv"), &outcome.row)?;

    let row = &outcome.row;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("model: {}", row.model);
    println!("training_accuracy: {}", opt(row.training_accuracy));
    println!("boxes_caught: {} (max streak {})", row.boxes_caught, row.max_streak);
    println!("agreement: {}", opt(row.agreement));
    match row.user_rating {
        Some(r) => println!("user_rating: {r}"),
        None => println!("user_rating: missing (row marked incomplete)"),
    }
    println!("wrote {} and {}", session_path.display(), a.out.join("validation.csv").display());
    Ok(())
}

fn replay(a: ReplayArgs) -> CliResult {
    let rec = load_session(&a.session)?;
    let n = rec.frames.len();
    let agree = rec.relabel_agreement();
    if agree == n {
        println!("labels: 100% reproduced ({n} frames)");
    } else {
        println!("labels: {:.2}% reproduced ({agree}/{n} frames)", 100.0 * agree as f64 / n as f64);
    }
    if let Some(p) = &a.model {
        let model = load_model(p)?;
        print_evaluation(&format!("{} accuracy on stored frames", model.kind()), &evaluate(&model, &rec.frames)?);
    }
    if agree != n {
        return Err(CliError::Data(format!(
            "{} of {n} stored labels disagree with the key log",
            n - agree
        )));
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let paths = expand(&a.sessions)?;
    println!(
        "{:<24} {:<10} {:<10} {:>7} {:>5} {:>22} {:>6} {:>6} {:>6} {:>8}",
        "session", "kind", "subject", "frames", "keys", "none/left/right/both", "boxes", "streak", "rating", "train_acc"
    );
    for p in paths {
        let rec = load_session(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let c = class_counts(&rec.frames);
        let m = &rec.metrics;
        let show = |v: Option<u32>| v.map_or("-".to_string(), |x| x.to_string());
        println!(
            "{:<24} {:<10} {:<10} {:>7} {:>5} {:>22} {:>6} {:>6} {:>6} {:>8}",
            rec.header.session_id,
            rec.header.kind,
            rec.header.subject_id,
            rec.frames.len(),
            rec.key_log.len(),
            format!("{}/{}/{}/{}", c[0], c[1], c[2], c[3]),
            show(m.boxes_caught),
            show(m.max_streak),
            show(m.user_rating.map(u32::from)),
            m.training_accuracy.map_or("-".to_string(), |x| format!("{x:.4}")),
        );
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let model = a.model.as_deref().map(load_model).transpose()?.map(Arc::new);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
    }
    let cfg = bci_server::ServerConfig {
        out_dir: a.out,
        model,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(bci_server::serve(a.bind, cfg, |addr| {
        println!("listening on http://{addr} (WebSocket at ws://{addr}/ws)");
    }))
    .map_err(|e| CliError::Source(format!("server on {}: {e}", a.bind)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let (n, l) = parse_grid("n=1..2,l=100,200").unwrap();
        assert_eq!(n, Some(vec![1, 2]));
        assert_eq!(l, Some(vec![100, 200]));
        let (n, l) = parse_grid("l=400").unwrap();
        assert_eq!((n, l), (None, Some(vec![400])));
        assert_eq!(parse_grid("n=3,1..2").unwrap().0, Some(vec![1, 2, 3]));
        for bad in ["100", "x=1", "n=2..1", "n=a"] {
            assert_eq!(parse_grid(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
