use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use deltafuse_core::checkpoint::checkpoint_path;
use deltafuse_core::checkpoint::load_checkpoint;
use deltafuse_core::data::{class_histogram, load_dataset, save_dataset, synth_generate, SynthSpec};
use deltafuse_core::fusion::{
    attention_module_counts, model_param_count, mult_reference_param_count, MultReferenceConfig,
};
use deltafuse_core::gradcheck::{gradcheck_suite, SUITE_TOLERANCE};
use deltafuse_core::run::{check_widths, load_run_data, train_run, EvalSummary, RunMetrics};
use deltafuse_core::train::{prepare_all, EpochLog};
use deltafuse_core::{Error, Parameters, Pipeline, RunConfig, StageTag, EMOTIONS};

use crate::{EvalArgs, GradcheckArgs, OutArg, ParamcountArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 2 for usage or configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<ExitCode, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn out_dir(arg: OutArg, fallback: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    let dir = arg
        .out
        .or(fallback)
        .unwrap_or_else(|| Path::new("runs").join(command));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let dir = out_dir(a.out, None, "synth")?;
    let samples = synth_generate(&spec)?;
    let path = dir.join(&a.name);
    save_dataset(&path, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    for (e, n) in EMOTIONS.iter().zip(class_histogram(&samples)) {
        println!("{e:<10} {n}");
    }
    Ok(ExitCode::SUCCESS)
}

fn append_logs(path: &Path, logs: &[EpochLog]) -> Result<(), CliError> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EpochLog::tsv_header());
        text.push('\n');
    }
    for l in logs {
        text.push_str(&l.tsv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(al) = a.align {
        cfg.align = al.into();
    }
    cfg.merge_valid |= a.merge_valid;
    cfg.end_to_end |= a.end_to_end;
    cfg.validate()?;
    let mut stages: Vec<StageTag> = StageTag::ALL.into_iter().filter(|t| a.stage.contains(t)).collect();
    if stages.is_empty() {
        stages = StageTag::ALL.to_vec();
    }
    if cfg.end_to_end && stages.len() != StageTag::ALL.len() {
        return Err(CliError::Usage("--end-to-end trains every stage; drop --stage".into()));
    }

    let dir = out_dir(a.out, cfg.out.clone(), "train")?;
    cfg.out = Some(dir.clone());
    write(&dir.join("run.toml"), &cfg.to_toml())?;
    let data = load_run_data(&cfg)?;
    println!(
        "train {} / valid {} / test {} samples ({})",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        cfg.align.name()
    );

    let ckpt_dir = dir.join("checkpoints");
    let mut p = Pipeline::new(cfg.model.clone(), cfg.seed)?;
    for tag in StageTag::ALL.into_iter().filter(|t| !stages.contains(t)) {
        let path = checkpoint_path(&ckpt_dir, tag);
        if path.exists() {
            p.install(load_checkpoint(&path)?, tag)?;
            println!("loaded {tag} from {}", path.display());
        }
    }

    let start = Instant::now();
    let logs = train_run(&mut p, &cfg, &data, &stages)?;
    append_logs(&dir.join("train_log.tsv"), &logs)?;
    for l in &logs {
        println!("{}", l.tsv_line());
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    p.save_all(cfg.seed, &ckpt_dir)?;

    let metrics = RunMetrics::compute(&p, &cfg, &data)?;
    write(&dir.join("metrics.toml"), &metrics.to_toml())?;
    write(&dir.join("metrics.tsv"), &metrics.to_tsv())?;
    if let Some(t) = &metrics.test {
        println!("test (fused)\n{}", t.fused);
        println!("best unimodal acc6 {:.4}", t.best_unimodal_acc6());
    }
    println!("artifacts in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let dir = out_dir(a.out, None, "eval")?;
    let ckpt_dir = a.checkpoints.clone().unwrap_or_else(|| dir.join("checkpoints"));
    let (p, _) = Pipeline::load_all(&ckpt_dir)?;
    let data = match (&a.data, &a.config) {
        (Some(path), _) => {
            let raw = load_dataset(path)?;
            check_widths(&p.cfg, &raw)?;
            let align = a.align.map(Into::into).unwrap_or_default();
            prepare_all(&raw, align)?
        }
        (None, Some(path)) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(al) = a.align {
                cfg.align = al.into();
            }
            cfg.model = p.cfg.clone();
            cfg.validate()?;
            load_run_data(&cfg)?.test
        }
        (None, None) => return Err(CliError::Usage("eval needs --data FILE or --config PATH".into())),
    };
    let summary = EvalSummary::compute(&p, &data)?;
    write(&dir.join("eval.toml"), &summary.to_toml())?;
    write(&dir.join("eval.tsv"), &summary.to_tsv())?;
    println!("{}", summary.fused);
    for (model, r) in summary.rows().into_iter().skip(1) {
        println!("{model:<12} acc6 {:.4}", r.acc6);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let start = Instant::now();
    let report = gradcheck_suite(a.seed, a.fault)?;
    println!("{:<26} {:>14}  status", "op", "max_rel_error");
    for e in &report {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<26} {:>14.3e}  {status}", e.name, e.max_rel_error);
    }
    let failed = report.iter().filter(|e| !e.passed()).count();
    println!(
        "{} checks, {failed} failed (tolerance {SUITE_TOLERANCE:e}) in {:.1}s",
        report.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn paramcount(a: ParamcountArgs) -> CliResult {
    let cfg = run_config(a.config.as_deref())?;
    cfg.model.validate()?;
    let m = &cfg.model;
    let reference = MultReferenceConfig::matched(m);
    let ours = model_param_count(m);
    let ours_enum = Pipeline::new(m.clone(), 0)?.param_count();
    let theirs = mult_reference_param_count(&reference);
    let theirs_enum: usize = reference.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    println!("model_param_count          {ours} (enumerated {ours_enum})");
    println!("mult_reference_param_count {theirs} (enumerated {theirs_enum})");
    println!("ratio                      {:.4}", ours as f64 / theirs as f64);
    let (a_ours, a_theirs) = attention_module_counts(m, &reference, false);
    println!(
        "attention modules without relative-position tables: {a_ours} vs {a_theirs} (ratio {:.4})",
        a_ours as f64 / a_theirs as f64
    );
    if ours != ours_enum || theirs != theirs_enum {
        eprintln!("closed-form and enumerated counts disagree");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
