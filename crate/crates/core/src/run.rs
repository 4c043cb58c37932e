//! Run configuration and the driver shared by the command line and the
//! synthetic benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, StagePlan, StageTag};
use crate::data::{load_dataset, split, synth_generate, AlignMode, AlignedSample, Modality, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Pipeline;
use crate::train::{evaluate, evaluate_unimodal, prepare_all, train_pipeline, EpochLog, TrainOptions};

/// Where samples come from. Exactly one source per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A dataset file written by `save_dataset`.
    Dataset(PathBuf),
    /// Generate samples on the fly; the run seed replaces the spec's seed.
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub align: AlignMode,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Train on train + validation, as in the final refit.
    pub merge_valid: bool,
    pub end_to_end: bool,
    /// Concurrent stage-1 trainings.
    pub jobs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub stages: StagePlan,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            align: AlignMode::Aligned,
            split: [0.7, 0.15, 0.15],
            merge_valid: false,
            end_to_end: false,
            jobs: 1,
            out: None,
            model: ModelConfig::default(),
            stages: StagePlan::desk(),
            data: DataSource::Synth(SynthSpec::default()),
        }
    }
}

impl RunConfig {
    /// The 1000-sample synthetic benchmark: 70% train, 30% test.
    pub fn benchmark(seed: u64, align: AlignMode) -> Self {
        Self {
            seed,
            align,
            split: [0.7, 0.0, 0.3],
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative dataset path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        if let DataSource::Dataset(p) = &mut cfg.data {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for tag in StageTag::ALL {
            self.stages
                .get(tag)
                .validate()
                .map_err(|e| Error::Config(format!("{tag}: {e}")))?;
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || !(self.split[0] > 0.0) {
            return Err(Error::Config(format!("split {:?} needs a positive train share", self.split)));
        }
        if let DataSource::Synth(spec) = &self.data {
            spec.validate()?;
            for m in Modality::ALL {
                if spec.dim(m) != self.model.input_dim(m) {
                    return Err(Error::Config(format!(
                        "synthetic {m} width {} differs from model input width {}",
                        spec.dim(m),
                        self.model.input_dim(m)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Raw samples from the configured source.
    pub fn raw_samples(&self) -> Result<Vec<AlignedSample>> {
        match &self.data {
            DataSource::Dataset(p) => load_dataset(p),
            DataSource::Synth(spec) => synth_generate(&SynthSpec {
                seed: self.seed,
                ..spec.clone()
            }),
        }
    }
}

/// Preprocessed splits of one run.
#[derive(Clone, Debug, Default)]
pub struct RunData {
    pub train: Vec<AlignedSample>,
    pub valid: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
}

/// Splits, optionally merges, and preprocesses the configured samples.
pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let raw = cfg.raw_samples()?;
    check_widths(&cfg.model, &raw)?;
    let mut parts = split(&raw, cfg.split, cfg.seed)?;
    if cfg.merge_valid {
        parts.train.append(&mut parts.valid);
    }
    Ok(RunData {
        train: prepare_all(&parts.train, cfg.align)?,
        valid: prepare_all(&parts.valid, cfg.align)?,
        test: prepare_all(&parts.test, cfg.align)?,
    })
}

/// Rejects samples whose feature widths differ from the model's inputs.
pub fn check_widths(model: &ModelConfig, data: &[AlignedSample]) -> Result<()> {
    for (i, s) in data.iter().enumerate() {
        for m in Modality::ALL {
            let seq = s.seq(m);
            if let Some(row) = seq.features.first() {
                if row.len() != model.input_dim(m) {
                    return Err(Error::Config(format!(
                        "sample {i} ({}): {m} width {} but the model expects {}",
                        s.id,
                        row.len(),
                        model.input_dim(m)
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Fused and per-modality metrics on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fused: MetricsReport,
    pub unimodal_l: MetricsReport,
    pub unimodal_v: MetricsReport,
    pub unimodal_a: MetricsReport,
}

impl EvalSummary {
    pub fn compute(p: &Pipeline, data: &[AlignedSample]) -> Result<Self> {
        Ok(Self {
            fused: evaluate(p, data)?,
            unimodal_l: evaluate_unimodal(p, Modality::L, data)?,
            unimodal_v: evaluate_unimodal(p, Modality::V, data)?,
            unimodal_a: evaluate_unimodal(p, Modality::A, data)?,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialise")
    }

    /// Header plus one line per model.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("model\t{}\n", MetricsReport::tsv_header());
        for (model, r) in self.rows() {
            out.push_str(&format!("{model}\t{}\n", r.tsv_line()));
        }
        out
    }

    pub fn unimodal(&self, m: Modality) -> &MetricsReport {
        match m {
            Modality::L => &self.unimodal_l,
            Modality::V => &self.unimodal_v,
            Modality::A => &self.unimodal_a,
        }
    }

    pub fn best_unimodal_acc6(&self) -> f64 {
        Modality::ALL
            .iter()
            .map(|&m| self.unimodal(m).acc6)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(model, report)` rows in a fixed order.
    pub fn rows(&self) -> [(&'static str, &MetricsReport); 4] {
        [
            ("fused", &self.fused),
            ("unimodal_l", &self.unimodal_l),
            ("unimodal_v", &self.unimodal_v),
            ("unimodal_a", &self.unimodal_a),
        ]
    }
}

/// Scores of a finished run; empty splits are left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub align: AlignMode,
    pub train_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<EvalSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalSummary>,
}

impl RunMetrics {
    pub fn compute(p: &Pipeline, cfg: &RunConfig, data: &RunData) -> Result<Self> {
        let score = |d: &[AlignedSample]| (!d.is_empty()).then(|| EvalSummary::compute(p, d)).transpose();
        Ok(Self {
            seed: cfg.seed,
            align: cfg.align,
            train_samples: data.train.len(),
            valid: score(&data.valid)?,
            test: score(&data.test)?,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialise")
    }

    /// Header plus one line per split and model.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("split\tmodel\t{}\n", MetricsReport::tsv_header());
        for (split, summary) in [("valid", &self.valid), ("test", &self.test)] {
            if let Some(s) = summary {
                for (model, r) in s.rows() {
                    out.push_str(&format!("{split}\t{model}\t{}\n", r.tsv_line()));
                }
            }
        }
        out
    }
}

/// Trains `stages` of `p` on `data.train` following `cfg`.
pub fn train_run(p: &mut Pipeline, cfg: &RunConfig, data: &RunData, stages: &[StageTag]) -> Result<Vec<EpochLog>> {
    let opts = TrainOptions {
        seed: cfg.seed,
        jobs: cfg.jobs,
        stages: stages.to_vec(),
        end_to_end: cfg.end_to_end,
    };
    train_pipeline(p, &data.train, &cfg.stages, &opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub seed: u64,
    pub align: AlignMode,
    pub fused_acc6: f64,
    /// `L, V, A` order.
    pub unimodal_acc6: [f64; 3],
    pub seconds: f64,
}

impl BenchmarkResult {
    pub fn best_unimodal_acc6(&self) -> f64 {
        self.unimodal_acc6.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Full three-stage run of [`RunConfig::benchmark`], scored on the test split.
pub fn run_benchmark(seed: u64, align: AlignMode, jobs: usize) -> Result<BenchmarkResult> {
    let start = Instant::now();
    let cfg = RunConfig {
        jobs,
        ..RunConfig::benchmark(seed, align)
    };
    cfg.validate()?;
    let data = load_run_data(&cfg)?;
    let mut p = Pipeline::new(cfg.model.clone(), seed)?;
    train_run(&mut p, &cfg, &data, &StageTag::ALL)?;
    let eval = EvalSummary::compute(&p, &data.test)?;
    Ok(BenchmarkResult {
        seed,
        align,
        fused_acc6: eval.fused.acc6,
        unimodal_acc6: Modality::ALL.map(|m| eval.unimodal(m).acc6),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn two_data_sources_are_rejected() {
        let text = "[data]\ndataset = \"a.jsonl\"\n[data.synth]\nsamples = 3\n";
        assert!(RunConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 4\nalign = \"unaligned\"\n[data.synth]\nsamples = 20\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.align, AlignMode::Unaligned);
        assert_eq!(cfg.model, ModelConfig::default());
        match cfg.data {
            DataSource::Synth(s) => assert_eq!(s.samples, 20),
            _ => panic!("expected synthetic source"),
        }
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.model.d_l = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn merge_valid_moves_validation_into_train() {
        let cfg = RunConfig {
            data: DataSource::Synth(SynthSpec { samples: 40, ..Default::default() }),
            ..Default::default()
        };
        let plain = load_run_data(&cfg).unwrap();
        let merged = load_run_data(&RunConfig { merge_valid: true, ..cfg }).unwrap();
        assert!(merged.valid.is_empty());
        assert_eq!(merged.train.len(), plain.train.len() + plain.valid.len());
        assert_eq!(merged.test, plain.test);
    }
}
