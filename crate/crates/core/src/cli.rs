//! Command implementations behind the `saltts` binary. Each command writes
//! its resolved configuration into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::align::{build_schedule_with, FrameSpec, NoisePlacement};
use crate::checkpoint::{load_model, CONFIG_FILE};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_ppm, EvalReport};
use crate::features::{gen_synthetic_corpus, validate_corpus, write_matrix, Corpus, Manifest, Split, ValidationReport};
use crate::train::{fit, synthesize, FitOptions, FitReport};

pub const SEED_ENV: &str = "SALTTS_SEED";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "summary.txt";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_)
        | Error::Index(_)
        | Error::Alignment(_)
        | Error::Data(_)
        | Error::Format { .. }
        | Error::Load(_)
        | Error::Io { .. } => EXIT_DATA,
    }
}

/// Parses a `SALTTS_SEED` value.
pub fn parse_seed(value: &str) -> Result<u64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{SEED_ENV}={value:?} is not an unsigned integer")))
}

/// Reads the config file if given, applies the seed override and validates.
pub fn resolve_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed_override {
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_corpus(cfg: &RunConfig, n: usize, seed: u64, out: &Path) -> Result<Manifest> {
    create_dir(out)?;
    let corpus = gen_synthetic_corpus(n, &cfg.model, &cfg.corpus, seed)?;
    let manifest = corpus.write(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(manifest)
}

pub fn cmd_validate(cfg: &RunConfig, corpus: &Path) -> Result<ValidationReport> {
    validate_corpus(corpus, &cfg.model)
}

pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path, resume: Option<PathBuf>) -> Result<FitReport> {
    let corpus = Corpus::load(corpus)?;
    let pairs: Vec<_> = corpus.utterances.iter().zip(corpus.splits.iter().copied()).collect();
    fit(cfg, &pairs, out, &FitOptions { resume })
}

/// Writes `synth_<i>.matf` and `synth_<i>.ppm` per input; returns frame counts.
pub fn cmd_synth(checkpoint: &Path, inputs: &[Vec<usize>], out: &Path) -> Result<Vec<usize>> {
    let (model, cfg, _) = load_model(checkpoint)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut frames = Vec::with_capacity(inputs.len());
    for (i, phonemes) in inputs.iter().enumerate() {
        let mel = synthesize(&model, phonemes)?;
        write_matrix(&out.join(format!("synth_{i:03}.matf")), &mel)?;
        if mel.rows() > 0 {
            write_ppm(&out.join(format!("synth_{i:03}.ppm")), &mel)?;
        }
        frames.push(mel.rows());
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Eval,
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown split {other:?} (train, eval or all)"))),
        }
    }
}

/// Writes `eval.csv`, `summary.txt` and, with `ppm`, one image per utterance.
pub fn cmd_eval(checkpoint: &Path, corpus: &Path, split: SplitChoice, out: &Path, ppm: bool) -> Result<EvalReport> {
    let (model, cfg, _) = load_model(checkpoint)?;
    let corpus = Corpus::load(corpus)?;
    let utts = match split {
        SplitChoice::Train => corpus.split(Split::Train),
        SplitChoice::Eval => corpus.split(Split::Eval),
        SplitChoice::All => corpus.all(),
    };
    let report = evaluate(&model, &utts, &model.variant().to_string())?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_text(&out.join(EVAL_CSV), &report.to_csv())?;
    write_text(&out.join(EVAL_SUMMARY), &report.summary_table())?;
    if ppm {
        for u in &utts {
            let (mel, _) = crate::eval::teacher_forced(&model, u)?;
            write_ppm(&out.join(format!("{}.ppm", u.id)), &mel)?;
        }
    }
    Ok(report)
}

/// Schedule CSV for `n_src` SSL frames onto the acoustic frame grid.
pub fn cmd_align_check(n_src: usize, placement: NoisePlacement) -> String {
    build_schedule_with(n_src, &FrameSpec::SSL, &FrameSpec::FS2, placement).to_csv()
}

/// Parses `"1 2 3"` or `"1,2,3"`.
pub fn parse_phonemes(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Argument(format!("bad phoneme id {s:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Format { offset: 0, message: "x".into() }), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }

    #[test]
    fn seed_override_and_config_errors() {
        assert_eq!(parse_seed(" 17 ").unwrap(), 17);
        assert!(matches!(parse_seed("x"), Err(Error::Config(_))));
        assert_eq!(resolve_config(None, Some(9)).unwrap().model.seed, 9);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "[model]\nheads = 0\n").unwrap();
        assert!(matches!(resolve_config(Some(&bad), None), Err(Error::Config(_))));
    }

    #[test]
    fn align_check_prints_the_head_rule() {
        let csv = cmd_align_check(5, NoisePlacement::SecondRepeat);
        let src: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(src, ["0", "1", "1", "2", "3", "3", "4"]);
    }

    #[test]
    fn phoneme_parsing() {
        assert_eq!(parse_phonemes("1 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_phonemes("").unwrap(), Vec::<usize>::new());
        assert!(parse_phonemes("1 b").is_err());
    }

    #[test]
    fn commands_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let mut cfg = tiny();
        cfg.model.variant = Variant::Parallel;
        cmd_gen_corpus(&cfg, 4, 1, &corpus).unwrap();
        assert_eq!(cmd_validate(&cfg, &corpus).unwrap().utterances, 4);
        let run = dir.path().join("run");
        let report = cmd_train(&cfg, &corpus, &run, None).unwrap();
        let frames = cmd_synth(&report.final_checkpoint, &[vec![1, 2], vec![]], &dir.path().join("synth")).unwrap();
        assert_eq!(frames[1], 0);
        let r = cmd_eval(&report.final_checkpoint, &corpus, SplitChoice::Eval, &dir.path().join("eval"), true).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(dir.path().join("eval").join(EVAL_CSV).exists());
        assert!(dir.path().join("eval").join(format!("{}.ppm", r.rows[0].id)).exists());
    }
}
