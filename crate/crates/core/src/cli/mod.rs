//! The `xmla` command line: corpus synthesis, teacher training, upcycling,
//! distillation, preference tuning, evaluation and cache reports.

mod config;
mod kv_report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::{load_config, DistillConfig, DpoConfig, TeacherConfig};
pub use kv_report::{kv_report, render as render_kv_report, KvRow, ReportGeometry};

use crate::error::Error;
use crate::model::{write_atomic, LayerSelection, LmModel};
use crate::training::{
    bytes_to_tokens, distill_train, dpo_train, gen_corpus, make_pref_pairs, preference_margin, sub_seed, train_lm,
    write_dpo_csv, write_trace_csv, CorpusKind, PrefPair, TrainPlan,
};
use crate::upcycle::RankSpec;
use config::{existing, require, writable};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(Error::Io(e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "xmla", version, about = "Multi-head latent attention upcycling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    Svd,
    Random,
}

/// Flags that override fields of the training plan in a config file.
#[derive(Debug, Default, clap::Args)]
pub struct PlanFlags {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub ce_weight: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

impl PlanFlags {
    fn apply(&self, plan: &mut TrainPlan) {
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    plan.$field = v;
                }
            };
        }
        set!(steps => steps);
        set!(seed => seed);
        set!(lr => lr);
        set!(batch_size => batch_size);
        set!(seq_len => seq_len);
        set!(ce_weight => ce_weight);
        set!(kl_weight => kl_weight);
        set!(beta => dpo_beta);
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic byte corpus.
    GenCorpus {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an all-attention teacher with cross-entropy.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanFlags,
    },
    /// Convert attention layers of a checkpoint to MLA; prints a JSON report.
    Upcycle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rank_spec: RankSpec,
        #[arg(long, default_value = "all")]
        layers: LayerSelection,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        ln: Switch,
        /// `random` draws fresh MLA projections instead of factorizing the donor.
        #[arg(long, value_enum, default_value_t = InitKind::Svd)]
        init: InitKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distill a student checkpoint toward a frozen teacher.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanFlags,
    },
    /// Build preference pairs from a teacher's greedy continuations (JSON lines).
    GenPrefs {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 8)]
        cont_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference-tune a student against a frozen copy of itself.
    Dpo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanFlags,
    },
    /// Perplexity on a corpus plus a greedy sample.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 32)]
        context: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 48)]
        sample_len: usize,
    },
    /// KV-cache scalars and size relative to the all-attention baseline.
    KvReport {
        /// Inline JSON or a path to a JSON file.
        #[arg(long)]
        geometry: String,
        #[arg(long)]
        rank_spec: Vec<RankSpec>,
        #[arg(long, default_value = "all")]
        layers: LayerSelection,
        #[arg(long, default_value_t = 4096)]
        seq_len: usize,
    },
}

/// Runs the binary: parses `std::env::args`, prints errors, maps exit codes.
pub fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    match run(std::env::args_os(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xmla: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.exit_code() == 0 => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    execute(cli.command, out)
}

fn read_tokens(path: &Path) -> Result<Vec<usize>, CliError> {
    Ok(bytes_to_tokens(&std::fs::read(existing(path)?)?))
}

fn split_held_out(tokens: &[usize], frac: f64) -> Result<(&[usize], &[usize]), CliError> {
    if !(0.0..1.0).contains(&frac) {
        return Err(CliError::Usage(format!("eval_frac {frac} must lie in [0, 1)")));
    }
    let held = ((tokens.len() as f64) * frac).round() as usize;
    if held > 0 && held < 2 {
        return Err(CliError::Usage("held-out split shorter than 2 tokens".into()));
    }
    let (train, test) = tokens.split_at(tokens.len() - held);
    Ok((train, if held == 0 { train } else { test }))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::GenCorpus { kind, tokens, seed, out: path } => {
            let kind: CorpusKind = kind.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            if tokens == 0 {
                return Err(CliError::Usage("--tokens must be positive".into()));
            }
            let bytes = gen_corpus(kind, tokens, seed)?;
            write_atomic(writable(&path)?, |w| Ok(w.write_all(&bytes)?))?;
            writeln!(out, "wrote {} {kind} tokens to {}", bytes.len(), path.display())?;
        }

        Command::TrainTeacher {
            config,
            corpus,
            out: path,
            trace,
            plan,
        } => {
            let mut cfg: TeacherConfig = load_config(config.as_deref())?;
            cfg.corpus = corpus.or(cfg.corpus);
            cfg.out = path.or(cfg.out);
            cfg.trace = trace.or(cfg.trace);
            plan.apply(&mut cfg.plan);
            let corpus_path = existing(require(&cfg.corpus, "corpus")?)?;
            let out_path = writable(require(&cfg.out, "out")?)?;
            if let Some(t) = &cfg.trace {
                writable(t)?;
            }
            cfg.plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

            let tokens = read_tokens(corpus_path)?;
            let (train, test) = split_held_out(&tokens, cfg.eval_frac)?;
            let model = LmModel::new(cfg.model.clone(), sub_seed(cfg.plan.seed, "init"))?;
            let initial = model.perplexity(test, cfg.context)?;
            let (mut model, rows) = train_lm(model, train, &cfg.plan)?;
            model.round_to_f32();
            let fin = model.perplexity(test, cfg.context)?;
            model.save(out_path)?;
            if let Some(t) = &cfg.trace {
                write_trace_csv(t, &rows)?;
            }
            writeln!(out, "initial perplexity: {initial:.6}")?;
            writeln!(out, "final perplexity: {fin:.6}")?;
            if let Some(last) = rows.last() {
                writeln!(out, "final loss: {}", last.total)?;
            }
        }

        Command::Upcycle {
            ckpt,
            out: path,
            rank_spec,
            layers,
            ln,
            init,
            seed,
        } => {
            let donor = LmModel::load(existing(&ckpt)?)?;
            writable(&path)?;
            let enable_ln = ln == Switch::On;
            let (mut model, report) = donor.upcycle(&rank_spec, &layers, enable_ln)?;
            if init == InitKind::Random {
                let RankSpec::Fixed { r_q, r_kv } = rank_spec else {
                    return Err(CliError::Usage("random init needs fixed:RQ,RKV".into()));
                };
                model = donor.random_mla_baseline(r_q, r_kv, &layers, enable_ln, seed)?;
            }
            model.round_to_f32();
            model.save(&path)?;
            let mut json = serde_json::to_value(&report).map_err(Error::from)?;
            json["init"] = serde_json::Value::from(if init == InitKind::Svd { "svd" } else { "random" });
            writeln!(out, "{}", serde_json::to_string_pretty(&json).map_err(Error::from)?)?;
        }

        Command::Distill {
            config,
            student,
            teacher,
            corpus,
            out: path,
            trace,
            plan,
        } => {
            let mut cfg: DistillConfig = load_config(config.as_deref())?;
            cfg.student = student.or(cfg.student);
            cfg.teacher = teacher.or(cfg.teacher);
            cfg.corpus = corpus.or(cfg.corpus);
            cfg.out = path.or(cfg.out);
            cfg.trace = trace.or(cfg.trace);
            plan.apply(&mut cfg.plan);
            let s_path = existing(require(&cfg.student, "student")?)?;
            let t_path = existing(require(&cfg.teacher, "teacher")?)?;
            let c_path = existing(require(&cfg.corpus, "corpus")?)?;
            let out_path = writable(require(&cfg.out, "out")?)?;
            if let Some(t) = &cfg.trace {
                writable(t)?;
            }
            cfg.plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;

            let student = LmModel::load(s_path)?;
            let teacher = LmModel::load(t_path)?;
            let tokens = read_tokens(c_path)?;
            let (train, test) = split_held_out(&tokens, cfg.eval_frac)?;
            let (mut model, rows) = distill_train(student, &teacher, train, &cfg.plan)?;
            model.round_to_f32();
            model.save(out_path)?;
            if let Some(t) = &cfg.trace {
                write_trace_csv(t, &rows)?;
            }
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                writeln!(out, "kl step {}: {}", first.step, first.kl_loss)?;
                writeln!(out, "kl step {}: {}", last.step, last.kl_loss)?;
            }
            writeln!(out, "teacher perplexity: {:.6}", teacher.perplexity(test, cfg.context)?)?;
            writeln!(out, "student perplexity: {:.6}", model.perplexity(test, cfg.context)?)?;
        }

        Command::GenPrefs {
            teacher,
            corpus,
            pairs,
            prompt_len,
            cont_len,
            seed,
            out: path,
        } => {
            let teacher = LmModel::load(existing(&teacher)?)?;
            let tokens = read_tokens(&corpus)?;
            writable(&path)?;
            let pairs = make_pref_pairs(&teacher, &tokens, pairs, prompt_len, cont_len, seed)?;
            let mut text = String::new();
            for p in &pairs {
                text.push_str(&serde_json::to_string(p).map_err(Error::from)?);
                text.push('\n');
            }
            write_text(&path, &text)?;
            writeln!(out, "wrote {} preference pairs to {}", pairs.len(), path.display())?;
        }

        Command::Dpo {
            config,
            student,
            prefs,
            out: path,
            trace,
            plan,
        } => {
            let mut cfg: DpoConfig = load_config(config.as_deref())?;
            cfg.student = student.or(cfg.student);
            cfg.prefs = prefs.or(cfg.prefs);
            cfg.out = path.or(cfg.out);
            cfg.trace = trace.or(cfg.trace);
            plan.apply(&mut cfg.plan);
            let s_path = existing(require(&cfg.student, "student")?)?;
            let p_path = existing(require(&cfg.prefs, "prefs")?)?;
            let out_path = writable(require(&cfg.out, "out")?)?;
            if let Some(t) = &cfg.trace {
                writable(t)?;
            }
            cfg.plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;

            let student = LmModel::load(s_path)?;
            let pairs: Vec<PrefPair> = std::fs::read_to_string(p_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| CliError::Runtime(Error::Data(format!("prefs: {e}")))))
                .collect::<Result<_, _>>()?;
            let before = preference_margin(&student, &pairs)?;
            let outcome = dpo_train(student, &pairs, &cfg.plan)?;
            let mut model = outcome.model;
            model.round_to_f32();
            let after = preference_margin(&model, &pairs)?;
            model.save(out_path)?;
            if let Some(t) = &cfg.trace {
                write_dpo_csv(t, &outcome.trace)?;
            }
            writeln!(out, "margin before: {before:.6}")?;
            writeln!(out, "margin after: {after:.6}")?;
        }

        Command::Eval {
            ckpt,
            corpus,
            context,
            prompt_len,
            sample_len,
        } => {
            let model = LmModel::load(existing(&ckpt)?)?;
            let tokens = read_tokens(&corpus)?;
            let ppl = model.perplexity(&tokens, context)?;
            writeln!(out, "perplexity: {ppl:.6}")?;
            let prompt = &tokens[..prompt_len.clamp(1, tokens.len())];
            let sample = model.generate(prompt, sample_len)?;
            let bytes: Vec<u8> = sample.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
            writeln!(out, "sample: \"{}\"", bytes.escape_ascii())?;
        }

        Command::KvReport {
            geometry,
            rank_spec,
            layers,
            seq_len,
        } => {
            let text = if geometry.trim_start().starts_with('{') {
                geometry
            } else {
                std::fs::read_to_string(&geometry).map_err(|e| CliError::Usage(format!("{geometry}: {e}")))?
            };
            let geo: ReportGeometry =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("geometry: {e}")))?;
            let rows = kv_report(&geo, &rank_spec, &layers, seq_len)?;
            render_kv_report(&rows, &geo, out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (Result<(), CliError>, String) {
        let mut buf = Vec::new();
        let r = run(std::iter::once("xmla").chain(args.iter().copied()), &mut buf);
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn kv_report_command() {
        let geo = r#"{"d":2048,"n_h":32,"n_kv":8,"d_h":64,"d_qk":32,"d_r":32,"n_layers":16}"#;
        let (r, text) = run_str(&["kv-report", "--geometry", geo, "--rank-spec", "fixed:864,512", "--rank-spec", "fixed:864,48"]);
        r.unwrap();
        assert!(text.contains("53.1250%") && text.contains("7.8125%"));
    }

    #[test]
    fn usage_errors_exit_two() {
        let (r, _) = run_str(&["kv-report", "--geometry", "{}", "--rank-spec", "fixed:1"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
        let (r, _) = run_str(&["kv-report", "--geometry", r#"{"d":1}"#]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
        let (r, _) = run_str(&["gen-corpus", "--kind", "zipf", "--tokens", "5", "--out", "x"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
        let (r, _) = run_str(&["frobnicate"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.xmla");
        std::fs::write(&bogus, b"not a checkpoint").unwrap();
        let out = dir.path().join("o.xmla");
        let (r, _) = run_str(&[
            "upcycle",
            "--ckpt",
            bogus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--rank-spec",
            "fixed:8,8",
        ]);
        assert_eq!(r.unwrap_err().exit_code(), 1);
        assert!(!out.exists());
    }

    #[test]
    fn gen_corpus_command() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        for p in [&a, &b] {
            let (r, _) = run_str(&["gen-corpus", "--kind", "markov", "--tokens", "1000", "--seed", "3", "--out", p.to_str().unwrap()]);
            r.unwrap();
        }
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes.len(), 1000);
        assert_eq!(bytes, std::fs::read(&b).unwrap());
    }
}
