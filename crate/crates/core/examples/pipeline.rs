//! The whole command-line pipeline in a scratch directory: corpus, teacher,
//! half-size KV upcycle, distillation, preference data, DPO, evaluation.
//!
//! cargo run --release --example pipeline

use std::path::Path;

use mla_upcycle::cli::{self, CliError};

fn xmla(args: &[&str]) -> Result<(), CliError> {
    println!("$ xmla {}", args.join(" "));
    let mut out = std::io::stdout().lock();
    cli::run(std::iter::once("xmla").chain(args.iter().copied()), &mut out)
}

fn main() -> Result<(), CliError> {
    let dir = std::env::temp_dir().join(format!("xmla-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (corpus, teacher, student, distilled, prefs, tuned) = (
        p("corpus.txt"),
        p("teacher.xmla"),
        p("student.xmla"),
        p("distilled.xmla"),
        p("prefs.jsonl"),
        p("tuned.xmla"),
    );

    xmla(&["gen-corpus", "--kind", "markov", "--tokens", "20000", "--seed", "1", "--out", &corpus])?;
    xmla(&["train-teacher", "--corpus", &corpus, "--out", &teacher, "--seed", "1"])?;
    // Default model: 2 grouped kv heads of width 16 cache 64 scalars per token;
    // r_kv = 24 plus the 8-wide rotary key gives 32.
    xmla(&["upcycle", "--ckpt", &teacher, "--out", &student, "--rank-spec", "fixed:64,24"])?;
    xmla(&[
        "distill", "--student", &student, "--teacher", &teacher, "--corpus", &corpus, "--out", &distilled,
        "--trace", &p("distill.csv"), "--seed", "1",
    ])?;
    xmla(&["gen-prefs", "--teacher", &teacher, "--corpus", &corpus, "--pairs", "16", "--out", &prefs])?;
    xmla(&["dpo", "--student", &distilled, "--prefs", &prefs, "--out", &tuned, "--trace", &p("dpo.csv")])?;
    xmla(&["eval", "--ckpt", &tuned, "--corpus", &corpus])?;

    if Path::new(&tuned).exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    Ok(())
}
