use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use delib_core::config::RunConfig;
use delib_core::eval::{parse_wer_grid, render_table, WerReport};
use delib_core::pipeline::{
    decode_examples, load_delib, load_first_pass, oracle_texts, rescore_lists, run_delib, run_first_pass, score_texts,
    top_texts,
};
use delib_core::search::{read_nbest, write_nbest};
use delib_core::synth::{generate_corpus, write_corpus, Split, SynthConfig};
use delib_core::tokenizer::WordpieceVocab;
use delib_core::train::{load_examples, StepLog};
use delib_core::transducer::EncoderSource;

const VERSION: &str = env!("CARGO_PKG_VERSION");
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "delib", version, about = "Two-pass multilingual ASR at desk scale")]
struct Cli {
    /// Threads for per-utterance work. Output does not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multilingual corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Corpus spec (TOML); the built-in 3-language spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the cascaded-encoder transducer.
    TrainFirstPass {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `section.key=value` overrides.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest step checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train the rescorer against a frozen first pass.
    TrainDelib {
        #[arg(long)]
        config: String,
        #[arg(long)]
        first_pass_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Beam search a split into an n-best file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long, default_value = "noncausal")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescore an n-best file; writes the reranked lists and the chosen text.
    Rescore {
        #[arg(long)]
        delib_ckpt: PathBuf,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Weight on the first-pass score; the config's value when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// `id<TAB>text` of the top hypothesis per utterance.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Score hypotheses against references, or aggregate a WER grid.
    Evaluate {
        /// `id<TAB>text` lines, or an n-best file when --vocab is given.
        #[arg(long, required_unless_present = "table")]
        hyp: Option<PathBuf>,
        /// Corpus directory holding the references.
        #[arg(long, required_unless_present = "table")]
        r#ref: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Score the best hypothesis of each n-best list instead of the top.
        #[arg(long, requires = "vocab")]
        oracle: bool,
        /// Tab-separated grid `language<TAB>model...` of per-language WERs.
        #[arg(long, conflicts_with = "hyp")]
        table: Option<PathBuf>,
        #[arg(long, default_value = "hyp")]
        model_id: String,
        /// Write the `language, S, I, D, ref_words, wer` file here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Count parameters of a config or preset.
    Params {
        #[arg(long)]
        config: String,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

fn header(cmd: &str) -> String {
    format!("delib {VERSION}\ncommand: {cmd}")
}

fn with_seed(mut overrides: Vec<String>, seed: Option<u64>, sections: &[&str]) -> Vec<String> {
    if let Some(s) = seed {
        for sec in sections {
            overrides.push(format!("{sec}.seed={s}"));
        }
    }
    overrides
}

fn progress(label: &'static str) -> impl FnMut(&StepLog) {
    move |s: &StepLog| {
        if s.step == 1 || s.step % 100 == 0 {
            eprintln!("{label} step {} loss {:.4} lr {:.3e}", s.step, s.loss, s.lr);
        }
    }
}

fn read_text_hyps(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, t) = l.split_once('\t').unwrap_or((l, ""));
            Ok((id.to_string(), t.to_string()))
        })
        .collect()
}

fn write_text_hyps(path: &Path, hyps: &[(String, String)]) -> Result<()> {
    let body: String = hyps.iter().map(|(i, t)| format!("{i}\t{t}\n")).collect();
    fs::write(path, body)?;
    Ok(())
}

fn print_report(r: &WerReport, tsv: Option<&Path>) -> Result<()> {
    print!("{}", render_table(std::slice::from_ref(r))?);
    if let Some(p) = tsv {
        fs::write(p, r.to_tsv()?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, spec, seed } => {
            let mut cfg = match &spec {
                Some(p) => SynthConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let (world, utts) = generate_corpus(&cfg)?;
            write_corpus(&out, &world, &utts)?;
            let mut echo = header("gen-data").lines().map(|l| format!("# {l}\n")).collect::<String>();
            echo.push_str(&cfg.to_toml());
            fs::write(out.join("corpus.toml"), echo)?;
            println!("wrote {} utterances in {} languages to {}", utts.len(), cfg.languages.len(), out.display());
        }
        Cmd::TrainFirstPass {
            config,
            data,
            out,
            overrides,
            seed,
            resume,
        } => {
            let cfg = RunConfig::resolve(&config, &with_seed(overrides, seed, &["train"]))?;
            run_first_pass(&cfg, &data, &out, &header("train-first-pass"), resume, &mut progress("first-pass"))?;
            println!("checkpoints in {}", out.display());
        }
        Cmd::TrainDelib {
            config,
            first_pass_ckpt,
            data,
            out,
            overrides,
            seed,
            resume,
        } => {
            let cfg = RunConfig::resolve(&config, &with_seed(overrides, seed, &["delib_train"]))?;
            run_delib(
                &cfg,
                &first_pass_ckpt,
                &data,
                &out,
                &header("train-delib"),
                resume,
                &mut progress("delib"),
            )?;
            println!("checkpoints in {}", out.display());
        }
        Cmd::Decode {
            ckpt,
            data,
            split,
            beam,
            source,
            out,
        } => {
            let source: EncoderSource = source.parse()?;
            let split: Split = split.parse()?;
            let (_, vocab, fp) = load_first_pass(&ckpt)?;
            let examples = load_examples(&data, split, Some(&vocab))?;
            let lists = decode_examples(&fp, &examples, source, beam)?;
            write_nbest(&out, &lists)?;
            println!("decoded {} utterances to {}", lists.len(), out.display());
        }
        Cmd::Rescore {
            delib_ckpt,
            nbest,
            data,
            split,
            lambda,
            seed,
            out,
            selection,
        } => {
            let d = load_delib(&delib_ckpt)?;
            let lambda = lambda.unwrap_or(d.cfg.delib.lambda);
            let examples = load_examples(&data, split.parse()?, Some(&d.vocab))?;
            let lists = read_nbest(&nbest)?;
            let rescored = rescore_lists(&d, &examples, &lists, lambda, seed)?;
            write_nbest(&out, &rescored)?;
            if let Some(sel) = selection {
                write_text_hyps(&sel, &top_texts(&d.vocab, &rescored)?)?;
            }
            println!("rescored {} lists (lambda {lambda}) to {}", rescored.len(), out.display());
        }
        Cmd::Evaluate {
            hyp,
            r#ref,
            split,
            vocab,
            oracle,
            table,
            model_id,
            tsv,
        } => {
            if let Some(grid) = table {
                let reports = parse_wer_grid(&fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?)?;
                print!("{}", render_table(&reports)?);
                return Ok(());
            }
            let (Some(hyp), Some(refdir)) = (hyp, r#ref) else {
                bail!("--hyp and --ref are required");
            };
            let examples = load_examples(&refdir, split.parse()?, None)?;
            let hyps = match &vocab {
                Some(v) => {
                    let vocab = WordpieceVocab::load(v)?;
                    let lists = read_nbest(&hyp)?;
                    if oracle {
                        oracle_texts(&vocab, &examples, &lists)?
                    } else {
                        top_texts(&vocab, &lists)?
                    }
                }
                None => read_text_hyps(&hyp)?,
            };
            let ids: HashMap<&str, ()> = hyps.iter().map(|(i, _)| (i.as_str(), ())).collect();
            if let Some(missing) = examples.iter().find(|e| !ids.contains_key(e.id.as_str())) {
                bail!("no hypothesis for {}", missing.id);
            }
            let report = score_texts(&model_id, &examples, &hyps)?;
            print_report(&report, tsv.as_deref())?;
        }
        Cmd::Params { config, overrides } => {
            let cfg = RunConfig::resolve(&config, &overrides)?;
            let c = cfg.count_params();
            let m = |n: usize| format!("{:.1}M", n as f64 / 1e6);
            println!("first_pass\t{}\t{}", c.first_pass, m(c.first_pass));
            if cfg.delib.enabled {
                println!("text_encoder\t{}\t{}", c.text_encoder, m(c.text_encoder));
                println!("deliberation\t{}\t{}", c.deliberation, m(c.deliberation));
            }
            println!("total\t{}\t{}", c.total, m(c.total));
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<delib_core::Error>() {
        Some(core) if !core.is_validation() => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
