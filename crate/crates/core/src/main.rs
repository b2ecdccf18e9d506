use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opmask::frontend::{build_operators, FrontendError, RequestDoc};
use opmask::harness::{self, DecodeConfig, HarnessError, Verdict};
use opmask::mask::MaskCache;
use opmask::operators::Program;
use opmask::pattern::{compile_pattern, CompileError};
use opmask::regex::{lower, parse_regex};
use opmask::template::{compile_templates, StructureFactory};
use opmask::vocab::Vocabulary;

/// Constrained decoding with operator state machines and cached masks.
#[derive(Parser)]
#[command(name = "opmask", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a template file into a factory; prints stats, writes the dump with -o.
    Compile {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Build the operator tree for a request.
    Build {
        #[command(flatten)]
        req: RequestArgs,
        /// Print the operator tree (default on; kept for script compatibility).
        #[arg(long)]
        dump: bool,
        /// Print the canonical request expression instead.
        #[arg(long)]
        request_only: bool,
    },
    /// Compile a single regex and print its operator tree.
    Rex {
        #[arg(allow_hyphen_values = true)]
        pattern: String,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Mock-decode a request with a seeded sampler.
    Run {
        #[command(flatten)]
        req: RequestArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        json: bool,
    },
    /// Validate a recorded token stream (one id per line) against a request.
    Replay {
        #[command(flatten)]
        req: RequestArgs,
        #[arg(long)]
        stream: PathBuf,
        /// Include the packed mask (hex) before each token.
        #[arg(long)]
        masks: bool,
        #[arg(long)]
        json: bool,
    },
    /// Repeat mock decodes and report per-stage statistics.
    Bench {
        #[command(flatten)]
        req: RequestArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RequestArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Template file (.wgram) or factory dump (.json).
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Request document (JSON with `format` and `args`).
    #[arg(long, conflicts_with = "format")]
    request: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Request argument, `name=value`; repeatable.
    #[arg(long = "arg", value_name = "NAME=VALUE")]
    args: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0.3)]
    eos_bias: f64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            seed: self.seed,
            max_tokens: self.max_tokens,
            eos_bias: self.eos_bias,
        }
    }
}

enum Failure {
    Validation(String),
    Input(String),
    Compile(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Input(_) => 2,
            Failure::Compile(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Input(m) | Failure::Compile(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(ctx: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{}: {e}", ctx.display()))
}

impl From<FrontendError> for Failure {
    fn from(e: FrontendError) -> Self {
        match e {
            FrontendError::Compile(_) | FrontendError::Unresolvable { .. } => Failure::Compile(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Frontend(f) => f.into(),
            HarnessError::Unsound { .. } => Failure::Validation(e.to_string()),
            HarnessError::Operator(_) | HarnessError::Mask(_) => Failure::Compile(e.to_string()),
            HarnessError::Config(_) | HarnessError::Stream { .. } => Failure::Input(e.to_string()),
        }
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    Vocabulary::load(path).map_err(input(path))
}

fn load_factory(path: Option<&Path>, vocab: &Vocabulary) -> Result<StructureFactory, Failure> {
    let Some(path) = path else {
        return Ok(StructureFactory::empty(vocab));
    };
    let text = fs::read_to_string(path).map_err(input(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        StructureFactory::from_json(&text, vocab).map_err(input(path))
    } else {
        compile_templates(&text, vocab).map_err(|e| Failure::Compile(format!("{}:{e}", path.display())))
    }
}

struct Loaded {
    vocab: Vocabulary,
    factory: StructureFactory,
    doc: RequestDoc,
}

impl RequestArgs {
    fn load(&self) -> Result<Loaded, Failure> {
        let vocab = load_vocab(&self.vocab)?;
        let factory = load_factory(self.structure.as_deref(), &vocab)?;
        let mut doc = match (&self.request, &self.format) {
            (Some(p), _) => RequestDoc::load(p).map_err(input(p))?,
            (None, Some(f)) => RequestDoc {
                format: f.clone(),
                args: BTreeMap::new(),
            },
            (None, None) => return Err(Failure::Input("either --request or --format is required".into())),
        };
        for a in &self.args {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Failure::Input(format!("--arg {a:?}: expected NAME=VALUE")))?;
            doc.args.insert(k.to_string(), v.to_string());
        }
        Ok(Loaded { vocab, factory, doc })
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Compile { templates, vocab, out } => {
            let vocab = load_vocab(&vocab)?;
            let factory = load_factory(Some(&templates), &vocab)?;
            if let Some(out) = out {
                fs::write(&out, factory.to_json()).map_err(input(&out))?;
            }
            println!("{}", to_json(&factory.stats()));
        }
        Cmd::Build { req, request_only, .. } => {
            let l = req.load()?;
            let fmt = l.doc.parse(&l.factory)?;
            if request_only {
                println!("{fmt}");
            } else {
                let op = build_operators(&fmt, &l.factory, &l.vocab)?;
                print!("{}", op.dump());
            }
        }
        Cmd::Rex { pattern, vocab } => {
            let vocab = load_vocab(&vocab)?;
            let ast = parse_regex(&pattern).map_err(|e| Failure::Input(e.to_string()))?;
            let op = lower(&ast, &vocab)
                .and_then(|p| compile_pattern(&p, &vocab))
                .map_err(|e: CompileError| Failure::Compile(e.to_string()))?;
            print!("{}", op.dump());
        }
        Cmd::Run { req, decode, json } => {
            let l = req.load()?;
            let cache = MaskCache::new(l.vocab.len());
            let d = harness::mock_decode(&l.doc, &l.factory, &l.vocab, &cache, &decode.config())?;
            if json {
                let out = serde_json::json!({
                    "tokens": d.tokens,
                    "text": String::from_utf8_lossy(&l.vocab.detokenize(&d.tokens)),
                    "report": d.report,
                });
                println!("{}", to_json(&out));
            } else {
                println!("{}", String::from_utf8_lossy(&l.vocab.detokenize(&d.tokens)));
                eprintln!(
                    "{} tokens, finished={}, ttft_overhead={:.4}ms tpot_overhead={:.4}ms",
                    d.report.tokens_generated, d.report.finished, d.report.ttft_overhead_ms, d.report.tpot_overhead_ms
                );
            }
            if !d.report.finished {
                return Err(Failure::Validation(format!("max_tokens ({}) reached before eos", decode.max_tokens)));
            }
        }
        Cmd::Replay {
            req,
            stream,
            masks,
            json,
        } => {
            let l = req.load()?;
            let text = fs::read_to_string(&stream).map_err(input(&stream))?;
            let ids = harness::parse_token_stream(&text, l.vocab.len())?;
            let fmt = l.doc.parse(&l.factory)?;
            let op = build_operators(&fmt, &l.factory, &l.vocab)?;
            let program = Program::new(&op, l.vocab.len()).map_err(|e| Failure::Compile(e.to_string()))?;
            let cache = MaskCache::new(l.vocab.len());
            let r = harness::replay_decode(&ids, program, &cache, masks)?;
            if json {
                println!("{}", to_json(&r));
            } else {
                for (i, step) in r.trace.iter().enumerate() {
                    match r.masks.as_ref() {
                        Some(m) => println!("{i}\t{}\t{step}\t{}", ids[i], m[i]),
                        None => println!("{i}\t{}\t{step}", ids[i]),
                    }
                }
                println!("verdict: {:?}", r.verdict);
            }
            match (r.verdict, r.first_violation) {
                (Verdict::Accepted, _) => {}
                (_, Some(v)) => {
                    return Err(Failure::Validation(format!(
                        "token {} at position {}: {}",
                        v.token, v.position, v.reason
                    )))
                }
                (_, None) => return Err(Failure::Validation("stream ended before the machine finished".into())),
            }
        }
        Cmd::Bench {
            req,
            decode,
            reps,
            threads,
            json,
        } => {
            let l = req.load()?;
            let cache = MaskCache::new(l.vocab.len());
            let r = harness::bench(&l.doc, &l.factory, &l.vocab, &cache, &decode.config(), reps, threads)?;
            if json {
                println!("{}", to_json(&r));
            } else {
                print!("{}", harness::render_table(&r));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
