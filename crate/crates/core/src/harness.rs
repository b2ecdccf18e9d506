//! Simulated decoding, replay validation and the per-stage overhead report.
//!
//! The language model is replaced by a seeded sampler that picks uniformly
//! among the permitted tokens (eos with probability `eos_bias` when it is
//! permitted). Engine time is split into the three decoding stages:
//! grammar compilation (request -> machine), state tracking (`step`) and
//! mask creation (spec -> packed mask through the cache).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{build_operators, FrontendError, RequestDoc};
use crate::mask::{CacheCounters, MaskCache, MaskError, TokenMask};
use crate::operators::{OperatorError, Program, StepOutcome, MachineState};
use crate::template::StructureFactory;
use crate::vocab::{TokenId, Vocabulary};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    /// The machine refused a token its own mask permitted.
    #[error("mask soundness violation: step {step} rejected permitted token {token}")]
    Unsound { step: usize, token: TokenId },
    #[error("token stream line {line}: {msg}")]
    Stream { line: usize, msg: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub seed: u64,
    pub max_tokens: usize,
    pub eos_bias: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            seed: 0,
            max_tokens: 512,
            eos_bias: 0.3,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(0.0..=1.0).contains(&self.eos_bias) {
            return Err(HarnessError::Config(format!("eos_bias {} not in [0, 1]", self.eos_bias)));
        }
        if self.max_tokens == 0 {
            return Err(HarnessError::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub version: u32,
    pub grammar_compilation_ms: f64,
    pub state_tracking_ms: f64,
    pub mask_creation_ms: f64,
    /// Grammar compilation plus the first mask.
    pub ttft_overhead_ms: f64,
    /// (state tracking + mask creation) per generated token.
    pub tpot_overhead_ms: f64,
    pub total_ms: f64,
    pub tokens_generated: usize,
    pub finished: bool,
    /// Cache activity during this run only.
    pub cache: CacheCounters,
}

#[derive(Debug, Clone, Default)]
struct Stages {
    compile: Duration,
    tracking: Duration,
    masks: Duration,
    first_mask: Option<Duration>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Stages {
    fn report(&self, tokens: usize, finished: bool, total: Duration, cache: CacheCounters) -> BreakdownReport {
        let per_token = if tokens == 0 {
            0.0
        } else {
            ms(self.tracking + self.masks) / tokens as f64
        };
        BreakdownReport {
            version: REPORT_VERSION,
            grammar_compilation_ms: ms(self.compile),
            state_tracking_ms: ms(self.tracking),
            mask_creation_ms: ms(self.masks),
            ttft_overhead_ms: ms(self.compile + self.first_mask.unwrap_or_default()),
            tpot_overhead_ms: per_token,
            total_ms: ms(total),
            tokens_generated: tokens,
            finished,
            cache,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub report: BreakdownReport,
}

/// Compiles the request into a machine program, timing it as grammar compilation.
pub fn compile_request(
    doc: &RequestDoc,
    factory: &StructureFactory,
    vocab: &Vocabulary,
) -> Result<Arc<Program>, HarnessError> {
    let fmt = doc.parse(factory)?;
    let op = build_operators(&fmt, factory, vocab)?;
    Ok(Program::new(&op, vocab.len())?)
}

pub fn mock_decode(
    doc: &RequestDoc,
    factory: &StructureFactory,
    vocab: &Vocabulary,
    cache: &MaskCache,
    cfg: &DecodeConfig,
) -> Result<Decoded, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let program = compile_request(doc, factory, vocab)?;
    let compile = start.elapsed();
    decode_inner(program, vocab.eos_id(), cache, cfg, start, compile)
}

/// Decodes an already compiled program (grammar compilation counts as zero).
pub fn decode_program(
    program: Arc<Program>,
    eos: TokenId,
    cache: &MaskCache,
    cfg: &DecodeConfig,
) -> Result<Decoded, HarnessError> {
    cfg.validate()?;
    decode_inner(program, eos, cache, cfg, Instant::now(), Duration::ZERO)
}

fn decode_inner(
    program: Arc<Program>,
    eos: TokenId,
    cache: &MaskCache,
    cfg: &DecodeConfig,
    start: Instant,
    compile: Duration,
) -> Result<Decoded, HarnessError> {
    let before = cache.report();
    let mut stages = Stages {
        compile,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut machine = MachineState::from_program(program);
    let mut tokens = Vec::new();
    let mut permitted: Vec<TokenId> = Vec::new();
    while !machine.is_finished() && tokens.len() < cfg.max_tokens {
        let t = Instant::now();
        let mask = cache.materialize(machine.current_mask_spec()?)?;
        let d = t.elapsed();
        stages.masks += d;
        stages.first_mask.get_or_insert(d);

        let token = sample(&mask, eos, cfg.eos_bias, &mut rng, &mut permitted);

        let t = Instant::now();
        let outcome = machine.step(token)?;
        stages.tracking += t.elapsed();
        if outcome == StepOutcome::Rejected {
            return Err(HarnessError::Unsound {
                step: tokens.len(),
                token,
            });
        }
        tokens.push(token);
    }
    let report = stages.report(tokens.len(), machine.is_finished(), start.elapsed(), cache.report().since(&before));
    Ok(Decoded { tokens, report })
}

fn sample(mask: &TokenMask, eos: TokenId, eos_bias: f64, rng: &mut ChaCha8Rng, buf: &mut Vec<TokenId>) -> TokenId {
    buf.clear();
    let mut eos_ok = false;
    for id in mask.iter_ones() {
        if id == eos {
            eos_ok = true;
        } else {
            buf.push(id);
        }
    }
    if eos_ok && (buf.is_empty() || rng.gen_bool(eos_bias)) {
        return eos;
    }
    assert!(!buf.is_empty(), "live machine emitted an empty mask");
    buf[rng.gen_range(0..buf.len())]
}

/// Reads a token stream: one decimal id per line, blank lines ignored.
pub fn parse_token_stream(text: &str, vocab_size: usize) -> Result<Vec<TokenId>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: TokenId = line.parse().map_err(|_| HarnessError::Stream {
            line: i + 1,
            msg: format!("not a token id: {line:?}"),
        })?;
        if id as usize >= vocab_size {
            return Err(HarnessError::Stream {
                line: i + 1,
                msg: format!("token id {id} out of range for vocabulary size {vocab_size}"),
            });
        }
        out.push(id);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub position: usize,
    pub token: TokenId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub verdict: Verdict,
    pub first_violation: Option<Violation>,
    /// Outcome of each consumed token: "advanced", "finished" or "rejected".
    pub trace: Vec<String>,
    /// Packed mask (hex) in force before each consumed token, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    pub report: BreakdownReport,
}

pub fn mask_hex(mask: &TokenMask) -> String {
    mask.as_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

/// Feeds a recorded stream through the machine. Accepted iff every token
/// passes the mask in force before it and the machine finishes exactly at
/// the last token.
pub fn replay_decode(
    stream: &[TokenId],
    program: Arc<Program>,
    cache: &MaskCache,
    with_masks: bool,
) -> Result<ReplayReport, HarnessError> {
    let start = Instant::now();
    let before = cache.report();
    let size = program.vocab_size();
    let mut stages = Stages::default();
    let mut machine = MachineState::from_program(program);
    let mut trace = Vec::with_capacity(stream.len());
    let mut masks = with_masks.then(Vec::new);
    let mut violation = None;
    for (pos, &token) in stream.iter().enumerate() {
        if machine.is_finished() {
            violation = Some(Violation {
                position: pos,
                token,
                reason: "token after the machine finished".into(),
            });
            break;
        }
        let t = Instant::now();
        let mask = cache.materialize(machine.current_mask_spec()?)?;
        let d = t.elapsed();
        stages.masks += d;
        stages.first_mask.get_or_insert(d);
        if let Some(m) = masks.as_mut() {
            m.push(mask_hex(&mask));
        }
        if (token as usize) >= size {
            return Err(HarnessError::Stream {
                line: pos + 1,
                msg: format!("token id {token} out of range for vocabulary size {size}"),
            });
        }
        let permitted = mask.get(token);
        let t = Instant::now();
        let outcome = machine.step(token)?;
        stages.tracking += t.elapsed();
        match (permitted, outcome) {
            (true, StepOutcome::Rejected) => return Err(HarnessError::Unsound { step: pos, token }),
            (false, StepOutcome::Rejected) => {
                trace.push("rejected".into());
                violation = Some(Violation {
                    position: pos,
                    token,
                    reason: "token not permitted by mask".into(),
                });
                break;
            }
            (false, _) => unreachable!("machine accepted a masked-out token"),
            (true, StepOutcome::Advanced) => trace.push("advanced".into()),
            (true, StepOutcome::Finished) => trace.push("finished".into()),
        }
    }
    let verdict = match (&violation, machine.is_finished()) {
        (Some(_), _) => Verdict::Rejected,
        (None, true) => Verdict::Accepted,
        (None, false) => Verdict::Incomplete,
    };
    let consumed = trace.iter().filter(|t| *t != "rejected").count();
    Ok(ReplayReport {
        verdict,
        first_violation: violation,
        trace,
        masks,
        report: stages.report(consumed, machine.is_finished(), start.elapsed(), cache.report().since(&before)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl StageStats {
    fn of(values: &mut [f64]) -> StageStats {
        values.sort_by(f64::total_cmp);
        let rank = |q: f64| {
            let i = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
            values[i - 1]
        };
        StageStats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        }
    }
}

pub const STAGES: [&str; 5] = [
    "grammar_compilation_ms",
    "state_tracking_ms",
    "mask_creation_ms",
    "ttft_overhead_ms",
    "tpot_overhead_ms",
];

fn stage_value(r: &BreakdownReport, stage: &str) -> f64 {
    match stage {
        "grammar_compilation_ms" => r.grammar_compilation_ms,
        "state_tracking_ms" => r.state_tracking_ms,
        "mask_creation_ms" => r.mask_creation_ms,
        "ttft_overhead_ms" => r.ttft_overhead_ms,
        "tpot_overhead_ms" => r.tpot_overhead_ms,
        _ => unreachable!("unknown stage {stage}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub repetitions: usize,
    pub threads: usize,
    pub stages: BTreeMap<String, StageStats>,
    pub runs: Vec<BreakdownReport>,
}

/// Runs `reps` decodes with seeds `cfg.seed + i`. With `threads > 1` the
/// runs are spread over scoped threads sharing the factory, vocabulary and
/// cache; run `i` always uses the same seed, so token output does not
/// depend on the thread count.
pub fn bench(
    doc: &RequestDoc,
    factory: &StructureFactory,
    vocab: &Vocabulary,
    cache: &MaskCache,
    cfg: &DecodeConfig,
    reps: usize,
    threads: usize,
) -> Result<BenchReport, HarnessError> {
    if reps == 0 {
        return Err(HarnessError::Config("repetitions must be at least 1".into()));
    }
    let threads = threads.clamp(1, reps);
    let run = |i: usize| {
        let cfg = DecodeConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        mock_decode(doc, factory, vocab, cache, &cfg).map(|d| d.report)
    };
    let runs: Vec<BreakdownReport> = if threads == 1 {
        (0..reps).map(run).collect::<Result<_, _>>()?
    } else {
        let mut slots: Vec<Option<Result<BreakdownReport, HarnessError>>> = (0..reps).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunk = reps.div_ceil(threads);
            for (t, part) in slots.chunks_mut(chunk).enumerate() {
                let run = &run;
                s.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(run(t * chunk + j));
                    }
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every slot filled")).collect::<Result<_, _>>()?
    };
    let stages = STAGES
        .iter()
        .map(|s| {
            let mut v: Vec<f64> = runs.iter().map(|r| stage_value(r, s)).collect();
            (s.to_string(), StageStats::of(&mut v))
        })
        .collect();
    Ok(BenchReport {
        version: REPORT_VERSION,
        repetitions: reps,
        threads,
        stages,
        runs,
    })
}

/// Aligned text table of the stage statistics.
pub fn render_table(report: &BenchReport) -> String {
    let mut rows = vec![["stage".to_string(), "mean".into(), "p50".into(), "p95".into()]];
    for s in STAGES {
        let st = report.stages[s];
        rows.push([
            s.trim_end_matches("_ms").to_string(),
            format!("{:.4}", st.mean),
            format!("{:.4}", st.p50),
            format!("{:.4}", st.p95),
        ]);
    }
    let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
    let mut out = format!("{} repetitions, {} thread(s), times in ms\n", report.repetitions, report.threads);
    for r in rows {
        out.push_str(&format!(
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}\n",
            r[0],
            r[1],
            r[2],
            r[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        ));
    }
    out
}
