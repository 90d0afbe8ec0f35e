//! `psm` subcommands: scan duality verification, affine layer checks, per-token
//! cost audit and counter traces.

use std::cell::Cell;
use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use psm_core::affine::{
    make_layer_pairs, random_inputs, scan_affine_states, sequential_affine, AffineAggregator, AffinePair,
    LayerConfig, LayerKind, ScanPath, Transition,
};
use psm_core::cost::{cost_csv, cost_series, CostModel};
use psm_core::scan::{
    ceil_log2, scan_online, verify_duality, AddAgg, Aggregator, BitwiseEq, DualityReport, FnAggregator, SubAgg,
};
use psm_core::tensor::{seeded_init, Matrix};
use psm_core::tpsm::{psm_decode_stream, random_tokens, KvBaseline, PsmConfig, PsmDecoder, PsmModel};
use psm_core::PsmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping worker threads; `0` runs serially.
pub const THREADS_ENV: &str = "PSM_THREADS";

const AFFINE_THRESHOLD: f64 = 1e-9;
const BENCH_VOCAB: usize = 64;
const BENCH_LAYERS: usize = 2;

#[derive(Debug, Parser)]
#[command(name = "psm", version, about = "Prefix-scannable model verification and cost audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Online vs static scan duality over the built-in aggregators
    Verify,
    /// Scan vs sequential recurrence error per layer kind
    Affine,
    /// Analytic per-token decode cost, PSM vs KV-cache baseline
    Bench,
    /// Binary-counter trace: per-element aggregator calls and roots
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Csv,
    Bin,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Options {
    /// Sequence length (elements, chunks or tokens depending on the command)
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Chunk size c
    #[arg(long, global = true)]
    pub chunk: Option<usize>,
    /// Model or layer width d
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Attention heads
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Layer kind for `affine`; all kinds when omitted
    #[arg(long, global = true, value_parser = parse_layer)]
    pub layer: Option<LayerKind>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when omitted
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Logits export format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// `bench`: also export streamed logits to this path
    #[arg(long, global = true)]
    pub logits: Option<PathBuf>,
    /// `bench`: append measured per-token wall-clock columns
    #[arg(long, global = true)]
    pub wall_clock: bool,
    #[arg(long, global = true, hide = true)]
    pub inject_fault: bool,
}

fn parse_layer(s: &str) -> Result<LayerKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown layer kind `{s}` (expected one of: {})", names.join(", "))
    })
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] PsmError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                PsmError::Io(_) | PsmError::MissingFile(_) => EXIT_IO,
                PsmError::InvalidConfig(_)
                | PsmError::NotPowerOfTwo(_)
                | PsmError::ChunkMisaligned { .. }
                | PsmError::TokenOutOfRange { .. } => EXIT_USAGE,
                _ => EXIT_VERIFY,
            },
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Result of a subcommand: the primary output and whether all checks held.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub body: Vec<u8>,
    pub passed: bool,
    pub summary: String,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(r) => {
            eprintln!("{}", r.summary);
            if r.passed {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }
        Err(e) => {
            eprintln!("psm: {e}");
            e.exit_code()
        }
    }
}

/// Runs the parsed command inside a pool sized by `PSM_THREADS` and writes its output.
pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    let threads = thread_count(std::env::var(THREADS_ENV).ok().as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| usage(format!("cannot start thread pool: {e}")))?;
    let report = pool.install(|| match cli.command {
        Command::Verify => cmd_verify(&cli.opts),
        Command::Affine => cmd_affine(&cli.opts),
        Command::Bench => cmd_bench(&cli.opts),
        Command::Trace => cmd_trace(&cli.opts),
    })?;
    write_output(cli.opts.out.as_deref(), &report.body)?;
    Ok(report)
}

/// `None` leaves the pool at its default size; `0` means one worker.
pub fn thread_count(var: Option<&str>) -> Result<Option<usize>, CliError> {
    match var.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v
            .parse::<usize>()
            .map(|n| Some(n.max(1)))
            .map_err(|_| usage(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))),
    }
}

fn write_output(path: Option<&Path>, body: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(body).and_then(|_| out.flush()).map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn positive(v: Option<usize>, default: usize, flag: &str) -> Result<usize, CliError> {
    match v.unwrap_or(default) {
        0 => Err(usage(format!("--{flag} must be at least 1"))),
        x => Ok(x),
    }
}

// ---------------------------------------------------------------- verify

fn affine_elements(kind: &str, n: usize, seed: u64) -> Vec<AffinePair> {
    (0..n as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            let f = seeded_init(3, 3, s, 1.0);
            let e = match kind {
                "scalar" => Transition::Scalar(seeded_init(1, 1, s ^ 0x5555, 1.0).get(0, 0)),
                "diagonal" => Transition::Diagonal(seeded_init(3, 3, s ^ 0x5555, 1.0)),
                _ => Transition::Left(seeded_init(3, 3, s ^ 0x5555, 0.6)),
            };
            AffinePair::new(e, f)
        })
        .collect()
}

fn report_row(out: &mut String, name: &str, r: &DualityReport) -> bool {
    let pass = r.all_pass();
    out.push_str(&format!(
        "{name},{},{},{},{},{},{}\n",
        r.n,
        r.mismatches(),
        r.insert_merges,
        r.expected_insert_merges(),
        r.peak_occupied_roots,
        if pass { "pass" } else { "FAIL" }
    ));
    pass
}

fn duality<A>(xs: &[A::State], agg: &A) -> Result<DualityReport, CliError>
where
    A: Aggregator,
    A::State: BitwiseEq,
{
    Ok(verify_duality(xs, agg)?)
}

pub fn cmd_verify(o: &Options) -> Result<Report, CliError> {
    let sizes: Vec<usize> = match o.n {
        Some(n) if n == 0 || !n.is_power_of_two() => {
            return Err(usage(format!("--n must be a power of two for verify, got {n}")))
        }
        Some(n) => vec![n],
        None => (4..=10).map(|k| 1usize << k).collect(),
    };
    let c = positive(o.chunk, 2, "chunk")?;
    let d = positive(o.dim, 8, "dim")?;
    let heads = positive(o.heads, 2, "heads")?;
    let model = PsmModel::seeded(PsmConfig::new(c, d, heads, 2, 16), o.seed)?;

    let mut body = String::from("aggregator,n,mismatches,insert_merges,expected_insert_merges,peak_roots,result\n");
    let mut cases = 0;
    let mut failed = 0;
    let mut tally = |ok: bool| {
        cases += 1;
        failed += usize::from(!ok);
    };
    for &n in &sizes {
        let seed = o.seed ^ (n as u64).rotate_left(17);
        let ints: Vec<i64> = seeded_init(1, n, seed, 1e9).data().iter().map(|v| *v as i64).collect();
        tally(report_row(&mut body, "add-i64", &duality(&ints, &AddAgg)?));
        let floats = seeded_init(1, n, seed + 1, 100.0).into_data();
        tally(report_row(&mut body, "sub-f64", &duality(&floats, &SubAgg)?));
        for kind in ["scalar", "diagonal", "full"] {
            let xs = affine_elements(kind, n, seed + 2);
            tally(report_row(&mut body, &format!("affine-{kind}"), &duality(&xs, &AffineAggregator)?));
        }
        let chunks: Vec<Matrix> = (0..n as u64).map(|i| seeded_init(c, d, seed + 3 + i, 1.0)).collect();
        tally(report_row(&mut body, "tpsm-attention", &duality(&chunks, &model.aggregator())?));
        if o.inject_fault {
            let calls = Cell::new(0u64);
            let drifting = FnAggregator::new(
                |a: &f64, b: &f64| {
                    calls.set(calls.get() + 1);
                    a + b + calls.get() as f64 * 1e-3
                },
                false,
            );
            tally(report_row(&mut body, "fault-injected", &duality(&floats, &drifting)?));
        }
    }
    let summary = if failed == 0 {
        format!("verify: all {cases} cases pass")
    } else {
        format!("verify: {failed} of {cases} cases FAILED")
    };
    Ok(Report {
        body: body.into_bytes(),
        passed: failed == 0,
        summary,
    })
}

// ---------------------------------------------------------------- affine

/// Max relative error of static and online scan states against the recurrence.
pub fn affine_errors(kind: LayerKind, n: usize, dim: usize, seed: u64) -> Result<(f64, f64), PsmError> {
    let cfg = LayerConfig::new(kind, dim);
    let w = cfg.init_weights(seed);
    let pairs = make_layer_pairs(&cfg, &random_inputs(n, dim, seed.wrapping_add(1)), &w)?;
    let want = sequential_affine(&pairs)?;
    let err = |path| -> Result<f64, PsmError> {
        let got = scan_affine_states(pairs.clone(), path)?;
        Ok(got
            .iter()
            .zip(&want)
            .map(|(g, r)| g.rel_err(r))
            .fold(0.0, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(e) }))
    };
    Ok((err(ScanPath::Static)?, err(ScanPath::Online)?))
}

pub fn cmd_affine(o: &Options) -> Result<Report, CliError> {
    let n = positive(o.n, 256, "n")?;
    let dim = positive(o.dim, 8, "dim")?;
    let kinds: Vec<LayerKind> = match o.layer {
        Some(k) => vec![k],
        None => LayerKind::ALL.to_vec(),
    };
    let mut body = String::from("layer,n,dim,seed,max_rel_err_static,max_rel_err_online,threshold,result\n");
    let mut failed = Vec::new();
    for kind in kinds.iter().copied() {
        let (s, on) = affine_errors(kind, n, dim, o.seed)?;
        let pass = s <= AFFINE_THRESHOLD && on <= AFFINE_THRESHOLD;
        if !pass {
            failed.push(kind.name());
        }
        body.push_str(&format!(
            "{kind},{n},{dim},{},{s:e},{on:e},{AFFINE_THRESHOLD:e},{}\n",
            o.seed,
            if pass { "pass" } else { "FAIL" }
        ));
    }
    let summary = if failed.is_empty() {
        format!("affine: {} layer kind(s) within {AFFINE_THRESHOLD:e}", kinds.len())
    } else {
        format!("affine: over threshold: {}", failed.join(", "))
    };
    Ok(Report {
        body: body.into_bytes(),
        passed: failed.is_empty(),
        summary,
    })
}

// ---------------------------------------------------------------- bench

fn bench_config(o: &Options) -> Result<PsmConfig, CliError> {
    let cfg = PsmConfig::new(
        positive(o.chunk, 4, "chunk")?,
        positive(o.dim, 32, "dim")?,
        positive(o.heads, 2, "heads")?,
        BENCH_LAYERS,
        BENCH_VOCAB,
    );
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Logits as CSV (shortest round-trip decimal) or little-endian row-major f64.
pub fn encode_logits(m: &Matrix, format: Format) -> Vec<u8> {
    match format {
        Format::Bin => m.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Format::Csv => {
            let mut s = String::new();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&row.join(","));
                s.push('\n');
            }
            s.into_bytes()
        }
    }
}

fn measure_wall_clock(model: &PsmModel, cfg: &PsmConfig, tokens: &[usize], seed: u64) -> Result<Vec<(u128, u128)>, CliError> {
    let mut dec = PsmDecoder::new(model);
    let mut base = KvBaseline::seeded(
        cfg.dim,
        cfg.heads,
        cfg.agg_layers + cfg.inf_layers,
        cfg.vocab,
        tokens.len(),
        seed,
    )?;
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let start = Instant::now();
        dec.push(t)?;
        let psm = start.elapsed().as_nanos();
        let start = Instant::now();
        base.push(t)?;
        out.push((psm, start.elapsed().as_nanos()));
    }
    Ok(out)
}

pub fn cmd_bench(o: &Options) -> Result<Report, CliError> {
    let cfg = bench_config(o)?;
    let n = positive(o.n, 4096 * cfg.chunk, "n")?;
    let rows = cost_series(&CostModel::from_config(&cfg), n)?;

    let needs_model = o.wall_clock || o.logits.is_some();
    let model = if needs_model {
        Some(PsmModel::seeded(cfg, o.seed)?)
    } else {
        None
    };
    let tokens = random_tokens(n, cfg.vocab, o.seed.wrapping_add(1));
    let wall = match &model {
        Some(m) if o.wall_clock => Some(measure_wall_clock(m, &cfg, &tokens, o.seed)?),
        _ => None,
    };
    if let (Some(m), Some(path)) = (&model, &o.logits) {
        let logits = psm_decode_stream(m, &tokens)?.logits;
        write_output(Some(path), &encode_logits(&logits, o.format))?;
    }

    let c = cfg.chunk as u64;
    let over_bound = rows
        .iter()
        .filter(|r| r.occupied_roots > ceil_log2(r.t as u64 / c + 1) as usize)
        .count();
    let summary = format!(
        "bench: {n} tokens, c={} d={}; psm {} vs baseline {} flops at t={n}; {over_bound} rows over the root bound",
        cfg.chunk,
        cfg.dim,
        rows.last().map_or(0.0, |r| r.psm_flops()),
        rows.last().map_or(0.0, |r| r.baseline_flops),
    );
    Ok(Report {
        body: cost_csv(&rows, wall.as_deref()).into_bytes(),
        passed: over_bound == 0,
        summary,
    })
}

// ---------------------------------------------------------------- trace

pub fn cmd_trace(o: &Options) -> Result<Report, CliError> {
    let n = positive(o.n, 1024, "n")?;
    let xs: Vec<i64> = seeded_init(1, n, o.seed, 1e6).data().iter().map(|v| *v as i64).collect();
    let (_, trace) = scan_online(xs, &AddAgg);
    let expected = n as u64 - (n as u64).count_ones() as u64;
    let holds = trace.insert_agg_calls == expected;
    let mut body = trace.to_csv();
    body.push_str(&format!(
        "total,{},{},{}\n# insert_calls = n - popcount(n): {} = {} - {} {}\n",
        trace.insert_agg_calls,
        trace.emit_agg_calls,
        trace.peak_occupied_roots,
        trace.insert_agg_calls,
        n,
        (n as u64).count_ones(),
        if holds { "holds" } else { "VIOLATED" }
    ));
    Ok(Report {
        body: body.into_bytes(),
        passed: holds,
        summary: format!("trace: {n} elements, {} insert merges", trace.insert_agg_calls),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_env_parsing() {
        assert_eq!(thread_count(None).unwrap(), None);
        assert_eq!(thread_count(Some("0")).unwrap(), Some(1));
        assert_eq!(thread_count(Some(" 3 ")).unwrap(), Some(3));
        assert_eq!(thread_count(Some("many")).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn logits_encodings() {
        let m = Matrix::from_rows(&[&[0.1, -2.0], &[1e-300, 3.5]]);
        assert_eq!(encode_logits(&m, Format::Csv), b"0.1,-2.0\n1e-300,3.5\n".to_vec());
        let bin = encode_logits(&m, Format::Bin);
        assert_eq!(bin.len(), 32);
        assert_eq!(&bin[..8], &0.1f64.to_le_bytes());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::Core(PsmError::MissingFile("x".into())).exit_code(), EXIT_IO);
        assert_eq!(CliError::Core(PsmError::InvalidConfig("x".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Core(PsmError::EmptyCounter).exit_code(), EXIT_VERIFY);
    }

    #[test]
    fn grammar_accepts_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["psm", "bench", "--n", "8", "--chunk", "2", "--format", "bin"]).unwrap();
        assert_eq!(cli.command, Command::Bench);
        assert_eq!((cli.opts.n, cli.opts.chunk, cli.opts.format), (Some(8), Some(2), Format::Bin));
        assert!(Cli::try_parse_from(["psm", "trace", "--format", "json"]).is_err());
    }
}
