//! Command-line front end.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::bitstream::{
    bind_table, decode_batch, encode_batch, model_digest, read_model, write_model, PayloadHeader,
    MODEL_MAGIC, PAYLOAD_MAGIC,
};
use crate::codebook::MsvqModel;
use crate::entropy::attach_entropy_codes;
use crate::error::{Error, Result};
use crate::layout::{build_layout, compute_stats, AllocationPreset, BitMatrix};
use crate::matrix::FeatureMatrix;
use crate::oracle::{direct_marginal_loss, exhaustive_nearest, exhaustive_select};
use crate::quantizer::truncation_profile;
use crate::rate::{build_table, select_stages, validate_convexity, BitMode, MarginalLossTable};
use crate::sweep::{parse_grid, run_sweep};
use crate::synth::{generate, SynthDist};
use crate::trainer::{train, variance_scaled_lambda, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "msvq", version, about = "Rate-adaptive multi-stage vector quantization codec")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "MSVQ_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistArg {
    GaussIid,
    GaussCorr,
    Gmm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic features (FMAT1).
    Gen {
        #[arg(long, value_enum)]
        dist: DistArg,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 8)]
        components: usize,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the layout and train all stage codebooks.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sub_dim: usize,
        #[arg(long)]
        t_max: usize,
        /// Shared-codebook groups; defaults to one codebook per sub-vector.
        #[arg(long)]
        groups: Option<usize>,
        /// type1 | type2 | type3 | path to a JSON array of bit rows.
        #[arg(long, default_value = "type3")]
        alloc: String,
        /// Entropy-constrained training and Huffman-coded indices.
        #[arg(long)]
        ec: bool,
        /// Per-stage lambda values, comma separated.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Multiplier of the variance-scaled lambda schedule when --lambda is absent.
        #[arg(long, default_value_t = 2.0)]
        lambda_scale: f64,
        /// Mark the model so encoders cap every vector at the budget.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the training report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the marginal-loss table and bind the model to it.
    Table {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use an existing MLT1 table instead of building one.
        #[arg(long)]
        import: Option<PathBuf>,
        /// Where to write the bound model; defaults to overwriting --model.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Encode features under a bit budget (MSVP).
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        b_cap: u32,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a payload to FMAT1.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        payload: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate–distortion sweep over a budget grid (CSV, optional SVG).
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// lo:hi:step in bits.
        #[arg(long)]
        b_cap_grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run the brute-force reference checks and print PASS/FAIL per property.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Largest sub-table handed to the exhaustive search.
        #[arg(long, default_value_t = 6)]
        max_n: usize,
        /// Rows used by the direct re-encoding checks.
        #[arg(long, default_value_t = 512)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print model or payload headers.
    Info {
        path: PathBuf,
    },
}

pub fn run() -> Result<()> {
    run_with(Cli::parse())
}

// Stdout writes that surface failures (e.g. a closed pipe) as errors instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

pub fn run_with(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which keeps the earlier setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Gen {
            dist,
            rho,
            components,
            rows,
            dim,
            seed,
            out,
        } => {
            let dist = match dist {
                DistArg::GaussIid => SynthDist::GaussIid,
                DistArg::GaussCorr => SynthDist::GaussCorr { rho },
                DistArg::Gmm => SynthDist::Gmm { components },
            };
            generate(dist, rows, dim, seed)?.save(&out)?;
            out!("wrote {rows}x{dim} features to {}", out.display());
        }
        Command::Train {
            data,
            sub_dim,
            t_max,
            groups,
            alloc,
            ec,
            lambda,
            lambda_scale,
            strict,
            max_iters,
            seed,
            out,
            report,
        } => {
            let data = FeatureMatrix::load(&data)?;
            let stats = compute_stats(&data)?;
            let alloc = parse_alloc(&alloc)?;
            let groups = groups.unwrap_or(if sub_dim > 0 { data.cols() / sub_dim } else { 0 });
            let layout = build_layout(&stats, sub_dim, t_max, groups, &alloc)?;
            let mut config = TrainConfig {
                max_iters,
                seed,
                ..TrainConfig::default()
            };
            if ec {
                let lambda = lambda
                    .unwrap_or_else(|| variance_scaled_lambda(stats.mean_variance(), lambda_scale, t_max));
                config = config.entropy_constrained(lambda);
            } else if lambda.is_some() {
                return Err(Error::Config("--lambda requires --ec".into()));
            }
            let (model, rep) = train(&data, &layout, &config)?;
            let model = if ec { attach_entropy_codes(model, &data)? } else { model };
            let model = model.with_strict(strict);
            std::fs::write(&out, write_model(&model)?)?;
            let json = rep.to_json()?;
            if let Some(path) = report {
                std::fs::write(path, &json)?;
            }
            out!("{json}");
        }
        Command::Table {
            model,
            data,
            out,
            import,
            model_out,
        } => {
            let m = load_model(&model)?;
            let table = match (import, data) {
                (Some(path), _) => {
                    let t = MarginalLossTable::from_json_bytes(&std::fs::read(path)?)?;
                    t.check_model(&m)?;
                    t
                }
                (None, Some(data)) => {
                    let data = FeatureMatrix::load(&data)?;
                    let mode = if m.ec_enabled() { BitMode::Average } else { BitMode::Exact };
                    build_table(&m, &data, mode)?
                }
                (None, None) => return Err(Error::Config("table needs --data or --import".into())),
            };
            std::fs::write(&out, table.to_json_bytes()?)?;
            let bound = bind_table(m, &table)?;
            std::fs::write(model_out.as_ref().unwrap_or(&model), write_model(&bound)?)?;
            let report = validate_convexity(&table);
            let json = json!({
                "digest": format!("{:016x}", table.digest()?),
                "mode": table.mode(),
                "all_monotone": report.all_monotone(),
                "all_convex": report.all_convex(),
                "equal_row_bits": report.equal_row_bits,
                "uniform_bits": report.uniform_bits,
                "greedy_optimal": report.greedy_optimal(),
                "rows": report.rows,
            });
            out!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Encode {
            model,
            table,
            data,
            b_cap,
            strict,
            out,
        } => {
            let m = load_model(&model)?;
            let t = load_table(&table)?;
            let data = FeatureMatrix::load(&data)?;
            let batch = encode_batch(&m, &t, &data, b_cap, strict)?;
            std::fs::write(&out, &batch.bytes)?;
            let json = json!({
                "vectors": data.rows(),
                "b_cap": b_cap,
                "mode": format!("{:?}", batch.header.mode).to_lowercase(),
                "plan": batch.plan.stages,
                "plan_exact_bits": batch.plan.exact_bits,
                "plan_avg_bits": batch.plan.avg_bits,
                "mean_payload_bits": batch.mean_coded_bits(),
                "max_payload_bits": batch.coded_bits.iter().max().copied().unwrap_or(0),
                "file_bytes": batch.bytes.len(),
            });
            out!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Decode {
            model,
            table,
            payload,
            out,
        } => {
            let m = load_model(&model)?;
            let t = load_table(&table)?;
            let bytes = std::fs::read(&payload)?;
            let dec = decode_batch(&m, &t, &bytes)?;
            dec.to_matrix(m.layout().m_dim())?.save(&out)?;
            out!("decoded {} vectors to {}", dec.z_hat.len(), out.display());
        }
        Command::Sweep {
            model,
            table,
            data,
            b_cap_grid,
            out,
            plot,
        } => {
            let m = load_model(&model)?;
            let t = load_table(&table)?;
            let data = FeatureMatrix::load(&data)?;
            let report = run_sweep(&m, &t, &data, &parse_grid(&b_cap_grid)?)?;
            std::fs::write(&out, report.to_csv())?;
            if let Some(p) = plot {
                std::fs::write(p, report.to_svg())?;
            }
            std::io::stdout().lock().write_all(report.to_csv().as_bytes())?;
        }
        Command::Verify {
            model,
            table,
            data,
            max_n,
            rows,
            seed,
        } => {
            let m = load_model(&model)?;
            let t = load_table(&table)?;
            let data = FeatureMatrix::load(&data)?;
            let results = verify(&m, &t, &data, max_n, rows, seed)?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                out!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Err(Error::State(format!("{failed} verification checks failed")));
            }
        }
        Command::Info { path } => {
            let bytes = std::fs::read(&path)?;
            out!("{}", serde_json::to_string_pretty(&info(&bytes)?)?);
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MsvqModel> {
    read_model(&std::fs::read(path)?)
}

fn load_table(path: &Path) -> Result<MarginalLossTable> {
    MarginalLossTable::from_json_bytes(&std::fs::read(path)?)
}

fn parse_alloc(s: &str) -> Result<AllocationPreset> {
    match AllocationPreset::parse(s) {
        Ok(p) => Ok(p),
        Err(_) if Path::new(s).exists() => {
            let rows: Vec<Vec<u8>> = serde_json::from_slice(&std::fs::read(s)?)
                .map_err(|e| Error::Config(format!("allocation file {s}: {e}")))?;
            Ok(AllocationPreset::Custom(BitMatrix::from_rows(&rows)?))
        }
        Err(e) => Err(e),
    }
}

/// Header summary of a model or payload file.
pub fn info(bytes: &[u8]) -> Result<serde_json::Value> {
    if bytes.starts_with(MODEL_MAGIC) {
        let m = read_model(bytes)?;
        let l = m.layout();
        Ok(json!({
            "kind": "model",
            "digest": format!("{:016x}", model_digest(&m)?),
            "m": l.m_dim(),
            "d": l.sub_dim(),
            "n": l.n_sub(),
            "g": l.n_groups(),
            "t_max": l.t_max(),
            "bits": l.bits().rows(),
            "total_bits": l.bits().total(),
            "entropy_coded": m.ec_enabled(),
            "lambda": m.lambda(),
            "strict": m.strict(),
            "codeword_parameters": m.codeword_parameter_count(),
            "table_digest": m.table_digest().map(|d| format!("{d:016x}")),
        }))
    } else if bytes.starts_with(PAYLOAD_MAGIC) {
        let h = PayloadHeader::parse(bytes)?;
        Ok(json!({
            "kind": "payload",
            "mode": format!("{:?}", h.mode).to_lowercase(),
            "entropy_coded": h.entropy_coded,
            "model_digest": format!("{:016x}", h.model_digest),
            "b_cap": h.b_cap,
            "count": h.count,
            "n": h.n_sub,
            "t_max": h.t_max,
            "plan": h.plan,
            "header_bytes": h.header_len,
            "body_bytes": bytes.len() - h.header_len,
        }))
    } else {
        Err(Error::Format("unrecognized file: expected an MSVQ model or MSVP payload".into()))
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Reference checks against a model, its table and data.
pub fn verify(
    model: &MsvqModel,
    table: &MarginalLossTable,
    data: &FeatureMatrix,
    max_n: usize,
    rows: usize,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let sample = data.head(rows.max(1).min(data.rows()));
    let layout = model.layout();

    // Decomposed table vs direct re-encoding on the same rows.
    let fast = build_table(model, &sample, BitMode::Exact)?;
    let mut worst = 0.0f64;
    for i in 0..layout.n_sub() {
        for t in 0..=layout.t_max() {
            let direct = direct_marginal_loss(model, &sample, i, t)?;
            let rel = (direct - fast.loss()[i][t]).abs() / direct.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
    }
    out.push(check(
        "table-fast-path",
        worst <= 1e-9,
        format!("max relative deviation {worst:.3e} over {} rows", sample.rows()),
    ));

    let conv = validate_convexity(table);
    let monotone = conv.rows.iter().filter(|r| r.monotone).count();
    let convex = conv.rows.iter().filter(|r| r.convex).count();
    out.push(check(
        "table-monotone",
        conv.all_monotone(),
        format!("{monotone}/{} rows monotone, {convex} convex", conv.rows.len()),
    ));

    // Greedy vs exhaustive on the leading sub-table, at a spread of budgets.
    let n = max_n.clamp(1, table.n());
    let sub = MarginalLossTable::new(
        table.mode(),
        table.loss()[..n].to_vec(),
        table.step_bits()[..n].to_vec(),
        table.fixed_bits()[..n].to_vec(),
    )?;
    let sub_opt = validate_convexity(&sub).greedy_optimal();
    let mut max_gap = 0.0f64;
    let mut exact = 0;
    let budgets = 12;
    for k in 0..=budgets {
        let b = sub.total_bits() * k as f64 / budgets as f64;
        let g = select_stages(&sub, b);
        let o = exhaustive_select(&sub, b)?;
        let gl = sub.total_loss(&g.stages);
        if gl == o.best_loss {
            exact += 1;
        }
        max_gap = max_gap.max((gl - o.best_loss) / o.best_loss.abs().max(f64::MIN_POSITIVE));
    }
    out.push(check(
        "greedy-vs-oracle",
        !sub_opt || exact == budgets + 1,
        format!(
            "N={n}: {exact}/{} budgets optimal, max relative gap {max_gap:.3e}, optimality conditions {}",
            budgets + 1,
            if sub_opt { "hold" } else { "do not hold (gap reported only)" }
        ),
    ));

    // Seeded tables that satisfy the optimality conditions.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    let cases = 200;
    for _ in 0..cases {
        let t = random_convex_table(&mut rng, max_n.clamp(1, 6), 3);
        let b = rng.random_range(0.0..=t.total_bits());
        let g = select_stages(&t, b);
        if t.total_loss(&g.stages) == exhaustive_select(&t, b)?.best_loss {
            agree += 1;
        }
    }
    out.push(check(
        "greedy-optimal-convex",
        agree == cases,
        format!("{agree}/{cases} random convex tables"),
    ));

    // Nearest-neighbour search vs exhaustive scan along the full-depth residual path.
    let mut mismatches = 0;
    let mut scanned = 0;
    for z in sample.iter_rows() {
        let prof = truncation_profile(model, z)?;
        let zl = layout.permute(z);
        for i in 0..layout.n_sub() {
            let coords = i * layout.sub_dim()..(i + 1) * layout.sub_dim();
            let mut r: Vec<f64> = zl[coords.clone()]
                .iter()
                .zip(&model.means()[coords])
                .map(|(&a, &b)| a - b as f64)
                .collect();
            for t in 0..layout.t_max() {
                let cb = model.resolve(i, t)?;
                let k = prof.indices[i][t] as usize;
                if !model.ec_enabled() {
                    scanned += 1;
                    if exhaustive_nearest(cb.vectors(), cb.dim(), &r).0 != k {
                        mismatches += 1;
                    }
                }
                for (x, c) in r.iter_mut().zip(cb.codeword(k)) {
                    *x -= *c as f64;
                }
            }
        }
    }
    out.push(check(
        "nearest-vs-exhaustive",
        mismatches == 0,
        if model.ec_enabled() {
            "skipped: entropy-coded model uses the rate-penalized rule".into()
        } else {
            format!("{mismatches} mismatches in {scanned} searches")
        },
    ));

    // Bit-exact transport at a mid budget.
    if model.table_digest().is_some() {
        let b_cap = (table.total_bits() / 2.0) as u32;
        let batch = encode_batch(model, table, &sample, b_cap, false)?;
        let dec = decode_batch(model, table, &batch.bytes)?;
        out.push(check(
            "payload-round-trip",
            dec.z_hat == batch.z_hat && dec.plan == batch.plan,
            format!("{} vectors at b_cap={b_cap}", sample.rows()),
        ));
    } else {
        out.push(check(
            "payload-round-trip",
            false,
            "model is not bound to a table".into(),
        ));
    }
    Ok(out)
}

/// Monotone convex rows with one step cost shared by the whole table.
pub fn random_convex_table(rng: &mut impl Rng, max_n: usize, max_t: usize) -> MarginalLossTable {
    let n = rng.random_range(1..=max_n);
    let t_max = rng.random_range(1..=max_t);
    let bits = rng.random_range(1..=8u8);
    let loss = (0..n)
        .map(|_| {
            let mut drops: Vec<f64> = (0..t_max).map(|_| rng.random_range(0.01..10.0)).collect();
            drops.sort_by(|a, b| b.total_cmp(a));
            let mut row = vec![rng.random_range(0.0..1.0) + drops.iter().sum::<f64>()];
            for d in drops {
                let last = *row.last().unwrap();
                row.push(last - d);
            }
            row
        })
        .collect();
    MarginalLossTable::exact(loss, vec![vec![bits; t_max]; n]).expect("valid random table")
}
