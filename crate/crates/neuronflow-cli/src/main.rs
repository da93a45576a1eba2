//! Experiment driver for the neuronflow simulator.
//!
//! Each subcommand reads a TOML configuration, runs one stage of the
//! workflow (synthetic model, activation trace, execution plan,
//! decode/prefill simulation, ablation, built-in scenarios, report) and
//! writes machine-readable artifacts plus a manifest into the output
//! directory. Runs are deterministic: identical config and seed produce
//! byte-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neuronflow::engine::{
    ablation_csv, ablation_steps, default_config, simulate_decode, simulate_prefill, PolicyFlags,
    RunConfig,
};
use neuronflow::model::{
    generate_trace, read_trace, write_model, write_trace, ActivationTrace, Dtype, ModelSpec,
    SkewParams,
};
use neuronflow::pipeline::{simulate, two_matrix_instance, Policy, Resources};
use neuronflow::planner::{
    generate_plan, profile as profile_trace, read_profile, write_plan, write_profile,
    HardwareProfile,
};
use neuronflow::Error;

#[derive(Parser)]
#[command(name = "neuronflow", version, about = "Sparse-FFN offloading simulator driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; one directory per run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the seed from the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppresses progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generates synthetic gated-FFN weights (model.bin).
    GenModel,
    /// Generates an activation trace (trace.jsonl).
    GenTrace,
    /// Profiles a trace and writes an execution plan (plan.json, profile.toml).
    Plan,
    /// Runs the decode simulation (metrics.json, events.csv).
    Simulate,
    /// Runs the five-step optimization ablation (ablation.csv).
    ///
    /// Independent steps fan out across threads; NEURONFLOW_THREADS caps
    /// the parallelism.
    Ablation,
    /// Runs a named built-in fixture: fig6, bon, or prefill-overlap.
    Scenario { name: String },
    /// Renders report.md from the CSV artifacts in the output directory.
    Report,
}

// --- configuration schema ---------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    seed: Option<u64>,
    /// Optional hardware profile TOML (defaults to the built-in one).
    profile: Option<PathBuf>,
    model: Option<ModelSection>,
    skew: Option<SkewSection>,
    trace: Option<TraceSection>,
    plan: Option<PlanSection>,
    run: Option<RunSection>,
    flags: Option<FlagsSection>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    n_layers: usize,
    d_model: usize,
    d_ffn: usize,
    dtype: Dtype,
}

impl ModelSection {
    fn spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            dtype: self.dtype,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkewSection {
    /// (batch size, hot-tier fraction) anchors.
    hot_fraction_anchors: Vec<(u32, f64)>,
    base_sparsity: f64,
    bundle_coactivation: f64,
    cold_coactivation: f64,
    zipf_exponent: f64,
}

impl SkewSection {
    fn params(&self) -> SkewParams {
        SkewParams {
            hot_fraction_by_batch: self.hot_fraction_anchors.iter().copied().collect(),
            base_sparsity: self.base_sparsity,
            bundle_coactivation: self.bundle_coactivation,
            cold_coactivation: self.cold_coactivation,
            zipf_exponent: self.zipf_exponent,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceSection {
    n_tokens: usize,
    /// Constant batch size, or an explicit per-token schedule.
    batch: Option<u32>,
    batch_schedule: Option<Vec<u32>>,
}

impl TraceSection {
    fn schedule(&self) -> Result<Vec<u32>, Error> {
        match (&self.batch_schedule, self.batch) {
            (Some(s), None) => {
                if s.len() != self.n_tokens {
                    return Err(Error::constraint(format!(
                        "batch_schedule length {} != n_tokens {}",
                        s.len(),
                        self.n_tokens
                    )));
                }
                Ok(s.clone())
            }
            (None, batch) => Ok(vec![batch.unwrap_or(1); self.n_tokens]),
            (Some(_), Some(_)) => {
                Err(Error::constraint("set either batch or batch_schedule, not both".to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanSection {
    batch_sizes: Vec<u32>,
    cache_total_bytes: u64,
    /// Existing trace to profile; omitted means one is generated from
    /// the [skew] and [trace] sections.
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    batch_schedule: Vec<u32>,
    offload_fraction: Option<f64>,
    /// Also runs the prefill simulation at this prompt length.
    prompt_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagsSection {
    bundle: Option<bool>,
    cache: Option<bool>,
    pipeline: Option<bool>,
    hybrid_xpu: Option<bool>,
}

impl FlagsSection {
    fn flags(&self) -> PolicyFlags {
        let on = PolicyFlags::all_on();
        PolicyFlags {
            bundle: self.bundle.unwrap_or(on.bundle),
            cache: self.cache.unwrap_or(on.cache),
            pipeline: self.pipeline.unwrap_or(on.pipeline),
            hybrid_xpu: self.hybrid_xpu.unwrap_or(on.hybrid_xpu),
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    /// SHA-256 of the configuration file bytes, when one was given.
    config_sha256: Option<String>,
    version: &'static str,
    artifacts: Vec<String>,
}

// --- plumbing ----------------------------------------------------------

struct Ctx {
    config: Config,
    config_dir: PathBuf,
    config_sha256: Option<String>,
    out: PathBuf,
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self, Error> {
        let (config, config_dir, sha) = match &cli.config {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| {
                    Error::constraint(format!("cannot read config {}: {e}", path.display()))
                })?;
                let config: Config = toml::from_str(
                    std::str::from_utf8(&bytes)
                        .map_err(|e| Error::Parse(format!("config is not UTF-8: {e}")))?,
                )
                .map_err(|e| Error::Parse(format!("bad config: {e}")))?;
                let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                (config, dir, Some(hex(&Sha256::digest(&bytes))))
            }
            None => (Config::default(), PathBuf::from("."), None),
        };
        let seed = cli.seed.or(config.seed).unwrap_or(42);
        Ok(Ctx {
            config,
            config_dir,
            config_sha256: sha,
            out: cli.out.clone(),
            seed,
            quiet: cli.quiet,
        })
    }

    fn model(&self) -> Result<ModelSection, Error> {
        self.config
            .model
            .ok_or_else(|| Error::constraint("config needs a [model] section".to_string()))
    }

    fn skew(&self) -> SkewParams {
        self.config.skew.as_ref().map(|s| s.params()).unwrap_or_else(SkewParams::measured)
    }

    fn hardware(&self) -> Result<HardwareProfile, Error> {
        match &self.config.profile {
            Some(p) => read_profile(&self.resolve(p)),
            None => Ok(HardwareProfile::default_profile()),
        }
    }

    /// Paths in the config resolve relative to the config file.
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    fn artifact_path(&self, name: &str) -> Result<PathBuf, Error> {
        fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn write_artifact(&self, name: &str, contents: &str) -> Result<(), Error> {
        fs::write(self.artifact_path(name)?, contents)?;
        Ok(())
    }

    fn finish(&self, command: &str, artifacts: &[&str]) -> Result<(), Error> {
        let manifest = Manifest {
            command: command.to_string(),
            seed: self.seed,
            config_sha256: self.config_sha256.clone(),
            version: env!("CARGO_PKG_VERSION"),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        };
        self.write_artifact("manifest.json", &to_json(&manifest)?)?;
        if !self.quiet {
            for a in artifacts {
                println!("wrote {}", self.out.join(a).display());
            }
        }
        Ok(())
    }
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value)
        .map_err(|e| Error::internal(format!("serialization failed: {e}")))
}

// --- subcommands -------------------------------------------------------

fn gen_model(ctx: &Ctx) -> Result<(), Error> {
    let spec = ctx.model()?.spec(ctx.seed);
    let layers = neuronflow::model::make_synthetic_model(&spec)?;
    write_model(&ctx.artifact_path("model.bin")?, &spec, &layers)?;
    ctx.finish("gen-model", &["model.bin"])
}

fn gen_trace(ctx: &Ctx) -> Result<(), Error> {
    let spec = ctx.model()?.spec(ctx.seed);
    let section = ctx
        .config
        .trace
        .clone()
        .ok_or_else(|| Error::constraint("config needs a [trace] section".to_string()))?;
    let schedule = section.schedule()?;
    let trace = generate_trace(&spec, &ctx.skew(), section.n_tokens, &schedule)?;
    write_trace(&ctx.artifact_path("trace.jsonl")?, &trace)?;
    ctx.finish("gen-trace", &["trace.jsonl"])
}

fn make_plan_inputs(ctx: &Ctx) -> Result<(ModelSpec, PlanSection, ActivationTrace), Error> {
    let spec = ctx.model()?.spec(ctx.seed);
    let section = ctx
        .config
        .plan
        .clone()
        .ok_or_else(|| Error::constraint("config needs a [plan] section".to_string()))?;
    let trace = match &section.trace {
        Some(path) => read_trace(&ctx.resolve(path))?,
        None => {
            let t = ctx
                .config
                .trace
                .clone()
                .ok_or_else(|| Error::constraint(
                    "plan needs either plan.trace or a [trace] section".to_string(),
                ))?;
            let schedule = t.schedule()?;
            generate_trace(&spec, &ctx.skew(), t.n_tokens, &schedule)?
        }
    };
    Ok((spec, section, trace))
}

fn plan(ctx: &Ctx) -> Result<(), Error> {
    let (spec, section, trace) = make_plan_inputs(ctx)?;
    let hw = ctx.hardware()?;
    let stats = profile_trace(&trace, spec.d_ffn)?;
    let plan = generate_plan(&stats, &hw, &spec, &section.batch_sizes, section.cache_total_bytes)?;
    write_plan(&ctx.artifact_path("plan.json")?, &plan)?;
    write_profile(&ctx.artifact_path("profile.toml")?, &hw)?;
    ctx.finish("plan", &["plan.json", "profile.toml"])
}

fn run_config(ctx: &Ctx) -> Result<(RunConfig, RunSection), Error> {
    let section = ctx
        .config
        .run
        .clone()
        .ok_or_else(|| Error::constraint("config needs a [run] section".to_string()))?;
    let mut cfg = default_config(ctx.seed, section.batch_schedule.clone())?;
    if let Some(f) = section.offload_fraction {
        cfg.offload_fraction = f;
    }
    if let Some(flags) = &ctx.config.flags {
        cfg.flags = flags.flags();
    }
    cfg.validate()?;
    Ok((cfg, section))
}

fn simulate_cmd(ctx: &Ctx) -> Result<(), Error> {
    let (cfg, section) = run_config(ctx)?;
    let (metrics, log) = simulate_decode(&cfg)?;
    ctx.write_artifact("metrics.json", &to_json(&metrics)?)?;
    ctx.write_artifact("events.csv", &log.to_csv())?;
    let mut artifacts = vec!["metrics.json", "events.csv"];
    if let Some(prompt_len) = section.prompt_len {
        let prefill = simulate_prefill(&cfg, prompt_len)?;
        ctx.write_artifact("prefill.json", &to_json(&prefill)?)?;
        artifacts.push("prefill.json");
    }
    ctx.finish("simulate", &artifacts)
}

fn ablation(ctx: &Ctx) -> Result<(), Error> {
    let (base, _) = run_config(ctx)?;
    let steps = ablation_steps();
    let threads = std::env::var("NEURONFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(steps.len())
        .min(steps.len());

    // Fan the independent simulations out over `threads` workers; slot
    // results by index so the row order stays stable.
    let slots: Mutex<Vec<Option<Result<(String, neuronflow::engine::RunMetrics), Error>>>> =
        Mutex::new((0..steps.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for w in 0..threads {
            let base = &base;
            let steps = &steps;
            let slots = &slots;
            scope.spawn(move || {
                for (i, (name, flags)) in steps.iter().enumerate() {
                    if i % threads != w {
                        continue;
                    }
                    let cfg = RunConfig { flags: *flags, ..base.clone() };
                    let result =
                        simulate_decode(&cfg).map(|(m, _)| (name.to_string(), m));
                    slots.lock().unwrap()[i] = Some(result);
                }
            });
        }
    });
    let mut rows = Vec::with_capacity(steps.len());
    for slot in slots.into_inner().unwrap() {
        rows.push(slot.expect("ablation step not scheduled")?);
    }
    ctx.write_artifact("ablation.csv", &ablation_csv(&rows))?;
    ctx.finish("ablation", &["ablation.csv"])
}

fn scenario(ctx: &Ctx, name: &str) -> Result<(), Error> {
    match name {
        "fig6" => {
            let tasks = neuronflow::pipeline::build_tasks(&two_matrix_instance(4, 1, 2))?;
            let res = Resources::symmetric_cpu(4);
            let cluster = simulate(&tasks, &res, Policy::ClusterLevel)?;
            let matrix = simulate(&tasks, &res, Policy::MatrixLevel)?;
            ctx.write_artifact("pipeline_cluster.csv", &cluster.to_csv())?;
            ctx.write_artifact("pipeline_matrix.csv", &matrix.to_csv())?;
            let summary: BTreeMap<&str, u64> = [
                ("cluster_level_makespan", cluster.makespan),
                ("matrix_level_makespan", matrix.makespan),
            ]
            .into_iter()
            .collect();
            ctx.write_artifact("scenario.json", &to_json(&summary)?)?;
            if cluster.makespan >= matrix.makespan {
                return Err(Error::internal(format!(
                    "cluster-level makespan {} not below matrix-level {}",
                    cluster.makespan, matrix.makespan
                )));
            }
            ctx.finish(
                "scenario fig6",
                &["pipeline_cluster.csv", "pipeline_matrix.csv", "scenario.json"],
            )
        }
        "bon" => {
            // Best-of-4 decode: the batch decays as candidates finish.
            let schedule: Vec<u32> =
                [4u32, 3, 2, 1].iter().flat_map(|&b| std::iter::repeat(b).take(4)).collect();
            let cfg = default_config(ctx.seed, schedule.clone())?;
            let (metrics, _) = simulate_decode(&cfg)?;
            let mut csv = String::from("iteration,batch,latency_s,speed_tok_s\n");
            for (i, (&b, &lat)) in
                schedule.iter().zip(&metrics.per_token_latency_s).enumerate()
            {
                csv.push_str(&format!("{i},{b},{lat:.9},{:.6}\n", 1.0 / lat));
            }
            ctx.write_artifact("bon.csv", &csv)?;
            ctx.write_artifact("metrics.json", &to_json(&metrics)?)?;
            ctx.finish("scenario bon", &["bon.csv", "metrics.json"])
        }
        "prefill-overlap" => {
            let cfg = default_config(ctx.seed, vec![1])?;
            let prefill = simulate_prefill(&cfg, 128)?;
            ctx.write_artifact("prefill.json", &to_json(&prefill)?)?;
            ctx.finish("scenario prefill-overlap", &["prefill.json"])
        }
        other => Err(Error::constraint(format!(
            "unknown scenario '{other}' (expected fig6, bon, or prefill-overlap)"
        ))),
    }
}

fn report(ctx: &Ctx) -> Result<(), Error> {
    let ablation_path = ctx.out.join("ablation.csv");
    let csv = fs::read_to_string(&ablation_path).map_err(|e| {
        Error::constraint(format!("cannot read {}: {e}", ablation_path.display()))
    })?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("ablation.csv is empty".to_string()))?;
    let columns: Vec<&str> = header.split(',').collect();

    let mut md = String::from("# Simulation report\n\n## Ablation\n\n");
    md.push_str(&format!("| {} |\n", columns.join(" | ")));
    md.push_str(&format!("|{}\n", "---|".repeat(columns.len())));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse(format!("malformed ablation.csv row: {line}")));
        }
        md.push_str(&format!("| {} |\n", fields.join(" | ")));
    }

    let bon_path = ctx.out.join("bon.csv");
    if let Ok(bon) = fs::read_to_string(&bon_path) {
        md.push_str("\n## Best-of-N decode\n\n");
        let mut rows = bon.lines();
        if let Some(h) = rows.next() {
            let cols: Vec<&str> = h.split(',').collect();
            md.push_str(&format!("| {} |\n", cols.join(" | ")));
            md.push_str(&format!("|{}\n", "---|".repeat(cols.len())));
            for r in rows {
                md.push_str(&format!("| {} |\n", r.split(',').collect::<Vec<_>>().join(" | ")));
            }
        }
    }
    ctx.write_artifact("report.md", &md)?;
    ctx.finish("report", &["report.md"])
}

// --- entry point -------------------------------------------------------

fn run(cli: &Cli) -> Result<(), Error> {
    let ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::GenModel => gen_model(&ctx),
        Command::GenTrace => gen_trace(&ctx),
        Command::Plan => plan(&ctx),
        Command::Simulate => simulate_cmd(&ctx),
        Command::Ablation => ablation(&ctx),
        Command::Scenario { name } => scenario(&ctx, name),
        Command::Report => report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Internal(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
