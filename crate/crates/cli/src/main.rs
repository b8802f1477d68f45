//! `densealign` command-line tool.
//!
//! Every subcommand accepts `--config file.json`, a flat JSON object whose
//! keys are the subcommand's long flag names. Flags given on the command line
//! win over the file. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use densealign::alignerdit::Aligner;
use densealign::embedspace::{read_embedding_file, write_embedding_file, SpaceConfig, TargetEmbedding};
use densealign::evalmetrics::{alignment_report, features, frechet_distance, kernel_distance, retrieval, Component, QueryMode};
use densealign::rectflow::{LossWeights, DEFAULT_SAMPLE_STEPS};
use densealign::synthworld::{
    gen_dataset, gen_scene_flavored, scene_to_prompt, Dataset, Flavor, FrozenTargetEncoder, PromptTokens,
    DEFAULT_GLOBAL_SEED,
};
use densealign::trainstage::{train, CheckpointArchive, ModelShape, Stage, TrainConfig};
use densealign::viewsel3d::{sample_surface, select_view_with_points, TriMesh, DEFAULT_SURFACE_POINTS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

const SEED_ENV: &str = "GAP_SEED";
const SAMPLE_CHUNK: usize = 32;

#[derive(Parser)]
#[command(name = "densealign", version, about = "Text-to-dense-embedding alignment on synthetic scenes")]
struct Cli {
    /// Flat JSON file of flag values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (prompt, target embedding) dataset.
    GenData(GenDataArgs),
    /// Train a pretrain or finetune stage.
    Train(TrainArgs),
    /// Generate embeddings for prompts with a trained checkpoint.
    Sample(SampleArgs),
    /// Compare generated embeddings with ground truth.
    Eval(EvalArgs),
    /// Top-k retrieval of queries against a database.
    Retrieve(RetrieveArgs),
    /// Pick the least occluded of four candidate camera yaws for a mesh.
    SelectView(SelectViewArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// pretrain | finetune
    #[arg(long)]
    flavor: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the frozen target encoder.
    #[arg(long)]
    teacher_seed: Option<u64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    d_img: Option<usize>,
    #[arg(long)]
    n_reg: Option<usize>,
    /// Number of soft tokens.
    #[arg(long)]
    soft_tokens: Option<usize>,
    #[arg(long)]
    d_cond: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// pretrain | finetune
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    /// Seed of the frozen prompt encoder and initial weights.
    #[arg(long)]
    global_seed: Option<u64>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Take prompts from this dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated scene seeds to take prompts from instead.
    #[arg(long)]
    scene_seeds: Option<String>,
    /// Flavor of scenes built from --scene-seeds.
    #[arg(long)]
    flavor: Option<String>,
    /// Seed of the target encoder used for --gt-out with --scene-seeds.
    #[arg(long)]
    teacher_seed: Option<u64>,
    /// Use only the first N prompts.
    #[arg(long)]
    limit: Option<usize>,
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ground-truth embeddings of the same prompts.
    #[arg(long)]
    gt_out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    gen: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Report CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add the Fréchet distance over pooled features.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    fd: bool,
    /// Add the kernel distance over pooled features.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    kd: bool,
    /// cls | pooled_patch
    #[arg(long)]
    feature: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RetrieveArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    db: Option<PathBuf>,
    /// One database index per line, one line per query; identity when absent.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// cls | pooled_patch; both when absent.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated cutoffs.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SelectViewArgs {
    /// Triangulated OBJ file.
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of surface samples.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<densealign::Error> for Failure {
    fn from(e: densealign::Error) -> Self {
        match e {
            densealign::Error::Config(_) | densealign::Error::Range(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn required<T>(v: Option<T>, flag: &str) -> Outcome<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn parse_value<T: std::str::FromStr>(s: &str, what: &str) -> Outcome<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| usage(format!("invalid {what} {s:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Outcome<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|x| parse_value(x, what)).collect()
}

/// Overlays the flags that were given onto the config file's values.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Outcome<T> {
    let mut merged = Map::new();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(obj) = v else {
            return Err(usage("config must be a JSON object"));
        };
        for (k, v) in obj {
            if v.is_object() || v.is_array() {
                return Err(usage(format!("config key {k:?} must hold a plain value")));
            }
            merged.insert(k.replace('-', "_"), v);
        }
    }
    let Value::Object(given) = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))? else {
        unreachable!("argument structs serialise to objects")
    };
    for (k, v) in given {
        if !(v.is_null() || v == Value::Bool(false)) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

fn resolve_seed(seed: Option<u64>) -> Outcome<u64> {
    match (seed, std::env::var(SEED_ENV)) {
        (Some(s), _) => Ok(s),
        (None, Ok(v)) => parse_value(v.trim(), SEED_ENV),
        (None, Err(_)) => Ok(0),
    }
}

fn emit(report: &str, out: Option<&Path>) -> Outcome {
    match out {
        Some(p) => fs::write(p, report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Outcome {
    let n = required(a.n, "n")?;
    let out = required(a.out, "out")?;
    let flavor: Flavor = parse_value(a.flavor.as_deref().unwrap_or("pretrain"), "flavor")?;
    let d = SpaceConfig::default();
    let space = SpaceConfig {
        h: a.h.unwrap_or(d.h),
        w: a.w.unwrap_or(d.w),
        d_img: a.d_img.unwrap_or(d.d_img),
        n_reg: a.n_reg.unwrap_or(d.n_reg),
        s: a.soft_tokens.unwrap_or(d.s),
        d_cond: a.d_cond.unwrap_or(d.d_cond),
    };
    let seed = resolve_seed(a.seed)?;
    let ds = gen_dataset(n, seed, flavor, &space, a.teacher_seed.unwrap_or(DEFAULT_GLOBAL_SEED), &out)?;
    println!("wrote {} {flavor} records to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let stage: Stage = parse_value(a.stage.as_deref().unwrap_or("pretrain"), "stage")?;
    let base = TrainConfig::new(stage, &data, &out);
    let w = LossWeights::default();
    let m = ModelShape::default();
    let trace = a.trace.unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".trace.csv");
        s.into()
    });
    let cfg = TrainConfig {
        steps: a.steps.unwrap_or(base.steps),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        lr_max: a.lr_max.unwrap_or(base.lr_max),
        lr_min: a.lr_min.unwrap_or(base.lr_min),
        weight_decay: a.weight_decay.unwrap_or(base.weight_decay),
        weights: LossWeights {
            lambda_p: a.lambda_p.unwrap_or(w.lambda_p),
            lambda_cls: a.lambda_cls.unwrap_or(w.lambda_cls),
            lambda_reg: a.lambda_reg.unwrap_or(w.lambda_reg),
        },
        seed: resolve_seed(a.seed)?,
        init_checkpoint: a.init_ckpt,
        model: ModelShape {
            d_model: a.d_model.unwrap_or(m.d_model),
            n_blocks: a.n_blocks.unwrap_or(m.n_blocks),
            n_heads: a.n_heads.unwrap_or(m.n_heads),
        },
        global_seed: a.global_seed.unwrap_or(base.global_seed),
        log_every: a.log_every.unwrap_or(base.log_every),
        trace: Some(trace.clone()),
        ..base
    };
    let outcome = train(&cfg)?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps, final loss {last:.6}; checkpoint {}, trace {}",
        outcome.trace.len(),
        out.display(),
        trace.display()
    );
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Outcome {
    let ckpt = required(a.ckpt, "ckpt")?;
    let out = required(a.out, "out")?;
    let steps = a.steps.unwrap_or(DEFAULT_SAMPLE_STEPS);
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let archive = CheckpointArchive::load(&ckpt)?;
    let aligner: Aligner = archive.to_aligner()?;
    let space = aligner.config().space;
    let (prompts, targets): (Vec<PromptTokens>, Vec<TargetEmbedding>) = match (a.data, a.scene_seeds) {
        (Some(path), None) => {
            let ds = Dataset::read(&path)?;
            if ds.cfg != space {
                return Err(Failure::Runtime(format!("dataset space {:?} does not match checkpoint {:?}", ds.cfg, space)));
            }
            ds.records.into_iter().map(|r| (r.tokens, r.target)).unzip()
        }
        (None, Some(list)) => {
            let seeds: Vec<u64> = parse_list(&list, "scene seed")?;
            let flavor: Flavor = parse_value(a.flavor.as_deref().unwrap_or("pretrain"), "flavor")?;
            let teacher = FrozenTargetEncoder::new(&space, a.teacher_seed.unwrap_or(archive.meta.global_seed))?;
            seeds
                .iter()
                .map(|&s| {
                    let sc = gen_scene_flavored(s, flavor, &space);
                    (scene_to_prompt(&sc), teacher.encode_target(&sc))
                })
                .unzip()
        }
        _ => return Err(usage("give exactly one of --data or --scene-seeds")),
    };
    let n = a.limit.map_or(prompts.len(), |l| l.min(prompts.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(a.rng_seed)?);
    let mut generated = Vec::with_capacity(n);
    for chunk in prompts[..n].chunks(SAMPLE_CHUNK) {
        let refs: Vec<&PromptTokens> = chunk.iter().collect();
        generated.extend(aligner.generate(&refs, steps, &mut rng)?);
        log::info!("sampled {}/{n}", generated.len());
    }
    write_embedding_file(&out, &generated)?;
    if let Some(gt) = a.gt_out {
        write_embedding_file(&gt, &targets[..n])?;
    }
    println!("wrote {n} embeddings to {}", out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let gen = read_embedding_file(required(a.gen, "gen")?)?;
    let gt = read_embedding_file(required(a.gt, "gt")?)?;
    if gen.len() != gt.len() {
        return Err(Failure::Runtime(format!("{} generated vs {} ground-truth embeddings", gen.len(), gt.len())));
    }
    let report = alignment_report(&gen, &gt)?;
    let mut csv = String::from("metric,component,value,count\n");
    for c in Component::ALL {
        if let Some(s) = report.get(c) {
            for (metric, v) in [("cosine", s.cosine), ("mse", s.mse), ("norm_ratio", s.norm_ratio)] {
                writeln!(csv, "{metric},{},{v},{}", c.name(), report.count).expect("write to string");
            }
        }
    }
    if a.fd || a.kd {
        let mode: QueryMode = parse_value(a.feature.as_deref().unwrap_or("cls"), "feature")?;
        let (fa, fb) = (features(&gen, mode), features(&gt, mode));
        if a.fd {
            writeln!(csv, "fd,{mode},{},{}", frechet_distance(fa.view(), fb.view())?, report.count).expect("write to string");
        }
        if a.kd {
            writeln!(csv, "kd,{mode},{},{}", kernel_distance(fa.view(), fb.view())?, report.count).expect("write to string");
        }
    }
    emit(&csv, a.out.as_deref())
}

fn cmd_retrieve(a: RetrieveArgs) -> Outcome {
    let queries = read_embedding_file(required(a.queries, "queries")?)?;
    let db = read_embedding_file(required(a.db, "db")?)?;
    let truth: Vec<usize> = match &a.ids {
        Some(p) => fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse().map_err(|e| Failure::Runtime(format!("id file {}: {e}", p.display()))))
            .collect::<Outcome<_>>()?,
        None => (0..queries.len()).collect(),
    };
    let ks: Vec<usize> = match &a.k {
        Some(s) => parse_list(s, "k")?,
        None => densealign::evalmetrics::DEFAULT_KS.to_vec(),
    };
    let modes = match &a.mode {
        Some(m) => vec![parse_value::<QueryMode>(m, "mode")?],
        None => vec![QueryMode::Cls, QueryMode::PooledPatch],
    };
    let mut csv = String::from("mode,k,recall,queries\n");
    for mode in modes {
        let r = retrieval(&queries, &db, &truth, mode, &ks)?;
        for (k, v) in &r.recall {
            writeln!(csv, "{mode},{k},{v},{}", r.queries).expect("write to string");
        }
    }
    emit(&csv, a.out.as_deref())
}

fn cmd_select_view(a: SelectViewArgs) -> Outcome {
    let mesh = TriMesh::load_obj(required(a.mesh, "mesh")?)?.normalized();
    let points = a.points.unwrap_or(DEFAULT_SURFACE_POINTS);
    let sample = sample_surface(&mesh, points, resolve_seed(a.seed)?)?;
    let sel = select_view_with_points(&mesh, &sample.points)?;
    let mut csv = String::from("yaw,visible,selected\n");
    for (yaw, count) in sel.counts {
        writeln!(csv, "{yaw},{count},{}", u8::from(yaw == sel.yaw)).expect("write to string");
    }
    emit(&csv, None)
}

fn run(cli: Cli) -> Outcome {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => cmd_gen_data(resolve(&a, cfg)?),
        Command::Train(a) => cmd_train(resolve(&a, cfg)?),
        Command::Sample(a) => cmd_sample(resolve(&a, cfg)?),
        Command::Eval(a) => cmd_eval(resolve(&a, cfg)?),
        Command::Retrieve(a) => cmd_retrieve(resolve(&a, cfg)?),
        Command::SelectView(a) => cmd_select_view(resolve(&a, cfg)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
