//! Command-line entry point binding the segmentation pipeline into
//! reproducible workflows: phantom data generation, training, overlap-tile
//! inference with cascade fusion, post-processing, evaluation, parameter
//! reports, and feature-map export.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use omnet_core::backbone::{AttentionKind, NetworkConfig, OmNet};
use omnet_core::inference::{overlap_tile_features, overlap_tile_predict, fuse_cascade, TilePlan};
use omnet_core::sampler::{normalize, LabelVolume, Volume, DILATION_RADIUS};
use omnet_core::trainer::{
    build_datasets, train_curriculum, train_joint, train_mc_baseline, CurriculumSchedule,
    TrainOptions,
};
use omnet_core::{io, metrics, phantom, postproc};

#[derive(Parser)]
#[command(name = "omnet", version, about = "One-pass multi-task 3D tumor segmentation")]
struct Cli {
    /// Single-threaded execution for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes with nested tumor regions.
    Phantom(PhantomArgs),
    /// Train a model (curriculum, ablations, or the three-network cascade).
    Train(TrainArgs),
    /// Overlap-tile inference plus cascade fusion into a label volume.
    Infer(InferArgs),
    /// Refine predicted labels: small-cluster removal and edema reclustering.
    Postprocess(PostprocArgs),
    /// Metric CSV (Dice/PPV/Sensitivity and Hausdorff) per region.
    Eval(EvalArgs),
    /// Parameter-count report across model variants.
    Params(ParamsArgs),
    /// Export stitched backbone feature channels and their importance.
    DumpFeatures(DumpFeaturesArgs),
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("OMNET_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory for caseNNN.{omv,oml,json}.
    #[arg(long, default_value_os_t = default_out_dir())]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Volume extents W,H,L.
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [64usize, 64, 32])]
    extents: Vec<usize>,
    /// Fraction of cases without an enhancing region.
    #[arg(long, default_value_t = 0.0)]
    lgg_fraction: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TrainModeArg {
    /// Staged curriculum with online data transfer.
    Curriculum,
    /// Three independent single-task networks.
    Mc3,
    /// Joint training, no stages, no data transfer.
    #[value(name = "om-net0")]
    OmNet0,
    /// Joint training with data transfer, no stages.
    #[value(name = "om-netd")]
    OmNetD,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    None,
    Cga,
    Se,
}

impl From<AttentionArg> for AttentionKind {
    fn from(a: AttentionArg) -> AttentionKind {
        match a {
            AttentionArg::None => AttentionKind::None,
            AttentionArg::Cga => AttentionKind::Cga,
            AttentionArg::Se => AttentionKind::Se,
        }
    }
}

/// JSON training configuration; command-line flags override its fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainConfig {
    mode: String,
    attention: AttentionKind,
    data_dir: PathBuf,
    network: NetworkConfig,
    schedule: CurriculumSchedule,
    /// Multiplier on the full-scale patch counts (400k/400k/200k).
    desk_scale: f64,
    seed: u64,
    verify_transfers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: "curriculum".into(),
            attention: AttentionKind::None,
            data_dir: PathBuf::from("out"),
            network: NetworkConfig::default(),
            schedule: CurriculumSchedule::default(),
            desk_scale: 5e-4,
            seed: 0,
            verify_transfers: false,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<TrainModeArg>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    /// Directory of paired .omv/.oml training cases.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_os_t = default_out_dir())]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    desk_scale: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint(s): one multi-task model, or three cascade networks.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    volume: PathBuf,
    /// Output label file.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-task probability volumes.
    #[arg(long)]
    dump_probs: Option<PathBuf>,
}

#[derive(Args)]
struct PostprocArgs {
    #[arg(long)]
    labels: PathBuf,
    /// Intensity volume used for the clustering step.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    skip_step1: bool,
    #[arg(long)]
    skip_step2: bool,
    /// JSON report of components, volumes, and triggered conditions.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    truth: Vec<PathBuf>,
    /// Sidecar JSON supplying voxel spacing.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum, default_value = "none")]
    attention: AttentionArg,
    /// Full-width configuration (32 channels at the head).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct DumpFeaturesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_os_t = default_out_dir())]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    deterministic: bool,
    config: serde_json::Value,
}

fn write_manifest(dir: &Path, command: &str, deterministic: bool, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        deterministic,
        config,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_case(volume_path: &Path) -> Result<(Volume, Option<LabelVolume>)> {
    let intensities = io::read_volume(volume_path)
        .with_context(|| format!("reading {}", volume_path.display()))?;
    let volume = Volume::from_intensities(intensities)?;
    let label_path = volume_path.with_extension("oml");
    let labels = if label_path.exists() {
        Some(io::read_labels(&label_path)?)
    } else {
        None
    };
    Ok((volume, labels))
}

fn scan_cases(dir: &Path) -> Result<Vec<(Volume, LabelVolume)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading data dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "omv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .omv volumes in {}", dir.display());
    }
    let mut cases = Vec::with_capacity(paths.len());
    for p in paths {
        let (vol, labels) = load_case(&p)?;
        let labels =
            labels.with_context(|| format!("{} has no matching .oml labels", p.display()))?;
        labels.check_consistent(&vol)?;
        cases.push((vol, labels));
    }
    Ok(cases)
}

fn run_phantom(args: PhantomArgs, deterministic: bool) -> Result<()> {
    let extents = [args.extents[0], args.extents[1], args.extents[2]];
    fs::create_dir_all(&args.out)?;
    let cases = phantom::generate_dataset(extents, args.count, args.lgg_fraction, args.seed)?;
    for (i, (vol, labels)) in cases.iter().enumerate() {
        let stem = args.out.join(format!("case{i:03}"));
        io::write_volume(&stem.with_extension("omv"), &vol.intensities)?;
        io::write_labels(&stem.with_extension("oml"), labels)?;
        io::write_sidecar(
            &stem.with_extension("json"),
            &io::Sidecar {
                provenance: format!("phantom seed {} case {i}", args.seed),
                ..io::Sidecar::default()
            },
        )?;
    }
    write_manifest(
        &args.out,
        "phantom",
        deterministic,
        serde_json::json!({
            "count": args.count,
            "extents": extents,
            "lgg_fraction": args.lgg_fraction,
            "seed": args.seed,
        }),
    )?;
    println!("wrote {} cases to {}", cases.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs, deterministic: bool) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            TrainModeArg::Curriculum => "curriculum",
            TrainModeArg::Mc3 => "mc3",
            TrainModeArg::OmNet0 => "om-net0",
            TrainModeArg::OmNetD => "om-netd",
        }
        .to_string();
    }
    if let Some(att) = args.attention {
        cfg.attention = att.into();
    }
    if let Some(data) = args.data {
        cfg.data_dir = data;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = args.desk_scale {
        cfg.desk_scale = scale;
    }
    cfg.network.attention = cfg.attention;
    cfg.network.seed = cfg.seed;

    let cases = scan_cases(&cfg.data_dir)?;
    let datasets = build_datasets(&cases, cfg.network.input_patch, cfg.desk_scale, cfg.seed)?;
    eprintln!(
        "datasets: {} / {} / {} patches per task",
        datasets.tasks[0].samples.len(),
        datasets.tasks[1].samples.len(),
        datasets.tasks[2].samples.len()
    );
    let opts = TrainOptions {
        seed: cfg.seed,
        verify_transfers: cfg.verify_transfers,
    };
    fs::create_dir_all(&args.out)?;
    match cfg.mode.as_str() {
        "curriculum" | "om-net0" | "om-netd" => {
            let mut model = OmNet::build(&cfg.network)?;
            let trace = match cfg.mode.as_str() {
                "curriculum" => train_curriculum(&mut model, &datasets, &cfg.schedule, &opts)?,
                "om-net0" => train_joint(&mut model, &datasets, &cfg.schedule, false, &opts)?,
                _ => train_joint(&mut model, &datasets, &cfg.schedule, true, &opts)?,
            };
            io::save_model(&args.out.join("model.omw"), &model)?;
            fs::write(args.out.join("trace.csv"), trace.to_csv())?;
            println!(
                "trained {} ({} steps) -> {}",
                cfg.mode,
                trace.rows.len(),
                args.out.join("model.omw").display()
            );
        }
        "mc3" => {
            let (models, traces) = train_mc_baseline(&cfg.network, &datasets, &cfg.schedule, &opts)?;
            for (k, model) in models.iter().enumerate() {
                io::save_model(&args.out.join(format!("mc{}.omw", k + 1)), model)?;
                fs::write(
                    args.out.join(format!("trace_mc{}.csv", k + 1)),
                    traces[k].to_csv(),
                )?;
            }
            println!("trained 3 cascade networks -> {}", args.out.display());
        }
        other => bail!("unknown training mode {other:?}"),
    }
    write_manifest(&args.out, "train", deterministic, serde_json::to_value(&cfg)?)?;
    Ok(())
}

fn run_infer(args: InferArgs, deterministic: bool) -> Result<()> {
    let (volume, _) = load_case(&args.volume)?;
    let volume = normalize(&volume)?;
    let models: Vec<OmNet> = args
        .model
        .iter()
        .map(|p| io::load_model(p).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let plan = TilePlan::new(volume.dims(), models[0].config.input_patch, [20, 20, 5])?;
    let probs = match models.len() {
        1 => {
            if models[0].heads.len() != 3 {
                bail!("single-model inference needs a three-head model");
            }
            overlap_tile_predict(&models[0], &volume, &plan)?
        }
        3 => {
            let mut probs = Vec::with_capacity(3);
            for (k, m) in models.iter().enumerate() {
                if m.heads.len() != 1 || m.heads[0].task != k {
                    bail!("cascade checkpoint {} must hold the task-{} network", k + 1, k + 1);
                }
                probs.extend(overlap_tile_predict(m, &volume, &plan)?);
            }
            probs
        }
        n => bail!("expected 1 or 3 checkpoints, got {n}"),
    };
    let labels = fuse_cascade(&probs[0], &probs[1], &probs[2], DILATION_RADIUS)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    io::write_labels(&args.out, &labels)?;
    if let Some(dir) = &args.dump_probs {
        fs::create_dir_all(dir)?;
        for (k, p) in probs.iter().enumerate() {
            io::write_volume(&dir.join(format!("task{}_probs.omv", k + 1)), p)?;
        }
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_manifest(
            dir,
            "infer",
            deterministic,
            serde_json::json!({
                "models": args.model,
                "volume": args.volume,
                "out": args.out,
            }),
        )?;
    }
    println!("wrote prediction {}", args.out.display());
    Ok(())
}

fn run_postprocess(args: PostprocArgs, deterministic: bool) -> Result<()> {
    let labels = io::read_labels(&args.labels)?;
    let (volume, _) = load_case(&args.volume)?;
    let mut rng = StdRng::seed_from_u64(args.seed);
    let (refined, report) = postproc::postprocess(
        &labels,
        &volume,
        !args.skip_step1,
        !args.skip_step2,
        &mut rng,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    io::write_labels(&args.out, &refined)?;
    if let Some(rp) = &args.report {
        fs::write(rp, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        write_manifest(
            dir,
            "postprocess",
            deterministic,
            serde_json::json!({
                "labels": args.labels,
                "volume": args.volume,
                "skip_step1": args.skip_step1,
                "skip_step2": args.skip_step2,
                "seed": args.seed,
            }),
        )?;
    }
    println!("wrote refined labels {}", args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    if args.pred.len() != args.truth.len() || args.pred.is_empty() {
        bail!(
            "need matching non-empty --pred/--truth lists, got {}/{}",
            args.pred.len(),
            args.truth.len()
        );
    }
    let spacing = match &args.sidecar {
        Some(p) => io::read_sidecar(p)?.voxel_spacing,
        None => [1.0, 1.0, 1.0],
    };
    let mut csv = String::from("case,region,dice,ppv,sensitivity,hausdorff95,hausdorff\n");
    for (pred_path, truth_path) in args.pred.iter().zip(&args.truth) {
        let pred = io::read_labels(pred_path)?;
        let truth = io::read_labels(truth_path)?;
        let rows = metrics::evaluate(&pred, &truth, spacing)?;
        let case = pred_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for r in rows {
            let h = |o: Option<f64>| o.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into());
            csv.push_str(&format!(
                "{case},{},{:.4},{:.4},{:.4},{},{}\n",
                r.region,
                r.dice,
                r.ppv,
                r.sensitivity,
                h(r.hausdorff95),
                h(r.hausdorff),
            ));
        }
    }
    match &args.out {
        Some(p) => {
            fs::write(p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_params(args: ParamsArgs) -> Result<()> {
    let mut cfg = if args.paper_scale {
        NetworkConfig::paper_scale()
    } else {
        NetworkConfig::default()
    };
    if let Some(b) = args.base_channels {
        cfg.base_channels = b;
    }
    if let Some(d) = args.depth {
        cfg.depth = d;
    }
    cfg.attention = args.attention.into();

    let plain = NetworkConfig { attention: AttentionKind::None, ..cfg.clone() };
    let mc1 = OmNet::build_single(&plain, 0)?;
    let mc_total: usize = (0..3)
        .map(|t| OmNet::build_single(&plain, t).map(|m| m.count_parameters()))
        .sum::<omnet_core::Result<usize>>()?;
    let omnet = OmNet::build(&cfg)?;

    println!("configuration: base_channels={}, depth={}, attention={:?}", cfg.base_channels, cfg.depth, cfg.attention);
    println!("MC1 (single network)        {:>10}", mc1.count_parameters());
    println!("MC3 (three-network cascade) {:>10}", mc_total);
    println!(
        "MC3 of identical networks   {:>10}  (= 3 x MC1: {})",
        3 * mc1.count_parameters(),
        3 * mc1.count_parameters()
    );
    println!("multi-task network          {:>10}", omnet.count_parameters());
    let plain_net = OmNet::build(&plain)?;
    println!(
        "  plain variant: MC1 + extra heads = {} + {} + {} = {}",
        mc1.count_parameters(),
        plain_net.count_head_parameters(1),
        plain_net.count_head_parameters(2),
        mc1.count_parameters()
            + plain_net.count_head_parameters(1)
            + plain_net.count_head_parameters(2)
    );
    Ok(())
}

fn run_dump_features(args: DumpFeaturesArgs, deterministic: bool) -> Result<()> {
    let model = io::load_model(&args.model)?;
    let (volume, _) = load_case(&args.volume)?;
    let volume = normalize(&volume)?;
    let plan = TilePlan::new(volume.dims(), model.config.input_patch, [20, 20, 5])?;
    let features = overlap_tile_features(&model, &volume, &plan)?;
    fs::create_dir_all(&args.out)?;
    let vd = features.as_volume().map_err(anyhow::Error::from)?;
    let voxels = vd.voxels();
    for c in 0..vd.channels {
        let plane = features.data()[voxels * c..voxels * (c + 1)].to_vec();
        let t = omnet_core::tensor::Tensor::new(
            &[vd.spatial[0], vd.spatial[1], vd.spatial[2], 1],
            plane,
        )
        .map_err(anyhow::Error::from)?;
        io::write_volume(&args.out.join(format!("channel{c:02}.omv")), &t)?;
    }

    // channel importance from the first task's predictions over the volume
    let mut importance = serde_json::json!({});
    if model.heads.len() == 3 {
        let probs = overlap_tile_predict(&model, &volume, &plan)?;
        use omnet_core::tensor::Graph;
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let p = g.input(probs[0].clone());
        let (pt, pn) = omnet_core::attention::category_marginals(&mut g, p, &[2, 3, 4])
            .map_err(anyhow::Error::from)?;
        // features are signed here (post residual relu they are non-negative,
        // but guard against a dead map anyway)
        match omnet_core::attention::csci(&mut g, f, pt, pn) {
            Ok(imp) => {
                importance = serde_json::json!({
                    "tumor": g.value(imp.focus).data(),
                    "non_tumor": g.value(imp.rest).data(),
                });
            }
            Err(e) => {
                importance = serde_json::json!({ "error": e.to_string() });
            }
        }
    }
    fs::write(
        args.out.join("channels.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "channels": vd.channels,
            "dims": vd.spatial,
            "importance": importance,
        }))?,
    )?;
    write_manifest(
        &args.out,
        "dump-features",
        deterministic,
        serde_json::json!({ "model": args.model, "volume": args.volume }),
    )?;
    println!("wrote {} channel volumes to {}", vd.channels, args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::Phantom(args) => run_phantom(args, cli.deterministic),
        Command::Train(args) => run_train(args, cli.deterministic),
        Command::Infer(args) => run_infer(args, cli.deterministic),
        Command::Postprocess(args) => run_postprocess(args, cli.deterministic),
        Command::Eval(args) => run_eval(args),
        Command::Params(args) => run_params(args),
        Command::DumpFeatures(args) => run_dump_features(args, cli.deterministic),
    }
}
