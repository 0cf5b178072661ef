//! `mbptrack` command line: data generation, training, tracking,
//! evaluation and plotting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plotters::prelude::*;

use mbptrack::checkpoint;
use mbptrack::config::{resolve_path, RunConfig};
use mbptrack::data::{
    generate_sequence, load_dataset, load_kitti_tracklet, load_sequence, save_sequence, Sequence,
    SynthConfig, Template,
};
use mbptrack::eval::{
    aggregate, ope_run_boxes, precision_curve, read_curve, success_curve, write_curve,
    DistanceMode, ModelTracker, OpeOptions, OpeTracker, ReplayTracker,
};
use mbptrack::model::Model;
use mbptrack::tracker::track_sequence;
use mbptrack::train::{loss_log_csv, train_with};

/// Environment variable giving the root for relative data paths.
const DATA_ROOT_ENV: &str = "MBPTRACK_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "mbptrack",
    version,
    about = "Memory-based 3D single-object tracking"
)]
struct Cli {
    /// Fixes all randomness; overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root that relative data paths are resolved against.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic sequences to a dataset directory.
    GenerateData(GenerateArgs),
    /// Trains a model and writes a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Tracks one sequence and writes its trajectory.
    Track(TrackArgs),
    /// Scores a checkpoint (or the ground-truth oracle) on a dataset.
    Eval(EvalArgs),
    /// Renders Success and Precision curves to SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator settings (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    length: usize,
    /// Templates cycled across sequences, e.g. `car,pedestrian`.
    #[arg(long, value_delimiter = ',')]
    templates: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; falls back to `train_data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory as written by `generate-data`.
    #[arg(long, conflicts_with = "kitti_velodyne")]
    sequence: Option<PathBuf>,
    #[arg(long, requires_all = ["kitti_label", "kitti_calib", "track_id"])]
    kitti_velodyne: Option<PathBuf>,
    #[arg(long)]
    kitti_label: Option<PathBuf>,
    #[arg(long)]
    kitti_calib: Option<PathBuf>,
    #[arg(long)]
    track_id: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Replay the ground truth instead of running a model.
    #[arg(long)]
    oracle: bool,
    /// Dataset directory; falls back to `eval_data` in the checkpoint config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory receiving the table, the delimited results and the curves.
    #[arg(long)]
    out: PathBuf,
    /// Drop frames beyond 2 m instead of clipping them.
    #[arg(long)]
    drop_far: bool,
    /// Integrate over a threshold grid of this spacing instead of the exact area.
    #[arg(long)]
    threshold_step: Option<f64>,
    /// Memory size used while tracking; defaults to the config's.
    #[arg(long)]
    memory: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding `success_curve.csv` and `precision_curve.csv`.
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::GenerateData(a) => generate(a, cli.seed, root),
        Command::Train(a) => train_cmd(a, cli.seed, root),
        Command::Track(a) => track_cmd(a, cli.seed, root),
        Command::Eval(a) => eval_cmd(a, cli.seed, root),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn parse_template(s: &str) -> Result<Template> {
    match s.trim().to_ascii_lowercase().as_str() {
        "car" => Ok(Template::Car),
        "pedestrian" => Ok(Template::Pedestrian),
        other => bail!("unknown template {other:?} (expected car or pedestrian)"),
    }
}

fn generate(a: GenerateArgs, seed: Option<u64>, root: Option<&Path>) -> Result<()> {
    let base = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let templates = a
        .templates
        .iter()
        .map(|t| parse_template(t))
        .collect::<Result<Vec<_>>>()?;
    let out = resolve_path(&a.out, root);
    let first = seed.unwrap_or(base.seed);
    for i in 0..a.count {
        let cfg = SynthConfig {
            seed: first + i as u64,
            template: templates
                .get(i % templates.len().max(1))
                .copied()
                .unwrap_or(base.template),
            ..base.clone()
        };
        let seq = generate_sequence(&cfg, a.length)?;
        save_sequence(&out.join(format!("{i:04}")), &seq)?;
    }
    println!("wrote {} sequences to {}", a.count, out.display());
    Ok(())
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dataset_path(
    arg: Option<PathBuf>,
    fallback: Option<&PathBuf>,
    root: Option<&Path>,
    what: &str,
) -> Result<PathBuf> {
    let p = arg
        .or_else(|| fallback.cloned())
        .with_context(|| format!("no {what} dataset: pass --data or set it in the config"))?;
    Ok(resolve_path(&p, root))
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, root: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(&a.config, seed)?;
    let data = dataset_path(a.data, cfg.train_data.as_ref(), root, "training")?;
    let seqs = load_dataset(&data)?;
    if seqs.is_empty() {
        bail!("{}: no sequences found", data.display());
    }
    let mut model = Model::seeded(cfg.model_config(), cfg.seed)?;
    let log = train_with(&mut model, &seqs, &cfg.train_config(), |e, _| {
        println!("epoch {:>3}  loss {:.5}", e.epoch, e.loss.total);
    })?;
    checkpoint::save(&a.out, &cfg, &model)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    fs::write(&log_path, loss_log_csv(&log))
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "checkpoint {} ({} parameters)",
        a.out.display(),
        model.params.numel()
    );
    Ok(())
}

fn track_cmd(a: TrackArgs, seed: Option<u64>, root: Option<&Path>) -> Result<()> {
    let (mut cfg, model) = checkpoint::load(&a.checkpoint)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seq: Sequence = match (&a.sequence, &a.kitti_velodyne) {
        (Some(dir), None) => load_sequence(&resolve_path(dir, root))?,
        (None, Some(velo)) => load_kitti_tracklet(
            &resolve_path(velo, root),
            &resolve_path(a.kitti_label.as_ref().expect("required by clap"), root),
            &resolve_path(a.kitti_calib.as_ref().expect("required by clap"), root),
            a.track_id.expect("required by clap"),
        )?,
        _ => bail!("pass either --sequence or the --kitti-* inputs"),
    };
    let traj = track_sequence(&model, &cfg.tracker_config(), &seq.frames, seq.gt_boxes[0])?;
    traj.save(&a.out)?;
    println!(
        "tracked {} frames of {} into {}",
        traj.len(),
        seq.id,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs, seed: Option<u64>, root: Option<&Path>) -> Result<()> {
    let loaded = match &a.checkpoint {
        Some(p) if !a.oracle => Some(checkpoint::load(p)?),
        _ => None,
    };
    let fallback = loaded.as_ref().and_then(|(c, _)| c.eval_data.clone());
    let data = dataset_path(a.data, fallback.as_ref(), root, "evaluation")?;
    let seqs = load_dataset(&data)?;
    if seqs.is_empty() {
        bail!("{}: no sequences found", data.display());
    }
    let opts = OpeOptions {
        include_first_frame: false,
        distance_mode: if a.drop_far {
            DistanceMode::Drop
        } else {
            DistanceMode::Clip
        },
        threshold_step: a.threshold_step,
    };
    let mut results = Vec::with_capacity(seqs.len());
    let mut ious = Vec::new();
    let mut dists = Vec::new();
    for seq in &seqs {
        let mut tracker: Box<dyn OpeTracker + '_> = match &loaded {
            None => Box::new(ReplayTracker::new(seq.gt_boxes.clone())),
            Some((cfg, model)) => {
                let mut tc = cfg.tracker_config();
                if let Some(s) = seed {
                    tc.seed = s;
                }
                if let Some(m) = a.memory {
                    tc.memory_size = m;
                }
                Box::new(ModelTracker::new(model, tc))
            }
        };
        let (r, _) = ope_run_boxes(tracker.as_mut(), seq, &opts)?;
        ious.extend_from_slice(&r.ious);
        dists.extend_from_slice(&r.distances);
        results.push((seq.category.clone(), r));
    }
    let agg = aggregate(&results)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let table = agg.to_table();
    fs::write(a.out.join("results.txt"), &table)?;
    fs::write(a.out.join("results.csv"), agg.to_csv())?;
    write_curve(
        &a.out.join("success_curve.csv"),
        &success_curve(&ious, 0.01)?,
    )?;
    write_curve(
        &a.out.join("precision_curve.csv"),
        &precision_curve(&dists, 0.02, opts.distance_mode)?,
    )?;
    print!("{table}");
    Ok(())
}

fn plot_curve(
    points: &[(f64, f64)],
    x_max: f64,
    x_label: &str,
    title: &str,
    out: &Path,
) -> Result<()> {
    let root = SVGBackend::new(out, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("fraction of frames")
        .draw()?;
    chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
    root.present()?;
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let success = read_curve(&a.curves.join("success_curve.csv"))?;
    let precision = read_curve(&a.curves.join("precision_curve.csv"))?;
    plot_curve(
        &success,
        1.0,
        "IoU threshold",
        "Success",
        &a.out.join("success.svg"),
    )?;
    plot_curve(
        &precision,
        2.0,
        "center distance threshold (m)",
        "Precision",
        &a.out.join("precision.svg"),
    )?;
    println!(
        "wrote {} and {}",
        a.out.join("success.svg").display(),
        a.out.join("precision.svg").display()
    );
    Ok(())
}
