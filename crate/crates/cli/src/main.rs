use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use collab_robust::corrupt::CorruptionSuite;
use collab_robust::encode::GridSpec;
use collab_robust::eval::{ap_bar_chart_svg, RobustnessReport};
use collab_robust::io::{generate_frame, DatasetManifest, Frame, SynthSpec};
use collab_robust::pipeline::{run_manifest, Detector, PipelineOptions, ReconSource};
use collab_robust::teacher::make_teacher;
use collab_robust::{Agent, Scene};

#[derive(Parser)]
#[command(name = "collab-robust", version, about = "Corruption robustness toolkit for collaborative LiDAR perception")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ray-cast synthetic scenes.
    Gen(GenArgs),
    /// Apply a corruption suite and write one dataset per corruption.
    Corrupt(CorruptArgs),
    /// Write painted teacher clouds.
    Teacher(TeacherArgs),
    /// Compute the distillation and reconstruction loss table.
    Losses(LossArgs),
    /// Evaluate AP, CE and mCE.
    Eval(EvalArgs),
    /// Merge evaluation reports and draw the AP chart.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    #[arg(long, default_value_t = 16)]
    objects: usize,
    #[arg(long, default_value_t = 32)]
    beams: usize,
    #[arg(long, default_value_t = 360)]
    points_per_beam: usize,
    /// Objects are scattered within this distance of the scene center.
    #[arg(long, default_value_t = 55.0)]
    object_radius: f64,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// Corruption suite (TOML). Defaults to the six standard corruptions.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Evaluate the clean condition only.
    #[arg(long, conflicts_with = "suite")]
    no_corruption: bool,
    /// Root seed for the default suite and the head weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SuiteArgs {
    fn load(&self) -> Result<CorruptionSuite> {
        if self.no_corruption {
            return Ok(CorruptionSuite::default());
        }
        match &self.suite {
            Some(p) => Ok(CorruptionSuite::load(p)?),
            None => Ok(CorruptionSuite::standard(self.seed)),
        }
    }
}

#[derive(Args)]
struct GridArgs {
    /// Communication range in meters.
    #[arg(long, default_value_t = 70.0)]
    range: f64,
    /// BEV cell size in meters.
    #[arg(long, default_value_t = 0.4)]
    voxel: f64,
}

#[derive(Args)]
struct CorruptArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 70.0)]
    range: f64,
}

#[derive(Args)]
struct LossArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Use the student inputs as teacher inputs.
    #[arg(long)]
    no_teacher: bool,
    #[arg(long, value_enum, default_value = "dense")]
    recon_target: ReconKind,
    /// Detection loss value reported in the total.
    #[arg(long, default_value_t = 0.0)]
    detect_loss: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorKind {
    Oracle,
    Head,
    External,
}

/// Cloud the reconstruction target is built from.
#[derive(Clone, Copy, ValueEnum)]
enum ReconKind {
    /// The clean multi-view scene.
    Dense,
    /// The (possibly corrupted) student inputs.
    Sparse,
}

impl From<ReconKind> for ReconSource {
    fn from(k: ReconKind) -> Self {
        match k {
            ReconKind::Dense => ReconSource::Dense,
            ReconKind::Sparse => ReconSource::Sparse,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// IoU thresholds for AP.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
    iou: Vec<f64>,
    #[arg(long, default_value_t = 0.15)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, value_enum, default_value = "oracle")]
    detector: DetectorKind,
    /// Directory of `<condition>/<frame_id>.json` prediction files.
    #[arg(long, required_if_eq("detector", "external"))]
    predictions: Option<PathBuf>,
    /// Oracle point count at which the score reaches 0.5.
    #[arg(long, default_value_t = 30.0)]
    oracle_half_count: f64,
    #[arg(long, value_enum, default_value = "dense")]
    recon_target: ReconKind,
    /// Also compute and write the loss table.
    #[arg(long)]
    losses: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by `eval`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn grid_for(voxel: f64) -> Result<GridSpec> {
    Ok(GridSpec::new((-70.4, 70.4), (-40.0, 40.0), voxel)
        .context("--voxel must divide the 140.8 × 80 m grid")?
        .with_z_ref(-1.0))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_frames(manifest: &DatasetManifest) -> Result<Vec<Frame>> {
    let frames: Vec<_> = (0..manifest.frames.len())
        .into_par_iter()
        .map(|i| manifest.load_frame(i))
        .collect();
    Ok(frames.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn gen(args: &GenArgs) -> Result<()> {
    let spec = SynthSpec {
        n_agents: args.agents,
        n_objects: args.objects,
        points_per_beam: args.points_per_beam,
        n_beams: args.beams,
        seed: args.seed,
        object_radius: args.object_radius,
        ..SynthSpec::default()
    };
    let frames: Vec<_> = (0..args.frames as u64)
        .into_par_iter()
        .map(|f| generate_frame(&spec, f))
        .collect();
    let frames = frames.into_iter().collect::<Result<Vec<_>, _>>()?;
    DatasetManifest::write(&args.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), args.out.join("manifest.toml").display());
    Ok(())
}

fn corrupt(args: &CorruptArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data.manifest)?;
    let suite = args.suite.load()?;
    suite.validate()?;
    let frames = load_frames(&manifest)?;
    for config in &suite.corruptions {
        let label = config.label();
        let corrupted: Vec<_> = frames
            .par_iter()
            .map(|fr| {
                let scene = fr.scene.map_clouds(|id, agent| {
                    let n_beams = fr.n_beams.get(&id).copied().unwrap_or(0);
                    config.apply(&agent.cloud, n_beams, fr.frame_id, id.0)
                });
                scene
                    .map(|scene| Frame { scene, ..fr.clone() })
                    .map_err(|e| anyhow::anyhow!("frame {}: {e}", fr.frame_id))
            })
            .collect();
        let corrupted = corrupted.into_iter().collect::<Result<Vec<_>>>()?;
        let dir = args.data.out.join(&label);
        DatasetManifest::write(&dir, &corrupted)?;
        println!("{label}: {}", dir.join("manifest.toml").display());
    }
    write_text(&args.data.out.join("suite.toml"), &suite.to_toml_string())
}

fn teacher(args: &TeacherArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data.manifest)?;
    let frames = load_frames(&manifest)?;
    let teachers: Vec<_> = frames
        .par_iter()
        .map(|fr| -> Result<Frame> {
            let gated = fr.scene.gate_by_range(args.range);
            let clouds = make_teacher(&gated).with_context(|| format!("frame {}", fr.frame_id))?;
            let agents = clouds
                .into_iter()
                .map(|(id, cloud)| (id, Agent { pose: gated.agents()[&id].pose, cloud }))
                .collect();
            Ok(Frame {
                frame_id: fr.frame_id,
                scene: Scene::new(gated.ego_id(), agents, gated.gt_boxes().to_vec())?,
                n_beams: fr.n_beams.clone(),
            })
        })
        .collect();
    let teachers = teachers.into_iter().collect::<Result<Vec<_>>>()?;
    DatasetManifest::write(&args.data.out, &teachers)?;
    println!("wrote teacher clouds to {}", args.data.out.join("manifest.toml").display());
    Ok(())
}

fn losses(args: &LossArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data.manifest)?;
    let suite = args.suite.load()?;
    let opts = PipelineOptions {
        seed: args.suite.seed,
        range: args.grid.range,
        grid: grid_for(args.grid.voxel)?,
        teacher: !args.no_teacher,
        recon_source: args.recon_target.into(),
        detect_loss: args.detect_loss,
        ..PipelineOptions::default()
    };
    let out = run_manifest(&manifest, &suite, &opts)?;
    let path = args.data.out.join("losses.json");
    write_text(&path, &out.losses.to_json())?;
    for (cond, m) in out.losses.means() {
        println!(
            "{cond:<14} L_d={:.4} L_h={:.4} L_p={:.4} L_kd={:.4} L_rec={}",
            m.l_d,
            m.l_h,
            m.l_p,
            m.l_kd,
            m.l_rec.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn write_report(dir: &Path, report: &RobustnessReport) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_text(&dir.join("report.json"), &json)?;
    write_text(&dir.join("ap_chart.svg"), &ap_bar_chart_svg(report))
}

fn print_report(report: &RobustnessReport) {
    for (t, thr) in report.iou_thresholds.iter().enumerate() {
        println!("AP@{thr}: clean {:.4}", report.ap_clean[t]);
        for (name, ce) in report.ranked_by_ce(t) {
            println!("  {name:<14} AP {:.4}  CE {ce:.4}", report.ap_per_corruption[&name][t]);
        }
        if let Some(mce) = &report.mce {
            println!("  mCE {:.4}", mce[t]);
        }
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data.manifest)?;
    let suite = args.suite.load()?;
    let detector = match args.detector {
        DetectorKind::Oracle => Detector::Oracle { half_count: args.oracle_half_count },
        DetectorKind::Head => Detector::Head { max_candidates: 100 },
        DetectorKind::External => match &args.predictions {
            Some(dir) => Detector::External { dir: dir.clone() },
            None => bail!("--predictions is required with --detector external"),
        },
    };
    let opts = PipelineOptions {
        seed: args.suite.seed,
        range: args.grid.range,
        grid: grid_for(args.grid.voxel)?,
        iou_thresholds: args.iou.clone(),
        nms_iou: args.nms_iou,
        conf: args.conf,
        compute_losses: args.losses,
        recon_source: args.recon_target.into(),
        detector,
        ..PipelineOptions::default()
    };
    let out = run_manifest(&manifest, &suite, &opts)?;
    write_report(&args.data.out, &out.report)?;
    if args.losses {
        write_text(&args.data.out.join("losses.json"), &out.losses.to_json())?;
    }
    print_report(&out.report);
    println!("wrote {}", args.data.out.join("report.json").display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(|p| -> Result<RobustnessReport> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = RobustnessReport::merge(&reports)?;
    write_report(&args.out, &merged)?;
    print_report(&merged);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Teacher(a) => teacher(a),
        Command::Losses(a) => losses(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}
