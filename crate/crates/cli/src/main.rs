use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcpx_core::config::PipelineConfig;
use gcpx_core::pipeline::{
    cmd_eval, cmd_run, cmd_sweep, cmd_synth, cmd_tile, DetectionSource, PipelineError, RunOptions, RunSummary, Stage,
    SurveyPreset, SynthOptions, CONFIG_FILE,
};

#[derive(Parser)]
#[command(name = "gcpx", version, about = "Locate, filter and rank ground control points in tiled UAV imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic survey with exact ground truth.
    Synth(SynthArgs),
    /// Cut survey rasters into tiles and record the grid in the survey index.
    Tile(TileArgs),
    /// Full pipeline: locate, dedupe, threshold, group, rank, select, report.
    Run(RunArgs),
    /// Precision / loss-ratio sweep over confidence thresholds.
    Sweep(RunArgs),
    /// Error, altitude-band and ranking reports against scene truth.
    Eval(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Redundant,
    Ladder,
}

#[derive(Args)]
struct SynthArgs {
    /// Output survey directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "redundant")]
    preset: Preset,
    /// Ladder altitudes in metres.
    #[arg(long, value_delimiter = ',', default_values_t = [70.0, 90.0, 110.0, 130.0, 150.0, 170.0, 190.0, 210.0])]
    altitudes: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    markers_per_site: u32,
    /// Re-render a flight plan written by an earlier `synth`.
    #[arg(long, conflicts_with = "preset")]
    flightplan: Option<PathBuf>,
    /// Write truth, index and flight plan but no rasters.
    #[arg(long)]
    truth_only: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    survey: PathBuf,
    /// Directory receiving `{image}_r{i}_c{j}.png` tiles.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    survey: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Detection interchange file.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    detections: Option<PathBuf>,
    /// Synthesise detections from scene truth.
    #[arg(long)]
    oracle: bool,
    /// Marker association file (`image_id,marker_id,x,y`).
    #[arg(long)]
    associations: Option<PathBuf>,
    /// Plain report names, without the run timestamp.
    #[arg(long)]
    no_timestamps: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults to `config.toml` in the survey directory if present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile_w: Option<u32>,
    #[arg(long)]
    tile_h: Option<u32>,
    #[arg(long)]
    overlap_x: Option<u32>,
    #[arg(long)]
    overlap_y: Option<u32>,
    #[arg(long)]
    pad_fill: Option<u8>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    top_k_report: Option<Vec<usize>>,
    #[arg(long)]
    dedupe_radius: Option<f64>,
    #[arg(long)]
    match_epsilon: Option<f64>,
    /// Match candidates to truth regardless of class.
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    association_radius: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    band_edges: Option<Vec<f64>>,
    #[arg(long)]
    sweep_from: Option<f64>,
    #[arg(long)]
    sweep_to: Option<f64>,
    #[arg(long)]
    sweep_step: Option<f64>,
    /// Oracle vertex noise, px.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Oracle false positives per tile.
    #[arg(long)]
    fp_rate: Option<f64>,
    #[arg(long)]
    miss_rate: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self, survey_dir: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
        let invalid = |e: gcpx_core::config::ConfigError| PipelineError::invalid(Stage::Config, e);
        let fallback = survey_dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists());
        let mut c = match self.config.as_ref().or(fallback.as_ref()) {
            Some(path) => PipelineConfig::load(path).map_err(invalid)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
            c.oracle.rng_seed = v;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {$(
                if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); }
            )*};
        }
        set! {
            tile_w => tiling.tile_w;
            tile_h => tiling.tile_h;
            overlap_x => tiling.overlap_x;
            overlap_y => tiling.overlap_y;
            pad_fill => tiling.pad_fill;
            threshold => threshold;
            sigma => sigma;
            top_k => top_k;
            top_k_report => top_k_report;
            dedupe_radius => dedupe_radius_px;
            match_epsilon => matching.epsilon;
            association_radius => association_radius_px;
            band_edges => band_edges_m;
            sweep_from => sweep.from;
            sweep_to => sweep.to;
            sweep_step => sweep.step;
            noise_sigma => oracle.vertex_noise_sigma;
            fp_rate => oracle.false_positive_rate;
            miss_rate => oracle.miss_rate;
        }
        if self.class_agnostic {
            c.matching.class_aware = false;
        }
        c.validate().map_err(invalid)?;
        Ok(c)
    }
}

fn run_options(args: &RunArgs) -> RunOptions {
    RunOptions {
        survey_dir: args.survey.clone(),
        out_dir: args.out.clone(),
        source: match &args.detections {
            Some(p) => DetectionSource::File(p.clone()),
            None => DetectionSource::Oracle,
        },
        associations: args.associations.clone(),
        timestamps: !args.no_timestamps,
    }
}

fn report(summary: &RunSummary) {
    let r = &summary.result;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    println!(
        "{} detections, {} candidates, {} at or above threshold, {} marker groups",
        r.detections.len(),
        r.candidates.len(),
        r.kept.len(),
        r.groups.len()
    );
    match r.pona {
        Some(p) => println!("PONA of selection: {p:.3}"),
        None => println!("PONA of selection: undefined (nothing selected)"),
    }
    if let Some(s) = &r.error_stats {
        println!(
            "matched {} control points: mean {:.3} px, max {:.3} px, within 2 px {:.1}%, within 3 px {:.1}%",
            s.count,
            s.mean,
            s.max,
            100.0 * s.within[1],
            100.0 * s.within[2]
        );
    }
    for p in &summary.outputs {
        println!("wrote {}", p.display());
    }
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(a) => {
            let config = a.config.resolve(None)?;
            let preset = match (&a.flightplan, a.preset) {
                (Some(p), _) => SurveyPreset::Flightplan(p.clone()),
                (None, Preset::Redundant) => SurveyPreset::Redundant,
                (None, Preset::Ladder) => SurveyPreset::Ladder {
                    altitudes_m: a.altitudes.clone(),
                    markers_per_site: a.markers_per_site,
                },
            };
            let s = cmd_synth(&config, &SynthOptions { preset, truth_only: a.truth_only }, &a.out)?;
            for w in &s.warnings {
                log::warn!("{w}");
            }
            println!("{} images, {} marker observations", s.images, s.observations);
            for p in &s.outputs {
                println!("wrote {}", p.display());
            }
        }
        Command::Tile(a) => {
            let config = a.config.resolve(Some(&a.survey))?;
            let s = cmd_tile(&config, &a.survey, &a.out)?;
            println!("{} images cut into {} tiles in {}", s.images, s.tiles, a.out.display());
        }
        Command::Run(a) => report(&cmd_run(&a.config.resolve(Some(&a.survey))?, &run_options(&a))?),
        Command::Sweep(a) => report(&cmd_sweep(&a.config.resolve(Some(&a.survey))?, &run_options(&a))?),
        Command::Eval(a) => report(&cmd_eval(&a.config.resolve(Some(&a.survey))?, &run_options(&a))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
