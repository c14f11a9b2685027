//! Command-line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmmscope_core::dataset::{
    generate_synthetic, kmeans_cluster, load_clustering, load_dataset, save_clustering, save_dataset, Clustering,
    Dataset,
};
use gmmscope_core::density::{
    default_extent, density_1d, density_2d, pcp_image, save_grid, time_histogram, GridFormat, ToneMapParams,
};
use gmmscope_core::fitting::FitConfig;
use gmmscope_core::interaction::{build_transfer_matrix, Brush, DoiVector};
use gmmscope_core::metrics::error_report;
use gmmscope_core::render::{auto_gamma, splat_frame, write_image, Camera, ImageFormat, SplatOptions, TfLut, TransferFunction};
use gmmscope_core::summary::{build_summary, load_summary, save_summary, skip_pairs, summary_stats, Summary};

use crate::state::{load_series, save_series, AppState};

#[derive(Debug, Parser)]
#[command(name = "gmmscope", version, about = "Build, inspect and visualize GMM summaries of clustered point data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a summary file from a dataset manifest and cluster labels.
    Build(BuildArgs),
    /// Write the synthetic benchmark dataset (manifest, columns, labels).
    Synthetic {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the one-line summary report.
    Stats {
        summary: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Per-cluster, per-dimension Wasserstein errors as CSV.
    Errors {
        summary: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Splat the position mixtures into an image.
    Render(RenderArgs),
    /// Export a density grid, PCP panels or a time histogram.
    Plot(PlotArgs),
    /// Build a time series of summaries plus transfer matrices.
    Series(SeriesArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Dataset manifest (`manifest.json`).
    #[arg(long)]
    pub data: PathBuf,
    /// Label file (`.u32` little-endian or JSON array).
    #[arg(long, conflicts_with = "kmeans", required_unless_present = "kmeans")]
    pub clusters: Option<PathBuf>,
    /// Cluster the positions with k-means instead of reading labels.
    #[arg(long)]
    pub kmeans: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = FitConfig::default().max_components)]
    pub max_components: usize,
    #[arg(long, default_value_t = FitConfig::default().subsample_size)]
    pub subsample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fit only 1D models and vector triples.
    #[arg(long)]
    pub skip_pairs: bool,
    /// Store per-cluster outlier rankings.
    #[arg(long)]
    pub outliers: bool,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_components: self.max_components,
            subsample_size: self.subsample,
            seed: self.seed,
            rank_outliers: self.outliers,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub summary: PathBuf,
    /// Output image; `.png` selects PNG, anything else PPM.
    #[arg(long)]
    pub out: PathBuf,
    /// Camera JSON; defaults to a framing of the whole summary.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Transfer function JSON; defaults to a gray ramp over the color dimension.
    #[arg(long)]
    pub tf: Option<PathBuf>,
    /// Tone-mapping gamma; defaults to a value derived from the summary.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1920)]
    pub width: usize,
    #[arg(long, default_value_t = 1080)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub color_dim: usize,
    /// Brushes as `dim:a:b`, combined with AND.
    #[arg(long = "brush")]
    pub brushes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Density1d,
    Density2d,
    Pcp,
    Timehist,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub kind: PlotKind,
    /// Summary file, or a series directory for `timehist`.
    pub input: PathBuf,
    /// Dimensions: one for density1d/timehist, two for density2d, at least
    /// two PCP axes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub width: usize,
    #[arg(long, default_value_t = 200)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: PlotFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Json,
    Raw,
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    /// `MANIFEST LABELS` for each frame in order.
    #[arg(long = "frame", num_args = 2, value_names = ["MANIFEST", "LABELS"], required = true)]
    pub frames: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, conflicts_with = "series", required_unless_present = "series")]
    pub summary: Option<PathBuf>,
    /// Directory written by `series`.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Raw dataset of the first frame, enabling LOD substitution.
    #[arg(long, requires = "clusters")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub clusters: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Build(args) => build(args),
        Command::Synthetic { seed, out } => synthetic(seed, &out),
        Command::Stats { summary, json } => {
            let s = load_summary(&summary)?;
            let stats = summary_stats(&s)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                println!("{stats}");
            }
            Ok(())
        }
        Command::Errors { summary, json, out } => {
            let report = error_report(&load_summary(&summary)?);
            let text = if json {
                serde_json::to_string_pretty(&report)?
            } else {
                report.to_csv()
            };
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Render(args) => render(args),
        Command::Plot(args) => plot(args),
        Command::Series(args) => series(args),
        Command::Serve(args) => serve(args),
    }
}

fn load_labeled(data: &Path, clusters: Option<&Path>, kmeans: Option<usize>, seed: u64) -> anyhow::Result<(Dataset, Clustering)> {
    let ds = load_dataset(data)?;
    let cl = match (clusters, kmeans) {
        (Some(p), _) => load_clustering(p, &ds)?,
        (None, Some(k)) => kmeans_cluster(&ds, k, &ds.position_dims(), seed)?,
        (None, None) => bail!("either --clusters or --kmeans is required"),
    };
    Ok((ds, cl))
}

fn build_one(ds: &Dataset, cl: &Clustering, fit: &FitArgs, provenance: String) -> anyhow::Result<Summary> {
    let config = fit.config();
    let filter: Option<gmmscope_core::summary::SubsetFilter<'_>> =
        if fit.skip_pairs { Some(&skip_pairs) } else { None };
    let mut summary = build_summary(ds, cl, &config, filter)?;
    summary.provenance = provenance;
    Ok(summary)
}

fn build(args: BuildArgs) -> anyhow::Result<()> {
    let (ds, cl) = load_labeled(&args.data, args.clusters.as_deref(), args.kmeans, args.fit.seed)?;
    let labels = match (&args.clusters, args.kmeans) {
        (Some(p), _) => p.display().to_string(),
        (None, Some(k)) => format!("kmeans k={k}"),
        _ => unreachable!("checked by load_labeled"),
    };
    let provenance = format!("data={} labels={} seed={}", args.data.display(), labels, args.fit.seed);
    let summary = build_one(&ds, &cl, &args.fit, provenance)?;
    save_summary(&summary, &args.out)?;
    println!("{}", summary_stats(&summary)?);
    Ok(())
}

fn synthetic(seed: u64, out: &Path) -> anyhow::Result<()> {
    let (ds, cl) = generate_synthetic(seed);
    let manifest = save_dataset(&ds, out)?;
    let labels = out.join("labels.u32");
    save_clustering(&cl, &labels)?;
    println!("{}", manifest.display());
    println!("{}", labels.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_brush(s: &str) -> anyhow::Result<Brush> {
    let parts: Vec<&str> = s.split(':').collect();
    let [d, a, b] = parts[..] else {
        bail!("brush `{s}` must look like dim:a:b");
    };
    Ok(Brush::new(d.parse()?, a.parse()?, b.parse()?)?)
}

fn brush_doi_all(summary: &Summary, specs: &[String]) -> anyhow::Result<Option<DoiVector>> {
    if specs.is_empty() {
        return Ok(None);
    }
    let brushes = specs
        .iter()
        .map(|s| {
            parse_brush(s).map(|brush| crate::state::ActiveBrush {
                brush,
                mode: gmmscope_core::interaction::CombineMode::And,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Some(crate::state::evaluate_brushes(summary, &brushes)?))
}

fn render(args: RenderArgs) -> anyhow::Result<()> {
    let summary = load_summary(&args.summary)?;
    let camera = match &args.camera {
        Some(p) => read_json::<Camera>(p)?,
        None => Camera::framing(&summary, args.width, args.height),
    };
    summary.check_dim(args.color_dim)?;
    let tf = match &args.tf {
        Some(p) => TransferFunction::new(read_json::<TransferFunction>(p)?.points)?,
        None if summary.clusters.is_empty() => TransferFunction::ramp(0.0, 1.0),
        None => {
            let (lo, hi) = default_extent(&summary, args.color_dim)?;
            TransferFunction::ramp(lo, hi)
        }
    };
    let lut = TfLut::for_dimension(&tf, &summary, args.color_dim, (64, 64))?;
    let doi = brush_doi_all(&summary, &args.brushes)?;
    let frame = splat_frame(
        &summary,
        &camera,
        &lut,
        args.color_dim,
        doi.as_ref(),
        ToneMapParams::new(args.gamma.unwrap_or_else(|| auto_gamma(&summary)))?,
        &SplatOptions::default(),
    )?;
    write_image(&frame, &args.out, ImageFormat::from_path(&args.out))?;
    if frame.lut_clamped > 0 {
        eprintln!("warning: {} component colors fell outside the TF table", frame.lut_clamped);
    }
    Ok(())
}

fn plot(args: PlotArgs) -> anyhow::Result<()> {
    let format = match args.format {
        PlotFormat::Json => GridFormat::Json,
        PlotFormat::Raw => GridFormat::Raw,
    };
    let dims = &args.dims;
    match args.kind {
        PlotKind::Density1d => {
            let [d] = dims[..] else { bail!("density1d takes one dimension") };
            let s = load_summary(&args.input)?;
            let grid = density_1d((&s).into(), d, default_extent(&s, d)?, args.width, None)?;
            save_grid(&grid, &args.out, format)?;
        }
        PlotKind::Density2d => {
            let [i, j] = dims[..] else { bail!("density2d takes two dimensions") };
            let s = load_summary(&args.input)?;
            let extent = (default_extent(&s, i)?, default_extent(&s, j)?);
            let grid = density_2d((&s).into(), (i, j), extent, (args.width, args.height), None)?;
            save_grid(&grid, &args.out, format)?;
        }
        PlotKind::Pcp => {
            let s = load_summary(&args.input)?;
            let img = pcp_image(&s, dims, None, (args.width, args.height), None)?;
            if format == GridFormat::Raw {
                bail!("pcp export supports json only");
            }
            std::fs::write(&args.out, serde_json::to_vec(&img)?)?;
        }
        PlotKind::Timehist => {
            let [d] = dims[..] else { bail!("timehist takes one dimension") };
            let summaries = if args.input.is_dir() {
                load_series(&args.input)?.0
            } else {
                vec![load_summary(&args.input)?]
            };
            let refs: Vec<&Summary> = summaries.iter().collect();
            let hist = time_histogram(&refs, d, args.width, None, None)?;
            if format == GridFormat::Raw {
                bail!("timehist export supports json only");
            }
            std::fs::write(&args.out, serde_json::to_vec(&hist)?)?;
        }
    }
    Ok(())
}

fn series(args: SeriesArgs) -> anyhow::Result<()> {
    let mut frames = Vec::new();
    for (t, pair) in args.frames.chunks(2).enumerate() {
        let (ds, cl) = load_labeled(&pair[0], Some(&pair[1]), None, args.fit.seed)?;
        let provenance = format!("frame={t} data={} labels={}", pair[0].display(), pair[1].display());
        let summary = build_one(&ds, &cl, &args.fit, provenance)?;
        eprintln!("frame {t}: {}", summary_stats(&summary)?);
        frames.push((summary, cl));
    }
    let transfers = frames
        .windows(2)
        .map(|w| build_transfer_matrix(&w[0].1, &w[1].1))
        .collect::<Result<Vec<_>, _>>()?;
    let summaries: Vec<Summary> = frames.into_iter().map(|f| f.0).collect();
    let manifest = save_series(&args.out, &summaries, &transfers)?;
    println!("{}", manifest.display());
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let state = match (&args.summary, &args.series) {
        (Some(p), _) => AppState::single(load_summary(p)?),
        (None, Some(dir)) => {
            let (summaries, transfers) = load_series(dir)?;
            AppState::series(summaries, transfers)?
        }
        (None, None) => bail!("either --summary or --series is required"),
    };
    let state = match (&args.data, &args.clusters) {
        (Some(d), Some(c)) => {
            let (ds, cl) = load_labeled(d, Some(c), None, 0)?;
            state.with_raw(ds, cl)?
        }
        _ => state,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::api::serve(Arc::new(state), &args.addr))?;
    Ok(())
}
