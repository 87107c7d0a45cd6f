//! `spn`: command-line front end for residue extraction, matching and
//! correlation-energy decomposition.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use spn_core::darkframe::subtract_dark;
use spn_core::decomposition::{render_csv, ConditionMeans};
use spn_core::fingerprint::batch_match_files;
use spn_core::harness::{decompose_report, execute_run, plan_run, score_box_stats, write_box_stats, ConditionReport, RunRequest};
use spn_core::raster::{load_raw, load_raw_auto, CfaLayout};
use spn_core::simulator::{render_dataset, DatasetManifest, Scenario};
use spn_core::{frame_residue, DarkFrame, DenoiseConfig, Error, FrameResidue, PipelineConfig, ReferenceBuilder, Result, ScoreTable};

#[derive(Parser)]
#[command(name = "spn", version, about = "Sensor pattern noise extraction, matching and energy decomposition")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a scenario file.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract noise residues from raw frames.
    Residue {
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        /// Output directory; one `<stem>.res` per frame.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Denoise config JSON, or a pipeline config with `crop`/`denoise` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full frame instead of the default crop window.
        #[arg(long)]
        no_crop: bool,
        /// Master dark subtracted before extraction.
        #[arg(long)]
        dark: Option<PathBuf>,
        /// CFA layout for frames without a sidecar.
        #[arg(long)]
        layout: Option<CfaLayout>,
        /// Bit depth for frames without a sidecar.
        #[arg(long, default_value_t = 16)]
        bit_depth: u32,
    },
    /// Average residues into a reference pattern.
    BuildRef {
        #[arg(required = true)]
        residues: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate residues against references and write a score table.
    Match {
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(required = true)]
        residues: Vec<PathBuf>,
        /// Score CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per (reference, image set) box statistics of a score table.
    BoxStats {
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the energy decomposition from four condition means.
    Decompose {
        /// lens+dark, pinhole+dark, lens, pinhole.
        #[arg(num_args = 4, value_names = ["LENS_DARK", "PINHOLE_DARK", "LENS", "PINHOLE"], allow_negative_numbers = true, conflicts_with = "means")]
        values: Vec<f64>,
        /// JSON file with the condition means, or a run's condition_means.json.
        #[arg(long)]
        means: Option<PathBuf>,
        /// Write the SNP table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Box statistics of a score CSV, written to OUT.
        #[arg(long, num_args = 2, value_names = ["SCORES", "OUT"])]
        box_stats: Option<Vec<PathBuf>>,
    },
    /// Execute a full run plan.
    Run { plan: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spn: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { scenario, out } => simulate(&scenario, &out),
        Command::Residue { frames, out, config, no_crop, dark, layout, bit_depth } => {
            let mut cfg = load_config(config.as_deref())?;
            if no_crop {
                cfg.crop = None;
            }
            residue(&frames, &out, &cfg, dark.as_deref(), layout, bit_depth)
        }
        Command::BuildRef { residues, out } => build_ref(&residues, &out),
        Command::Match { refs, residues, out } => match_cmd(&refs, &residues, out.as_deref()),
        Command::BoxStats { scores, out } => box_stats(&scores, &out),
        Command::Decompose { values, means, csv, box_stats: bs } => decompose(&values, means.as_deref(), csv.as_deref(), bs.as_deref()),
        Command::Run { plan } => run(&plan),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|_| Error::Ingestion { path: path.to_path_buf() })?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let stage = |e: Error| e.in_stage("config", show(path));
    let value = read_json(path).map_err(stage)?;
    let decode = |e: serde_json::Error| stage(Error::Decode(e.to_string()));
    let is_pipeline = value.get("denoise").is_some() || value.get("crop").is_some();
    let cfg = if is_pipeline {
        serde_json::from_value(value).map_err(decode)?
    } else {
        PipelineConfig {
            denoise: serde_json::from_value::<DenoiseConfig>(value).map_err(decode)?,
            ..PipelineConfig::default()
        }
    };
    cfg.denoise.validate().map_err(stage)?;
    Ok(cfg)
}

fn simulate(scenario: &Path, out: &Path) -> Result<()> {
    let s = Scenario::read(scenario).map_err(|e| e.in_stage("simulate", show(scenario)))?;
    let manifest = render_dataset(&s, out).map_err(|e| e.in_stage("simulate", show(out)))?;
    println!(
        "rendered {} frames to {}",
        manifest.frames.len(),
        out.join(DatasetManifest::FILE_NAME).display()
    );
    Ok(())
}

fn residue(
    frames: &[PathBuf],
    out: &Path,
    cfg: &PipelineConfig,
    dark: Option<&Path>,
    layout: Option<CfaLayout>,
    bit_depth: u32,
) -> Result<()> {
    let dark = dark
        .map(|p| DarkFrame::read(p).map_err(|e| e.in_stage("load-dark", show(p))))
        .transpose()?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e }.in_stage("residue", show(out)))?;
    for f in frames {
        let load = || match layout {
            Some(l) => load_raw(f, l, bit_depth),
            None => load_raw_auto(f),
        };
        let mut img = load().map_err(|e| e.in_stage("load-frame", show(f)))?;
        if let Some(d) = &dark {
            img = subtract_dark(&img, d).map_err(|e| e.in_stage("dark-correct", show(f)))?;
        }
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let res = frame_residue(&img, &id, cfg).map_err(|e| e.in_stage("residue", show(f)))?;
        let dest = out.join(format!("{id}.res"));
        res.write(&dest).map_err(|e| e.in_stage("write-residue", show(&dest)))?;
        info!("{} -> {}", f.display(), dest.display());
    }
    println!("wrote {} residues to {}", frames.len(), out.display());
    Ok(())
}

fn build_ref(residues: &[PathBuf], out: &Path) -> Result<()> {
    let mut b = ReferenceBuilder::new();
    for p in residues {
        let r = FrameResidue::read(p).map_err(|e| e.in_stage("build-reference", show(p)))?;
        b.add(&r).map_err(|e| e.in_stage("build-reference", show(p)))?;
    }
    let reference = b.finish().map_err(|e| e.in_stage("build-reference", show(out)))?;
    reference.write(out).map_err(|e| e.in_stage("write-reference", show(out)))?;
    println!("reference {} from {} residues -> {}", reference.id(), residues.len(), out.display());
    Ok(())
}

fn match_cmd(refs: &[PathBuf], residues: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let table = batch_match_files(refs, residues).map_err(|e| e.in_stage("match", format!("{} refs x {} images", refs.len(), residues.len())))?;
    match out {
        Some(p) => table.write_csv(p).map_err(|e| e.in_stage("write-scores", show(p))),
        None => {
            let bytes = table.to_csv().map_err(|e| e.in_stage("write-scores", "stdout"))?;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::Io { path: "stdout".into(), source: e }.in_stage("write-scores", "stdout"))
        }
    }
}

fn box_stats(scores: &Path, out: &Path) -> Result<()> {
    let table = ScoreTable::read_csv(scores).map_err(|e| e.in_stage("box-stats", show(scores)))?;
    let stats = score_box_stats(&table).map_err(|e| e.in_stage("box-stats", show(scores)))?;
    write_box_stats(&stats, out).map_err(|e| e.in_stage("box-stats", show(out)))?;
    println!("{} groups -> {}", stats.len(), out.display());
    Ok(())
}

fn read_means(path: &Path) -> Result<ConditionMeans> {
    let value = read_json(path)?;
    let means = if value.get("uncorrected").is_some() {
        let report: ConditionReport = serde_json::from_value(value).map_err(|e| Error::Decode(e.to_string()))?;
        report
            .condition_means
            .ok_or_else(|| Error::Protocol(report.notice.unwrap_or_else(|| "run produced no condition means".into())))?
    } else {
        serde_json::from_value(value).map_err(|e| Error::Decode(e.to_string()))?
    };
    ConditionMeans::new(means.lens_with_dark, means.pinhole_with_dark, means.lens_no_dark, means.pinhole_no_dark)
}

fn decompose(values: &[f64], means: Option<&Path>, csv: Option<&Path>, bs: Option<&[PathBuf]>) -> Result<()> {
    if let Some([scores, out]) = bs {
        box_stats(scores, out)?;
    }
    let means = match (means, values) {
        (Some(p), _) => read_means(p).map_err(|e| e.in_stage("decompose", show(p)))?,
        (None, [a, b, c, d]) => ConditionMeans::new(*a, *b, *c, *d).map_err(|e| e.in_stage("decompose", "arguments"))?,
        (None, _) if bs.is_some() => return Ok(()),
        (None, _) => {
            return Err(Error::Validation("give four condition means or --means <file>".into()).in_stage("decompose", "arguments"))
        }
    };
    let (d, table, text) = decompose_report(&means);
    for w in &d.warnings {
        warn!("{w}");
    }
    print!("{text}");
    if let Some(p) = csv {
        let bytes = render_csv(&table).map_err(|e| e.in_stage("decompose", show(p)))?;
        fs::write(p, bytes).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }.in_stage("decompose", show(p)))?;
    }
    Ok(())
}

fn run(plan: &Path) -> Result<()> {
    let req = RunRequest::read(plan).map_err(|e| e.in_stage("load-plan", show(plan)))?;
    let dataset = DatasetManifest::read(&req.dataset).map_err(|e| e.in_stage("load-dataset", show(&req.dataset)))?;
    let manifest = plan_run(&dataset, &req).map_err(|e| e.in_stage("split", show(plan)))?;
    let summary = execute_run(&manifest)?;
    println!(
        "{} scores, {} dark-corrected scores; outputs in {}",
        summary.scores.len(),
        summary.corrected_scores.as_ref().map_or(0, |t| t.len()),
        req.output_dir.display()
    );
    match &summary.report.notice {
        Some(n) => println!("{n}"),
        None => {
            if let Ok(text) = fs::read_to_string(&manifest.outputs.report) {
                print!("{text}");
            }
        }
    }
    Ok(())
}
