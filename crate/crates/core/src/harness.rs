//! Experiment orchestration: dataset split, reference building, batch
//! matching, dark correction, condition means and reports.
//!
//! Output layout under the run's output directory:
//!
//! ```text
//! run_manifest.json
//! darks/<camera>_T<temp>_t<exp>.dark
//! references/<camera>_<lens>.ref
//! scores.csv
//! box_stats.csv
//! dark_corrected/references/<camera>_<lens>.ref
//! dark_corrected/scores.csv
//! dark_corrected/box_stats.csv
//! condition_means.json
//! decomposition.csv
//! report.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::stable_hash;
use crate::darkframe::{build_dark_frame, subtract_dark, DarkFrame};
use crate::decomposition::{render_csv, render_text, snp_table, solve, summarize, BoxStats, ConditionMeans, EnergyDecomposition, SnpTable};
use crate::error::{Error, Result};
use crate::fingerprint::{match_residue, reference_id, ReferenceBuilder, ReferencePattern, ScoreRow, ScoreTable};
use crate::pipeline::{frame_residue, PipelineConfig};
use crate::raster::{load_raw_auto, RasterImage, PINHOLE};
use crate::simulator::{frame_path, DatasetManifest, FrameEntry};
use crate::stats;

/// User-facing description of a run, usually read from a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Dataset manifest (`manifest.json`).
    pub dataset: PathBuf,
    #[serde(default)]
    pub split_seed: u64,
    pub reference_count: usize,
    /// Expected test-set size; the test set is always the remainder of each combination.
    #[serde(default)]
    pub test_count: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "yes")]
    pub dark_correction: bool,
}

fn yes() -> bool {
    true
}

impl RunRequest {
    /// Reads a plan file; relative paths are taken relative to the file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut req: RunRequest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if req.dataset.is_relative() {
            req.dataset = base.join(&req.dataset);
        }
        if req.output_dir.is_relative() {
            req.output_dir = base.join(&req.output_dir);
        }
        Ok(req)
    }
}

/// Reference and test frame ids of one camera and lens combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSplit {
    pub camera_id: String,
    pub lens_id: String,
    pub reference: Vec<String>,
    pub test: Vec<String>,
}

impl SetSplit {
    pub fn reference_id(&self) -> String {
        reference_id(&self.camera_id, &self.lens_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub darks: PathBuf,
    pub references: PathBuf,
    pub scores: PathBuf,
    pub box_stats: PathBuf,
    pub corrected_references: PathBuf,
    pub corrected_scores: PathBuf,
    pub corrected_box_stats: PathBuf,
    pub condition_means: PathBuf,
    pub decomposition: PathBuf,
    pub report: PathBuf,
}

impl RunOutputs {
    pub fn under(root: &Path) -> Self {
        let corrected = root.join("dark_corrected");
        RunOutputs {
            root: root.to_path_buf(),
            manifest: root.join("run_manifest.json"),
            darks: root.join("darks"),
            references: root.join("references"),
            scores: root.join("scores.csv"),
            box_stats: root.join("box_stats.csv"),
            corrected_references: corrected.join("references"),
            corrected_scores: corrected.join("scores.csv"),
            corrected_box_stats: corrected.join("box_stats.csv"),
            condition_means: root.join("condition_means.json"),
            decomposition: root.join("decomposition.csv"),
            report: root.join("report.txt"),
        }
    }
}

/// A fully resolved, deterministic run plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub split_seed: u64,
    pub reference_count: usize,
    pub pipeline: PipelineConfig,
    pub pipeline_hash: u64,
    pub dark_correction: bool,
    pub splits: Vec<SetSplit>,
    /// Dark frame ids per camera.
    pub darks: BTreeMap<String, Vec<String>>,
    pub outputs: RunOutputs,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Reference id -> (camera, lens).
    fn reference_owners(&self) -> BTreeMap<String, (String, String)> {
        self.splits
            .iter()
            .map(|s| (s.reference_id(), (s.camera_id.clone(), s.lens_id.clone())))
            .collect()
    }
}

/// Seeded split of one combination's frame ids into reference and test sets.
pub fn split_set(
    ids: &[String],
    seed: u64,
    camera_id: &str,
    lens_id: &str,
    reference_count: usize,
    test_count: Option<usize>,
) -> Result<(Vec<String>, Vec<String>)> {
    let combo = reference_id(camera_id, lens_id);
    if reference_count == 0 {
        return Err(Error::Protocol("reference_count must be positive".into()));
    }
    if ids.len() < reference_count + 1 {
        return Err(Error::Protocol(format!(
            "combination {combo} has {} frames, needs at least {}",
            ids.len(),
            reference_count + 1
        )));
    }
    let remainder = ids.len() - reference_count;
    if let Some(t) = test_count {
        if t != remainder {
            return Err(Error::Protocol(format!(
                "combination {combo}: {} frames cannot split into {reference_count} reference and {t} test frames",
                ids.len()
            )));
        }
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&(seed, camera_id, lens_id)));
    sorted.shuffle(&mut rng);
    let mut test = sorted.split_off(reference_count);
    sorted.sort();
    test.sort();
    Ok((sorted, test))
}

/// Splits every light combination of the dataset.
pub fn plan_run(dataset: &DatasetManifest, req: &RunRequest) -> Result<RunManifest> {
    req.pipeline.denoise.validate()?;
    let mut splits = Vec::new();
    for ((camera_id, lens_id), frames) in dataset.light_sets() {
        let ids: Vec<String> = frames.iter().map(|f| f.id.clone()).collect();
        let (reference, test) = split_set(&ids, req.split_seed, &camera_id, &lens_id, req.reference_count, req.test_count)?;
        splits.push(SetSplit {
            camera_id,
            lens_id,
            reference,
            test,
        });
    }
    if splits.is_empty() {
        return Err(Error::Protocol("dataset has no light frames".into()));
    }
    let darks = dataset
        .dark_sets()
        .into_iter()
        .map(|(cam, frames)| {
            let mut ids: Vec<String> = frames.iter().map(|f| f.id.clone()).collect();
            ids.sort();
            (cam, ids)
        })
        .collect();
    Ok(RunManifest {
        dataset: req.dataset.clone(),
        split_seed: req.split_seed,
        reference_count: req.reference_count,
        pipeline_hash: req.pipeline.hash(),
        pipeline: req.pipeline.clone(),
        dark_correction: req.dark_correction,
        splits,
        darks,
        outputs: RunOutputs::under(&req.output_dir),
    })
}

/// Mean score of one (reference, image set) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub ref_id: String,
    pub ref_camera: String,
    pub ref_lens: String,
    pub image_camera: String,
    pub image_lens: String,
    pub n: usize,
    pub mean: f64,
}

impl GroupMean {
    pub fn matched_camera(&self) -> bool {
        self.ref_camera == self.image_camera
    }
}

/// Matched-camera means of one processing pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassMeans {
    /// Same camera, same non-pinhole lens; mean over groups.
    pub lens: Option<f64>,
    /// Same camera, pinhole reference against pinhole images.
    pub pinhole: Option<f64>,
    /// Per camera: (lens mean, pinhole mean).
    pub cameras: BTreeMap<String, (Option<f64>, Option<f64>)>,
    pub groups: Vec<GroupMean>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| stats::mean(v))
}

/// Condition means of a score table. Mismatched-camera groups are kept in
/// `groups` but do not enter the lens or pinhole means.
pub fn pass_means(table: &ScoreTable, owners: &BTreeMap<String, (String, String)>) -> Result<PassMeans> {
    let mut acc: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &table.rows {
        acc.entry((r.ref_id.clone(), r.camera_id.clone(), r.lens_id.clone()))
            .or_default()
            .push(r.corr_mean);
    }
    let mut groups = Vec::with_capacity(acc.len());
    for ((ref_id, image_camera, image_lens), v) in acc {
        let (ref_camera, ref_lens) = owners
            .get(&ref_id)
            .cloned()
            .ok_or_else(|| Error::Grouping(format!("score row names unknown reference {ref_id}")))?;
        groups.push(GroupMean {
            ref_id,
            ref_camera,
            ref_lens,
            image_camera,
            image_lens,
            n: v.len(),
            mean: stats::mean(&v),
        });
    }

    let is_lens = |g: &&GroupMean| g.matched_camera() && g.ref_lens == g.image_lens && g.ref_lens != PINHOLE;
    let is_pinhole = |g: &&GroupMean| g.matched_camera() && g.ref_lens == PINHOLE && g.image_lens == PINHOLE;
    let lens: Vec<f64> = groups.iter().filter(is_lens).map(|g| g.mean).collect();
    let pinhole: Vec<f64> = groups.iter().filter(is_pinhole).map(|g| g.mean).collect();

    let mut cameras: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for cam in groups.iter().map(|g| g.ref_camera.clone()) {
        if cameras.contains_key(&cam) {
            continue;
        }
        let l: Vec<f64> = groups.iter().filter(is_lens).filter(|g| g.ref_camera == cam).map(|g| g.mean).collect();
        let p: Vec<f64> = groups.iter().filter(is_pinhole).filter(|g| g.ref_camera == cam).map(|g| g.mean).collect();
        cameras.insert(cam, (mean_of(&l), mean_of(&p)));
    }

    Ok(PassMeans {
        lens: mean_of(&lens),
        pinhole: mean_of(&pinhole),
        cameras,
        groups,
    })
}

/// Per (reference, image set) summary row of a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroupStats {
    pub ref_id: String,
    pub image_set: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub mode: f64,
    pub range: f64,
    pub skew_sign: i8,
}

impl ScoreGroupStats {
    fn new(ref_id: String, image_set: String, b: BoxStats) -> Self {
        ScoreGroupStats {
            ref_id,
            image_set,
            n: b.n,
            min: b.min,
            q1: b.q1,
            median: b.median,
            q3: b.q3,
            max: b.max,
            mean: b.mean,
            mode: b.mode,
            range: b.range,
            skew_sign: b.skew_sign,
        }
    }
}

/// Box statistics of every (reference, image set) group of a score table.
pub fn score_box_stats(table: &ScoreTable) -> Result<Vec<ScoreGroupStats>> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((r.ref_id.clone(), reference_id(&r.camera_id, &r.lens_id)))
            .or_default()
            .push(r.corr_mean);
    }
    groups
        .into_iter()
        .map(|((ref_id, set), v)| {
            let label = format!("{ref_id} vs {set}");
            Ok(ScoreGroupStats::new(ref_id, set, summarize(&label, &v)?))
        })
        .collect()
}

pub fn write_box_stats(stats: &[ScoreGroupStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if stats.is_empty() {
        w.write_record([
            "ref_id", "image_set", "n", "min", "q1", "median", "q3", "max", "mean", "mode", "range", "skew_sign",
        ])?;
    }
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Decomposition report written next to the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub uncorrected: PassMeans,
    pub dark_corrected: Option<PassMeans>,
    pub condition_means: Option<ConditionMeans>,
    pub notice: Option<String>,
}

impl ConditionReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Assembles the four condition means, or explains why they cannot be formed.
pub fn assemble_conditions(uncorrected: &PassMeans, corrected: Option<&PassMeans>) -> std::result::Result<ConditionMeans, String> {
    let mut missing = Vec::new();
    if uncorrected.lens.is_none() {
        missing.push("no matched lens sets");
    }
    if uncorrected.pinhole.is_none() {
        missing.push("no matched pinhole set");
    }
    let corrected = match corrected {
        Some(c) => Some(c),
        None => {
            missing.push("no dark-corrected pass");
            None
        }
    };
    if !missing.is_empty() {
        return Err(format!("insufficient conditions: {}", missing.join(", ")));
    }
    let c = corrected.expect("checked above");
    match (uncorrected.lens, uncorrected.pinhole, c.lens, c.pinhole) {
        (Some(a), Some(b), Some(cc), Some(d)) => ConditionMeans::new(a, b, cc, d).map_err(|e| e.to_string()),
        _ => Err("insufficient conditions: dark-corrected pass lacks lens or pinhole sets".into()),
    }
}

/// Decomposition, SNP table and text rendering of a set of condition means.
pub fn decompose_report(means: &ConditionMeans) -> (EnergyDecomposition, SnpTable, String) {
    let d = solve(means);
    let t = snp_table(&d);
    let mut text = String::new();
    let _ = writeln!(
        text,
        "condition means: lens+dark {:.5}  pinhole+dark {:.5}  lens {:.5}  pinhole {:.5}",
        means.lens_with_dark, means.pinhole_with_dark, means.lens_no_dark, means.pinhole_no_dark
    );
    text.push_str(&render_text(&d, &t));
    (d, t, text)
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub scores: ScoreTable,
    pub corrected_scores: Option<ScoreTable>,
    pub report: ConditionReport,
    pub decomposition: Option<(EnergyDecomposition, SnpTable)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn chunk_len() -> usize {
    rayon::current_num_threads().max(1) * 2
}

struct Pass<'a> {
    name: &'static str,
    darks: Option<&'a BTreeMap<String, DarkFrame>>,
    references_dir: &'a Path,
    scores: &'a Path,
    box_stats: &'a Path,
}

struct Context<'a> {
    plan: &'a RunManifest,
    root: PathBuf,
    frames: BTreeMap<&'a str, &'a FrameEntry>,
}

impl Context<'_> {
    fn load(&self, id: &str, darks: Option<&BTreeMap<String, DarkFrame>>) -> Result<RasterImage> {
        let entry = self
            .frames
            .get(id)
            .ok_or_else(|| Error::Validation(format!("frame {id} is not in the dataset manifest")))?;
        let path = frame_path(&self.root, entry);
        if !path.exists() {
            return Err(Error::Ingestion { path });
        }
        let img = load_raw_auto(&path)?;
        match darks {
            Some(d) => {
                let dark = d
                    .get(&img.meta().camera_id)
                    .ok_or_else(|| Error::Protocol(format!("no dark frame for camera {}", img.meta().camera_id)))?;
                subtract_dark(&img, dark)
            }
            None => Ok(img),
        }
    }
}

fn build_references(ctx: &Context, pass: &Pass) -> Result<Vec<ReferencePattern>> {
    create_dir(pass.references_dir)?;
    let mut refs = Vec::with_capacity(ctx.plan.splits.len());
    for split in &ctx.plan.splits {
        let rid = split.reference_id();
        let mut builder = ReferenceBuilder::new();
        for chunk in split.reference.chunks(chunk_len()) {
            let residues: Vec<_> = chunk
                .par_iter()
                .map(|id| {
                    let img = ctx.load(id, pass.darks)?;
                    frame_residue(&img, id, &ctx.plan.pipeline)
                })
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("build-reference", rid.clone()))?;
            // Sequential accumulation keeps the floating-point sum order fixed.
            for r in &residues {
                builder.add(r).map_err(|e| e.in_stage("build-reference", rid.clone()))?;
            }
        }
        let reference = builder.finish().map_err(|e| e.in_stage("build-reference", rid.clone()))?;
        let path = pass.references_dir.join(format!("{rid}.ref"));
        reference.write(&path).map_err(|e| e.in_stage("write-reference", rid.clone()))?;
        log::info!("{}: reference {rid} from {} frames", pass.name, reference.frame_count);
        refs.push(reference);
    }
    Ok(refs)
}

fn match_tests(ctx: &Context, pass: &Pass, refs: &[ReferencePattern]) -> Result<ScoreTable> {
    let tests: Vec<&String> = ctx.plan.splits.iter().flat_map(|s| s.test.iter()).collect();
    let rows: Vec<Vec<ScoreRow>> = tests
        .par_iter()
        .map(|id| {
            let stage = |e: Error| e.in_stage("match", id.to_string());
            let img = ctx.load(id, pass.darks).map_err(stage)?;
            let residue = frame_residue(&img, id, &ctx.plan.pipeline).map_err(stage)?;
            refs.iter()
                .map(|r| {
                    let score = match_residue(r, &residue)?;
                    Ok(ScoreRow::new(score, &residue))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(stage)
        })
        .collect::<Result<_>>()?;
    let table = ScoreTable::from_rows(rows.into_iter().flatten().collect());
    table.write_csv(pass.scores).map_err(|e| e.in_stage("write-scores", pass.name))?;
    let stats = score_box_stats(&table).map_err(|e| e.in_stage("box-stats", pass.name))?;
    write_box_stats(&stats, pass.box_stats).map_err(|e| e.in_stage("box-stats", pass.name))?;
    log::info!("{}: {} score rows", pass.name, table.len());
    Ok(table)
}

fn build_darks(ctx: &Context) -> Result<Option<BTreeMap<String, DarkFrame>>> {
    let plan = ctx.plan;
    if !plan.dark_correction {
        return Ok(None);
    }
    let cameras: Vec<&String> = {
        let mut c: Vec<&String> = plan.splits.iter().map(|s| &s.camera_id).collect();
        c.dedup();
        c
    };
    if cameras.iter().any(|c| plan.darks.get(*c).is_none_or(|d| d.is_empty())) {
        log::warn!("dark correction skipped: not every camera has dark frames");
        return Ok(None);
    }
    create_dir(&plan.outputs.darks)?;
    let mut out = BTreeMap::new();
    for cam in cameras {
        let ids = &plan.darks[cam];
        let frames: Vec<RasterImage> = ids
            .par_iter()
            .map(|id| ctx.load(id, None))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("dark-frames", cam.clone()))?;
        let dark = build_dark_frame(&frames).map_err(|e| e.in_stage("dark-frames", cam.clone()))?;
        dark.write(&plan.outputs.darks.join(dark.file_name()))
            .map_err(|e| e.in_stage("dark-frames", cam.clone()))?;
        out.insert(cam.clone(), dark);
    }
    Ok(Some(out))
}

/// Executes a plan, writing every artifact under its output directory.
pub fn execute_run(plan: &RunManifest) -> Result<RunSummary> {
    let dataset = DatasetManifest::read(&plan.dataset).map_err(|e| e.in_stage("load-dataset", plan.dataset.display().to_string()))?;
    let root = plan.dataset.parent().unwrap_or(Path::new(".")).to_path_buf();
    let ctx = Context {
        plan,
        root,
        frames: dataset.frames.iter().map(|f| (f.id.as_str(), f)).collect(),
    };
    let out = &plan.outputs;
    create_dir(&out.root)?;
    plan.write(&out.manifest)?;

    let darks = build_darks(&ctx)?;

    let plain = Pass {
        name: "uncorrected",
        darks: None,
        references_dir: &out.references,
        scores: &out.scores,
        box_stats: &out.box_stats,
    };
    let refs = build_references(&ctx, &plain)?;
    let scores = match_tests(&ctx, &plain, &refs)?;
    drop(refs);

    let corrected_scores = match &darks {
        Some(d) => {
            create_dir(out.corrected_scores.parent().expect("nested path"))?;
            let pass = Pass {
                name: "dark_corrected",
                darks: Some(d),
                references_dir: &out.corrected_references,
                scores: &out.corrected_scores,
                box_stats: &out.corrected_box_stats,
            };
            let refs = build_references(&ctx, &pass)?;
            Some(match_tests(&ctx, &pass, &refs)?)
        }
        None => None,
    };

    let owners = plan.reference_owners();
    let uncorrected = pass_means(&scores, &owners).map_err(|e| e.in_stage("condition-means", "uncorrected"))?;
    let corrected = corrected_scores
        .as_ref()
        .map(|t| pass_means(t, &owners))
        .transpose()
        .map_err(|e| e.in_stage("condition-means", "dark_corrected"))?;
    let (condition_means, notice) = match assemble_conditions(&uncorrected, corrected.as_ref()) {
        Ok(m) => (Some(m), None),
        Err(n) => (None, Some(n)),
    };
    let report = ConditionReport {
        uncorrected,
        dark_corrected: corrected,
        condition_means,
        notice,
    };
    write_json(&out.condition_means, &report)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{} combinations, {} reference frames each, split seed {}, pipeline {:016x}",
        plan.splits.len(),
        plan.reference_count,
        plan.split_seed,
        plan.pipeline_hash
    );
    let decomposition = match &report.condition_means {
        Some(m) => {
            let (d, t, body) = decompose_report(m);
            text.push_str(&body);
            let csv = render_csv(&t)?;
            fs::write(&out.decomposition, csv).map_err(|e| Error::io(&out.decomposition, e))?;
            Some((d, t))
        }
        None => {
            let notice = report.notice.as_deref().unwrap_or("insufficient conditions");
            let _ = writeln!(text, "decomposition skipped: {notice}");
            if out.decomposition.exists() {
                fs::remove_file(&out.decomposition).map_err(|e| Error::io(&out.decomposition, e))?;
            }
            None
        }
    };
    fs::write(&out.report, text).map_err(|e| Error::io(&out.report, e))?;

    Ok(RunSummary {
        scores,
        corrected_scores,
        report,
        decomposition,
    })
}
