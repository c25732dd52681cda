//! Reproducible experiments over phantom cohorts: generation, pipeline plus
//! uncertainty runs, and whisker-based rejection analysis.
//!
//! `results.csv` columns, in order: `case_id, side, mode, status, pred_x,
//! pred_y, pred_z, truth_x, truth_y, truth_z, error_mm, mad, flagged, hard,
//! seed, config_hash`. Empty cells mean "not applicable" (baseline rows have
//! no MAD) or "not available" (failed rows).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::{Side, TargetPoint};
use crate::phantom::{cohort_specs, generate_phantom, DifficultyMix, PhantomSpec};
use crate::pipeline::{Pipeline, PipelineConfig, SideTargets};
use crate::predictors::{BoundaryNoise, ConvNet, ConvNetSpec, Localizer, OracleLocalizer, OracleLocalizerConfig, TruthSegmenter, WeightSource};
use crate::seed;
use crate::uncertainty::{rejection_stats, run_uncertainty, BoxplotStats, McConfig, McMode};
use crate::volume::{Point3, VoxelBox, Volume3};
use crate::volume_io::{read_volume, write_volume};

pub const RESULT_COLUMNS: [&str; 16] = [
    "case_id",
    "side",
    "mode",
    "status",
    "pred_x",
    "pred_y",
    "pred_z",
    "truth_x",
    "truth_y",
    "truth_z",
    "error_mm",
    "mad",
    "flagged",
    "hard",
    "seed",
    "config_hash",
];

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Mcdo,
    Tta,
    Hybrid,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [RunMode::Baseline, RunMode::Mcdo, RunMode::Tta, RunMode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Mcdo => "mcdo",
            RunMode::Tta => "tta",
            RunMode::Hybrid => "hybrid",
        }
    }

    pub fn sampling(self) -> Option<McMode> {
        match self {
            RunMode::Baseline => None,
            RunMode::Mcdo => Some(McMode::Mcdo),
            RunMode::Tta => Some(McMode::Tta),
            RunMode::Hybrid => Some(McMode::Hybrid),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::invalid_arg(format!("unknown mode {s:?} (expected baseline, mcdo, tta or hybrid)")))
    }
}

/// Parses a comma-separated mode list, dropping duplicates.
pub fn parse_modes(list: &str) -> Result<Vec<RunMode>> {
    let modes: BTreeSet<RunMode> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if modes.is_empty() {
        return Err(Error::invalid_arg("empty mode list"));
    }
    Ok(modes.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_cases: usize,
    pub template: PhantomSpec,
    pub mix: DifficultyMix,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_cases: 10,
            template: PhantomSpec::default(),
            mix: DifficultyMix::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizerKind {
    Oracle,
    Convnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub kind: LocalizerKind,
    pub oracle: OracleLocalizerConfig,
    /// Oracle used on the cohort's hard cases instead of `oracle`
    /// (injected failures).
    pub hard_case_oracle: Option<OracleLocalizerConfig>,
    pub convnet: ConvNetSpec,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            kind: LocalizerKind::Oracle,
            oracle: OracleLocalizerConfig::default(),
            hard_case_oracle: None,
            convnet: ConvNetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyConfigs {
    pub mcdo: McConfig,
    pub tta: McConfig,
    pub hybrid: McConfig,
}

impl Default for UncertaintyConfigs {
    fn default() -> Self {
        let base = |mode| McConfig {
            keep_samples: false,
            ..McConfig::new(mode, 100, 0)
        };
        Self {
            mcdo: base(McMode::Mcdo),
            tta: base(McMode::Tta),
            hybrid: base(McMode::Hybrid),
        }
    }
}

impl UncertaintyConfigs {
    pub fn get(&self, mode: McMode) -> &McConfig {
        match mode {
            McMode::Mcdo => &self.mcdo,
            McMode::Tta => &self.tta,
            McMode::Hybrid => &self.hybrid,
        }
    }

    pub fn set_n_samples(&mut self, n: usize) {
        for c in [&mut self.mcdo, &mut self.tta, &mut self.hybrid] {
            c.n_samples = n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Where `generate` writes the cohort and `run` reads it.
    pub cohort_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Weight file for the convnet localizer.
    pub weights: Option<PathBuf>,
    pub cohort: CohortConfig,
    pub pipeline: PipelineConfig,
    pub localizer: LocalizerConfig,
    /// Probability of flipping stage-one labels on mask boundaries.
    pub segmenter_boundary_noise: f64,
    pub uncertainty: UncertaintyConfigs,
    pub modes: Vec<RunMode>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort_dir: PathBuf::from("cohort"),
            out_dir: PathBuf::from("results"),
            weights: None,
            cohort: CohortConfig::default(),
            pipeline: PipelineConfig::default(),
            localizer: LocalizerConfig::default(),
            segmenter_boundary_noise: 0.0,
            uncertainty: UncertaintyConfigs::default(),
            modes: RunMode::ALL.to_vec(),
            seed: 0,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::invalid_arg(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid_arg("workers must be >= 1"));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid_arg("no modes selected"));
        }
        if !(0.0..=1.0).contains(&self.segmenter_boundary_noise) {
            return Err(Error::invalid_arg("segmenter_boundary_noise must lie in [0,1]"));
        }
        self.pipeline.validate()?;
        for m in [McMode::Mcdo, McMode::Tta, McMode::Hybrid] {
            let c = self.uncertainty.get(m);
            if c.mode != m {
                return Err(Error::invalid_arg(format!("uncertainty.{} has mode {}", m.as_str(), c.mode.as_str())));
            }
            if c.n_samples < 2 {
                return Err(Error::invalid_arg("n_samples must be >= 2"));
            }
            c.priors.validate()?;
        }
        Ok(())
    }

    /// SHA-256 (first 16 hex digits) of the canonical JSON form, ignoring
    /// paths and the worker count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.cohort_dir = PathBuf::new();
        c.out_dir = PathBuf::new();
        c.workers = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cohort_dir.join(MANIFEST_FILE)
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join(RESULTS_FILE)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid_arg(format!("cannot build worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    /// Header paths, relative to the manifest's directory.
    pub image: String,
    pub left_mask: String,
    pub right_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub files: CaseFiles,
    pub truth_targets: [TargetPoint; 2],
    pub hard: bool,
    pub spec: PhantomSpec,
}

impl ManifestEntry {
    pub fn truth(&self) -> SideTargets {
        SideTargets {
            left: self.truth_targets[0].position,
            right: self.truth_targets[1].position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config_hash: String,
    pub seed: u64,
    pub cases: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn hard_ids(&self) -> BTreeSet<String> {
        self.cases.iter().filter(|c| c.hard).map(|c| c.id.clone()).collect()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the cohort and writes volumes plus `manifest.json` into
/// `cohort_dir`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<CohortManifest> {
    cfg.validate()?;
    let entries = cohort_specs(cfg.cohort.n_cases, &cfg.cohort.template, &cfg.cohort.mix, cfg.seed)?;
    let dir = &cfg.cohort_dir;
    create_dir(dir)?;
    let cases = cfg.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| -> Result<ManifestEntry> {
                let case = generate_phantom(&e.spec)?;
                let name = |suffix: &str, v: &Volume3| -> Result<String> {
                    let stem = format!("{}_{suffix}", e.id);
                    write_volume(v, &dir.join(&stem))?;
                    Ok(format!("{stem}.json"))
                };
                let files = CaseFiles {
                    image: name("image", &case.image)?,
                    left_mask: name("left_mask", &case.left_mask)?,
                    right_mask: name("right_mask", &case.right_mask)?,
                };
                Ok(ManifestEntry {
                    id: e.id.clone(),
                    files,
                    truth_targets: case.targets,
                    hard: e.hard,
                    spec: e.spec.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = CohortManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cases,
    };
    write_file(&cfg.manifest_path(), &serde_json::to_vec_pretty(&manifest)?)?;
    info!("wrote {} cases to {}", manifest.cases.len(), dir.display());
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub case_id: String,
    pub side: Side,
    pub mode: RunMode,
    pub status: RowStatus,
    pub pred_x: Option<i64>,
    pub pred_y: Option<i64>,
    pub pred_z: Option<i64>,
    pub truth_x: f64,
    pub truth_y: f64,
    pub truth_z: f64,
    pub error_mm: Option<f64>,
    pub mad: Option<f64>,
    pub flagged: Option<bool>,
    pub hard: bool,
    pub seed: u64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn predicted(&self) -> Option<[i64; 3]> {
        Some([self.pred_x?, self.pred_y?, self.pred_z?])
    }

    pub fn truth(&self) -> Point3 {
        [self.truth_x, self.truth_y, self.truth_z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: RunMode,
    pub target: [i64; 3],
    pub error_mm: f64,
    pub mad: Option<f64>,
    /// Whole-volume voxel coordinates.
    pub argmax_positions: Vec<[i64; 3]>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideReport {
    pub side: Side,
    pub crop_box: Option<VoxelBox>,
    pub error: Option<String>,
    pub modes: Vec<ModeReport>,
    pub mode_errors: BTreeMap<RunMode, String>,
}

/// Per-case detail written to `cases/<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub config_hash: String,
    pub seed: u64,
    pub id: String,
    pub hard: bool,
    pub error: Option<String>,
    pub labels_swapped: bool,
    pub sides: Vec<SideReport>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub failed_cases: Vec<String>,
    pub results_path: PathBuf,
}

impl RunOutcome {
    pub fn is_partial_failure(&self) -> bool {
        !self.failed_cases.is_empty()
    }
}

struct Localizers {
    main: Box<dyn Localizer>,
    hard: Option<Box<dyn Localizer>>,
}

impl Localizers {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let main: Box<dyn Localizer> = match cfg.localizer.kind {
            LocalizerKind::Oracle => Box::new(OracleLocalizer::new(cfg.localizer.oracle)?),
            LocalizerKind::Convnet => {
                let mut spec = cfg.localizer.convnet.clone();
                if let Some(w) = &cfg.weights {
                    spec.weights = WeightSource::File(w.clone());
                }
                Box::new(ConvNet::new(spec)?)
            }
        };
        let hard = match cfg.localizer.hard_case_oracle {
            Some(o) => Some(Box::new(OracleLocalizer::new(o)?) as Box<dyn Localizer>),
            None => None,
        };
        Ok(Self { main, hard })
    }

    fn for_case(&self, hard: bool) -> &dyn Localizer {
        match (&self.hard, hard) {
            (Some(h), true) => h.as_ref(),
            _ => self.main.as_ref(),
        }
    }
}

fn side_index(side: Side) -> u64 {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

fn distance_mm(pred: [i64; 3], truth: Point3, spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| ((pred[a] as f64 - truth[a]) * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

struct CaseContext<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    dir: &'a Path,
    localizers: &'a Localizers,
}

impl CaseContext<'_> {
    fn row(&self, entry: &ManifestEntry, side: Side, mode: RunMode) -> ResultRow {
        let t = entry.truth().get(side);
        ResultRow {
            case_id: entry.id.clone(),
            side,
            mode,
            status: RowStatus::Failed,
            pred_x: None,
            pred_y: None,
            pred_z: None,
            truth_x: t[0],
            truth_y: t[1],
            truth_z: t[2],
            error_mm: None,
            mad: None,
            flagged: None,
            hard: entry.hard,
            seed: self.cfg.seed,
            config_hash: self.hash.to_string(),
        }
    }

    fn failed_case(&self, entry: &ManifestEntry, error: String, started: Instant) -> (Vec<ResultRow>, CaseReport) {
        let rows = [Side::Left, Side::Right]
            .into_iter()
            .flat_map(|s| self.cfg.modes.iter().map(move |&m| (s, m)))
            .map(|(s, m)| self.row(entry, s, m))
            .collect();
        let report = CaseReport {
            config_hash: self.hash.to_string(),
            seed: self.cfg.seed,
            id: entry.id.clone(),
            hard: entry.hard,
            error: Some(error),
            labels_swapped: false,
            sides: Vec::new(),
            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        (rows, report)
    }

    fn load(&self, entry: &ManifestEntry) -> Result<(Volume3, Volume3, Volume3)> {
        let read = |f: &str| read_volume(&self.dir.join(f));
        Ok((read(&entry.files.image)?, read(&entry.files.left_mask)?, read(&entry.files.right_mask)?))
    }

    fn run_case(&self, index: usize, entry: &ManifestEntry) -> (Vec<ResultRow>, CaseReport) {
        let started = Instant::now();
        let (image, left, right) = match self.load(entry) {
            Ok(v) => v,
            Err(e) => return self.failed_case(entry, e.to_string(), started),
        };
        let case_seed = seed::derive(self.cfg.seed, index as u64);
        let segmenter = match TruthSegmenter::new(left, right).and_then(|s| {
            if self.cfg.segmenter_boundary_noise > 0.0 {
                s.with_boundary_noise(BoundaryNoise {
                    flip_prob: self.cfg.segmenter_boundary_noise,
                    seed: case_seed,
                })
            } else {
                Ok(s)
            }
        }) {
            Ok(s) => s,
            Err(e) => return self.failed_case(entry, e.to_string(), started),
        };
        let loc = self.localizers.for_case(entry.hard);
        let truth = entry.truth();
        let result = Pipeline::new(self.cfg.pipeline.clone(), &segmenter, loc).and_then(|p| p.run(&image, Some(&truth)));
        let result = match result {
            Ok(r) => r,
            Err(e) => return self.failed_case(entry, e.to_string(), started),
        };

        let spacing = image.spacing();
        let mut rows = Vec::new();
        let mut sides = Vec::new();
        for side in [Side::Left, Side::Right] {
            let t = truth.get(side);
            let output = match &result.side(side).output {
                Ok(o) => o,
                Err(e) => {
                    rows.extend(self.cfg.modes.iter().map(|&m| self.row(entry, side, m)));
                    sides.push(SideReport {
                        side,
                        crop_box: None,
                        error: Some(e.clone()),
                        modes: Vec::new(),
                        mode_errors: BTreeMap::new(),
                    });
                    continue;
                }
            };
            let frame = output.frame;
            let input = frame.extract(&image);
            let hint = Some(frame.to_input(t));
            let mut report = SideReport {
                side,
                crop_box: Some(frame.crop_box),
                error: None,
                modes: Vec::new(),
                mode_errors: BTreeMap::new(),
            };
            for &mode in &self.cfg.modes {
                let mut row = self.row(entry, side, mode);
                let t0 = Instant::now();
                let outcome = match mode.sampling() {
                    None => Ok((output.target, None, vec![output.target])),
                    Some(mc_mode) => {
                        let mut mc = self.cfg.uncertainty.get(mc_mode).clone();
                        let stream = (side_index(side) << 8) | mode as u64;
                        mc.base_seed = seed::derive(case_seed.wrapping_add(mc.base_seed), stream);
                        mc.keep_samples = false;
                        run_uncertainty(loc, &input, hint, &mc).map(|s| {
                            let positions = s.argmax_positions.iter().map(|&p| frame.voxel_to_whole(p)).collect();
                            (frame.voxel_to_whole(s.final_target), Some(s.mad), positions)
                        })
                    }
                };
                match outcome {
                    Ok((target, mad, positions)) => {
                        let err = distance_mm(target, t, spacing);
                        row.status = RowStatus::Ok;
                        row.pred_x = Some(target[0]);
                        row.pred_y = Some(target[1]);
                        row.pred_z = Some(target[2]);
                        row.error_mm = Some(err);
                        row.mad = mad;
                        report.modes.push(ModeReport {
                            mode,
                            target,
                            error_mm: err,
                            mad,
                            argmax_positions: positions,
                            runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
                        });
                    }
                    Err(e) => {
                        report.mode_errors.insert(mode, e.to_string());
                    }
                }
                rows.push(row);
            }
            sides.push(report);
        }
        let report = CaseReport {
            config_hash: self.hash.to_string(),
            seed: self.cfg.seed,
            id: entry.id.clone(),
            hard: entry.hard,
            error: None,
            labels_swapped: result.labels_swapped,
            sides,
            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        (rows, report)
    }
}

/// Tukey flags per sampling mode over all successful rows of that mode.
fn flag_rows(rows: &mut [ResultRow]) {
    for mode in [RunMode::Mcdo, RunMode::Tta, RunMode::Hybrid] {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].mode == mode && rows[i].mad.is_some())
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mads: Vec<f64> = idx.iter().map(|&i| rows[i].mad.unwrap_or_default()).collect();
        match rejection_stats(&mads) {
            Ok(stats) => {
                for &i in &idx {
                    rows[i].flagged = Some(false);
                }
                for f in stats.flagged {
                    rows[idx[f]].flagged = Some(true);
                }
            }
            Err(e) => warn!("{mode}: no whisker flags ({e})"),
        }
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (a.case_id.as_str(), side_index(a.side), a.mode).cmp(&(b.case_id.as_str(), side_index(b.side), b.mode))
    });
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Runs every selected mode on every case of the cohort and writes
/// `results.csv`, `cases/<id>.json` and `run_summary.json` to `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let manifest_path = cfg.manifest_path();
    let manifest = CohortManifest::load(&manifest_path)?;
    if let Some(w) = &cfg.weights {
        if !w.exists() {
            return Err(Error::io(w, std::io::Error::new(std::io::ErrorKind::NotFound, "weight file not found")));
        }
    }
    let localizers = Localizers::build(cfg)?;
    let hash = cfg.hash();
    let cases_dir = cfg.out_dir.join("cases");
    create_dir(&cases_dir)?;
    let ctx = CaseContext {
        cfg,
        hash: &hash,
        dir: &cfg.cohort_dir,
        localizers: &localizers,
    };
    let per_case: Vec<(Vec<ResultRow>, CaseReport)> = cfg.pool()?.install(|| {
        manifest
            .cases
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let out = ctx.run_case(i, e);
                info!("{}: {:.0} ms", e.id, out.1.runtime_ms);
                out
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failed = BTreeSet::new();
    let mut timings = BTreeMap::new();
    for (case_rows, report) in per_case {
        if case_rows.iter().any(|r| r.status == RowStatus::Failed) {
            failed.insert(report.id.clone());
        }
        timings.insert(report.id.clone(), report.runtime_ms);
        write_file(&cases_dir.join(format!("{}.json", report.id)), &serde_json::to_vec_pretty(&report)?)?;
        rows.extend(case_rows);
    }
    flag_rows(&mut rows);
    sort_rows(&mut rows);
    let results_path = cfg.results_path();
    write_results(&rows, &results_path)?;

    let summary = serde_json::json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "rows": rows.len(),
        "failed_cases": failed,
        "case_runtime_ms": timings,
    });
    write_file(&cfg.out_dir.join("run_summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(RunOutcome {
        rows,
        failed_cases: failed.into_iter().collect(),
        results_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRow {
    pub case_id: String,
    pub side: String,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub mode: String,
    pub n: usize,
    pub stats: BoxplotStats,
    pub flagged: Vec<FlaggedRow>,
    /// Cases with at least one flagged side.
    pub flagged_cases: Vec<String>,
    pub true_positives: usize,
    /// `None` when there are no hard cases.
    pub recall: Option<f64>,
    /// `None` when nothing is flagged.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub seed: String,
    pub hard_cases: Vec<String>,
    pub modes: Vec<ModeAnalysis>,
    pub skipped_modes: Vec<String>,
}

impl AnalysisReport {
    pub fn mode(&self, mode: &str) -> Option<&ModeAnalysis> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

const REQUIRED_COLUMNS: [&str; 8] = ["case_id", "side", "mode", "status", "mad", "hard", "seed", "config_hash"];

struct AnalysisRow {
    case_id: String,
    side: String,
    mode: String,
    mad: Option<f64>,
    hard: bool,
}

fn read_analysis_rows(path: &Path) -> Result<(Vec<AnalysisRow>, String, String)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED_COLUMNS.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!("{}: missing columns {}", path.display(), missing.join(", "))));
    }
    let [case_id, side, mode, status, mad, hard, seed, hash] = REQUIRED_COLUMNS.map(|c| col(c).unwrap_or_default());
    let mut rows = Vec::new();
    let mut seeds = BTreeSet::new();
    let mut hashes = BTreeSet::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::Schema(format!("{}: row {}: bad {what}", path.display(), line + 1));
        let mad_value = match field(mad) {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("mad"))?),
        };
        let hard_value = field(hard).parse::<bool>().map_err(|_| bad("hard"))?;
        seeds.insert(field(seed).to_string());
        hashes.insert(field(hash).to_string());
        rows.push(AnalysisRow {
            case_id: field(case_id).to_string(),
            side: field(side).to_string(),
            mode: field(mode).to_string(),
            mad: if field(status) == "ok" { mad_value } else { None },
            hard: hard_value,
        });
    }
    let join = |s: BTreeSet<String>| s.into_iter().collect::<Vec<_>>().join(";");
    Ok((rows, join(seeds), join(hashes)))
}

/// Whisker analysis of `results.csv`; writes `analysis.json`,
/// `rejections.csv` and the long-format `boxplot_long.csv` to `out_dir`.
pub fn cmd_analyze(results: &Path, out_dir: &Path) -> Result<AnalysisReport> {
    let (rows, seed, config_hash) = read_analysis_rows(results)?;
    let hard_cases: BTreeSet<String> = rows.iter().filter(|r| r.hard).map(|r| r.case_id.clone()).collect();

    let mut by_mode: BTreeMap<&str, Vec<&AnalysisRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.mad.is_some()) {
        by_mode.entry(r.mode.as_str()).or_default().push(r);
    }
    let mut modes = Vec::new();
    let mut skipped = Vec::new();
    for (mode, group) in by_mode {
        let mads: Vec<f64> = group.iter().filter_map(|r| r.mad).collect();
        if mads.len() < 4 {
            warn!("mode {mode}: only {} rows with MAD, skipped", mads.len());
            skipped.push(mode.to_string());
            continue;
        }
        let stats = rejection_stats(&mads)?;
        let flagged: Vec<FlaggedRow> = stats
            .flagged
            .iter()
            .map(|&i| FlaggedRow {
                case_id: group[i].case_id.clone(),
                side: group[i].side.clone(),
                mad: mads[i],
            })
            .collect();
        let flagged_cases: BTreeSet<String> = flagged.iter().map(|f| f.case_id.clone()).collect();
        let tp = flagged_cases.intersection(&hard_cases).count();
        modes.push(ModeAnalysis {
            mode: mode.to_string(),
            n: mads.len(),
            recall: (!hard_cases.is_empty()).then(|| tp as f64 / hard_cases.len() as f64),
            precision: (!flagged_cases.is_empty()).then(|| tp as f64 / flagged_cases.len() as f64),
            true_positives: tp,
            flagged_cases: flagged_cases.into_iter().collect(),
            flagged,
            stats,
        });
    }
    // fixed mode order for outputs
    modes.sort_by_key(|m| RunMode::from_str(&m.mode).map(|r| r as usize).unwrap_or(usize::MAX));
    let report = AnalysisReport {
        config_hash,
        seed,
        hard_cases: hard_cases.into_iter().collect(),
        modes,
        skipped_modes: skipped,
    };

    create_dir(out_dir)?;
    write_file(&out_dir.join("analysis.json"), &serde_json::to_vec_pretty(&report)?)?;

    let rej_path = out_dir.join("rejections.csv");
    let mut w = csv::Writer::from_path(&rej_path).map_err(|e| csv_io(&rej_path, e))?;
    w.write_record(["case_id", "side", "mode", "mad", "flagged", "hard", "seed", "config_hash"])?;
    for m in &report.modes {
        let flagged: BTreeSet<(&str, &str)> = m.flagged.iter().map(|f| (f.case_id.as_str(), f.side.as_str())).collect();
        for r in rows.iter().filter(|r| r.mode == m.mode) {
            if let Some(mad) = r.mad {
                let f = flagged.contains(&(r.case_id.as_str(), r.side.as_str()));
                w.write_record([
                    r.case_id.as_str(),
                    r.side.as_str(),
                    r.mode.as_str(),
                    &mad.to_string(),
                    &f.to_string(),
                    &r.hard.to_string(),
                    &report.seed,
                    &report.config_hash,
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&rej_path, e))?;

    let long_path = out_dir.join("boxplot_long.csv");
    let mut w = csv::Writer::from_path(&long_path).map_err(|e| csv_io(&long_path, e))?;
    w.write_record(["mode", "statistic", "value", "seed", "config_hash"])?;
    for m in &report.modes {
        let s = &m.stats;
        let mut stats = vec![
            ("n", m.n as f64),
            ("q1", s.q1),
            ("median", s.median),
            ("q3", s.q3),
            ("iqr", s.iqr),
            ("upper_fence", s.upper_fence),
            ("upper_whisker", s.upper_whisker),
            ("n_flagged", s.flagged.len() as f64),
        ];
        stats.extend(m.recall.map(|r| ("recall", r)));
        stats.extend(m.precision.map(|p| ("precision", p)));
        for (name, value) in stats {
            w.write_record([m.mode.as_str(), name, &value.to_string(), &report.seed, &report.config_hash])?;
        }
    }
    w.flush().map_err(|e| Error::io(&long_path, e))?;
    Ok(report)
}
