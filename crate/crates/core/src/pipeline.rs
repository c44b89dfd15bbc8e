//! Stage orchestration over a work directory.
//!
//! Every stage writes one output directory holding its artifacts, a copy of
//! the resolved configuration and a `digests.json` listing the SHA-256 of
//! each file plus the digests of the inputs it consumed. Stages verify their
//! inputs against those records before reading, so edited or outdated
//! upstream artifacts are reported instead of silently used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::crawl::{crawl_keyword, sha256_hex, CrawlManifest, EntryStatus, ManifestEntry, QualityRecord, MANIFEST_FILE, TOKEN_ENV};
use crate::cues::{fuse_max, snap, HeuristicMap};
use crate::error::{Error, Result};
use crate::eval::{accumulate, iou_report, ConfusionMatrix, IouReport};
use crate::labels::{CategoryTable, LabelSet};
use crate::maps::{write_atomic, ScoreMap, SegmentationMask};
use crate::nfm::{
    extract_region_features, filter_noise, label_regions_for_training, predict_foreground, train_nfm, ImageRegions,
    MlpParameters, ParamsMeta,
};
use crate::overlay::{render_overlay, Overlay};
use crate::qfilter::{quality_gate, QualityConfig};
use crate::raster::{load_raster, ProbabilityMap, RasterImage};
use crate::refine::refine_labels;
use crate::regions::{build_ucm, sidecar_path, watershed_oversegment, RegionMap};
use crate::surrogate::ColorLookupModel;
use crate::synth::generate;

pub const DIGESTS_FILE: &str = "digests.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const SCORES_EXT: &str = "scores";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Writes a synthetic data set in place of crawl plus external cues.
    Synth,
    Crawl,
    Filter,
    Regions,
    Heuristic,
    NfmTrain,
    /// Round 1: noise-filtered heuristic maps.
    NfmFilter,
    /// Stand-in learner producing score maps from the round-1 targets.
    Surrogate,
    /// Round 2: label-restricted, CRF-refined masks.
    Refine,
    Eval,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Synth,
        Stage::Crawl,
        Stage::Filter,
        Stage::Regions,
        Stage::Heuristic,
        Stage::NfmTrain,
        Stage::NfmFilter,
        Stage::Surrogate,
        Stage::Refine,
        Stage::Eval,
        Stage::Render,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Crawl => "crawl",
            Stage::Filter => "filter",
            Stage::Regions => "regions",
            Stage::Heuristic => "heuristic",
            Stage::NfmTrain => "nfm-train",
            Stage::NfmFilter => "nfm-filter",
            Stage::Surrogate => "surrogate",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
            Stage::Render => "render",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub items: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DigestRecord {
    pub files: BTreeMap<String, String>,
    /// Digest of each consumed input directory's own record.
    pub inputs: BTreeMap<String, String>,
}

/// One usable image of the filtered manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub category: u8,
    pub path: PathBuf,
}

#[derive(Serialize)]
struct NfmTrainSummary<'a> {
    steps: u64,
    images: usize,
    batch_losses: &'a [f64],
}

pub struct Pipeline {
    config: PipelineConfig,
    table: CategoryTable,
    root: PathBuf,
    overrides: BTreeMap<Stage, PathBuf>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// `jobs` bounds the worker pool; 0 uses every available core. Results
    /// do not depend on it.
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>, jobs: usize) -> Result<Self> {
        config.validate()?;
        let table = config.table()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            config,
            table,
            root: root.into(),
            overrides: BTreeMap::new(),
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn table(&self) -> &CategoryTable {
        &self.table
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Places a stage's output somewhere other than its default directory.
    /// The synthetic and crawl stages share one directory.
    pub fn set_dir(&mut self, stage: Stage, dir: impl Into<PathBuf>) {
        let dir = dir.into();
        let stage = if stage == Stage::Synth { Stage::Crawl } else { stage };
        self.overrides.insert(stage, dir);
    }

    /// Output directory of a stage.
    pub fn dir(&self, stage: Stage) -> PathBuf {
        let key = if stage == Stage::Synth { Stage::Crawl } else { stage };
        if let Some(d) = self.overrides.get(&key) {
            return self.resolve(d);
        }
        match stage {
            Stage::Synth | Stage::Crawl => self.root.join("crawl"),
            Stage::Filter => self.root.join("filter"),
            Stage::Regions => self.root.join("regions"),
            Stage::Heuristic => self.root.join("heuristic"),
            Stage::NfmTrain => self.root.join("nfm"),
            Stage::NfmFilter => self.root.join("round1"),
            Stage::Surrogate => self.resolve(&self.config.paths.scores),
            Stage::Refine => self.root.join("round2"),
            Stage::Eval => self.root.join("eval"),
            Stage::Render => self.root.join("render"),
        }
    }

    fn par_map<T, I, F>(&self, items: &[I], f: F) -> Result<Vec<T>>
    where
        T: Send,
        I: Sync,
        F: Fn(&I) -> Result<T> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    /// Runs the requested stages in dependency order.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageReport>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut reports = Vec::new();
        for stage in ordered {
            let report = match stage {
                Stage::Synth => self.synth()?,
                Stage::Crawl => self.crawl(std::env::var(TOKEN_ENV).ok())?,
                Stage::Filter => self.filter()?,
                Stage::Regions => self.regions()?,
                Stage::Heuristic => self.heuristic()?,
                Stage::NfmTrain if !self.config.nfm.enabled => StageReport {
                    stage,
                    items: 0,
                    detail: "skipped: noise filtering disabled".into(),
                },
                Stage::NfmTrain => self.nfm_train()?,
                Stage::NfmFilter => self.run_round(1, self.config.nfm.enabled)?,
                Stage::Surrogate => self.surrogate()?,
                Stage::Refine => self.run_round(2, false)?,
                Stage::Eval => self.eval(None, None)?.1,
                Stage::Render => self.render(None)?,
            };
            log::info!("{}: {} items, {}", report.stage, report.items, report.detail);
            reports.push(report);
        }
        Ok(reports)
    }

    /// Clears a previous pipeline output; refuses to touch foreign directories.
    fn prepare_output(&self, dir: &Path) -> Result<()> {
        if dir.join(DIGESTS_FILE).exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        } else if std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
            return Err(Error::Contract(format!(
                "{} exists and was not written by the pipeline; refusing to overwrite it",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn record_name(&self, dir: &Path) -> String {
        dir.strip_prefix(&self.root)
            .unwrap_or(dir)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Writes the config copy and the digest record of an output directory.
    fn finish_output(&self, dir: &Path, inputs: &[&Path]) -> Result<()> {
        write_atomic(&dir.join(CONFIG_COPY), self.config.to_toml().as_bytes())?;
        let mut record = DigestRecord::default();
        for rel in list_files(dir)? {
            if rel == DIGESTS_FILE {
                continue;
            }
            let bytes = std::fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
            record.files.insert(rel, sha256_hex(&bytes));
        }
        for input in inputs {
            let side = input.join(DIGESTS_FILE);
            if let Ok(bytes) = std::fs::read(&side) {
                record.inputs.insert(self.record_name(input), sha256_hex(&bytes));
            }
        }
        let json = serde_json::to_string_pretty(&record).expect("plain data");
        write_atomic(&dir.join(DIGESTS_FILE), json.as_bytes())
    }

    /// Checks a pipeline-produced directory against its digest record and
    /// the current records of the inputs it was built from.
    fn verify_stage_output(&self, dir: &Path, producer: Stage) -> Result<()> {
        if !dir.join(DIGESTS_FILE).exists() {
            return Err(Error::MissingInput(format!(
                "{} has no {DIGESTS_FILE}; run the `{producer}` stage first",
                dir.display()
            )));
        }
        verify_dir(dir, &self.root)
    }

    /// External inputs are verified only when they carry a digest record.
    fn verify_external(&self, dir: &Path) -> Result<()> {
        if !dir.is_dir() {
            return Err(Error::MissingInput(format!("input directory {} does not exist", dir.display())));
        }
        if dir.join(DIGESTS_FILE).exists() {
            verify_dir(dir, &self.root)?;
        }
        Ok(())
    }

    /// Usable images of the filtered manifest, sorted by id.
    pub fn images(&self) -> Result<Vec<ImageEntry>> {
        let filter_dir = self.dir(Stage::Filter);
        self.verify_stage_output(&filter_dir, Stage::Filter)?;
        let manifest = CrawlManifest::load(&filter_dir.join(MANIFEST_FILE))?;
        let crawl_dir = self.dir(Stage::Crawl);
        let mut out = Vec::new();
        for e in manifest.entries.iter().filter(|e| e.is_usable()) {
            let (Some(id), Some(rel)) = (e.id(), e.local_path.as_ref()) else {
                continue;
            };
            let category = self
                .table
                .id(&e.keyword)
                .ok_or_else(|| Error::Config(format!("manifest keyword `{}` is not a configured keyword", e.keyword)))?;
            out.push(ImageEntry {
                id,
                category,
                path: crawl_dir.join(rel),
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Contract(format!("two manifest entries share the image id {}", w[0].id)));
        }
        Ok(out)
    }

    fn labels_of(&self, entry: &ImageEntry) -> Result<LabelSet> {
        LabelSet::single(entry.category, &self.table)
    }

    /// Generates the synthetic data set: images plus manifest, saliency,
    /// edge and ground-truth maps.
    pub fn synth(&self) -> Result<StageReport> {
        let synth = &self.config.synth;
        let names: Vec<&String> = synth.categories.iter().map(|c| &c.0).collect();
        if names != self.config.keywords.iter().collect::<Vec<_>>() {
            return Err(Error::Config(
                "keywords must equal the synthetic category names, in order".into(),
            ));
        }
        let crawl_dir = self.dir(Stage::Crawl);
        let sal_dir = self.resolve(&self.config.paths.saliency);
        let edge_dir = self.resolve(&self.config.paths.edges);
        let gt_dir = self.resolve(&self.config.paths.ground_truth);
        for d in [&crawl_dir, &sal_dir, &edge_dir, &gt_dir] {
            self.prepare_output(d)?;
        }
        let samples = generate(synth, self.config.seed)?;
        let entries = self.par_map(&samples, |s| {
            let keyword = &synth.categories[usize::from(s.category) - 1].0;
            let staging = crawl_dir.join(format!("images/{keyword}/staging-{}.png", s.index));
            s.image.save(&staging)?;
            let bytes = std::fs::read(&staging).map_err(|e| Error::io(&staging, e))?;
            let hash = sha256_hex(&bytes);
            let rel = PathBuf::from(format!("images/{keyword}/{hash}.png"));
            std::fs::rename(&staging, crawl_dir.join(&rel)).map_err(|e| Error::io(&staging, e))?;
            let entry = ManifestEntry {
                keyword: keyword.clone(),
                url: format!("synthetic://{}/{}", self.config.seed, s.index),
                local_path: Some(rel),
                content_hash: Some(hash),
                status: EntryStatus::Fetched,
                reason: None,
                quality: None,
            };
            let id = entry.id().expect("hash present");
            s.saliency.save(&sal_dir.join(format!("{id}.png")))?;
            s.edges.save(&edge_dir.join(format!("{id}.png")))?;
            s.gt.save(&gt_dir.join(format!("{id}.png")))?;
            Ok(entry)
        })?;
        CrawlManifest { entries }.save(&crawl_dir.join(MANIFEST_FILE))?;
        for d in [&crawl_dir, &sal_dir, &edge_dir, &gt_dir] {
            self.finish_output(d, &[])?;
        }
        Ok(StageReport {
            stage: Stage::Synth,
            items: samples.len(),
            detail: format!(
                "{} images, {} with distractors",
                samples.len(),
                samples.iter().filter(|s| s.distractor.is_some()).count()
            ),
        })
    }

    /// Crawls every configured keyword into the crawl directory.
    pub fn crawl(&self, token: Option<String>) -> Result<StageReport> {
        let dir = self.dir(Stage::Crawl);
        let mut added = 0;
        for keyword in &self.config.keywords {
            added += crawl_keyword(keyword, &self.config.crawl, token.clone(), &dir)?
                .fetched()
                .count();
        }
        self.finish_output(&dir, &[])?;
        Ok(StageReport {
            stage: Stage::Crawl,
            items: added,
            detail: format!("{} keywords", self.config.keywords.len()),
        })
    }

    /// Applies the quality gates and writes the annotated manifest.
    pub fn filter(&self) -> Result<StageReport> {
        let crawl_dir = self.dir(Stage::Crawl);
        self.verify_stage_output(&crawl_dir, Stage::Crawl)?;
        let manifest = CrawlManifest::load(&crawl_dir.join(MANIFEST_FILE))?;
        let quality = self.config.quality;
        let entries = self.par_map(&manifest.entries, |e| Ok(gate_entry(e, &crawl_dir, &quality)))?;
        let accepted = entries.iter().filter(|e| e.is_usable()).count();
        let fetched = entries.iter().filter(|e| e.is_fetched()).count();
        let out = self.dir(Stage::Filter);
        self.prepare_output(&out)?;
        CrawlManifest { entries }.save(&out.join(MANIFEST_FILE))?;
        self.finish_output(&out, &[&crawl_dir])?;
        Ok(StageReport {
            stage: Stage::Filter,
            items: accepted,
            detail: format!("{accepted} of {fetched} fetched images accepted"),
        })
    }

    fn load_cue(&self, dir: &Path, id: &str, width: usize, height: usize) -> Result<ProbabilityMap> {
        let path = dir.join(format!("{id}.png"));
        if !path.exists() {
            return Err(Error::MissingInput(format!("cue map {} is missing", path.display())));
        }
        let map = ProbabilityMap::load(&path)?;
        Ok(if map.same_shape(width, height) {
            map
        } else {
            map.resize_bilinear(width, height)
        })
    }

    fn load_image(&self, entry: &ImageEntry) -> Result<RasterImage> {
        load_raster(&entry.path)
    }

    /// Builds the region hierarchy from each edge map and stores the
    /// configured cut.
    pub fn regions(&self) -> Result<StageReport> {
        let images = self.images()?;
        let edge_dir = self.resolve(&self.config.paths.edges);
        self.verify_external(&edge_dir)?;
        let out = self.dir(Stage::Regions);
        self.prepare_output(&out)?;
        let cfg = self.config.regions;
        let counts = self.par_map(&images, |e| {
            let img = self.load_image(e)?;
            let edges = self.load_cue(&edge_dir, &e.id, img.width(), img.height())?;
            let base = watershed_oversegment(&edges);
            let regions = build_ucm(&base, &edges, cfg.boundary)?.cut(cfg.threshold)?;
            regions.save(&out.join(format!("{}.png", e.id)))?;
            Ok(regions.count())
        })?;
        self.finish_output(&out, &[&self.dir(Stage::Filter), &edge_dir])?;
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        Ok(StageReport {
            stage: Stage::Regions,
            items: images.len(),
            detail: format!("{mean:.1} regions per image at threshold {}", cfg.threshold),
        })
    }

    fn load_regions(&self, id: &str) -> Result<RegionMap> {
        RegionMap::load(&self.dir(Stage::Regions).join(format!("{id}.png")))
    }

    /// Fuses the cue maps and snaps them onto the regions.
    pub fn heuristic(&self) -> Result<StageReport> {
        let images = self.images()?;
        let regions_dir = self.dir(Stage::Regions);
        self.verify_stage_output(&regions_dir, Stage::Regions)?;
        let sal_dir = self.resolve(&self.config.paths.saliency);
        self.verify_external(&sal_dir)?;
        let att_dir = self.config.paths.attention.as_ref().map(|p| self.resolve(p));
        if let Some(d) = &att_dir {
            self.verify_external(d)?;
        }
        let out = self.dir(Stage::Heuristic);
        self.prepare_output(&out)?;
        self.par_map(&images, |e| {
            let regions = self.load_regions(&e.id)?;
            let (w, h) = (regions.width(), regions.height());
            let mut cue = self.load_cue(&sal_dir, &e.id, w, h)?;
            if let Some(d) = &att_dir {
                cue = fuse_max(&cue, &self.load_cue(d, &e.id, w, h)?)?;
            }
            snap(&cue, &regions, e.category)?.save(&out.join(format!("{}.png", e.id)))
        })?;
        let mut inputs = vec![self.dir(Stage::Filter), regions_dir, sal_dir];
        inputs.extend(att_dir);
        self.finish_output(&out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
        Ok(StageReport {
            stage: Stage::Heuristic,
            items: images.len(),
            detail: "snapped cue maps".into(),
        })
    }

    fn load_heuristic(&self, id: &str) -> Result<HeuristicMap> {
        HeuristicMap::load(&self.dir(Stage::Heuristic).join(format!("{id}.png")))
    }

    fn region_data(&self, images: &[ImageEntry]) -> Result<Vec<(ImageRegions, HeuristicMap, RegionMap)>> {
        let edge_dir = self.resolve(&self.config.paths.edges);
        let nfm = self.config.nfm.model;
        self.par_map(images, |e| {
            let img = self.load_image(e)?;
            let regions = self.load_regions(&e.id)?;
            let heuristic = self.load_heuristic(&e.id)?;
            let edges = self.load_cue(&edge_dir, &e.id, img.width(), img.height())?;
            let data = ImageRegions {
                features: extract_region_features(&img, &regions, &heuristic, &edges, nfm.bins_per_channel)?,
                labels: label_regions_for_training(&heuristic, &regions, &self.labels_of(e)?, nfm.fg_epsilon)?,
            };
            Ok((data, heuristic, regions))
        })
    }

    fn verify_nfm_inputs(&self) -> Result<()> {
        self.verify_stage_output(&self.dir(Stage::Regions), Stage::Regions)?;
        self.verify_stage_output(&self.dir(Stage::Heuristic), Stage::Heuristic)?;
        self.verify_external(&self.resolve(&self.config.paths.edges))
    }

    /// Trains the noise-filtering classifier, one step per image.
    pub fn nfm_train(&self) -> Result<StageReport> {
        let images = self.images()?;
        self.verify_nfm_inputs()?;
        let data: Vec<ImageRegions> = self.region_data(&images)?.into_iter().map(|d| d.0).collect();
        let (params, report) = train_nfm(&data, self.table.len(), &self.config.nfm.model, self.config.seed)?;
        let out = self.dir(Stage::NfmTrain);
        self.prepare_output(&out)?;
        params.save(
            &out.join(PARAMS_FILE),
            &ParamsMeta {
                seed: self.config.seed,
                steps: report.steps,
            },
        )?;
        let summary = NfmTrainSummary {
            steps: report.steps,
            images: images.len(),
            batch_losses: &report.batch_losses,
        };
        write_atomic(
            &out.join("report.json"),
            serde_json::to_string_pretty(&summary).expect("plain data").as_bytes(),
        )?;
        self.finish_output(&out, &[&self.dir(Stage::Heuristic), &self.dir(Stage::Regions)])?;
        let tail = report.batch_losses.len().saturating_sub(10);
        let last = report.batch_losses[tail..].iter().sum::<f64>() / (report.batch_losses.len() - tail).max(1) as f64;
        Ok(StageReport {
            stage: Stage::NfmTrain,
            items: report.steps as usize,
            detail: format!("{} steps, mean loss of the last steps {last:.4}", report.steps),
        })
    }

    /// Round 1 emits training targets: noise-filtered heuristic maps, or the
    /// snapped maps unchanged when filtering is off. Round 2 emits refined
    /// masks from learner scores; noise filtering is never used there.
    pub fn run_round(&self, round: u8, nfm_enabled: bool) -> Result<StageReport> {
        match (round, nfm_enabled) {
            (1, _) => self.round1(nfm_enabled),
            (2, false) => self.round2(),
            (2, true) => Err(Error::Contract(
                "noise filtering applies to round 1 only; round 2 must run with it disabled".into(),
            )),
            _ => Err(Error::InvalidInput(format!("round must be 1 or 2, got {round}"))),
        }
    }

    fn round1(&self, nfm_enabled: bool) -> Result<StageReport> {
        let images = self.images()?;
        let heuristic_dir = self.dir(Stage::Heuristic);
        self.verify_stage_output(&heuristic_dir, Stage::Heuristic)?;
        let mut inputs = vec![self.dir(Stage::Filter), heuristic_dir];
        let filtered: Vec<HeuristicMap> = if nfm_enabled {
            self.verify_nfm_inputs()?;
            let nfm_dir = self.dir(Stage::NfmTrain);
            self.verify_stage_output(&nfm_dir, Stage::NfmTrain)?;
            let (params, _) = MlpParameters::load(&nfm_dir.join(PARAMS_FILE))?;
            let eps = self.config.nfm.model.fg_epsilon;
            let data = self.region_data(&images)?;
            inputs.extend([self.dir(Stage::Regions), nfm_dir]);
            let pairs: Vec<_> = images.iter().zip(data).collect();
            self.par_map(&pairs, |(e, (d, heuristic, regions))| {
                let preds = predict_foreground(&params, d)?;
                filter_noise(heuristic, regions, &preds, &self.labels_of(e)?, eps)
            })?
        } else {
            self.par_map(&images, |e| self.load_heuristic(&e.id))?
        };
        let out = self.dir(Stage::NfmFilter);
        self.prepare_output(&out)?;
        let ignored: usize = self.par_map(&images.iter().zip(&filtered).collect::<Vec<_>>(), |(e, h)| {
            h.save(&out.join(format!("{}.png", e.id)))?;
            Ok(h.ignore().iter().filter(|&&i| i).count())
        })?
        .into_iter()
        .sum();
        self.finish_output(&out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
        Ok(StageReport {
            stage: Stage::NfmFilter,
            items: images.len(),
            detail: if nfm_enabled {
                format!("{ignored} pixels marked ignore")
            } else {
                "noise filtering disabled; snapped maps passed through".into()
            },
        })
    }

    fn score_labels(&self) -> Vec<String> {
        std::iter::once("background".to_string())
            .chain(self.config.keywords.iter().cloned())
            .collect()
    }

    /// Fits the stand-in learner on the round-1 targets and writes a score
    /// map for every image.
    pub fn surrogate(&self) -> Result<StageReport> {
        let images = self.images()?;
        let round1 = self.dir(Stage::NfmFilter);
        self.verify_stage_output(&round1, Stage::NfmFilter)?;
        let cfg = self.config.surrogate;
        let loaded = self.par_map(&images, |e| {
            Ok((self.load_image(e)?, HeuristicMap::load(&round1.join(format!("{}.png", e.id)))?))
        })?;
        let mut model = ColorLookupModel::new(cfg.bins_per_channel, self.table.len(), cfg.prior_strength)?;
        for (img, target) in &loaded {
            model.add_heuristic(img, target)?;
        }
        let out = self.dir(Stage::Surrogate);
        self.prepare_output(&out)?;
        let labels = self.score_labels();
        let pairs: Vec<_> = images.iter().zip(&loaded).collect();
        self.par_map(&pairs, |(e, (img, _))| {
            model.scores(img)?.save(&out.join(format!("{}.{SCORES_EXT}", e.id)), &labels)
        })?;
        self.finish_output(&out, &[&round1])?;
        Ok(StageReport {
            stage: Stage::Surrogate,
            items: images.len(),
            detail: "color lookup model fitted to round-1 targets".into(),
        })
    }

    fn round2(&self) -> Result<StageReport> {
        let images = self.images()?;
        let scores_dir = self.resolve(&self.config.paths.scores);
        self.verify_external(&scores_dir)?;
        let regions_dir = self.dir(Stage::Regions);
        self.verify_stage_output(&regions_dir, Stage::Regions)?;
        let out = self.dir(Stage::Refine);
        self.prepare_output(&out)?;
        let expected = self.score_labels();
        self.par_map(&images, |e| {
            let path = scores_dir.join(format!("{}.{SCORES_EXT}", e.id));
            if !path.exists() {
                return Err(Error::MissingInput(format!("score map {} is missing", path.display())));
            }
            let (scores, labels) = ScoreMap::load(&path)?;
            if labels != expected {
                return Err(Error::InvalidInput(format!(
                    "{}: score channels {labels:?} do not match the configured keywords",
                    path.display()
                )));
            }
            let img = self.load_image(e)?;
            let regions = self.load_regions(&e.id)?;
            let mask = refine_labels(&scores, &self.labels_of(e)?, &img, &regions, &self.config.crf)?;
            mask.save(&out.join(format!("{}.png", e.id)))
        })?;
        self.finish_output(&out, &[&self.dir(Stage::Filter), &scores_dir, &regions_dir])?;
        Ok(StageReport {
            stage: Stage::Refine,
            items: images.len(),
            detail: "refined masks".into(),
        })
    }

    /// Scores every mask in `pred` (default: round-2 masks) against the
    /// same-named mask in `gt` (default: the configured ground truth).
    pub fn eval(&self, pred: Option<&Path>, gt: Option<&Path>) -> Result<(IouReport, StageReport)> {
        let pred_dir = pred.map_or_else(|| self.dir(Stage::Refine), Path::to_path_buf);
        let gt_dir = gt.map_or_else(|| self.resolve(&self.config.paths.ground_truth), Path::to_path_buf);
        self.verify_external(&pred_dir)?;
        self.verify_external(&gt_dir)?;
        let names: Vec<String> = list_files(&pred_dir)?
            .into_iter()
            .filter(|n| n.ends_with(".png") && !n.contains('/'))
            .collect();
        if names.is_empty() {
            return Err(Error::MissingInput(format!("no masks in {}", pred_dir.display())));
        }
        let classes = self.table.len();
        let matrices = self.par_map(&names, |name| {
            let gt_path = gt_dir.join(name);
            if !gt_path.exists() {
                return Err(Error::MissingInput(format!("ground truth {} is missing", gt_path.display())));
            }
            let mut cm = ConfusionMatrix::new(classes);
            accumulate(&mut cm, &SegmentationMask::load(&pred_dir.join(name))?, &SegmentationMask::load(&gt_path)?)?;
            Ok(cm)
        })?;
        let mut total = ConfusionMatrix::new(classes);
        for cm in &matrices {
            total.merge(cm)?;
        }
        let report = iou_report(&total, &self.table)?;
        let out = self.dir(Stage::Eval);
        self.prepare_output(&out)?;
        write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
        write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
        self.finish_output(&out, &[&pred_dir, &gt_dir])?;
        let stage = StageReport {
            stage: Stage::Eval,
            items: names.len(),
            detail: match report.mean {
                Some(m) => format!("mean IoU {:.1}", 100.0 * m),
                None => "no defined class".into(),
            },
        };
        Ok((report, stage))
    }

    /// Renders overlays of the masks or heuristic maps in `input` (default:
    /// round-2 masks) onto their images.
    pub fn render(&self, input: Option<&Path>) -> Result<StageReport> {
        let in_dir = input.map_or_else(|| self.dir(Stage::Refine), Path::to_path_buf);
        self.verify_external(&in_dir)?;
        let images = self.images()?;
        let out = self.dir(Stage::Render);
        self.prepare_output(&out)?;
        let rendered = self.par_map(&images, |e| {
            let path = in_dir.join(format!("{}.png", e.id));
            if !path.exists() {
                return Ok(false);
            }
            let img = self.load_image(e)?;
            let overlay = if sidecar_path(&path).exists() {
                let h = HeuristicMap::load(&path)?;
                render_overlay(&img, Overlay::Heuristic(&h))?
            } else {
                let m = SegmentationMask::load(&path)?;
                render_overlay(&img, Overlay::Mask(&m))?
            };
            overlay.save(&out.join(format!("{}.png", e.id)))?;
            Ok(true)
        })?;
        let count = rendered.iter().filter(|&&r| r).count();
        if count == 0 {
            return Err(Error::MissingInput(format!("nothing to render in {}", in_dir.display())));
        }
        self.finish_output(&out, &[&in_dir])?;
        Ok(StageReport {
            stage: Stage::Render,
            items: count,
            detail: format!("overlays of {}", self.record_name(&in_dir)),
        })
    }
}

/// Attaches a quality verdict to a fetched entry whose file lives below
/// `base`. Unreadable images are recorded as rejected.
pub fn gate_entry(entry: &ManifestEntry, base: &Path, quality: &QualityConfig) -> ManifestEntry {
    let mut e = entry.clone();
    if let (true, Some(rel)) = (e.is_fetched(), e.local_path.as_ref()) {
        let verdict = load_raster(&base.join(rel)).and_then(|img| quality_gate(&img, quality));
        e.quality = Some(match verdict {
            Ok(v) => QualityRecord::from(&v),
            Err(err) => QualityRecord {
                blur_score: 0.0,
                mean_sat: 0.0,
                mean_val: 0.0,
                accepted: false,
                reason: Some(err.to_string()),
            },
        });
    }
    e
}

/// Gates every fetched entry of a manifest file and writes the verdicts
/// back into it. Returns (accepted, fetched).
pub fn gate_manifest(path: &Path, quality: &QualityConfig) -> Result<(usize, usize)> {
    quality.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut manifest = CrawlManifest::load(path)?;
    manifest.entries = manifest.entries.iter().map(|e| gate_entry(e, base, quality)).collect();
    manifest.save(path)?;
    Ok((
        manifest.entries.iter().filter(|e| e.is_usable()).count(),
        manifest.fetched().count(),
    ))
}

/// Relative paths of every file below `dir`, sorted, `/`-separated.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|source| Error::Unreadable {
            path: dir.to_path_buf(),
            source,
        })?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("walk stays below base");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn read_record(dir: &Path) -> Result<DigestRecord> {
    let path = dir.join(DIGESTS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| Error::Unreadable {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))
}

/// Verifies every recorded file digest of `dir`, and that the inputs it was
/// built from still carry the records seen at build time.
pub fn verify_dir(dir: &Path, root: &Path) -> Result<()> {
    let record = read_record(dir)?;
    let stale = |file: String| Error::StaleInput {
        dir: dir.to_path_buf(),
        file,
    };
    for (rel, digest) in &record.files {
        let bytes = std::fs::read(dir.join(rel)).map_err(|_| stale(rel.clone()))?;
        if &sha256_hex(&bytes) != digest {
            return Err(stale(rel.clone()));
        }
    }
    for (name, digest) in &record.inputs {
        let input = if Path::new(name).is_absolute() {
            PathBuf::from(name)
        } else {
            root.join(name)
        };
        match std::fs::read(input.join(DIGESTS_FILE)) {
            Ok(bytes) if &sha256_hex(&bytes) == digest => {}
            _ => return Err(stale(format!("{name}/{DIGESTS_FILE}"))),
        }
    }
    Ok(())
}
