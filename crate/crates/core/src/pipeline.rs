//! Manifest-driven corpus synthesis.
//!
//! A manifest lists scenes; each scene carries one or more views (image,
//! depth and mask references plus intrinsics), object descriptions, and
//! optional precomputed score files. The run admits scenes, lifts
//! geometry, synthesizes the 12-turn conversation, and writes one
//! line-delimited record per admitted scene or view set, in stable scene
//! order regardless of worker count. Per-scene failures are recorded in
//! the summary report and never abort the run.
//!
//! Service dependencies are trait objects with deterministic in-process
//! stubs; the stub is the only client this build wires up, so corpus
//! bytes stay a pure function of (manifest, config).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{admit, AdmissionLabelSet, LabelScores};
use crate::geometry::CameraIntrinsics;
use crate::io::{self, IoError};
use crate::qa::render_length;
use crate::reasoning::{
    synthesize_conversation, CaptionClient, Conversation, OrderMode, SceneGeometry, SceneView,
    SynthesisError, TurnLevel, TurnMix, TOTAL_TURNS,
};
use crate::rng::{mix, SeededRng};
use crate::view::{
    expand_viewpoints, score_pairs, AdmissionBand, DistanceValidator, FileBackend, Frame,
    PerceptualBackend, ProxyBackend, ViewPair,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("client '{0}' is not available in-process; use \"stub\" or drive the library API with your own client")]
    UnsupportedClient(String),
    #[error("no scenes produced records")]
    EmptyCorpus(Box<SummaryReport>),
    #[error("record refused: {0}")]
    Emit(String),
    #[error("failed to parse record: {0}")]
    Parse(String),
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    WriteOut {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Pinhole intrinsics as written in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// One view of a scene; all references are paths relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    pub depth: String,
    pub mask: String,
    pub intrinsics: IntrinsicsSpec,
}

/// A scene: its views, the object id to description map (keys are the
/// mask labels, as strings), and optional precomputed score references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub objects: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scores: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_scores: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let content = std::fs::read_to_string(path)
            .map_err(|source| PipelineError::Read { path: path.display().to_string(), source })?;
        let manifest: Manifest = serde_json::from_str(&content)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for scene in &self.scenes {
            if scene.views.is_empty() {
                return Err(PipelineError::Manifest(format!(
                    "scene {} has no views",
                    scene.id
                )));
            }
        }
        Ok(())
    }
}

/// Realized 2/4/8-view proportions to aim for on multi-view scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMixTargets {
    pub two: f64,
    pub four: f64,
    pub eight: f64,
}

impl Default for ViewMixTargets {
    fn default() -> Self {
        Self { two: 0.80, four: 0.15, eight: 0.05 }
    }
}

/// Full pipeline configuration; every field has a default so a config
/// file only needs the overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub order_mode: OrderMode,
    pub turn_mix: TurnMix,
    pub relation_eps_meters: f64,
    pub band: AdmissionBand,
    pub view_mix: ViewMixTargets,
    pub caption_client: String,
    pub validator_client: String,
    pub workers: usize,
    pub template_bank: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            order_mode: OrderMode::Forward,
            turn_mix: TurnMix::default(),
            relation_eps_meters: 0.02,
            band: AdmissionBand::default(),
            view_mix: ViewMixTargets::default(),
            caption_client: "stub".into(),
            validator_client: "stub".into(),
            workers: 1,
            template_bank: None,
        }
    }
}

/// Environment variables that override the client fields.
pub const CAPTION_ENDPOINT_VAR: &str = "SPATIALGEN_CAPTION_ENDPOINT";
pub const VALIDATOR_ENDPOINT_VAR: &str = "SPATIALGEN_VALIDATOR_ENDPOINT";

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let content = std::fs::read_to_string(path)
            .map_err(|source| PipelineError::Read { path: path.display().to_string(), source })?;
        let config: PipelineConfig = serde_json::from_str(&content)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.turn_mix.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        AdmissionBand::new(self.band.low, self.band.high)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let ViewMixTargets { two, four, eight } = self.view_mix;
        if two < 0.0 || four < 0.0 || eight < 0.0 || (two + four + eight - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!(
                "view mix {two}/{four}/{eight} must be nonnegative and sum to 1"
            )));
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Client names after environment overrides.
    pub fn effective_caption_client(&self) -> String {
        std::env::var(CAPTION_ENDPOINT_VAR).unwrap_or_else(|_| self.caption_client.clone())
    }

    pub fn effective_validator_client(&self) -> String {
        std::env::var(VALIDATOR_ENDPOINT_VAR).unwrap_or_else(|_| self.validator_client.clone())
    }
}

/// Deterministic caption text: enumerates the described objects and makes
/// one coarse layout claim (nearest and farthest object by cube-center
/// depth). The seed picks among fixed phrasings.
pub fn caption_stub(scene: &SceneGeometry, seed: u64) -> Result<[String; 2], SynthesisError> {
    let objects = scene.objects_near_to_far();
    if objects.is_empty() {
        return Err(SynthesisError::NoDescriptions);
    }
    let mut rng = SeededRng::new(seed);
    let names: Vec<&str> = objects.iter().map(|(id, _)| scene.description(*id)).collect();
    let list = names.join(", ");
    let nearest = names[0];
    let farthest = names[names.len() - 1];

    let opening = match rng.next_index(2) {
        0 => format!("The scene contains {list}."),
        _ => format!("This view shows {list}."),
    };
    let layout = if objects.len() >= 2 {
        format!(" The {nearest} is nearest to the viewer and the {farthest} is farthest away.")
    } else {
        format!(" The {nearest} sits {} from the viewer.", render_length(objects[0].1[2])?.text)
    };
    let first = format!("{opening}{layout}");

    let count = objects.len();
    let noun = if count == 1 { "object" } else { "objects" };
    let second = match rng.next_index(2) {
        0 => format!(
            "From the camera viewpoint, {count} {noun} can be seen, nearest to farthest: {list}."
        ),
        _ => format!("Ordered from nearest to farthest, this scene presents {count} {noun}: {list}."),
    };
    Ok([first, second])
}

/// [`caption_stub`] as a caption client.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubCaptionClient;

impl CaptionClient for StubCaptionClient {
    fn captions(&self, scene: &SceneGeometry, seed: u64) -> Result<[String; 2], String> {
        caption_stub(scene, seed).map_err(|e| e.to_string())
    }
}

/// One side of a conversation exchange on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub order_mode: OrderMode,
    pub seed: u64,
    pub view_count: usize,
    pub tool_versions: BTreeMap<String, String>,
}

/// The wire form of one conversation: 24 strictly alternating messages,
/// human first, with image references and run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub images: Vec<String>,
    pub conversations: Vec<Message>,
    pub metadata: RecordMetadata,
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.conversations.len() != TOTAL_TURNS * 2 {
            return Err(PipelineError::Emit(format!(
                "{} messages, expected {}",
                self.conversations.len(),
                TOTAL_TURNS * 2
            )));
        }
        for (i, message) in self.conversations.iter().enumerate() {
            let expect = if i % 2 == 0 { "human" } else { "assistant" };
            if message.from != expect {
                return Err(PipelineError::Emit(format!(
                    "message {i} from '{}', expected '{expect}'",
                    message.from
                )));
            }
        }
        Ok(())
    }
}

fn tool_versions() -> BTreeMap<String, String> {
    BTreeMap::from([("spatialgen-core".to_string(), env!("CARGO_PKG_VERSION").to_string())])
}

/// Serializes a conversation to one corpus line, refusing records that
/// violate the conversation invariants.
pub fn emit_record(conversation: &Conversation) -> Result<String, PipelineError> {
    conversation.validate().map_err(|e| PipelineError::Emit(e.to_string()))?;
    let mut messages = Vec::with_capacity(conversation.turns.len() * 2);
    for turn in &conversation.turns {
        messages.push(Message { from: "human".into(), value: turn.question.clone() });
        messages.push(Message { from: "assistant".into(), value: turn.answer.clone() });
    }
    let record = CorpusRecord {
        id: conversation.id.clone(),
        images: conversation.image_refs.clone(),
        conversations: messages,
        metadata: RecordMetadata {
            order_mode: conversation.order_mode,
            seed: conversation.seed,
            view_count: conversation.image_refs.len(),
            tool_versions: tool_versions(),
        },
    };
    record.validate()?;
    serde_json::to_string(&record).map_err(|e| PipelineError::Emit(e.to_string()))
}

/// Parses one corpus line back into a record and re-checks its shape.
pub fn parse_record(line: &str) -> Result<CorpusRecord, PipelineError> {
    let record: CorpusRecord =
        serde_json::from_str(line).map_err(|e| PipelineError::Parse(e.to_string()))?;
    record.validate().map_err(|e| PipelineError::Parse(e.to_string()))?;
    Ok(record)
}

/// Filter stages a scene passes through, in order.
pub const STAGES: [&str; 4] = ["ingest", "admission", "geometry", "synthesis"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FilterStage {
    Ingest = 0,
    Admission = 1,
    Geometry = 2,
    Synthesis = 3,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCount {
    pub stage: String,
    pub input: usize,
    pub admitted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneFailure {
    pub scene_id: String,
    pub stage: String,
    pub reason: String,
}

/// Run accounting: per-stage admission counts (admitted + rejected equals
/// the stage input), realized view-count histogram, and per-scene
/// failures.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryReport {
    pub scenes_total: usize,
    pub stages: Vec<StageCount>,
    pub records_emitted: usize,
    pub view_counts: BTreeMap<usize, usize>,
    pub expansion_fallbacks: usize,
    pub failures: Vec<SceneFailure>,
}

impl std::fmt::Display for SummaryReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "scenes: {}", self.scenes_total)?;
        for s in &self.stages {
            writeln!(
                f,
                "  {:<10} input {:>6}  admitted {:>6}  rejected {:>6}",
                s.stage, s.input, s.admitted, s.rejected
            )?;
        }
        writeln!(f, "records emitted: {}", self.records_emitted)?;
        if !self.view_counts.is_empty() {
            let mix: Vec<String> =
                self.view_counts.iter().map(|(k, v)| format!("{k}-view: {v}")).collect();
            writeln!(f, "view counts: {}", mix.join(", "))?;
        }
        if self.expansion_fallbacks > 0 {
            writeln!(f, "expansion fallbacks: {}", self.expansion_fallbacks)?;
        }
        if !self.failures.is_empty() {
            writeln!(f, "failures:")?;
            for failure in &self.failures {
                writeln!(f, "  {} [{}] {}", failure.scene_id, failure.stage, failure.reason)?;
            }
        }
        Ok(())
    }
}

struct SceneSuccess {
    line: String,
    view_count: usize,
    expansion_fallback: bool,
}

struct SceneSkip {
    stage: FilterStage,
    reason: String,
}

type SceneOutcome = Result<SceneSuccess, SceneSkip>;

fn skip(stage: FilterStage, reason: impl ToString) -> SceneOutcome {
    Err(SceneSkip { stage, reason: reason.to_string() })
}

/// Derived-seed stream index for the view-mix draw; the reasoning module
/// owns indices 0 through 5.
const STREAM_VIEW_MIX: u64 = 100;

fn parse_objects(scene: &SceneEntry) -> Result<BTreeMap<u32, String>, String> {
    let mut out = BTreeMap::new();
    for (key, value) in &scene.objects {
        let id: u32 = key
            .parse()
            .map_err(|_| format!("object key '{key}' is not a numeric mask label"))?;
        if id == 0 {
            return Err("object key 0 is reserved for background".into());
        }
        out.insert(id, value.clone());
    }
    Ok(out)
}

fn draw_target_views(rng: &mut SeededRng, mix_targets: &ViewMixTargets) -> usize {
    let r = rng.next_f64();
    if r < mix_targets.two {
        2
    } else if r < mix_targets.two + mix_targets.four {
        4
    } else {
        8
    }
}

struct LoadedView {
    entry: ViewEntry,
    view: SceneView,
}

fn load_views(
    scene: &SceneEntry,
    base_dir: &Path,
    descriptions: &BTreeMap<u32, String>,
) -> Result<Vec<LoadedView>, String> {
    let mut refs_seen = std::collections::BTreeSet::new();
    let mut views = Vec::with_capacity(scene.views.len());
    for entry in &scene.views {
        if !refs_seen.insert(entry.image.clone()) {
            return Err(format!("duplicate image ref '{}'", entry.image));
        }
        let spec = entry.intrinsics;
        let intrinsics =
            CameraIntrinsics::new(spec.fx, spec.fy, spec.cx, spec.cy, spec.width, spec.height)
                .map_err(|e| e.to_string())?;
        let image_path = base_dir.join(&entry.image);
        if !image_path.exists() {
            return Err(format!("image ref '{}' does not resolve", entry.image));
        }
        let depth = io::read_depth(&base_dir.join(&entry.depth)).map_err(|e| e.to_string())?;
        let mask = io::read_mask(&base_dir.join(&entry.mask), descriptions.clone())
            .map_err(|e| e.to_string())?;
        views.push(LoadedView {
            entry: entry.clone(),
            view: SceneView {
                image_ref: entry.image.clone(),
                depth,
                mask,
                intrinsics,
            },
        });
    }
    Ok(views)
}

/// Scores this scene's view pairs and picks the first admitted pair as
/// the anchor.
fn select_anchor_pair(
    frames: &[Frame],
    backend: &dyn PerceptualBackend,
    band: AdmissionBand,
) -> Result<Option<ViewPair>, String> {
    let pairs = score_pairs(frames, backend, band).map_err(|e| e.to_string())?;
    Ok(pairs.into_iter().find(|p| p.admitted))
}

fn process_scene(
    index: usize,
    scene: &SceneEntry,
    base_dir: &Path,
    config: &PipelineConfig,
    bank: &crate::qa::TemplateBank,
    labels: &AdmissionLabelSet,
    caption_client: &dyn CaptionClient,
) -> SceneOutcome {
    let scene_seed = mix(config.seed, index as u64);

    // ingest
    let descriptions = match parse_objects(scene) {
        Ok(d) => d,
        Err(reason) => return skip(FilterStage::Ingest, reason),
    };
    let loaded = match load_views(scene, base_dir, &descriptions) {
        Ok(v) => v,
        Err(reason) => return skip(FilterStage::Ingest, reason),
    };

    // admission
    struct MultiViewWork {
        anchor: ViewPair,
        candidates: Vec<String>,
        frames: Vec<Frame>,
        file_backend: Option<FileBackend>,
    }
    let proxy = ProxyBackend;
    let mut anchor_views: Vec<SceneView> = Vec::new();
    let mut multi_view: Option<MultiViewWork> = None;

    if loaded.len() == 1 {
        let only = &loaded[0];
        if let Some(score_ref) = &scene.label_scores {
            let path = base_dir.join(score_ref);
            let table = match io::read_label_scores(&path) {
                Ok(t) => t,
                Err(e) => return skip(FilterStage::Admission, e),
            };
            let Some(raw) = table.get(&only.entry.image) else {
                return skip(
                    FilterStage::Admission,
                    format!("no label scores for image '{}'", only.entry.image),
                );
            };
            let scores = match LabelScores::new(raw.clone()) {
                Ok(s) => s,
                Err(e) => return skip(FilterStage::Admission, e),
            };
            match admit(&scores, labels) {
                Ok(true) => {}
                Ok(false) => return skip(FilterStage::Admission, "label filter rejected"),
                Err(e) => return skip(FilterStage::Admission, e),
            }
        }
        anchor_views.push(loaded[0].view.clone());
    } else {
        // precomputed scores when referenced, the luminance proxy otherwise
        let file_backend: Option<FileBackend> = match &scene.pair_scores {
            Some(score_ref) => match io::read_pair_scores(&base_dir.join(score_ref)) {
                Ok(triples) => Some(FileBackend::new(triples)),
                Err(e) => return skip(FilterStage::Admission, e),
            },
            None => None,
        };
        let mut frames = Vec::with_capacity(loaded.len());
        for lv in &loaded {
            let frame = if file_backend.is_some() {
                Frame::id_only(lv.entry.image.clone())
            } else {
                match io::read_luma(&base_dir.join(&lv.entry.image)) {
                    Ok(img) => Frame::with_image(lv.entry.image.clone(), img),
                    Err(e) => return skip(FilterStage::Admission, e),
                }
            };
            frames.push(frame);
        }
        let backend: &dyn PerceptualBackend = match &file_backend {
            Some(fb) => fb,
            None => &proxy,
        };

        let anchor = match select_anchor_pair(&frames, backend, config.band) {
            Ok(Some(pair)) => pair,
            Ok(None) => return skip(FilterStage::Admission, "no view pair inside the band"),
            Err(reason) => return skip(FilterStage::Admission, reason),
        };

        let mut mix_rng = SeededRng::new(mix(scene_seed, STREAM_VIEW_MIX));
        let mut target = draw_target_views(&mut mix_rng, &config.view_mix);
        let pool: Vec<String> = loaded
            .iter()
            .map(|lv| lv.entry.image.clone())
            .filter(|id| *id != anchor.ref_a && *id != anchor.ref_b)
            .collect();
        if target == 8 && pool.len() < 6 {
            target = if pool.len() >= 2 { 4 } else { 2 };
        }
        if target == 4 && pool.len() < 2 {
            target = 2;
        }
        let candidates: Vec<String> = pool.into_iter().take(target - 2).collect();

        for id in [&anchor.ref_a, &anchor.ref_b] {
            let lv = loaded.iter().find(|lv| &lv.entry.image == id).expect("anchor from pool");
            anchor_views.push(lv.view.clone());
        }
        multi_view = Some(MultiViewWork { anchor, candidates, frames, file_backend });
    }

    // geometry
    let geometry = match SceneGeometry::from_views(scene.id.clone(), anchor_views, scene_seed) {
        Ok(g) => g,
        Err(e) => return skip(FilterStage::Geometry, e),
    };

    // synthesis
    let mut conversation = match synthesize_conversation(
        &geometry,
        bank,
        &config.turn_mix,
        config.relation_eps_meters,
        config.order_mode,
        caption_client,
        scene_seed,
    ) {
        Ok(c) => c,
        Err(e) => return skip(FilterStage::Synthesis, e),
    };

    // viewpoint expansion for multi-view work items
    let mut expansion_fallback = false;
    if let Some(work) = multi_view {
        let anchor_refs = vec![work.anchor.ref_a.clone(), work.anchor.ref_b.clone()];
        conversation.image_refs = if work.candidates.is_empty() {
            anchor_refs
        } else {
            let qa_pairs: Vec<(String, String)> = conversation
                .turns
                .iter()
                .filter(|t| t.level != TurnLevel::Caption)
                .map(|t| (t.question.clone(), t.answer.clone()))
                .collect();
            let backend: &dyn PerceptualBackend = match &work.file_backend {
                Some(fb) => fb,
                None => &proxy,
            };
            let validator = DistanceValidator::new(backend, work.frames);
            match expand_viewpoints(&work.anchor, &work.candidates, &qa_pairs, &validator) {
                Ok(set) => set.frames,
                Err(_) => {
                    // validator failure leaves the set unexpanded
                    expansion_fallback = true;
                    anchor_refs
                }
            }
        };
    }

    let view_count = conversation.image_refs.len();
    match emit_record(&conversation) {
        Ok(line) => Ok(SceneSuccess { line, view_count, expansion_fallback }),
        Err(e) => skip(FilterStage::Synthesis, e),
    }
}

/// Loads the manifest and config from disk and writes the corpus to
/// `out_path`; the usual entry point behind the CLI.
pub fn run_synthesis(
    manifest_path: &Path,
    config: &PipelineConfig,
    out_path: &Path,
) -> Result<SummaryReport, PipelineError> {
    let manifest = Manifest::from_path(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path).map_err(|source| {
        PipelineError::WriteOut { path: out_path.display().to_string(), source }
    })?);
    let report = run_synthesis_loaded(&manifest, &base_dir, config, &mut out)?;
    out.flush().map_err(|source| PipelineError::WriteOut {
        path: out_path.display().to_string(),
        source,
    })?;
    Ok(report)
}

/// Runs synthesis over an in-memory manifest, writing records in scene
/// order. Scene work runs on a bounded worker pool; output order is
/// independent of completion order.
pub fn run_synthesis_loaded(
    manifest: &Manifest,
    base_dir: &Path,
    config: &PipelineConfig,
    out: &mut dyn Write,
) -> Result<SummaryReport, PipelineError> {
    config.validate()?;
    manifest.validate()?;
    let caption_name = config.effective_caption_client();
    if caption_name != "stub" {
        return Err(PipelineError::UnsupportedClient(caption_name));
    }
    let validator_name = config.effective_validator_client();
    if validator_name != "stub" {
        return Err(PipelineError::UnsupportedClient(validator_name));
    }
    let bank = match &config.template_bank {
        Some(path) => crate::qa::TemplateBank::from_path(&base_dir.join(path))
            .map_err(|e| PipelineError::Config(e.to_string()))?,
        None => crate::qa::TemplateBank::builtin(),
    };
    let labels = AdmissionLabelSet::builtin();
    let caption_client = StubCaptionClient;
    let base_dir: PathBuf = base_dir.to_path_buf();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcomes: Vec<SceneOutcome> = pool.install(|| {
        manifest
            .scenes
            .par_iter()
            .enumerate()
            .map(|(index, scene)| {
                process_scene(index, scene, &base_dir, config, &bank, &labels, &caption_client)
            })
            .collect()
    });

    let mut rejected_at = [0usize; 4];
    let mut failures = Vec::new();
    let mut view_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut expansion_fallbacks = 0;
    let mut records_emitted = 0;
    for (scene, outcome) in manifest.scenes.iter().zip(&outcomes) {
        match outcome {
            Ok(success) => {
                records_emitted += 1;
                *view_counts.entry(success.view_count).or_default() += 1;
                if success.expansion_fallback {
                    expansion_fallbacks += 1;
                }
            }
            Err(skip) => {
                rejected_at[skip.stage as usize] += 1;
                failures.push(SceneFailure {
                    scene_id: scene.id.clone(),
                    stage: STAGES[skip.stage as usize].to_string(),
                    reason: skip.reason.clone(),
                });
            }
        }
    }
    for success in outcomes.iter().flatten() {
        out.write_all(success.line.as_bytes()).map_err(|source| {
            PipelineError::WriteOut { path: "<corpus>".into(), source }
        })?;
        out.write_all(b"\n").map_err(|source| PipelineError::WriteOut {
            path: "<corpus>".into(),
            source,
        })?;
    }

    let mut stages = Vec::with_capacity(4);
    let mut input = manifest.scenes.len();
    for (i, name) in STAGES.iter().enumerate() {
        let rejected = rejected_at[i];
        let admitted = input - rejected;
        stages.push(StageCount { stage: name.to_string(), input, admitted, rejected });
        input = admitted;
    }

    let report = SummaryReport {
        scenes_total: manifest.scenes.len(),
        stages,
        records_emitted,
        view_counts,
        expansion_fallbacks,
        failures,
    };
    if records_emitted == 0 {
        return Err(PipelineError::EmptyCorpus(Box::new(report)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DepthMap, SegmentationMask};

    fn test_scene(seed: u64) -> SceneGeometry {
        let (w, h) = (16u32, 16u32);
        let mut labels = vec![0u32; (w * h) as usize];
        let mut values = vec![2.0f64; (w * h) as usize];
        for v in 4..12u32 {
            for u in 2..6u32 {
                labels[(v * w + u) as usize] = 1;
                values[(v * w + u) as usize] = 1.0;
            }
            for u in 10..14u32 {
                labels[(v * w + u) as usize] = 2;
                values[(v * w + u) as usize] = 3.0;
            }
        }
        let mask = SegmentationMask::new(
            w,
            h,
            labels,
            BTreeMap::from([(1, "red chair".to_string()), (2, "wooden table".to_string())]),
        )
        .unwrap();
        let depth = DepthMap::new(w, h, values, vec![true; (w * h) as usize]).unwrap();
        let intrinsics = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, w, h).unwrap();
        let view = SceneView { image_ref: "img.png".into(), depth, mask, intrinsics };
        SceneGeometry::from_views("s", vec![view], seed).unwrap()
    }

    #[test]
    fn caption_stub_mentions_every_description() {
        let scene = test_scene(0);
        let [first, second] = caption_stub(&scene, 3).unwrap();
        for caption in [&first, &second] {
            assert!(caption.contains("red chair"), "{caption}");
            assert!(caption.contains("wooden table"), "{caption}");
        }
    }

    #[test]
    fn caption_stub_is_deterministic_per_seed() {
        let scene = test_scene(0);
        assert_eq!(caption_stub(&scene, 9).unwrap(), caption_stub(&scene, 9).unwrap());
    }

    #[test]
    fn caption_nearest_claim_matches_min_center_depth() {
        let scene = test_scene(0);
        // independent oracle: minimum cube-center z
        let nearest = scene
            .cubes
            .iter()
            .min_by(|a, b| a.center()[2].partial_cmp(&b.center()[2]).unwrap())
            .unwrap();
        let name = scene.description(nearest.object_id);
        let [first, _] = caption_stub(&scene, 4).unwrap();
        assert!(
            first.contains(&format!("The {name} is nearest to the viewer")),
            "{first}"
        );
    }

    #[test]
    fn caption_stub_requires_descriptions() {
        let mut scene = test_scene(0);
        scene.descriptions.clear();
        assert!(matches!(
            caption_stub(&scene, 0).unwrap_err(),
            SynthesisError::NoDescriptions
        ));
    }

    fn test_conversation() -> Conversation {
        let scene = test_scene(1);
        synthesize_conversation(
            &scene,
            &crate::qa::TemplateBank::builtin(),
            &TurnMix::default(),
            0.02,
            OrderMode::Forward,
            &StubCaptionClient,
            7,
        )
        .unwrap()
    }

    #[test]
    fn emit_produces_24_alternating_messages() {
        let line = emit_record(&test_conversation()).unwrap();
        let record = parse_record(&line).unwrap();
        assert_eq!(record.conversations.len(), 24);
        assert_eq!(record.conversations[0].from, "human");
        assert_eq!(record.conversations[23].from, "assistant");
        assert_eq!(record.metadata.view_count, 1);
    }

    #[test]
    fn emit_refuses_truncated_conversations() {
        let mut conversation = test_conversation();
        conversation.turns.pop();
        assert!(matches!(emit_record(&conversation).unwrap_err(), PipelineError::Emit(_)));
    }

    #[test]
    fn record_round_trips_byte_identically() {
        let line = emit_record(&test_conversation()).unwrap();
        let record = parse_record(&line).unwrap();
        let again = serde_json::to_string(&record).unwrap();
        assert_eq!(line, again);
    }

    #[test]
    fn config_defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_view_mix() {
        let config = PipelineConfig {
            view_mix: ViewMixTargets { two: 0.5, four: 0.1, eight: 0.1 },
            ..PipelineConfig::default()
        };
        assert!(matches!(config.validate().unwrap_err(), PipelineError::Config(_)));
    }

    #[test]
    fn config_rejects_bad_turn_mix() {
        let config = PipelineConfig {
            turn_mix: TurnMix { pixel_single: 4, ..TurnMix::default() },
            ..PipelineConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_parses_partial_json() {
        let config: PipelineConfig = serde_json::from_str(r#"{"seed": 42}"#).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.workers, 1);
        assert_eq!(config.band, AdmissionBand::default());
    }

    #[test]
    fn non_stub_clients_are_rejected() {
        let manifest = Manifest { scenes: vec![] };
        let config = PipelineConfig {
            caption_client: "https://example.invalid/caption".into(),
            ..PipelineConfig::default()
        };
        let mut sink = Vec::new();
        let err =
            run_synthesis_loaded(&manifest, Path::new("."), &config, &mut sink).unwrap_err();
        assert!(matches!(err, PipelineError::UnsupportedClient(_)));
    }
}
