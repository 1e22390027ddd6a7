//! Hierarchical 12-turn conversation synthesis.
//!
//! Each conversation carries five pixel turns (point depths and depth
//! comparisons), four object turns (bounding cubes and placement
//! predicates), one scene turn (object-to-object distance), and two
//! caption turns, in that forward order; reverse and random modes permute
//! the three spatial level blocks while captions stay last. Every spatial
//! turn records provenance from which its answer can be re-derived.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject, bounding_cubes, spatial_relation, BoundingCube, CameraIntrinsics, DepthMap,
    GeometryError, SegmentationMask,
};
use crate::qa::{
    format_coordinate, instantiate, render_depth, render_length, BankError, QaFamily, QaKind,
    QaLevel, Slot, Template, TemplateBank,
};
use crate::rng::{mix, SeededRng};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("insufficient valid depth pixels (found {found}, need {need})")]
    InsufficientValidPixels { found: usize, need: usize },
    #[error("insufficient objects: found {found}, need at least 2")]
    InsufficientObjects { found: usize },
    #[error("scene has no described objects")]
    NoDescriptions,
    #[error("wrong turn group sizes: {0}")]
    Composition(String),
    #[error("caption client failed for conversation {conversation_id}: {message}")]
    CaptionService { conversation_id: String, message: String },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Level of one conversation turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnLevel {
    Pixel,
    Object,
    Scene,
    Caption,
}

/// Ordering of the three spatial level blocks; captions always close the
/// conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    #[default]
    Forward,
    Reverse,
    Random,
}

/// Template coordinates of a sampled surface form, enough to re-render
/// the exact string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRef {
    pub level: QaLevel,
    pub family: QaFamily,
    pub kind: QaKind,
    pub index: usize,
}

/// Machine-readable record of the geometry behind a turn. Replaying the
/// provenance against the source scene reproduces the answer string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    PixelDepth {
        view: usize,
        u: u32,
        v: u32,
        depth_meters: f64,
        question: TemplateRef,
        answer: TemplateRef,
    },
    PixelCompare {
        view: usize,
        a: (u32, u32),
        b: (u32, u32),
        depth_a: f64,
        depth_b: f64,
        a_closer: bool,
        question: TemplateRef,
        answer: TemplateRef,
    },
    ObjectCenter {
        object_id: u32,
        center: [f64; 3],
        question: TemplateRef,
        answer: TemplateRef,
    },
    ObjectCubePair {
        a_id: u32,
        b_id: u32,
        a_cube: BoundingCube,
        b_cube: BoundingCube,
        question: TemplateRef,
        answer: TemplateRef,
    },
    ObjectLeftOf {
        a_id: u32,
        b_id: u32,
        left_of: bool,
        question: TemplateRef,
        answer: TemplateRef,
    },
    SceneDistance {
        a_id: u32,
        b_id: u32,
        distance_meters: f64,
        question: TemplateRef,
        answer: TemplateRef,
    },
    Caption {
        seed: u64,
        index: u8,
    },
}

/// One question/answer exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaTurn {
    pub level: TurnLevel,
    pub question: String,
    pub answer: String,
    pub provenance: Provenance,
}

/// The full multi-turn record for one scene or view set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub image_refs: Vec<String>,
    pub turns: Vec<QaTurn>,
    pub order_mode: OrderMode,
    pub seed: u64,
}

/// Turn composition every conversation must satisfy.
pub const PIXEL_TURNS: usize = 5;
pub const OBJECT_TURNS: usize = 4;
pub const SCENE_TURNS: usize = 1;
pub const CAPTION_TURNS: usize = 2;
pub const TOTAL_TURNS: usize = PIXEL_TURNS + OBJECT_TURNS + SCENE_TURNS + CAPTION_TURNS;

impl Conversation {
    /// Checks the 5/4/1/2 composition, the caption-last rule, and that no
    /// turn is empty.
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.image_refs.is_empty() {
            return Err(SynthesisError::Composition("no image refs".into()));
        }
        if self.turns.len() != TOTAL_TURNS {
            return Err(SynthesisError::Composition(format!(
                "{} turns, expected {TOTAL_TURNS}",
                self.turns.len()
            )));
        }
        let count = |level: TurnLevel| self.turns.iter().filter(|t| t.level == level).count();
        let (p, o, s, c) = (
            count(TurnLevel::Pixel),
            count(TurnLevel::Object),
            count(TurnLevel::Scene),
            count(TurnLevel::Caption),
        );
        if (p, o, s, c) != (PIXEL_TURNS, OBJECT_TURNS, SCENE_TURNS, CAPTION_TURNS) {
            return Err(SynthesisError::Composition(format!(
                "composition {p}/{o}/{s}/{c}, expected {PIXEL_TURNS}/{OBJECT_TURNS}/{SCENE_TURNS}/{CAPTION_TURNS}"
            )));
        }
        let caption_positions: Vec<usize> = self
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.level == TurnLevel::Caption)
            .map(|(i, _)| i)
            .collect();
        if caption_positions != vec![TOTAL_TURNS - 2, TOTAL_TURNS - 1] {
            return Err(SynthesisError::Composition("captions must be the last two turns".into()));
        }
        if self.turns.iter().any(|t| t.question.is_empty() || t.answer.is_empty()) {
            return Err(SynthesisError::Composition("empty question or answer".into()));
        }
        Ok(())
    }

    pub fn level_sequence(&self) -> Vec<TurnLevel> {
        self.turns.iter().map(|t| t.level).collect()
    }
}

/// One ingested view: image reference plus its depth, mask and camera.
#[derive(Debug, Clone)]
pub struct SceneView {
    pub image_ref: String,
    pub depth: DepthMap,
    pub mask: SegmentationMask,
    pub intrinsics: CameraIntrinsics,
}

/// A scene lifted to 3D, ready for turn synthesis. Geometry comes from
/// the reference view's depth and mask; for multi-view scenes the
/// reference view is chosen uniformly by seed among the supplied views.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub id: String,
    pub views: Vec<SceneView>,
    pub reference_view: usize,
    pub cubes: Vec<BoundingCube>,
    pub descriptions: BTreeMap<u32, String>,
}

impl SceneGeometry {
    pub fn from_views(
        id: impl Into<String>,
        views: Vec<SceneView>,
        seed: u64,
    ) -> Result<Self, SynthesisError> {
        assert!(!views.is_empty(), "a scene needs at least one view");
        let reference_view = SeededRng::new(mix(seed, 0)).next_index(views.len());
        let view = &views[reference_view];
        let cloud = backproject(&view.depth, &view.mask, &view.intrinsics)?;
        let cubes = bounding_cubes(&cloud);
        let descriptions = view.mask.descriptions().clone();
        Ok(Self { id: id.into(), views, reference_view, cubes, descriptions })
    }

    pub fn reference(&self) -> &SceneView {
        &self.views[self.reference_view]
    }

    pub fn description(&self, object_id: u32) -> &str {
        self.descriptions
            .get(&object_id)
            .map(String::as_str)
            .unwrap_or("unidentified object")
    }

    /// Cubes whose objects carry descriptions, the pool for object and
    /// scene turns.
    pub fn described_cubes(&self) -> Vec<&BoundingCube> {
        self.cubes.iter().filter(|c| self.descriptions.contains_key(&c.object_id)).collect()
    }

    /// Described objects ordered nearest to farthest by center z; used by
    /// captioning.
    pub fn objects_near_to_far(&self) -> Vec<(u32, [f64; 3])> {
        let mut objects: Vec<(u32, [f64; 3])> =
            self.described_cubes().iter().map(|c| (c.object_id, c.center())).collect();
        objects.sort_by(|a, b| a.1[2].partial_cmp(&b.1[2]).unwrap().then(a.0.cmp(&b.0)));
        objects
    }
}

/// Per-level turn type mix. The pixel counts must sum to 5 and the object
/// counts to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMix {
    pub pixel_single: usize,
    pub pixel_compare: usize,
    pub object_cube: usize,
    pub object_predicate: usize,
}

impl Default for TurnMix {
    fn default() -> Self {
        Self { pixel_single: 3, pixel_compare: 2, object_cube: 2, object_predicate: 2 }
    }
}

impl TurnMix {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.pixel_single + self.pixel_compare != PIXEL_TURNS {
            return Err(SynthesisError::Composition(format!(
                "pixel mix {}+{} must total {PIXEL_TURNS}",
                self.pixel_single, self.pixel_compare
            )));
        }
        if self.object_cube + self.object_predicate != OBJECT_TURNS {
            return Err(SynthesisError::Composition(format!(
                "object mix {}+{} must total {OBJECT_TURNS}",
                self.object_cube, self.object_predicate
            )));
        }
        Ok(())
    }
}

/// Supplies the two closing caption strings for a scene.
pub trait CaptionClient {
    fn captions(&self, scene: &SceneGeometry, seed: u64) -> Result<[String; 2], String>;
}

fn sample_from_cell<'a>(
    bank: &'a TemplateBank,
    level: QaLevel,
    family: QaFamily,
    kind: QaKind,
    rng: &mut SeededRng,
) -> Result<(&'a Template, TemplateRef), SynthesisError> {
    let cell = bank.cell(level, family, kind);
    if cell.is_empty() {
        return Err(BankError::EmptyCell { level, family, kind }.into());
    }
    let index = rng.next_index(cell.len());
    Ok((&cell[index], TemplateRef { level, family, kind, index }))
}

fn sample_filtered<'a>(
    bank: &'a TemplateBank,
    level: QaLevel,
    family: QaFamily,
    kind: QaKind,
    rng: &mut SeededRng,
    keep: impl Fn(&Template) -> bool,
) -> Result<(&'a Template, TemplateRef), SynthesisError> {
    let cell = bank.cell(level, family, kind);
    let kept: Vec<usize> = (0..cell.len()).filter(|&i| keep(&cell[i])).collect();
    if kept.is_empty() {
        return Err(BankError::EmptyCell { level, family, kind }.into());
    }
    let index = kept[rng.next_index(kept.len())];
    Ok((&cell[index], TemplateRef { level, family, kind, index }))
}

fn bind(pairs: &[(Slot, String)]) -> BTreeMap<Slot, String> {
    pairs.iter().cloned().collect()
}

pub fn format_point(u: u32, v: u32) -> String {
    format!("({u}, {v})")
}

pub fn format_center(center: [f64; 3]) -> String {
    format!(
        "({}, {}, {})",
        format_coordinate(center[0]),
        format_coordinate(center[1]),
        format_coordinate(center[2])
    )
}

/// Corner-to-corner cube rendering used for the two-object cube answer.
pub fn format_cube(cube: &BoundingCube) -> String {
    format!(
        "the cube from {} to {}",
        format_center(cube.min_corner),
        format_center(cube.max_corner)
    )
}

/// Samples a valid-depth pixel inside some object's 2D bounding box.
/// Falls back to a deterministic scan when rejection sampling misses, and
/// to the whole raster when the scene has no object boxes.
fn sample_valid_pixel(
    view: &SceneView,
    rng: &mut SeededRng,
    exclude: Option<(u32, u32)>,
) -> Option<(u32, u32, f64)> {
    let ids = view.mask.object_ids();
    let boxes: Vec<crate::geometry::PixelBox> = if ids.is_empty() {
        vec![crate::geometry::PixelBox {
            u_min: 0,
            v_min: 0,
            u_max: view.depth.width() - 1,
            v_max: view.depth.height() - 1,
        }]
    } else {
        ids.iter().filter_map(|&id| view.mask.pixel_box(id)).collect()
    };
    let start = rng.next_index(boxes.len());
    for attempt in 0..boxes.len() {
        let b = &boxes[(start + attempt) % boxes.len()];
        // bounded rejection sampling first, deterministic scan as fallback
        for _ in 0..64 {
            let u = b.u_min + rng.next_index((b.u_max - b.u_min + 1) as usize) as u32;
            let v = b.v_min + rng.next_index((b.v_max - b.v_min + 1) as usize) as u32;
            if exclude == Some((u, v)) {
                continue;
            }
            if let Some(z) = view.depth.value_at(u, v) {
                return Some((u, v, z));
            }
        }
        for v in b.v_min..=b.v_max {
            for u in b.u_min..=b.u_max {
                if exclude == Some((u, v)) {
                    continue;
                }
                if let Some(z) = view.depth.value_at(u, v) {
                    return Some((u, v, z));
                }
            }
        }
    }
    None
}

/// Builds the five pixel-level turns: point-depth queries and two-point
/// depth comparisons in the configured mix, all on the reference view.
pub fn build_pixel_turns(
    scene: &SceneGeometry,
    bank: &TemplateBank,
    mix_counts: &TurnMix,
    seed: u64,
) -> Result<Vec<QaTurn>, SynthesisError> {
    mix_counts.validate()?;
    let view = scene.reference();
    let found = view.depth.valid_count();
    if found < 2 {
        return Err(SynthesisError::InsufficientValidPixels { found, need: 2 });
    }
    let mut rng = SeededRng::new(seed);
    let mut turns = Vec::with_capacity(PIXEL_TURNS);

    for _ in 0..mix_counts.pixel_single {
        let (u, v, z) = sample_valid_pixel(view, &mut rng, None)
            .ok_or(SynthesisError::InsufficientValidPixels { found, need: 2 })?;
        let (q_t, q_ref) =
            sample_from_cell(bank, QaLevel::Pixel, QaFamily::Value, QaKind::Question, &mut rng)?;
        let (a_t, a_ref) =
            sample_from_cell(bank, QaLevel::Pixel, QaFamily::Value, QaKind::Answer, &mut rng)?;
        let rendered = render_depth(z)?;
        let bindings =
            bind(&[(Slot::A, format_point(u, v)), (Slot::X, rendered.text.clone())]);
        turns.push(QaTurn {
            level: TurnLevel::Pixel,
            question: instantiate(q_t, &bindings)?,
            answer: instantiate(a_t, &bindings)?,
            provenance: Provenance::PixelDepth {
                view: scene.reference_view,
                u,
                v,
                depth_meters: z,
                question: q_ref,
                answer: a_ref,
            },
        });
    }

    for _ in 0..mix_counts.pixel_compare {
        let (ua, va, za) = sample_valid_pixel(view, &mut rng, None)
            .ok_or(SynthesisError::InsufficientValidPixels { found, need: 2 })?;
        let (ub, vb, zb) = sample_valid_pixel(view, &mut rng, Some((ua, va)))
            .ok_or(SynthesisError::InsufficientValidPixels { found, need: 2 })?;
        let a_closer = za < zb;
        let (q_t, q_ref) = sample_from_cell(
            bank,
            QaLevel::Pixel,
            QaFamily::Predicate,
            QaKind::Question,
            &mut rng,
        )?;
        let kind = if a_closer { QaKind::TrueResponse } else { QaKind::FalseResponse };
        let (a_t, a_ref) =
            sample_from_cell(bank, QaLevel::Pixel, QaFamily::Predicate, kind, &mut rng)?;
        let bindings =
            bind(&[(Slot::A, format_point(ua, va)), (Slot::B, format_point(ub, vb))]);
        turns.push(QaTurn {
            level: TurnLevel::Pixel,
            question: instantiate(q_t, &bindings)?,
            answer: instantiate(a_t, &bindings)?,
            provenance: Provenance::PixelCompare {
                view: scene.reference_view,
                a: (ua, va),
                b: (ub, vb),
                depth_a: za,
                depth_b: zb,
                a_closer,
                question: q_ref,
                answer: a_ref,
            },
        });
    }
    Ok(turns)
}

fn distinct_pair(rng: &mut SeededRng, n: usize) -> (usize, usize) {
    debug_assert!(n >= 2);
    let first = rng.next_index(n);
    let mut second = rng.next_index(n - 1);
    if second >= first {
        second += 1;
    }
    (first, second)
}

/// Builds the four object-level turns: bounding-cube queries and left-of
/// placement predicates in the configured mix.
pub fn build_object_turns(
    scene: &SceneGeometry,
    bank: &TemplateBank,
    mix_counts: &TurnMix,
    eps_meters: f64,
    seed: u64,
) -> Result<Vec<QaTurn>, SynthesisError> {
    mix_counts.validate()?;
    let cubes = scene.described_cubes();
    if cubes.len() < 2 {
        return Err(SynthesisError::InsufficientObjects { found: cubes.len() });
    }
    let mut rng = SeededRng::new(seed);
    let mut turns = Vec::with_capacity(OBJECT_TURNS);

    for _ in 0..mix_counts.object_cube {
        let (q_t, q_ref) =
            sample_from_cell(bank, QaLevel::Object, QaFamily::Value, QaKind::Question, &mut rng)?;
        if q_t.has_slot(Slot::B) {
            // two-object form: the answer must place both objects
            let (i, j) = distinct_pair(&mut rng, cubes.len());
            let (ca, cb) = (cubes[i], cubes[j]);
            let (a_t, a_ref) = sample_filtered(
                bank,
                QaLevel::Object,
                QaFamily::Value,
                QaKind::Answer,
                &mut rng,
                |t| t.has_slot(Slot::Y),
            )?;
            let bindings = bind(&[
                (Slot::A, scene.description(ca.object_id).to_string()),
                (Slot::B, scene.description(cb.object_id).to_string()),
                (Slot::X, format_cube(ca)),
                (Slot::Y, format_cube(cb)),
            ]);
            turns.push(QaTurn {
                level: TurnLevel::Object,
                question: instantiate(q_t, &bindings)?,
                answer: instantiate(a_t, &bindings)?,
                provenance: Provenance::ObjectCubePair {
                    a_id: ca.object_id,
                    b_id: cb.object_id,
                    a_cube: *ca,
                    b_cube: *cb,
                    question: q_ref,
                    answer: a_ref,
                },
            });
        } else {
            // single-object center form
            let cube = cubes[rng.next_index(cubes.len())];
            let (a_t, a_ref) = sample_filtered(
                bank,
                QaLevel::Object,
                QaFamily::Value,
                QaKind::Answer,
                &mut rng,
                |t| t.has_slot(Slot::X) && !t.has_slot(Slot::Y),
            )?;
            let center = cube.center();
            let bindings = bind(&[
                (Slot::A, scene.description(cube.object_id).to_string()),
                (Slot::X, format_center(center)),
            ]);
            turns.push(QaTurn {
                level: TurnLevel::Object,
                question: instantiate(q_t, &bindings)?,
                answer: instantiate(a_t, &bindings)?,
                provenance: Provenance::ObjectCenter {
                    object_id: cube.object_id,
                    center,
                    question: q_ref,
                    answer: a_ref,
                },
            });
        }
    }

    for _ in 0..mix_counts.object_predicate {
        let (i, j) = distinct_pair(&mut rng, cubes.len());
        let (ca, cb) = (cubes[i], cubes[j]);
        let relation = spatial_relation(ca, cb, eps_meters);
        let (q_t, q_ref) = sample_from_cell(
            bank,
            QaLevel::Object,
            QaFamily::Predicate,
            QaKind::Question,
            &mut rng,
        )?;
        let kind = if relation.left_of { QaKind::TrueResponse } else { QaKind::FalseResponse };
        let (a_t, a_ref) =
            sample_from_cell(bank, QaLevel::Object, QaFamily::Predicate, kind, &mut rng)?;
        let bindings = bind(&[
            (Slot::A, scene.description(ca.object_id).to_string()),
            (Slot::B, scene.description(cb.object_id).to_string()),
        ]);
        turns.push(QaTurn {
            level: TurnLevel::Object,
            question: instantiate(q_t, &bindings)?,
            answer: instantiate(a_t, &bindings)?,
            provenance: Provenance::ObjectLeftOf {
                a_id: ca.object_id,
                b_id: cb.object_id,
                left_of: relation.left_of,
                question: q_ref,
                answer: a_ref,
            },
        });
    }
    Ok(turns)
}

/// Builds the one scene-level turn: center-to-center distance between two
/// objects, rendered under the same scale rules as depths.
pub fn build_scene_turn(
    scene: &SceneGeometry,
    bank: &TemplateBank,
    seed: u64,
) -> Result<QaTurn, SynthesisError> {
    let cubes = scene.described_cubes();
    if cubes.len() < 2 {
        return Err(SynthesisError::InsufficientObjects { found: cubes.len() });
    }
    let mut rng = SeededRng::new(seed);
    let (i, j) = distinct_pair(&mut rng, cubes.len());
    let (ca, cb) = (cubes[i], cubes[j]);
    let distance = spatial_relation(ca, cb, 0.0).center_distance;
    let (q_t, q_ref) =
        sample_from_cell(bank, QaLevel::Scene, QaFamily::Value, QaKind::Question, &mut rng)?;
    let (a_t, a_ref) =
        sample_from_cell(bank, QaLevel::Scene, QaFamily::Value, QaKind::Answer, &mut rng)?;
    let bindings = bind(&[
        (Slot::A, scene.description(ca.object_id).to_string()),
        (Slot::B, scene.description(cb.object_id).to_string()),
        (Slot::X, render_length(distance)?.text),
    ]);
    Ok(QaTurn {
        level: TurnLevel::Scene,
        question: instantiate(q_t, &bindings)?,
        answer: instantiate(a_t, &bindings)?,
        provenance: Provenance::SceneDistance {
            a_id: ca.object_id,
            b_id: cb.object_id,
            distance_meters: distance,
            question: q_ref,
            answer: a_ref,
        },
    })
}

/// Fixed caption prompts; the answers come from the caption client.
pub const CAPTION_QUESTIONS: [&str; 2] =
    ["Describe the scene.", "Give one more brief description of the scene."];

/// Fetches the two closing caption turns from the client. Client failures
/// surface as a retryable service error carrying the conversation id.
pub fn attach_caption_turns(
    scene: &SceneGeometry,
    client: &dyn CaptionClient,
    seed: u64,
) -> Result<[QaTurn; 2], SynthesisError> {
    let captions = client.captions(scene, seed).map_err(|message| {
        SynthesisError::CaptionService { conversation_id: scene.id.clone(), message }
    })?;
    let [first, second] = captions;
    Ok([
        QaTurn {
            level: TurnLevel::Caption,
            question: CAPTION_QUESTIONS[0].to_string(),
            answer: first,
            provenance: Provenance::Caption { seed, index: 0 },
        },
        QaTurn {
            level: TurnLevel::Caption,
            question: CAPTION_QUESTIONS[1].to_string(),
            answer: second,
            provenance: Provenance::Caption { seed, index: 1 },
        },
    ])
}

/// Orders the level blocks per the mode and appends captions last.
/// Forward is pixel, object, scene; reverse flips the three; random
/// applies a seeded permutation of the blocks. The caption pair never
/// moves.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    id: impl Into<String>,
    image_refs: Vec<String>,
    pixel: Vec<QaTurn>,
    object: Vec<QaTurn>,
    scene: QaTurn,
    captions: [QaTurn; 2],
    order_mode: OrderMode,
    seed: u64,
) -> Result<Conversation, SynthesisError> {
    if pixel.len() != PIXEL_TURNS {
        return Err(SynthesisError::Composition(format!(
            "{} pixel turns, expected {PIXEL_TURNS}",
            pixel.len()
        )));
    }
    if object.len() != OBJECT_TURNS {
        return Err(SynthesisError::Composition(format!(
            "{} object turns, expected {OBJECT_TURNS}",
            object.len()
        )));
    }
    let wrong_level = pixel.iter().any(|t| t.level != TurnLevel::Pixel)
        || object.iter().any(|t| t.level != TurnLevel::Object)
        || scene.level != TurnLevel::Scene
        || captions.iter().any(|t| t.level != TurnLevel::Caption);
    if wrong_level {
        return Err(SynthesisError::Composition("turn supplied to the wrong group".into()));
    }

    let mut block_order = [0usize, 1, 2];
    match order_mode {
        OrderMode::Forward => {}
        OrderMode::Reverse => block_order.reverse(),
        OrderMode::Random => SeededRng::new(seed).shuffle(&mut block_order),
    }
    let mut blocks: [Option<Vec<QaTurn>>; 3] = [Some(pixel), Some(object), Some(vec![scene])];
    let mut turns = Vec::with_capacity(TOTAL_TURNS);
    for &b in &block_order {
        turns.extend(blocks[b].take().expect("each block consumed once"));
    }
    turns.extend(captions);

    let conversation = Conversation { id: id.into(), image_refs, turns, order_mode, seed };
    conversation.validate()?;
    Ok(conversation)
}

/// Derived-seed indices for the independent sampling streams of one
/// conversation.
mod stream {
    pub const PIXEL: u64 = 1;
    pub const OBJECT: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const CAPTION: u64 = 4;
    pub const ORDER: u64 = 5;
}

/// Synthesizes the full 12-turn conversation for a lifted scene.
pub fn synthesize_conversation(
    scene: &SceneGeometry,
    bank: &TemplateBank,
    mix_counts: &TurnMix,
    eps_meters: f64,
    order_mode: OrderMode,
    caption_client: &dyn CaptionClient,
    seed: u64,
) -> Result<Conversation, SynthesisError> {
    let pixel = build_pixel_turns(scene, bank, mix_counts, mix(seed, stream::PIXEL))?;
    let object =
        build_object_turns(scene, bank, mix_counts, eps_meters, mix(seed, stream::OBJECT))?;
    let scene_turn = build_scene_turn(scene, bank, mix(seed, stream::SCENE))?;
    let captions = attach_caption_turns(scene, caption_client, mix(seed, stream::CAPTION))?;
    let image_refs = scene.views.iter().map(|v| v.image_ref.clone()).collect();
    assemble(
        scene.id.clone(),
        image_refs,
        pixel,
        object,
        scene_turn,
        captions,
        order_mode,
        mix(seed, stream::ORDER),
    )
}

/// Recomputes a spatial turn's answer from its provenance and the scene;
/// byte equality with the stored answer is the replay invariant. Caption
/// turns return None.
pub fn replay_answer(
    scene: &SceneGeometry,
    bank: &TemplateBank,
    turn: &QaTurn,
) -> Result<Option<String>, SynthesisError> {
    let template = |r: &TemplateRef| -> Result<&Template, SynthesisError> {
        let cell = bank.cell(r.level, r.family, r.kind);
        cell.get(r.index).ok_or_else(|| {
            SynthesisError::from(BankError::EmptyCell {
                level: r.level,
                family: r.family,
                kind: r.kind,
            })
        })
    };
    let find_cube = |id: u32| -> Result<&BoundingCube, SynthesisError> {
        scene
            .cubes
            .iter()
            .find(|c| c.object_id == id)
            .ok_or_else(|| GeometryError::ObjectNotFound(id).into())
    };
    match &turn.provenance {
        Provenance::PixelDepth { view, u, v, answer, .. } => {
            let z = scene.views[*view]
                .depth
                .value_at(*u, *v)
                .ok_or(SynthesisError::InsufficientValidPixels { found: 0, need: 1 })?;
            let bindings =
                bind(&[(Slot::A, format_point(*u, *v)), (Slot::X, render_depth(z)?.text)]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::PixelCompare { view, a, b, answer, .. } => {
            let depth = &scene.views[*view].depth;
            let za = depth
                .value_at(a.0, a.1)
                .ok_or(SynthesisError::InsufficientValidPixels { found: 0, need: 1 })?;
            let zb = depth
                .value_at(b.0, b.1)
                .ok_or(SynthesisError::InsufficientValidPixels { found: 0, need: 1 })?;
            let expected_kind = if za < zb { QaKind::TrueResponse } else { QaKind::FalseResponse };
            if answer.kind != expected_kind {
                // wrong polarity can never replay to the stored string
                return Ok(Some(String::new()));
            }
            let bindings =
                bind(&[(Slot::A, format_point(a.0, a.1)), (Slot::B, format_point(b.0, b.1))]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::ObjectCenter { object_id, answer, .. } => {
            let cube = find_cube(*object_id)?;
            let bindings = bind(&[
                (Slot::A, scene.description(*object_id).to_string()),
                (Slot::X, format_center(cube.center())),
            ]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::ObjectCubePair { a_id, b_id, answer, .. } => {
            let (ca, cb) = (find_cube(*a_id)?, find_cube(*b_id)?);
            let bindings = bind(&[
                (Slot::A, scene.description(*a_id).to_string()),
                (Slot::B, scene.description(*b_id).to_string()),
                (Slot::X, format_cube(ca)),
                (Slot::Y, format_cube(cb)),
            ]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::ObjectLeftOf { a_id, b_id, answer, .. } => {
            let bindings = bind(&[
                (Slot::A, scene.description(*a_id).to_string()),
                (Slot::B, scene.description(*b_id).to_string()),
            ]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::SceneDistance { a_id, b_id, answer, .. } => {
            let (ca, cb) = (find_cube(*a_id)?, find_cube(*b_id)?);
            let distance = spatial_relation(ca, cb, 0.0).center_distance;
            let bindings = bind(&[
                (Slot::A, scene.description(*a_id).to_string()),
                (Slot::B, scene.description(*b_id).to_string()),
                (Slot::X, render_length(distance)?.text),
            ]);
            Ok(Some(instantiate(template(answer)?, &bindings)?))
        }
        Provenance::Caption { .. } => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::StubCaptionClient;

    /// Square scene with two rectangular objects at controlled depths.
    pub(crate) fn two_object_scene(seed: u64, left_depth: f64, right_depth: f64) -> SceneGeometry {
        let (w, h) = (16u32, 16u32);
        let mut labels = vec![0u32; (w * h) as usize];
        let mut values = vec![0.0f64; (w * h) as usize];
        let mut validity = vec![false; (w * h) as usize];
        for v in 0..h {
            for u in 0..w {
                let i = (v * w + u) as usize;
                let (label, z) = if (2..6).contains(&u) && (4..12).contains(&v) {
                    (1, left_depth)
                } else if (10..14).contains(&u) && (4..12).contains(&v) {
                    (2, right_depth)
                } else {
                    (0, 4.0)
                };
                labels[i] = label;
                values[i] = z;
                validity[i] = true;
            }
        }
        let mask = SegmentationMask::new(
            w,
            h,
            labels,
            BTreeMap::from([(1, "red chair".to_string()), (2, "wooden table".to_string())]),
        )
        .unwrap();
        let depth = DepthMap::new(w, h, values, validity).unwrap();
        let intrinsics = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, w, h).unwrap();
        let view = SceneView { image_ref: "img0.png".into(), depth, mask, intrinsics };
        SceneGeometry::from_views("scene-test", vec![view], seed).unwrap()
    }

    fn flat_scene(depth_value: f64) -> SceneGeometry {
        two_object_scene(0, depth_value, depth_value)
    }

    #[test]
    fn flat_plane_single_point_answers_carry_the_depth() {
        let scene = flat_scene(2.0);
        let bank = TemplateBank::builtin();
        let mix_counts = TurnMix { pixel_single: 5, pixel_compare: 0, ..TurnMix::default() };
        let turns = build_pixel_turns(&scene, &bank, &mix_counts, 42).unwrap();
        assert_eq!(turns.len(), 5);
        for t in turns {
            assert!(t.answer.contains("2.0 meters"), "answer: {}", t.answer);
        }
    }

    #[test]
    fn comparison_polarity_matches_the_geometry() {
        // depths 1.0 (object 1) and 3.0 (object 2); whichever point lands
        // in slot A, the response polarity must match the depth ordering
        let scene = two_object_scene(1, 1.0, 3.0);
        let bank = TemplateBank::builtin();
        let mix_counts = TurnMix { pixel_single: 0, pixel_compare: 5, ..TurnMix::default() };
        for seed in 0..32 {
            let turns = build_pixel_turns(&scene, &bank, &mix_counts, seed).unwrap();
            for t in &turns {
                let Provenance::PixelCompare { depth_a, depth_b, a_closer, answer, .. } =
                    &t.provenance
                else {
                    panic!("expected comparison provenance")
                };
                assert_eq!(*a_closer, depth_a < depth_b);
                let expect = if *a_closer { QaKind::TrueResponse } else { QaKind::FalseResponse };
                assert_eq!(answer.kind, expect);
            }
        }
    }

    #[test]
    fn pixel_turns_need_two_valid_pixels() {
        let mut scene = flat_scene(2.0);
        let w = scene.views[0].depth.width();
        let h = scene.views[0].depth.height();
        let mut validity = vec![false; (w * h) as usize];
        validity[0] = true;
        let values: Vec<f64> = validity.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
        scene.views[0].depth = DepthMap::new(w, h, values, validity).unwrap();
        let bank = TemplateBank::builtin();
        let err = build_pixel_turns(&scene, &bank, &TurnMix::default(), 0).unwrap_err();
        assert!(matches!(err, SynthesisError::InsufficientValidPixels { found: 1, .. }));
    }

    #[test]
    fn left_object_yields_true_response() {
        // object 1 occupies columns 2..6, object 2 columns 10..14, so 1 is
        // left of 2 in the canonical frame
        let scene = two_object_scene(2, 2.0, 2.0);
        let bank = TemplateBank::builtin();
        let mix_counts = TurnMix { object_cube: 0, object_predicate: 4, ..TurnMix::default() };
        let turns = build_object_turns(&scene, &bank, &mix_counts, 0.02, 7).unwrap();
        for t in turns {
            let Provenance::ObjectLeftOf { a_id, left_of, answer, .. } = &t.provenance else {
                panic!("expected predicate provenance")
            };
            assert_eq!(*left_of, *a_id == 1);
            let expect = if *left_of { QaKind::TrueResponse } else { QaKind::FalseResponse };
            assert_eq!(answer.kind, expect);
        }
    }

    #[test]
    fn single_object_scene_is_rejected() {
        let mut scene = flat_scene(2.0);
        scene.cubes.retain(|c| c.object_id == 1);
        let bank = TemplateBank::builtin();
        let err = build_object_turns(&scene, &bank, &TurnMix::default(), 0.02, 0).unwrap_err();
        assert!(matches!(err, SynthesisError::InsufficientObjects { found: 1 }));
        let err = build_scene_turn(&scene, &bank, 0).unwrap_err();
        assert!(matches!(err, SynthesisError::InsufficientObjects { found: 1 }));
    }

    #[test]
    fn scene_distance_matches_independent_euclidean_computation() {
        let scene = two_object_scene(3, 1.5, 3.5);
        let bank = TemplateBank::builtin();
        for seed in 0..16 {
            let turn = build_scene_turn(&scene, &bank, seed).unwrap();
            let Provenance::SceneDistance { a_id, b_id, distance_meters, .. } = turn.provenance
            else {
                panic!("expected distance provenance")
            };
            let ca = scene.cubes.iter().find(|c| c.object_id == a_id).unwrap().center();
            let cb = scene.cubes.iter().find(|c| c.object_id == b_id).unwrap().center();
            let expect = ((ca[0] - cb[0]).powi(2)
                + (ca[1] - cb[1]).powi(2)
                + (ca[2] - cb[2]).powi(2))
            .sqrt();
            assert!((distance_meters - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_distance_renders_as_centimeters() {
        assert_eq!(render_length(0.0).unwrap().text, "0.0 centimeters");
    }

    #[test]
    fn caption_turns_come_from_the_client() {
        let scene = flat_scene(2.0);
        let turns = attach_caption_turns(&scene, &StubCaptionClient, 5).unwrap();
        assert_eq!(turns[0].question, CAPTION_QUESTIONS[0]);
        assert!(turns[0].answer.contains("red chair"));
        assert!(turns[0].answer.contains("wooden table"));
        // same seed, same scene: byte-identical captions
        let again = attach_caption_turns(&scene, &StubCaptionClient, 5).unwrap();
        assert_eq!(turns, again);
    }

    struct FailingCaptions;

    impl CaptionClient for FailingCaptions {
        fn captions(&self, _: &SceneGeometry, _: u64) -> Result<[String; 2], String> {
            Err("timeout".into())
        }
    }

    #[test]
    fn caption_failure_is_a_service_error_with_the_id() {
        let scene = flat_scene(2.0);
        let err = attach_caption_turns(&scene, &FailingCaptions, 5).unwrap_err();
        match err {
            SynthesisError::CaptionService { conversation_id, message } => {
                assert_eq!(conversation_id, "scene-test");
                assert_eq!(message, "timeout");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn full_conversation(order_mode: OrderMode, seed: u64) -> Conversation {
        let scene = two_object_scene(9, 1.0, 3.0);
        let bank = TemplateBank::builtin();
        synthesize_conversation(
            &scene,
            &bank,
            &TurnMix::default(),
            0.02,
            order_mode,
            &StubCaptionClient,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn forward_order_is_pixel_object_scene_captions() {
        let conv = full_conversation(OrderMode::Forward, 11);
        use TurnLevel::{Caption as C, Object as O, Pixel as P, Scene as S};
        assert_eq!(conv.level_sequence(), vec![P, P, P, P, P, O, O, O, O, S, C, C]);
    }

    #[test]
    fn reverse_order_flips_the_spatial_blocks() {
        let conv = full_conversation(OrderMode::Reverse, 11);
        use TurnLevel::{Caption as C, Object as O, Pixel as P, Scene as S};
        assert_eq!(conv.level_sequence(), vec![S, O, O, O, O, P, P, P, P, P, C, C]);
    }

    #[test]
    fn random_order_is_deterministic_per_seed() {
        let a = full_conversation(OrderMode::Random, 123);
        let b = full_conversation(OrderMode::Random, 123);
        assert_eq!(a, b);
        assert_eq!(a.turns[10].level, TurnLevel::Caption);
        assert_eq!(a.turns[11].level, TurnLevel::Caption);
    }

    #[test]
    fn same_inputs_byte_identical_conversation() {
        let a = full_conversation(OrderMode::Forward, 77);
        let b = full_conversation(OrderMode::Forward, 77);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn assemble_rejects_wrong_group_sizes() {
        let conv = full_conversation(OrderMode::Forward, 3);
        let pixel: Vec<QaTurn> = conv.turns[0..4].to_vec(); // one short
        let object: Vec<QaTurn> = conv.turns[5..9].to_vec();
        let scene = conv.turns[9].clone();
        let captions = [conv.turns[10].clone(), conv.turns[11].clone()];
        let err = assemble(
            "x",
            vec!["img".into()],
            pixel,
            object,
            scene,
            captions,
            OrderMode::Forward,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::Composition(_)));
    }

    #[test]
    fn provenance_replay_reproduces_every_spatial_answer() {
        let bank = TemplateBank::builtin();
        for seed in 0..64 {
            let scene = two_object_scene(seed, 1.0 + seed as f64 * 0.07, 3.0);
            let conv = synthesize_conversation(
                &scene,
                &bank,
                &TurnMix::default(),
                0.02,
                OrderMode::Forward,
                &StubCaptionClient,
                seed,
            )
            .unwrap();
            for turn in &conv.turns {
                if let Some(replayed) = replay_answer(&scene, &bank, turn).unwrap() {
                    assert_eq!(replayed, turn.answer, "provenance {:?}", turn.provenance);
                }
            }
        }
    }

    #[test]
    fn composition_validation_catches_violations() {
        let mut conv = full_conversation(OrderMode::Forward, 8);
        conv.turns.pop();
        assert!(conv.validate().is_err());

        let mut conv = full_conversation(OrderMode::Forward, 8);
        conv.turns.swap(9, 11); // caption out of final position
        assert!(conv.validate().is_err());

        let mut conv = full_conversation(OrderMode::Forward, 8);
        conv.turns[0].answer.clear();
        assert!(conv.validate().is_err());
    }
}
