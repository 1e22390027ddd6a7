//! Synthetic scene generation.
//!
//! Produces tiny self-consistent scenes — depth, mask, image rasters and
//! a manifest tying them together — so the pipeline can run end to end
//! without any external data. Used by the demo subcommand, tests, and
//! benches. Generation is fully seeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::geometry::{CameraIntrinsics, DepthMap, SegmentationMask};
use crate::io::{self, IoError};
use crate::pipeline::{IntrinsicsSpec, Manifest, PipelineError, SceneEntry, ViewEntry};
use crate::reasoning::{SceneGeometry, SceneView, SynthesisError};
use crate::rng::{mix, SeededRng};
use crate::view::LumaImage;

const OBJECT_NAMES: [&str; 8] = [
    "red chair",
    "wooden table",
    "blue lamp",
    "green sofa",
    "metal shelf",
    "potted plant",
    "cardboard box",
    "ceramic vase",
];

/// Shape of a generated manifest.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub scenes: usize,
    /// Every k-th scene becomes multi-view (0 disables).
    pub multi_view_every: usize,
    /// Views per multi-view scene; 8 leaves room for full expansion.
    pub views_per_multi: usize,
    /// Raster side length in pixels.
    pub size: u32,
    /// Attach admitting label-score files to single-view scenes.
    pub with_label_scores: bool,
    /// Every k-th single-view scene gets rejecting label scores (0 disables).
    pub reject_every: usize,
    /// Every k-th scene carries only one object, exercising the skip path
    /// (0 disables).
    pub single_object_every: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            scenes: 10,
            multi_view_every: 5,
            views_per_multi: 8,
            size: 16,
            with_label_scores: false,
            reject_every: 0,
            single_object_every: 0,
            seed: 0,
        }
    }
}

/// Paints non-overlapping object rectangles over a far background.
/// Quadrant placement keeps objects disjoint for any count up to four.
fn paint_scene(
    rng: &mut SeededRng,
    size: u32,
    objects: usize,
) -> (DepthMap, SegmentationMask, BTreeMap<u32, String>) {
    assert!(size >= 12, "raster too small for quadrant placement");
    assert!((1..=4).contains(&objects));
    let n = (size * size) as usize;
    let mut labels = vec![0u32; n];
    let background = rng.next_range_f64(6.5, 8.0);
    let mut values = vec![background; n];
    let mut validity = vec![true; n];

    let half = size / 2;
    let quadrants = [
        (1, 1, half - 2, half - 2),
        (half + 1, 1, size - 2, half - 2),
        (1, half + 1, half - 2, size - 2),
        (half + 1, half + 1, size - 2, size - 2),
    ];
    let name_offset = rng.next_index(OBJECT_NAMES.len());
    let mut descriptions = BTreeMap::new();
    for k in 0..objects {
        let id = (k + 1) as u32;
        let (u0, v0, u1, v1) = quadrants[k];
        let depth = rng.next_range_f64(0.6, 6.0);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let i = (v * size + u) as usize;
                labels[i] = id;
                values[i] = depth;
            }
        }
        descriptions
            .insert(id, OBJECT_NAMES[(name_offset + k) % OBJECT_NAMES.len()].to_string());
    }
    // sprinkle invalid pixels on the background only
    for i in (0..n).step_by(17) {
        if labels[i] == 0 {
            validity[i] = false;
            values[i] = 0.0;
        }
    }
    let depth = DepthMap::new(size, size, values, validity).expect("painted depth is valid");
    let mask = SegmentationMask::new(size, size, labels, descriptions.clone())
        .expect("painted mask is valid");
    (depth, mask, descriptions)
}

fn intrinsics_for(size: u32) -> CameraIntrinsics {
    let c = size as f64 / 2.0;
    CameraIntrinsics::new(size as f64 * 1.25, size as f64 * 1.25, c, c, size, size)
        .expect("synthetic intrinsics are valid")
}

/// An in-memory scene ready for conversation synthesis; `objects` may be
/// 1 through 4.
pub fn scene_geometry(seed: u64, size: u32, objects: usize) -> Result<SceneGeometry, SynthesisError> {
    let mut rng = SeededRng::new(mix(seed, 0xFEED));
    let (depth, mask, _) = paint_scene(&mut rng, size, objects);
    let view = SceneView {
        image_ref: format!("synthetic-{seed}.png"),
        depth,
        mask,
        intrinsics: intrinsics_for(size),
    };
    SceneGeometry::from_views(format!("synthetic-{seed}"), vec![view], seed)
}

fn luma_noise(rng: &mut SeededRng, side: u32) -> LumaImage {
    let pixels = (0..side * side).map(|_| rng.next_f64()).collect();
    LumaImage::new(side, side, pixels).expect("noise raster is valid")
}

fn write_view_files(
    dir: &Path,
    scene_idx: usize,
    view_idx: usize,
    rng: &mut SeededRng,
    size: u32,
    objects: usize,
) -> Result<(ViewEntry, BTreeMap<u32, String>), IoError> {
    let (depth, mask, descriptions) = paint_scene(rng, size, objects);
    let stem = format!("s{scene_idx:05}_v{view_idx}");

    // alternate the two supported depth encodings
    let depth_ref = if (scene_idx + view_idx).is_multiple_of(2) {
        let r = format!("{stem}.depth.png");
        io::write_depth_png16(&dir.join(&r), &depth)?;
        r
    } else {
        let r = format!("{stem}.depth.raw");
        io::write_depth_raw(&dir.join(&r), &depth)?;
        r
    };
    let mask_ref = format!("{stem}.mask.png");
    io::write_mask_png8(&dir.join(&mask_ref), &mask)?;
    let image_ref = format!("{stem}.png");
    io::write_luma_png8(&dir.join(&image_ref), &luma_noise(rng, 8))?;

    let c = size as f64 / 2.0;
    let entry = ViewEntry {
        image: image_ref,
        depth: depth_ref,
        mask: mask_ref,
        intrinsics: IntrinsicsSpec {
            fx: size as f64 * 1.25,
            fy: size as f64 * 1.25,
            cx: c,
            cy: c,
            width: size,
            height: size,
        },
    };
    Ok((entry, descriptions))
}

/// Label scores in built-in label order: index 2 is a positive label,
/// index 4 a negative one.
fn label_score_line(image: &str, admitting: bool) -> String {
    let mut scores = [0.1; 11];
    if admitting {
        scores[2] = 0.9;
    } else {
        scores[4] = 0.9;
    }
    let rendered: Vec<String> = scores.iter().map(|s| format!("{s}")).collect();
    format!("{image} {}\n", rendered.join(" "))
}

/// Writes a full synthetic dataset under `dir` and returns the manifest
/// path. Multi-view scenes carry a precomputed pair-score file whose
/// anchor pair sits inside the band and whose candidate distances vote
/// true under the stub validator.
pub fn generate_manifest(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::WriteOut {
        path: dir.display().to_string(),
        source,
    })?;
    let mut scenes = Vec::with_capacity(spec.scenes);
    for scene_idx in 0..spec.scenes {
        let mut rng = SeededRng::new(mix(spec.seed, scene_idx as u64));
        let multi = spec.multi_view_every != 0 && scene_idx % spec.multi_view_every == 0;
        let single_object =
            spec.single_object_every != 0 && scene_idx % spec.single_object_every == 0;
        let objects = if single_object { 1 } else { 2 + scene_idx % 3 };
        let views = if multi { spec.views_per_multi } else { 1 };

        let mut entries = Vec::with_capacity(views);
        let mut descriptions = BTreeMap::new();
        for view_idx in 0..views {
            let (entry, desc) =
                write_view_files(dir, scene_idx, view_idx, &mut rng, spec.size, objects)?;
            descriptions = desc;
            entries.push(entry);
        }

        let mut scene = SceneEntry {
            id: format!("scene-{scene_idx:05}"),
            views: entries,
            objects: descriptions
                .into_iter()
                .map(|(id, text)| (id.to_string(), text))
                .collect(),
            label_scores: None,
            pair_scores: None,
        };

        if multi {
            let score_ref = format!("s{scene_idx:05}.pairs.txt");
            let mut lines = String::new();
            for i in 0..scene.views.len() {
                for j in i + 1..scene.views.len() {
                    let score = if i == 0 && j == 1 { 0.5 } else { 0.3 };
                    lines.push_str(&format!(
                        "{} {} {score}\n",
                        scene.views[i].image, scene.views[j].image
                    ));
                }
            }
            std::fs::write(dir.join(&score_ref), lines).map_err(|source| {
                PipelineError::WriteOut { path: score_ref.clone(), source }
            })?;
            scene.pair_scores = Some(score_ref);
        } else if spec.with_label_scores {
            let rejecting = spec.reject_every != 0 && scene_idx % spec.reject_every == 0;
            let score_ref = format!("s{scene_idx:05}.labels.txt");
            std::fs::write(
                dir.join(&score_ref),
                label_score_line(&scene.views[0].image, !rejecting),
            )
            .map_err(|source| PipelineError::WriteOut { path: score_ref.clone(), source })?;
            scene.label_scores = Some(score_ref);
        }
        scenes.push(scene);
    }

    let manifest = Manifest { scenes };
    let manifest_path = dir.join("manifest.json");
    let rendered = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PipelineError::Manifest(e.to_string()))?;
    std::fs::write(&manifest_path, rendered).map_err(|source| PipelineError::WriteOut {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(manifest_path)
}
