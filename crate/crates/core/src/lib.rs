//! Multi-turn spatial reasoning corpus synthesis.
//!
//! The crate lifts per-image depth and segmentation metadata into 3D
//! geometry, instantiates question/answer templates over it, and emits
//! deterministic conversation corpora. Alongside the data path it carries
//! the numeric pieces the training side depends on: a dual-channel
//! attention merge with analytic gradients checked against finite
//! differences, closed-form parameter-overhead accounting, and the
//! three-stage freeze schedule.
//!
//! Everything downstream of a manifest is reproducible: corpus bytes are
//! a pure function of (manifest, config).

pub mod attention;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod qa;
pub mod reasoning;
pub mod rng;
pub mod stages;
pub mod synthetic;
pub mod view;

pub use attention::{
    attn_forward, dual_backward, dual_forward, init_plus_from_base, param_overhead,
    AttentionParams, DualChannelGrads, DualChannelParams, TokenMatrix, VitConfig,
};
pub use filter::{admit, AdmissionLabelSet, LabelScores};
pub use geometry::{
    backproject, bounding_cube, bounding_cubes, reproject, spatial_relation, BoundingCube,
    CameraIntrinsics, DepthMap, PointCloud, SegmentationMask, SpatialRelation,
};
pub use pipeline::{
    caption_stub, emit_record, parse_record, run_synthesis, run_synthesis_loaded, CorpusRecord,
    Manifest, PipelineConfig, StubCaptionClient, SummaryReport,
};
pub use qa::{instantiate, render_depth, render_length, RenderedValue, TemplateBank};
pub use reasoning::{
    synthesize_conversation, CaptionClient, Conversation, OrderMode, QaTurn, SceneGeometry,
    SceneView, TurnLevel, TurnMix,
};
pub use stages::{plan, validate_updates, Component, FreezePlan, Stage};
pub use view::{
    expand_viewpoints, proxy_distance, score_pairs, AdmissionBand, Frame, LumaImage,
    PerceptualBackend, ValidatorClient, ViewPair, ViewSet,
};
