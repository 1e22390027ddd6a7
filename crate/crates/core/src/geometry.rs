//! Camera-frame 3D geometry lifted from depth and segmentation rasters.
//!
//! All clouds and cubes live in the canonical frame: the camera frame with
//! the image-vertical axis flipped, so +x points right, +y points up, +z
//! points away from the camera, origin at the camera center. Predicates
//! such as "left of" therefore agree with what a viewer of the image sees.
//! Gravity alignment is not attempted.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid {what}: {detail}")]
    InvalidData { what: &'static str, detail: String },
    #[error("no valid depth pixels to lift")]
    EmptyCloud,
    #[error("point {index} lies behind the camera (z = {z})")]
    PointBehindCamera { index: usize, z: f64 },
    #[error("no points carry object id {0}")]
    ObjectNotFound(u32),
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite()) || !(fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }
}

/// Per-pixel metric depth with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
    validity: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map, checking that every valid entry is positive and
    /// finite and that the buffers match the stated dimensions.
    pub fn new(
        width: u32,
        height: u32,
        values: Vec<f64>,
        validity: Vec<bool>,
    ) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if values.len() != expected || validity.len() != expected {
            return Err(GeometryError::DimensionMismatch(format!(
                "depth buffers hold {}/{} entries, expected {expected}",
                values.len(),
                validity.len()
            )));
        }
        for (i, (&v, &ok)) in values.iter().zip(&validity).enumerate() {
            if ok && !(v > 0.0 && v.is_finite()) {
                return Err(GeometryError::InvalidData {
                    what: "depth value",
                    detail: format!("pixel {i} marked valid but holds {v}"),
                });
            }
        }
        Ok(Self { width, height, values, validity })
    }

    /// All-invalid map of the given size.
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, values: vec![0.0; n], validity: vec![false; n] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Depth at pixel (u, v), or None when invalid or out of range.
    pub fn value_at(&self, u: u32, v: u32) -> Option<f64> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let i = v as usize * self.width as usize + u as usize;
        self.validity[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&b| b).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }
}

/// Per-pixel object labels (0 = background) plus text descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    descriptions: BTreeMap<u32, String>,
}

/// Inclusive pixel-space bounding box of a mask label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
}

impl SegmentationMask {
    /// Builds a mask, requiring a description for every nonzero label that
    /// actually occurs. Descriptions for absent labels are allowed.
    pub fn new(
        width: u32,
        height: u32,
        labels: Vec<u32>,
        descriptions: BTreeMap<u32, String>,
    ) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(GeometryError::DimensionMismatch(format!(
                "mask holds {} labels, expected {expected}",
                labels.len()
            )));
        }
        for &label in &labels {
            if label != 0 && !descriptions.contains_key(&label) {
                return Err(GeometryError::InvalidData {
                    what: "segmentation mask",
                    detail: format!("label {label} has no description"),
                });
            }
        }
        Ok(Self { width, height, labels, descriptions })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn label_at(&self, u: u32, v: u32) -> Option<u32> {
        if u >= self.width || v >= self.height {
            return None;
        }
        Some(self.labels[v as usize * self.width as usize + u as usize])
    }

    pub fn descriptions(&self) -> &BTreeMap<u32, String> {
        &self.descriptions
    }

    /// Nonzero labels present in the raster, ascending.
    pub fn object_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Inclusive 2D bounding box of the pixels carrying `label`.
    pub fn pixel_box(&self, label: u32) -> Option<PixelBox> {
        let mut found = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.labels[v as usize * self.width as usize + u as usize] == label {
                    let b = found.get_or_insert(PixelBox {
                        u_min: u,
                        v_min: v,
                        u_max: u,
                        v_max: v,
                    });
                    b.u_min = b.u_min.min(u);
                    b.v_min = b.v_min.min(v);
                    b.u_max = b.u_max.max(u);
                    b.v_max = b.v_max.max(v);
                }
            }
        }
        found
    }
}

/// Points in the canonical frame with their source object ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    object_ids: Vec<u32>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, object_ids: Vec<u32>) -> Result<Self, GeometryError> {
        if points.len() != object_ids.len() {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} points but {} object ids",
                points.len(),
                object_ids.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::InvalidData {
                    what: "point cloud",
                    detail: format!("point {i} has non-finite coordinates"),
                });
            }
        }
        Ok(Self { points, object_ids })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn object_ids(&self) -> &[u32] {
        &self.object_ids
    }
}

/// Axis-aligned bounding box of one object's points, canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingCube {
    pub object_id: u32,
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
}

impl BoundingCube {
    pub fn center(&self) -> [f64; 3] {
        [
            (self.min_corner[0] + self.max_corner[0]) / 2.0,
            (self.min_corner[1] + self.max_corner[1]) / 2.0,
            (self.min_corner[2] + self.max_corner[2]) / 2.0,
        ]
    }
}

/// Pairwise placement predicates plus center-to-center distance.
///
/// Predicates compare cube centers per axis with a dead zone of `eps`
/// meters, so near-aligned objects report neither side of an axis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialRelation {
    pub left_of: bool,
    pub right_of: bool,
    pub above: bool,
    pub below: bool,
    pub in_front_of: bool,
    pub behind: bool,
    pub center_distance: f64,
}

/// Lifts every valid depth pixel into the canonical frame through the
/// pinhole model. Invalid pixels produce no point.
pub fn backproject(
    depth: &DepthMap,
    mask: &SegmentationMask,
    intr: &CameraIntrinsics,
) -> Result<PointCloud, GeometryError> {
    if depth.width != mask.width
        || depth.height != mask.height
        || depth.width != intr.width
        || depth.height != intr.height
    {
        return Err(GeometryError::DimensionMismatch(format!(
            "depth {}x{}, mask {}x{}, intrinsics {}x{}",
            depth.width, depth.height, mask.width, mask.height, intr.width, intr.height
        )));
    }
    let mut points = Vec::with_capacity(depth.valid_count());
    let mut ids = Vec::with_capacity(points.capacity());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let Some(z) = depth.value_at(u, v) else { continue };
            let x = (u as f64 - intr.cx) * z / intr.fx;
            let y_cam = (v as f64 - intr.cy) * z / intr.fy;
            // canonical frame: flip image-down y so +y points up
            points.push([x, -y_cam, z]);
            ids.push(mask.labels[v as usize * mask.width as usize + u as usize]);
        }
    }
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    PointCloud::new(points, ids)
}

/// Projects a cloud back onto the image plane. Pixels hit by several
/// points keep the nearest depth (occlusion semantics); pixels outside the
/// raster are dropped.
pub fn reproject(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
) -> Result<DepthMap, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let mut out = DepthMap::empty(intr.width, intr.height);
    for (index, p) in cloud.points.iter().enumerate() {
        let z = p[2];
        if z <= 0.0 {
            return Err(GeometryError::PointBehindCamera { index, z });
        }
        let y_cam = -p[1];
        let u = (p[0] * intr.fx / z + intr.cx).round();
        let v = (y_cam * intr.fy / z + intr.cy).round();
        if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
            continue;
        }
        let i = v as usize * intr.width as usize + u as usize;
        if !out.validity[i] || z < out.values[i] {
            out.values[i] = z;
            out.validity[i] = true;
        }
    }
    Ok(out)
}

/// Componentwise min/max box of the points carrying `object_id`.
pub fn bounding_cube(cloud: &PointCloud, object_id: u32) -> Result<BoundingCube, GeometryError> {
    let mut min_corner = [f64::INFINITY; 3];
    let mut max_corner = [f64::NEG_INFINITY; 3];
    let mut seen = false;
    for (p, &id) in cloud.points.iter().zip(&cloud.object_ids) {
        if id != object_id {
            continue;
        }
        seen = true;
        for axis in 0..3 {
            min_corner[axis] = min_corner[axis].min(p[axis]);
            max_corner[axis] = max_corner[axis].max(p[axis]);
        }
    }
    if !seen {
        return Err(GeometryError::ObjectNotFound(object_id));
    }
    Ok(BoundingCube { object_id, min_corner, max_corner })
}

/// Bounding cubes for every nonzero object id present in the cloud,
/// ascending by id.
pub fn bounding_cubes(cloud: &PointCloud) -> Vec<BoundingCube> {
    let mut ids: Vec<u32> = cloud.object_ids.iter().copied().filter(|&id| id != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| bounding_cube(cloud, id).expect("id taken from the cloud"))
        .collect()
}

/// Center-based placement of cube `a` relative to cube `b`.
///
/// Conventions: +x right, +y up, +z away from the camera, so `in_front_of`
/// means nearer to the viewer.
pub fn spatial_relation(a: &BoundingCube, b: &BoundingCube, eps: f64) -> SpatialRelation {
    let ca = a.center();
    let cb = b.center();
    let dx = ca[0] - cb[0];
    let dy = ca[1] - cb[1];
    let dz = ca[2] - cb[2];
    SpatialRelation {
        left_of: ca[0] < cb[0] - eps,
        right_of: ca[0] > cb[0] + eps,
        above: ca[1] > cb[1] + eps,
        below: ca[1] < cb[1] - eps,
        in_front_of: ca[2] < cb[2] - eps,
        behind: ca[2] > cb[2] + eps,
        center_distance: (dx * dx + dy * dy + dz * dz).sqrt(),
    }
}
