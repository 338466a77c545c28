//! Flat-detector fanbeam acquisition geometry.
//!
//! For view angle `φ` the source sits at `d_source·(cos φ, sin φ)` and the
//! detector array is centered at `−d_detector·(cos φ, sin φ)`, running along
//! `(−sin φ, cos φ)`. Element `j` is offset by
//! `(j − (n_detector−1)/2)·s_detector` from the array center. Positive `φ`
//! rotates counter-clockwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complete description of a flat-detector fanbeam scan, in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanbeamGeometry {
    pub d_source: f64,
    pub d_detector: f64,
    pub n_detector: usize,
    pub s_detector: f64,
    pub n_angle: usize,
    pub angles: Vec<f64>,
    pub image_size: usize,
}

/// Free parameters of the forward model: global scale, source distance and
/// one rotation angle per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    pub s_fwd: f64,
    pub d_source: f64,
    pub angles: Vec<f64>,
}

/// The parts of a geometry that are fixed by the data dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryDims {
    pub n_detector: usize,
    pub n_angle: usize,
    pub image_size: usize,
}

/// One measurement line, from the source to the center of a detector element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub source_point: [f64; 2],
    pub detector_point: [f64; 2],
}

/// Per-view frame: unit vector towards the source and the detector direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ViewFrame {
    pub axis: [f64; 2],
    pub along: [f64; 2],
}

impl ViewFrame {
    pub fn new(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            axis: [c, s],
            along: [-s, c],
        }
    }
}

impl Ray {
    pub fn length(&self) -> f64 {
        let dx = self.detector_point[0] - self.source_point[0];
        let dy = self.detector_point[1] - self.source_point[1];
        dx.hypot(dy)
    }

    /// Perpendicular distance of the (infinite) line from the origin.
    pub fn distance_to_origin(&self) -> f64 {
        let [sx, sy] = self.source_point;
        let [px, py] = self.detector_point;
        ((px - sx) * sy - (py - sy) * sx).abs() / self.length()
    }
}

impl GeometryDims {
    pub fn of(geom: &FanbeamGeometry) -> Self {
        Self {
            n_detector: geom.n_detector,
            n_angle: geom.n_angle,
            image_size: geom.image_size,
        }
    }

    pub fn sinogram_dim(&self) -> (usize, usize) {
        (self.n_angle, self.n_detector)
    }
}

impl CalibParams {
    /// Number of scalar parameters, `2 + n_angle`.
    pub fn dimension(&self) -> usize {
        2 + self.angles.len()
    }

    pub fn from_geometry(geom: &FanbeamGeometry, s_fwd: f64) -> Self {
        Self {
            s_fwd,
            d_source: geom.d_source,
            angles: geom.angles.clone(),
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(self.s_fwd.is_finite() && self.s_fwd > 0.0) {
            return Err(Error::InvalidParams(format!(
                "s_fwd must be positive, got {}",
                self.s_fwd
            )));
        }
        let radius = image_size as f64 / 2.0;
        if !(self.d_source.is_finite() && self.d_source > radius) {
            return Err(Error::InvalidParams(format!(
                "d_source {} must exceed image_size/2 = {radius}",
                self.d_source
            )));
        }
        if self.angles.is_empty() || self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParams(
                "angles must be a nonempty list of finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Detector distance that makes the fan exactly cover the inscribed circle
/// of radius `image_size/2`, i.e. `n·s/(2·tan γ) − d_source` with
/// `γ = arcsin((image_size/2)/d_source)`.
pub fn reduced_detector_distance(
    d_source: f64,
    n_detector: usize,
    s_detector: f64,
    image_size: usize,
) -> Result<f64> {
    let radius = image_size as f64 / 2.0;
    if !(d_source > radius) {
        return Err(Error::InvalidGeometry(format!(
            "d_source {d_source} must exceed image_size/2 = {radius}"
        )));
    }
    // tan γ = R / √(d² − R²)
    let cot_gamma = (d_source * d_source - radius * radius).sqrt() / radius;
    Ok(n_detector as f64 * s_detector * cot_gamma / 2.0 - d_source)
}

/// `∂ d_detector / ∂ d_source` for [`reduced_detector_distance`].
pub(crate) fn reduced_detector_distance_derivative(
    d_source: f64,
    n_detector: usize,
    s_detector: f64,
    image_size: usize,
) -> f64 {
    let radius = image_size as f64 / 2.0;
    let root = (d_source * d_source - radius * radius).sqrt();
    n_detector as f64 * s_detector * d_source / (2.0 * radius * root) - 1.0
}

/// Builds the full geometry from the reduced parameters with unit detector
/// spacing.
pub fn geometry_from_reduced(
    params: &CalibParams,
    n_detector: usize,
    n_angle: usize,
    image_size: usize,
) -> Result<FanbeamGeometry> {
    if params.angles.len() != n_angle {
        return Err(Error::InvalidParams(format!(
            "expected {n_angle} angles, got {}",
            params.angles.len()
        )));
    }
    params.validate(image_size)?;
    let s_detector = 1.0;
    let d_detector =
        reduced_detector_distance(params.d_source, n_detector, s_detector, image_size)?;
    if !(d_detector > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "derived d_detector {d_detector} is not positive (d_source {} too large for {n_detector} elements)",
            params.d_source
        )));
    }
    let geom = FanbeamGeometry {
        d_source: params.d_source,
        d_detector,
        n_detector,
        s_detector,
        n_angle,
        angles: params.angles.clone(),
        image_size,
    };
    geom.validate()?;
    Ok(geom)
}

/// `n` angles `start + k·span/n`, `k = 0..n`.
pub fn equispaced_angles(n: usize, start: f64, span: f64) -> Vec<f64> {
    (0..n).map(|k| start + span * k as f64 / n as f64).collect()
}

impl FanbeamGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.n_detector == 0 || self.n_angle == 0 {
            return bad("n_detector and n_angle must be at least 1".into());
        }
        if self.angles.len() != self.n_angle {
            return bad(format!(
                "angles has {} entries, n_angle is {}",
                self.angles.len(),
                self.n_angle
            ));
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return bad("angles must be finite".into());
        }
        if !(self.s_detector.is_finite() && self.s_detector > 0.0) {
            return bad(format!("s_detector must be positive, got {}", self.s_detector));
        }
        if !(self.d_detector.is_finite() && self.d_detector > 0.0) {
            return bad(format!("d_detector must be positive, got {}", self.d_detector));
        }
        let radius = self.inscribed_radius();
        if !(self.d_source.is_finite() && self.d_source > radius) {
            return bad(format!(
                "d_source {} must exceed image_size/2 = {radius}",
                self.d_source
            ));
        }
        let half_width = self.n_detector as f64 * self.s_detector / 2.0;
        let needed = self.source_to_detector() * self.fov_half_angle().tan();
        if half_width < needed - self.s_detector {
            return bad(format!(
                "detector half-width {half_width} does not cover the field of view (needs {needed})"
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> GeometryDims {
        GeometryDims::of(self)
    }

    /// Radius of the circle inscribed in the image, `image_size/2`.
    pub fn inscribed_radius(&self) -> f64 {
        self.image_size as f64 / 2.0
    }

    /// Half opening angle `γ = arcsin((image_size/2)/d_source)`.
    pub fn fov_half_angle(&self) -> f64 {
        (self.inscribed_radius() / self.d_source).asin()
    }

    pub fn source_to_detector(&self) -> f64 {
        self.d_source + self.d_detector
    }

    /// Signed offset `t_j` of element `j` from the array center.
    #[inline]
    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detector as f64 - 1.0) / 2.0) * self.s_detector
    }

    pub fn sinogram_dim(&self) -> (usize, usize) {
        (self.n_angle, self.n_detector)
    }

    pub(crate) fn frame(&self, k: usize) -> ViewFrame {
        ViewFrame::new(self.angles[k])
    }

    pub(crate) fn ray(&self, frame: &ViewFrame, j: usize) -> Ray {
        let t = self.detector_offset(j);
        let [ex, ey] = frame.axis;
        let [nx, ny] = frame.along;
        Ray {
            source_point: [self.d_source * ex, self.d_source * ey],
            detector_point: [-self.d_detector * ex + t * nx, -self.d_detector * ey + t * ny],
        }
    }

    pub fn with_angles(&self, angles: Vec<f64>) -> Result<Self> {
        let geom = Self {
            n_angle: angles.len(),
            angles,
            ..self.clone()
        };
        geom.validate()?;
        Ok(geom)
    }
}

/// All rays of view `angle_index`, in ascending detector order.
pub fn enumerate_rays(geom: &FanbeamGeometry, angle_index: usize) -> Result<Vec<Ray>> {
    if angle_index >= geom.n_angle {
        return Err(Error::IndexOutOfRange {
            index: angle_index,
            len: geom.n_angle,
        });
    }
    let frame = geom.frame(angle_index);
    Ok((0..geom.n_detector).map(|j| geom.ray(&frame, j)).collect())
}
