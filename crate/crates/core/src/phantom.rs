//! Analytic ellipse phantoms with exact fanbeam line integrals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{Image, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{FanbeamGeometry, Ray};

/// One ellipse; `rotation` turns the first semi-axis away from the x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation: f64,
    pub density: f64,
}

/// Superposition of ellipses; serializes as a plain JSON list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EllipsePhantom {
    ellipses: Vec<Ellipse>,
}

impl Ellipse {
    fn local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [p[0] * c + p[1] * s, -p[0] * s + p[1] * c]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x, y] = self.local([p[0] - self.center[0], p[1] - self.center[1]]);
        let (u, v) = (x / self.semi_axes[0], y / self.semi_axes[1]);
        u * u + v * v <= 1.0
    }

    /// Exact integral of the density along the infinite line through `ray`.
    pub fn line_integral(&self, ray: &Ray) -> f64 {
        let s = ray.source_point;
        let d = [
            ray.detector_point[0] - s[0],
            ray.detector_point[1] - s[1],
        ];
        let len = d[0].hypot(d[1]);
        // Map to the unit disk: q + t·w with t the arc length along the ray.
        let q = self.local([s[0] - self.center[0], s[1] - self.center[1]]);
        let w = self.local([d[0] / len, d[1] / len]);
        let q = [q[0] / self.semi_axes[0], q[1] / self.semi_axes[1]];
        let w = [w[0] / self.semi_axes[0], w[1] / self.semi_axes[1]];
        let a = w[0] * w[0] + w[1] * w[1];
        let b = q[0] * w[0] + q[1] * w[1];
        let c = q[0] * q[0] + q[1] * q[1] - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            0.0
        } else {
            self.density * 2.0 * disc.sqrt() / a
        }
    }

    fn rotated(&self, delta: f64) -> Self {
        let (s, c) = delta.sin_cos();
        Self {
            center: [
                c * self.center[0] - s * self.center[1],
                s * self.center[0] + c * self.center[1],
            ],
            rotation: self.rotation + delta,
            ..*self
        }
    }
}

impl EllipsePhantom {
    pub fn new(ellipses: Vec<Ellipse>) -> Result<Self> {
        let p = Self { ellipses };
        p.validate()?;
        Ok(p)
    }

    /// Centered disk of radius `radius`.
    pub fn disk(radius: f64, density: f64) -> Result<Self> {
        Self::new(vec![Ellipse {
            center: [0.0, 0.0],
            semi_axes: [radius, radius],
            rotation: 0.0,
            density,
        }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.ellipses.is_empty() {
            return Err(Error::InvalidConfig("phantom has no ellipses".into()));
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            let finite = e.center.iter().chain(&e.semi_axes).all(|v| v.is_finite())
                && e.rotation.is_finite()
                && e.density.is_finite();
            if !finite || e.semi_axes.iter().any(|&a| a <= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "ellipse {i} needs finite values and positive semi-axes"
                )));
            }
        }
        Ok(())
    }

    pub fn ellipses(&self) -> &[Ellipse] {
        &self.ellipses
    }

    /// The phantom rotated by `delta` radians about the origin.
    pub fn rotated(&self, delta: f64) -> Self {
        Self {
            ellipses: self.ellipses.iter().map(|e| e.rotated(delta)).collect(),
        }
    }

    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        self.ellipses
            .iter()
            .filter(|e| e.contains(p))
            .map(|e| e.density)
            .sum()
    }

    pub fn line_integral(&self, ray: &Ray) -> f64 {
        self.ellipses.iter().map(|e| e.line_integral(ray)).sum()
    }
}

/// Point-sampled rasterization on the standard pixel grid.
pub fn rasterize(phantom: &EllipsePhantom, n_pix: usize) -> Result<Image> {
    if n_pix == 0 {
        return Err(Error::InvalidConfig("n_pix must be at least 1".into()));
    }
    phantom.validate()?;
    Ok(Image::from_fn(n_pix, |(r, c)| {
        phantom.value_at(Image::pixel_center(n_pix, r, c))
    }))
}

/// Exact line integrals of the phantom along every ray of `geom`, times
/// `s_fwd`.
pub fn analytic_sinogram(
    phantom: &EllipsePhantom,
    geom: &FanbeamGeometry,
    s_fwd: f64,
) -> Result<Sinogram> {
    geom.validate()?;
    phantom.validate()?;
    let rows: Vec<Vec<f64>> = (0..geom.n_angle)
        .into_par_iter()
        .map(|k| {
            let frame = geom.frame(k);
            (0..geom.n_detector)
                .map(|j| s_fwd * phantom.line_integral(&geom.ray(&frame, j)))
                .collect()
        })
        .collect();
    Ok(Sinogram::from_rows(rows, geom.n_detector))
}

/// Random phantom: a fixed elliptical body with low-contrast inclusions.
pub fn random_phantom<R: Rng>(rng: &mut R, n_pix: usize) -> EllipsePhantom {
    let n = n_pix as f64;
    let mut ellipses = vec![Ellipse {
        center: [0.0, 0.0],
        semi_axes: [0.38 * n, 0.30 * n],
        rotation: 0.0,
        density: 1.0,
    }];
    let count = rng.random_range(3..=6);
    for _ in 0..count {
        let radius = 0.2 * n * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let magnitude = rng.random_range(0.05..0.25);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        ellipses.push(Ellipse {
            center: [radius * theta.cos(), radius * theta.sin()],
            semi_axes: [
                rng.random_range(0.03 * n..0.12 * n),
                rng.random_range(0.03 * n..0.12 * n),
            ],
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            density: sign * magnitude,
        });
    }
    EllipsePhantom { ellipses }
}

/// `count` reproducible random phantoms from one seed.
pub fn random_phantom_suite(count: usize, n_pix: usize, seed: u64) -> Vec<EllipsePhantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_phantom(&mut rng, n_pix)).collect()
}
