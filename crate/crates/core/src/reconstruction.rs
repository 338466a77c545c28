//! FBP-preconditioned data-consistency iteration.
//!
//! Starting from `x₀ = FBP(y)`, each iteration applies an image enhancer
//! and then the data-consistency layer `x ↦ x − λ_k·FBP(F x − y)`.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::array::{BiasCorrection, Image, Sinogram};
use crate::error::{Error, Result};
use crate::fbp::{fbp_reconstruct, FbpConfig};
use crate::geometry::FanbeamGeometry;
use crate::projector::Projector;

/// Step weights learned for the four-iteration network; a reasonable
/// starting schedule, not tuned for the reference enhancers here.
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.1, 1.3, 1.4, 0.08];

pub trait Enhancer: Sync {
    fn enhance(&self, image: &Image) -> Result<Image>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnhancerKind {
    #[default]
    Identity,
    ClampNonneg,
    GaussianSmooth {
        sigma: f64,
    },
}

impl Enhancer for EnhancerKind {
    fn enhance(&self, image: &Image) -> Result<Image> {
        match *self {
            EnhancerKind::Identity => Ok(image.clone()),
            EnhancerKind::ClampNonneg => Image::new(image.data().mapv(|v| v.max(0.0))),
            EnhancerKind::GaussianSmooth { sigma } => gaussian_smooth(image, sigma),
        }
    }
}

/// Separable Gaussian blur truncated at 3σ with replicated borders.
fn gaussian_smooth(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);

    let blur = |src: &Array2<f64>, axis: Axis| -> Array2<f64> {
        let n = src.len_of(axis) as isize;
        let mut out = Array2::zeros(src.raw_dim());
        Zip::from(out.lanes_mut(axis))
            .and(src.lanes(axis))
            .for_each(|mut o, s| {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (w, off) in weights.iter().zip(-radius..=radius) {
                        let idx = (i + off).clamp(0, n - 1) as usize;
                        acc += w * s[idx];
                    }
                    o[i as usize] = acc;
                }
            });
        out
    };
    let rows = blur(image.data(), Axis(1));
    Image::new(blur(&rows, Axis(0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub enhancer: EnhancerKind,
    #[serde(default)]
    pub use_bias_correction: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            enhancer: EnhancerKind::Identity,
            use_bias_correction: false,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("lambdas must have at least one entry".into()));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid lambda {bad}")));
        }
        if let EnhancerKind::GaussianSmooth { sigma } = self.enhancer {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
            }
        }
        Ok(())
    }
}

/// The forward model and its FBP inverse on one shared geometry.
#[derive(Debug, Clone)]
pub struct Operators {
    pub geom: FanbeamGeometry,
    pub s_fwd: f64,
    pub projector: Projector,
    pub fbp: FbpConfig,
    /// When set, the forward model is `F(x) − bias`.
    pub bias: Option<BiasCorrection>,
}

impl Operators {
    pub fn new(geom: FanbeamGeometry, s_fwd: f64, fbp: FbpConfig) -> Result<Self> {
        geom.validate()?;
        fbp.validate(&geom)?;
        Ok(Self {
            geom,
            s_fwd,
            projector: Projector::default(),
            fbp,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: BiasCorrection) -> Result<Self> {
        if bias.dim() != self.geom.sinogram_dim() {
            let (a, d) = self.geom.sinogram_dim();
            let (ba, bd) = bias.dim();
            return Err(Error::shape("bias vs geometry", &[a, d], &[ba, bd]));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn forward(&self, image: &Image) -> Result<Sinogram> {
        match &self.bias {
            Some(b) => self.projector.project_corrected(image, &self.geom, self.s_fwd, b),
            None => self.projector.project(image, &self.geom, self.s_fwd),
        }
    }

    pub fn fbp(&self, sino: &Sinogram) -> Result<Image> {
        fbp_reconstruct(sino, &self.geom, &self.fbp)
    }

    /// Data-consistency error `y − F x`.
    pub fn residual(&self, x: &Image, y: &Sinogram) -> Result<Sinogram> {
        y.sub(&self.forward(x)?)
    }

    fn check_sinogram(&self, y: &Sinogram) -> Result<()> {
        if y.dim() != self.geom.sinogram_dim() {
            let (a, d) = self.geom.sinogram_dim();
            let (ya, yd) = y.dim();
            return Err(Error::shape("sinogram vs geometry", &[a, d], &[ya, yd]));
        }
        Ok(())
    }
}

/// `x − λ·FBP(F x − y)`.
pub fn dc_layer(x: &Image, y: &Sinogram, lambda: f64, ops: &Operators) -> Result<Image> {
    ops.check_sinogram(y)?;
    let update = ops.fbp(&ops.forward(x)?.sub(y)?)?;
    Image::new(x.data() - &(update.data() * lambda))
}

/// All iterates `x₀ = FBP(y), x₁, …, x_K`.
pub fn iterates(
    y: &Sinogram,
    lambdas: &[f64],
    enhancer: &dyn Enhancer,
    ops: &Operators,
) -> Result<Vec<Image>> {
    ops.check_sinogram(y)?;
    let mut xs = Vec::with_capacity(lambdas.len() + 1);
    xs.push(ops.fbp(y)?);
    for (k, &lambda) in lambdas.iter().enumerate() {
        let stage = || format!("iteration {}", k + 1);
        let prev = xs.last().expect("nonempty");
        let enhanced = enhancer.enhance(prev).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { stage: stage() },
            other => other,
        })?;
        let next = dc_layer(&enhanced, y, lambda, ops).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { stage: stage() },
            other => other,
        })?;
        xs.push(next);
    }
    Ok(xs)
}

/// Runs the configured schedule and returns the final iterate.
pub fn iterative_reconstruct(y: &Sinogram, cfg: &ReconConfig, ops: &Operators) -> Result<Image> {
    cfg.validate()?;
    let ops_view;
    let ops = match (cfg.use_bias_correction, &ops.bias) {
        (true, None) => {
            return Err(Error::InvalidConfig(
                "bias correction requested but no bias is attached".into(),
            ))
        }
        (false, Some(_)) => {
            ops_view = Operators {
                bias: None,
                ..ops.clone()
            };
            &ops_view
        }
        _ => ops,
    };
    let mut xs = iterates(y, &cfg.lambdas, &cfg.enhancer, ops)?;
    Ok(xs.pop().expect("at least the FBP iterate"))
}

/// Pixelwise mean of equally shaped images.
pub fn ensemble_average(reconstructions: &[Image]) -> Result<Image> {
    let Some(first) = reconstructions.first() else {
        return Err(Error::Empty("ensemble"));
    };
    let n = first.n_pix();
    let mut acc = Array2::<f64>::zeros((n, n));
    for r in reconstructions {
        if r.n_pix() != n {
            return Err(Error::shape("ensemble member", &[n, n], &[r.n_pix(), r.n_pix()]));
        }
        acc += r.data();
    }
    Image::new(acc / reconstructions.len() as f64)
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.n_pix() != b.n_pix() {
        return Err(Error::shape(
            "metric operands",
            &[a.n_pix(), a.n_pix()],
            &[b.n_pix(), b.n_pix()],
        ));
    }
    Ok(())
}

/// `√((1/N)·Σ (a − b)²)`.
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mut acc = 0.0;
    Zip::from(a.data()).and(b.data()).for_each(|x, y| {
        let d = x - y;
        acc += d * d;
    });
    Ok((acc / a.data().len() as f64).sqrt())
}

pub fn max_abs_diff(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mut m = 0.0f64;
    Zip::from(a.data())
        .and(b.data())
        .for_each(|x, y| m = m.max((x - y).abs()));
    Ok(m)
}
