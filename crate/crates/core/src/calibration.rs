//! Data-driven identification of the fanbeam geometry.
//!
//! The objective is `(1/M)·Σᵢ ‖F[θ](xᵢ) − yᵢ‖²` over `θ = (s_fwd, d_source,
//! φ)`. It is minimized by coordinate descent over the three blocks, each
//! with its own adaptive step size. Afterwards the FBP scale and the
//! additive sinogram bias are fitted with `θ` held fixed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{BiasCorrection, Image, Sinogram};
use crate::error::{Error, Result};
use crate::fbp::{fbp_unscaled, FbpConfig};
use crate::filter::RampFilter;
use crate::geometry::{geometry_from_reduced, CalibParams, FanbeamGeometry, GeometryDims};
use crate::projector::Projector;

/// Sinogram/image pairs sharing one shape signature.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pairs: Vec<(Sinogram, Image)>,
}

impl CalibrationSet {
    pub fn new(pairs: Vec<(Sinogram, Image)>) -> Result<Self> {
        let Some((y0, x0)) = pairs.first() else {
            return Err(Error::Empty("calibration set"));
        };
        let (sino_dim, n_pix) = (y0.dim(), x0.n_pix());
        for (y, x) in &pairs[1..] {
            if y.dim() != sino_dim {
                return Err(Error::shape(
                    "calibration sinogram",
                    &[sino_dim.0, sino_dim.1],
                    &[y.n_angle(), y.n_detector()],
                ));
            }
            if x.n_pix() != n_pix {
                return Err(Error::shape(
                    "calibration image",
                    &[n_pix, n_pix],
                    &[x.n_pix(), x.n_pix()],
                ));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(sinogram, image)` pairs.
    pub fn pairs(&self) -> &[(Sinogram, Image)] {
        &self.pairs
    }

    pub fn dims(&self) -> GeometryDims {
        let (y, x) = &self.pairs[0];
        GeometryDims {
            n_detector: y.n_detector(),
            n_angle: y.n_angle(),
            image_size: x.n_pix(),
        }
    }

    pub(crate) fn check_dims(&self, dims: GeometryDims) -> Result<()> {
        let own = self.dims();
        if own != dims {
            return Err(Error::shape(
                "calibration set vs geometry",
                &[dims.n_angle, dims.n_detector, dims.image_size],
                &[own.n_angle, own.n_detector, own.image_size],
            ));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pairs = indices
            .iter()
            .map(|&i| {
                self.pairs.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.pairs.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    SFwd,
    DSource,
    Angles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinateDescentConfig {
    /// Initial step length for the `s_fwd` block when it is not solved in
    /// closed form.
    pub lr_sfwd: f64,
    /// Initial step length for `d_source`, pixel units.
    pub lr_dsource: f64,
    /// Initial step length per view angle, radians.
    pub lr_angle: f64,
    pub max_outer_iters: usize,
    /// Stop once an outer iteration lowers the loss by less than this
    /// fraction.
    pub tol: f64,
    pub block_order: Vec<Block>,
    /// Solve the `s_fwd` block exactly instead of taking a gradient step.
    pub sfwd_closed_form: bool,
    /// Step-size multiplier after an accepted step.
    pub step_growth: f64,
    /// Halvings tried before a block gives up for the current iteration.
    pub max_backtracks: usize,
    /// Pairs drawn per outer iteration; `None` uses the full set.
    pub subsample: Option<usize>,
    pub seed: u64,
    /// Sampling step of the model projector.
    pub projector_step: f64,
    pub fbp_filter: RampFilter,
}

impl Default for CoordinateDescentConfig {
    fn default() -> Self {
        Self {
            lr_sfwd: 1e-2,
            lr_dsource: 1e-1,
            lr_angle: 1e-4,
            max_outer_iters: 60,
            tol: 1e-12,
            block_order: vec![Block::SFwd, Block::DSource, Block::Angles],
            sfwd_closed_form: true,
            step_growth: 2.0,
            max_backtracks: 30,
            subsample: None,
            seed: 0,
            projector_step: crate::projector::DEFAULT_STEP,
            fbp_filter: RampFilter::HammingRamp,
        }
    }
}

impl CoordinateDescentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_sfwd", self.lr_sfwd),
            ("lr_dsource", self.lr_dsource),
            ("lr_angle", self.lr_angle),
            ("tol", self.tol),
            ("projector_step", self.projector_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer_iters < 1 {
            return Err(Error::InvalidConfig("max_outer_iters must be at least 1".into()));
        }
        if !(self.step_growth >= 1.0) {
            return Err(Error::InvalidConfig("step_growth must be at least 1".into()));
        }
        if self.block_order.is_empty() {
            return Err(Error::InvalidConfig("block_order is empty".into()));
        }
        if self.subsample == Some(0) {
            return Err(Error::InvalidConfig("subsample must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct CalibReport {
    pub params: CalibParams,
    pub dims: GeometryDims,
    pub s_fbp: f64,
    pub fbp: FbpConfig,
    pub bias: BiasCorrection,
    /// `(outer iteration, objective)`; iteration 0 is the initial point.
    pub loss_history: Vec<(usize, f64)>,
    pub converged: bool,
    pub status: CalibStatus,
}

impl CalibReport {
    pub fn geometry(&self) -> Result<FanbeamGeometry> {
        geometry_from_reduced(
            &self.params,
            self.dims.n_detector,
            self.dims.n_angle,
            self.dims.image_size,
        )
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().map_or(f64::NAN, |&(_, l)| l)
    }
}

/// Objective evaluation on a fixed set of pairs.
struct Objective<'a> {
    pairs: &'a CalibrationSet,
    projector: Projector,
    dims: GeometryDims,
}

impl<'a> Objective<'a> {
    fn geometry(&self, params: &CalibParams) -> Result<FanbeamGeometry> {
        geometry_from_reduced(params, self.dims.n_detector, self.dims.n_angle, self.dims.image_size)
    }

    /// Per-view contributions to the objective for `views`.
    fn view_losses(&self, params: &CalibParams, views: &[usize]) -> Result<Vec<f64>> {
        let geom = self.geometry(params)?;
        let per_pair: Vec<Result<Vec<f64>>> = self
            .pairs
            .pairs()
            .par_iter()
            .map(|(y, x)| {
                let rows = self.projector.project_views(x, &geom, params.s_fwd, views)?;
                Ok(rows
                    .iter()
                    .zip(views)
                    .map(|(row, &k)| {
                        row.iter()
                            .zip(y.data().row(k))
                            .map(|(f, m)| (f - m) * (f - m))
                            .sum()
                    })
                    .collect())
            })
            .collect();
        reduce_pairs(per_pair, views.len(), self.pairs.len())
    }

    fn all_views(&self) -> Vec<usize> {
        (0..self.dims.n_angle).collect()
    }

    /// Unit-scale projections `F[s_fwd = 1](xᵢ)`.
    fn unit_projections(&self, params: &CalibParams) -> Result<Vec<Sinogram>> {
        let geom = self.geometry(params)?;
        self.pairs
            .pairs()
            .par_iter()
            .map(|(_, x)| self.projector.project(x, &geom, 1.0))
            .collect()
    }
}

fn reduce_pairs(per_pair: Vec<Result<Vec<f64>>>, width: usize, m: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; width];
    for item in per_pair {
        for (a, v) in acc.iter_mut().zip(item?) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= m as f64;
    }
    Ok(acc)
}

fn total(view_losses: &[f64]) -> f64 {
    view_losses.iter().sum()
}

/// Closed-form least-squares scale: `Σ⟨Aᵢ, yᵢ⟩ / Σ‖Aᵢ‖²`.
fn best_scale(unit: &[Sinogram], pairs: &CalibrationSet) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, (y, _)) in unit.iter().zip(pairs.pairs()) {
        num += a.dot(y);
        den += a.norm_sq();
    }
    num / den
}

fn scaled_view_losses(unit: &[Sinogram], pairs: &CalibrationSet, s: f64) -> Vec<f64> {
    let n_angle = pairs.dims().n_angle;
    let per_pair: Vec<Result<Vec<f64>>> = unit
        .iter()
        .zip(pairs.pairs())
        .map(|(a, (y, _))| {
            Ok((0..n_angle)
                .map(|k| {
                    a.data()
                        .row(k)
                        .iter()
                        .zip(y.data().row(k))
                        .map(|(f, m)| {
                            let r = s * f - m;
                            r * r
                        })
                        .sum()
                })
                .collect())
        })
        .collect();
    reduce_pairs(per_pair, n_angle, pairs.len()).expect("infallible")
}

/// `(1/M)·Σᵢ ‖F[params](xᵢ) − yᵢ‖²` with the default projector.
pub fn calibration_loss(pairs: &CalibrationSet, params: &CalibParams) -> Result<f64> {
    calibration_loss_with(&Projector::default(), pairs, params)
}

pub fn calibration_loss_with(
    projector: &Projector,
    pairs: &CalibrationSet,
    params: &CalibParams,
) -> Result<f64> {
    let objective = Objective {
        pairs,
        projector: *projector,
        dims: pairs.dims(),
    };
    let views = objective.all_views();
    Ok(total(&objective.view_losses(params, &views)?))
}

/// Step-size state of one scalar coordinate.
#[derive(Debug, Clone, Copy)]
struct StepSize {
    rate: Option<f64>,
}

impl StepSize {
    /// Multiplier on the gradient; the first step has length `initial`.
    fn rate_for(&mut self, gradient: f64, initial: f64) -> f64 {
        *self.rate.get_or_insert(initial / gradient.abs())
    }

    fn accept(&mut self, growth: f64) {
        if let Some(r) = self.rate.as_mut() {
            *r *= growth;
        }
    }

    fn reject(&mut self) {
        if let Some(r) = self.rate.as_mut() {
            *r *= 0.5;
        }
    }
}

struct Descent<'a> {
    cfg: &'a CoordinateDescentConfig,
    params: CalibParams,
    view_losses: Vec<f64>,
    sfwd_step: StepSize,
    dsource_step: StepSize,
    angle_steps: Vec<StepSize>,
}

impl<'a> Descent<'a> {
    fn loss(&self) -> f64 {
        total(&self.view_losses)
    }

    fn sfwd_closed_form(&mut self, obj: &Objective) -> Result<bool> {
        let unit = obj.unit_projections(&self.params)?;
        let s = best_scale(&unit, obj.pairs);
        if !(s.is_finite() && s > 0.0) {
            return Ok(false);
        }
        let trial = scaled_view_losses(&unit, obj.pairs, s);
        if total(&trial) <= self.loss() {
            self.params.s_fwd = s;
            self.view_losses = trial;
            return Ok(true);
        }
        Ok(false)
    }

    fn sfwd_gradient(&mut self, obj: &Objective) -> Result<bool> {
        let (_, grad) = obj.projector.loss_gradient(obj.pairs, &self.params, obj.dims)?;
        let g = grad.s_fwd;
        if g == 0.0 || !g.is_finite() {
            return Ok(false);
        }
        let unit = obj.unit_projections(&self.params)?;
        self.sfwd_step.rate_for(g, self.cfg.lr_sfwd);
        for _ in 0..=self.cfg.max_backtracks {
            let rate = self.sfwd_step.rate.expect("initialized");
            let s = self.params.s_fwd - rate * g;
            if s > 0.0 {
                let trial = scaled_view_losses(&unit, obj.pairs, s);
                if total(&trial) < self.loss() {
                    self.params.s_fwd = s;
                    self.view_losses = trial;
                    self.sfwd_step.accept(self.cfg.step_growth);
                    return Ok(true);
                }
            }
            self.sfwd_step.reject();
        }
        Ok(false)
    }

    fn dsource(&mut self, obj: &Objective) -> Result<bool> {
        let (_, grad) = obj.projector.loss_gradient(obj.pairs, &self.params, obj.dims)?;
        let g = grad.d_source;
        if g == 0.0 || !g.is_finite() {
            return Ok(false);
        }
        self.dsource_step.rate_for(g, self.cfg.lr_dsource);
        let views = obj.all_views();
        for _ in 0..=self.cfg.max_backtracks {
            let rate = self.dsource_step.rate.expect("initialized");
            let trial_params = CalibParams {
                d_source: self.params.d_source - rate * g,
                ..self.params.clone()
            };
            // An invalid geometry counts as a rejected step.
            if let Ok(trial) = obj.view_losses(&trial_params, &views) {
                if total(&trial) < self.loss() {
                    self.params = trial_params;
                    self.view_losses = trial;
                    self.dsource_step.accept(self.cfg.step_growth);
                    return Ok(true);
                }
            }
            self.dsource_step.reject();
        }
        Ok(false)
    }

    /// Views are separable, so each angle accepts or backtracks on its own.
    fn angles(&mut self, obj: &Objective) -> Result<bool> {
        let (_, grad) = obj.projector.loss_gradient(obj.pairs, &self.params, obj.dims)?;
        let mut pending: Vec<usize> = (0..grad.angles.len())
            .filter(|&k| grad.angles[k] != 0.0 && grad.angles[k].is_finite())
            .collect();
        for &k in &pending {
            self.angle_steps[k].rate_for(grad.angles[k], self.cfg.lr_angle);
        }
        let mut any = false;
        for _ in 0..=self.cfg.max_backtracks {
            if pending.is_empty() {
                break;
            }
            let mut trial_params = self.params.clone();
            for &k in &pending {
                let rate = self.angle_steps[k].rate.expect("initialized");
                trial_params.angles[k] -= rate * grad.angles[k];
            }
            let trial = obj.view_losses(&trial_params, &pending)?;
            let mut still = Vec::new();
            for (&k, &loss) in pending.iter().zip(&trial) {
                if loss < self.view_losses[k] {
                    self.params.angles[k] = trial_params.angles[k];
                    self.view_losses[k] = loss;
                    self.angle_steps[k].accept(self.cfg.step_growth);
                    any = true;
                } else {
                    self.angle_steps[k].reject();
                    still.push(k);
                }
            }
            pending = still;
        }
        Ok(any)
    }
}

/// Estimates `(s_fwd, d_source, φ)` by coordinate descent, then fits
/// `s_fbp` and the additive bias at the estimate.
///
/// Steps that do not lower the objective are undone and retried with half
/// the step size, so the recorded loss history never increases.
pub fn calibrate(
    pairs: &CalibrationSet,
    init: &CalibParams,
    cfg: &CoordinateDescentConfig,
) -> Result<CalibReport> {
    cfg.validate()?;
    let dims = pairs.dims();
    let projector = Projector::new(cfg.projector_step)?;
    geometry_from_reduced(init, dims.n_detector, dims.n_angle, dims.image_size)?;

    let full = Objective {
        pairs,
        projector,
        dims,
    };
    let views = full.all_views();
    let initial = full.view_losses(init, &views)?;
    let mut state = Descent {
        cfg,
        params: init.clone(),
        view_losses: initial,
        sfwd_step: StepSize { rate: None },
        dsource_step: StepSize { rate: None },
        angle_steps: vec![StepSize { rate: None }; dims.n_angle],
    };
    let mut history = vec![(0, state.loss())];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut status = CalibStatus::MaxIterations;
    if !state.loss().is_finite() {
        status = CalibStatus::Diverged;
    } else if state.loss() == 0.0 {
        status = CalibStatus::Converged;
    } else {
        for it in 1..=cfg.max_outer_iters {
            let start = state.loss();
            let start_params = state.params.clone();
            let start_views = state.view_losses.clone();

            let sub_set;
            let obj = match cfg.subsample {
                Some(k) if k < pairs.len() => {
                    let mut idx = sample(&mut rng, pairs.len(), k).into_vec();
                    idx.sort_unstable();
                    sub_set = pairs.subset(&idx)?;
                    state.view_losses = Objective {
                        pairs: &sub_set,
                        projector,
                        dims,
                    }
                    .view_losses(&state.params, &views)?;
                    Objective {
                        pairs: &sub_set,
                        projector,
                        dims,
                    }
                }
                _ => Objective {
                    pairs,
                    projector,
                    dims,
                },
            };

            for block in &cfg.block_order {
                match block {
                    Block::SFwd if cfg.sfwd_closed_form => state.sfwd_closed_form(&obj)?,
                    Block::SFwd => state.sfwd_gradient(&obj)?,
                    Block::DSource => state.dsource(&obj)?,
                    Block::Angles => state.angles(&obj)?,
                };
            }

            let mut rejected = false;
            if cfg.subsample.is_some_and(|k| k < pairs.len()) {
                let full_views = full.view_losses(&state.params, &views)?;
                if total(&full_views) <= start {
                    state.view_losses = full_views;
                } else {
                    state.params = start_params;
                    state.view_losses = start_views;
                    rejected = true;
                }
            }

            let loss = state.loss();
            if !loss.is_finite() {
                status = CalibStatus::Diverged;
                break;
            }
            history.push((it, loss));
            // A rejected subsample step says nothing about convergence.
            if !rejected && (loss == 0.0 || (start - loss) / start < cfg.tol) {
                status = CalibStatus::Converged;
                break;
            }
        }
    }

    let params = state.params;
    let fbp_template = FbpConfig {
        s_fbp: 1.0,
        filter: cfg.fbp_filter,
        padding: dims.n_detector,
    };
    let s_fbp = fit_fbp_scale_with(pairs, &params, cfg.fbp_filter, dims.n_detector)?;
    let bias = estimate_bias_with(&projector, pairs, &params)?;
    Ok(CalibReport {
        params,
        dims,
        s_fbp,
        fbp: fbp_template.with_scale(s_fbp),
        bias,
        loss_history: history,
        converged: status == CalibStatus::Converged,
        status,
    })
}

/// Least-squares `s_fbp` for the Hamming filter with default padding.
pub fn fit_fbp_scale(pairs: &CalibrationSet, params: &CalibParams) -> Result<f64> {
    let dims = pairs.dims();
    fit_fbp_scale_with(pairs, params, RampFilter::HammingRamp, dims.n_detector)
}

/// `Σ⟨xᵢ, FBP₁(yᵢ)⟩ / Σ‖FBP₁(yᵢ)‖²`, the minimizer of
/// `Σ‖xᵢ − s·FBP₁(yᵢ)‖²` over `s`.
pub fn fit_fbp_scale_with(
    pairs: &CalibrationSet,
    params: &CalibParams,
    filter: RampFilter,
    padding: usize,
) -> Result<f64> {
    let dims = pairs.dims();
    let geom = geometry_from_reduced(params, dims.n_detector, dims.n_angle, dims.image_size)?;
    let terms: Vec<Result<(f64, f64)>> = pairs
        .pairs()
        .par_iter()
        .map(|(y, x)| {
            let rec = fbp_unscaled(y, &geom, filter, padding)?;
            Ok((x.dot(&rec), rec.norm_sq()))
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for t in terms {
        let (a, b) = t?;
        num += a;
        den += b;
    }
    if den == 0.0 || !den.is_finite() {
        return Err(Error::Degenerate(
            "unit-scale FBP of every sinogram is zero".into(),
        ));
    }
    Ok(num / den)
}

/// Mean model residual `(1/M)·Σᵢ (F[params](xᵢ) − yᵢ)` with the default
/// projector.
pub fn estimate_bias(pairs: &CalibrationSet, params: &CalibParams) -> Result<BiasCorrection> {
    estimate_bias_with(&Projector::default(), pairs, params)
}

pub fn estimate_bias_with(
    projector: &Projector,
    pairs: &CalibrationSet,
    params: &CalibParams,
) -> Result<BiasCorrection> {
    let dims = pairs.dims();
    let geom = geometry_from_reduced(params, dims.n_detector, dims.n_angle, dims.image_size)?;
    let residuals: Vec<Result<Sinogram>> = pairs
        .pairs()
        .par_iter()
        .map(|(y, x)| projector.project(x, &geom, params.s_fwd)?.sub(y))
        .collect();
    let mut acc = Sinogram::zeros(dims.n_angle, dims.n_detector);
    for r in residuals {
        *acc.data_mut() += r?.data();
    }
    Ok(BiasCorrection::new(acc.scaled(1.0 / pairs.len() as f64)))
}
