//! Fanbeam CT toolkit: data-driven geometry calibration, ray-driven forward
//! projection, filtered backprojection and an FBP-preconditioned
//! data-consistency iteration, with analytic ellipse phantoms as ground
//! truth.

pub mod array;
pub mod calibration;
pub mod error;
pub mod fbp;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod npy;
pub mod phantom;
pub mod projector;
pub mod reconstruction;

pub use array::{BiasCorrection, Image, Sinogram};
pub use calibration::{
    calibrate, calibration_loss, estimate_bias, fit_fbp_scale, Block, CalibReport, CalibStatus,
    CalibrationSet, CoordinateDescentConfig,
};
pub use error::{Error, Result};
pub use fbp::{fbp_reconstruct, FbpConfig};
pub use filter::{fbp_filter_kernel, RampFilter};
pub use geometry::{
    enumerate_rays, equispaced_angles, geometry_from_reduced, CalibParams, FanbeamGeometry,
    GeometryDims, Ray,
};
pub use phantom::{analytic_sinogram, rasterize, Ellipse, EllipsePhantom};
pub use projector::{
    apply_corrected_forward, forward_project, loss_gradient_params, ParamGradient, Projector,
};
pub use reconstruction::{
    dc_layer, ensemble_average, iterative_reconstruct, rmse, EnhancerKind, Operators, ReconConfig,
};
