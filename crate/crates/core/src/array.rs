//! Dense image and sinogram containers.
//!
//! Images are square `n_pix × n_pix` arrays indexed `[row, col]`, row 0 at
//! the top. Pixel `(r, c)` has its center at world coordinates
//! `(c − (n_pix−1)/2, (n_pix−1)/2 − r)` in pixel units; every operator in
//! this crate uses that convention.
//!
//! Sinograms are `n_angle × n_detector` arrays indexed `[view, element]`.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

fn check_finite(data: &Array2<f64>, stage: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    pub fn zeros(n_pix: usize) -> Self {
        Self {
            data: Array2::zeros((n_pix, n_pix)),
        }
    }

    /// Wraps a square array of finite values.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c || r == 0 {
            return Err(Error::shape("image", &[r, r], &[r, c]));
        }
        check_finite(&data, "image")?;
        Ok(Self { data })
    }

    pub fn from_fn(n_pix: usize, f: impl FnMut((usize, usize)) -> f64) -> Self {
        Self {
            data: Array2::from_shape_fn((n_pix, n_pix), f),
        }
    }

    pub fn n_pix(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// World coordinates of the center of pixel `(row, col)`.
    #[inline]
    pub fn pixel_center(n_pix: usize, row: usize, col: usize) -> [f64; 2] {
        let half = (n_pix as f64 - 1.0) / 2.0;
        [col as f64 - half, half - row as f64]
    }

    pub fn dot(&self, other: &Image) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn scaled(&self, factor: f64) -> Image {
        Image {
            data: &self.data * factor,
        }
    }

    pub fn ensure_finite(&self, stage: &str) -> Result<()> {
        check_finite(&self.data, stage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    data: Array2<f64>,
}

impl Sinogram {
    pub fn zeros(n_angle: usize, n_detector: usize) -> Self {
        Self {
            data: Array2::zeros((n_angle, n_detector)),
        }
    }

    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (a, d) = data.dim();
        if a == 0 || d == 0 {
            return Err(Error::shape("sinogram", &[1, 1], &[a, d]));
        }
        check_finite(&data, "sinogram")?;
        Ok(Self { data })
    }

    pub(crate) fn from_rows(rows: Vec<Vec<f64>>, n_detector: usize) -> Self {
        let n_angle = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self {
            data: Array2::from_shape_vec((n_angle, n_detector), flat)
                .expect("row lengths match detector count"),
        }
    }

    /// `(n_angle, n_detector)`
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn n_angle(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_detector(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn scaled(&self, factor: f64) -> Sinogram {
        Sinogram {
            data: &self.data * factor,
        }
    }

    /// `self − other`, shapes must agree.
    pub fn sub(&self, other: &Sinogram) -> Result<Sinogram> {
        if self.dim() != other.dim() {
            let (a, b) = self.dim();
            let (c, d) = other.dim();
            return Err(Error::shape("sinogram difference", &[a, b], &[c, d]));
        }
        Ok(Sinogram {
            data: &self.data - &other.data,
        })
    }

    pub fn ensure_finite(&self, stage: &str) -> Result<()> {
        check_finite(&self.data, stage)
    }
}

/// Additive sinogram-domain correction `b`; the corrected forward model is
/// `F(x) − b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorrection {
    bias: Sinogram,
}

impl BiasCorrection {
    pub fn zeros(n_angle: usize, n_detector: usize) -> Self {
        Self {
            bias: Sinogram::zeros(n_angle, n_detector),
        }
    }

    pub fn new(bias: Sinogram) -> Self {
        Self { bias }
    }

    pub fn as_sinogram(&self) -> &Sinogram {
        &self.bias
    }

    pub fn into_sinogram(self) -> Sinogram {
        self.bias
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bias.dim()
    }
}

/// Fixed-order dot product; summation order is row-major.
pub(crate) fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(a).and(b).for_each(|x, y| acc += x * y);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pixel_centers_follow_row_top_convention() {
        assert_eq!(Image::pixel_center(4, 0, 0), [-1.5, 1.5]);
        assert_eq!(Image::pixel_center(4, 3, 3), [1.5, -1.5]);
        assert_eq!(Image::pixel_center(3, 1, 1), [0.0, 0.0]);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(Image::new(Array2::zeros((2, 3))).is_err());
        let err = Image::new(array![[0.0, f64::NAN], [0.0, 0.0]]).unwrap_err();
        assert_eq!(err.category(), "non_finite");
        assert!(Sinogram::new(array![[f64::INFINITY]]).is_err());
    }

    #[test]
    fn sinogram_sub_checks_shape() {
        let a = Sinogram::zeros(2, 3);
        let b = Sinogram::zeros(3, 2);
        assert_eq!(a.sub(&b).unwrap_err().category(), "shape_mismatch");
    }
}
