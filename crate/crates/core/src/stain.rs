//! Per-slide optimized color deconvolution.
//!
//! A stain model holds three unit OD directions `u, v, w` (hematoxylin,
//! eosin, third stain), their matrix `M = [u, v, w]` and an unmixing matrix
//! `D`. The optimizer adjusts all nine entries of `D` to minimize
//!
//! ```text
//! E(D) = mean_px (d·O)² + λ‖D − D̄‖²_F
//! ```
//!
//! where `d` is the third row of `D` and `D̄ = M̄⁻¹` is the prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{GrayImage, OdImage, OD_MAX};
use crate::mat3::{self, Mat3, Vec3};
use crate::numerics::{bfgs_minimize, finite_diff_grad, relative_error, BfgsReport, NumericsError};

/// Prior identifier for the hematoxylin / eosin / DAB vectors.
pub const HDAB_PRIOR_ID: &str = "hdab-deconvolution-v1";
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Default cap on the number of OD samples used to fit `D`.
pub const DEFAULT_FIT_SAMPLES: usize = 1 << 20;

const HEMATOXYLIN: Vec3 = [0.650, 0.704, 0.286];
const EOSIN: Vec3 = [0.072, 0.990, 0.105];
const DAB: Vec3 = [0.268, 0.570, 0.776];

const REDUCTION_CHUNK: usize = 1 << 14;

#[derive(Debug, thiserror::Error)]
pub enum StainError {
    #[error("empty optical density input")]
    EmptyInput,
    #[error("stain vectors are linearly dependent")]
    SingularStainMatrix,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainModel {
    pub u: Vec3,
    pub v: Vec3,
    pub w: Vec3,
    /// Columns are `u, v, w`.
    pub m: Mat3,
    /// Current unmixing matrix.
    pub d: Mat3,
    pub d_bar: Mat3,
    pub lambda: f64,
    pub prior_id: String,
}

impl StainModel {
    /// Builds a model from three OD directions; each is normalized and the
    /// prior becomes the exact inverse of `[u, v, w]`.
    pub fn from_vectors(
        u: Vec3,
        v: Vec3,
        w: Vec3,
        lambda: f64,
        prior_id: impl Into<String>,
    ) -> Result<Self, StainError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(StainError::InvalidArgument(format!("lambda must be ≥ 0, got {lambda}")));
        }
        let (u, v, w) = (mat3::normalize(u), mat3::normalize(v), mat3::normalize(w));
        let m = mat3::from_columns(&u, &v, &w);
        let d_bar = mat3::inverse(&m).ok_or(StainError::SingularStainMatrix)?;
        Ok(Self { u, v, w, m, d: d_bar, d_bar, lambda, prior_id: prior_id.into() })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_d(mut self, d: Mat3) -> Self {
        self.d = d;
        self
    }

    /// Persistable record of the current `D`.
    pub fn record(&self) -> StainRecord {
        StainRecord {
            matrix: mat3::to_row_major(&self.d).to_vec(),
            lambda: self.lambda,
            prior_id: self.prior_id.clone(),
        }
    }
}

/// `D` (row-major), `λ` and the prior it was fitted against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainRecord {
    pub matrix: Vec<f64>,
    pub lambda: f64,
    pub prior_id: String,
}

impl StainRecord {
    pub fn d(&self) -> Result<Mat3, StainError> {
        if self.matrix.len() != 9 || self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(StainError::InvalidArgument("stain record needs 9 finite entries".into()));
        }
        Ok(mat3::from_row_major(&self.matrix))
    }
}

/// The hematoxylin / eosin / DAB prior from the color-deconvolution
/// literature, with `λ = 1`.
pub fn default_stain_model() -> StainModel {
    StainModel::from_vectors(HEMATOXYLIN, EOSIN, DAB, DEFAULT_LAMBDA, HDAB_PRIOR_ID)
        .expect("prior vectors are independent")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub total: f64,
    pub data_term: f64,
    pub reg_term: f64,
    /// `∂E/∂D`, row-major.
    pub gradient: [f64; 9],
}

/// Pixel mean of `(d·O)²` and of `O (d·O)`, reduced in fixed-size chunks
/// whose partial sums are combined in order.
fn data_moments(d3: &Vec3, od: &[[f64; 3]]) -> (f64, Vec3) {
    let partials: Vec<(f64, Vec3)> = od
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut sq = 0.0;
            let mut g = [0.0; 3];
            for o in chunk {
                let s = mat3::dot(d3, o);
                sq += s * s;
                g[0] += o[0] * s;
                g[1] += o[1] * s;
                g[2] += o[2] * s;
            }
            (sq, g)
        })
        .collect();
    let n = od.len() as f64;
    let (mut sq, mut g) = (0.0, [0.0; 3]);
    for (s, p) in partials {
        sq += s;
        for k in 0..3 {
            g[k] += p[k];
        }
    }
    (sq / n, [g[0] / n, g[1] / n, g[2] / n])
}

/// Energy and analytic gradient of `D` on a set of OD pixels.
pub fn energy(d: &Mat3, od: &OdImage, model: &StainModel) -> Result<EnergyReport, StainError> {
    energy_on(d, &od.values, model)
}

fn energy_on(d: &Mat3, od: &[[f64; 3]], model: &StainModel) -> Result<EnergyReport, StainError> {
    if od.is_empty() {
        return Err(StainError::EmptyInput);
    }
    if !(model.lambda >= 0.0) {
        return Err(StainError::InvalidArgument("lambda must be ≥ 0".into()));
    }
    let (data_term, mean_os) = data_moments(&d[2], od);
    let mut reg = 0.0;
    let mut gradient = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let diff = d[i][j] - model.d_bar[i][j];
            reg += diff * diff;
            gradient[i * 3 + j] = 2.0 * model.lambda * diff;
        }
    }
    for j in 0..3 {
        gradient[6 + j] += 2.0 * mean_os[j];
    }
    let reg_term = model.lambda * reg;
    Ok(EnergyReport { total: data_term + reg_term, data_term, reg_term, gradient })
}

/// Mean second-moment matrix `G = mean O·Oᵀ`.
pub fn second_moment(od: &OdImage) -> Mat3 {
    let mut g = [[0.0; 3]; 3];
    for o in &od.values {
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += o[i] * o[j];
            }
        }
    }
    let n = od.values.len().max(1) as f64;
    g.iter_mut().flatten().for_each(|v| *v /= n);
    g
}

/// Minimizer of the third row: solves `(G + λI) d = λ d̄₃`.
pub fn ridge_row3_closed_form(od: &OdImage, model: &StainModel) -> Result<Vec3, StainError> {
    if !(model.lambda > 0.0) {
        return Err(StainError::InvalidArgument("closed form needs lambda > 0".into()));
    }
    let mut a = second_moment(od);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += model.lambda;
    }
    let rhs = model.d_bar[2].map(|v| model.lambda * v);
    mat3::solve(&a, &rhs).ok_or(StainError::SingularStainMatrix)
}

/// Optimized model together with the optimizer trace.
#[derive(Debug, Clone)]
pub struct StainFit {
    pub model: StainModel,
    pub report: BfgsReport,
}

/// Runs BFGS over the nine entries of `D`, starting from `D̄`.
pub fn optimize_stain_matrix(
    od: &OdImage,
    model: &StainModel,
    grad_tol: f64,
) -> Result<StainFit, StainError> {
    if !(model.lambda > 0.0) {
        return Err(StainError::InvalidArgument("optimization needs lambda > 0".into()));
    }
    if od.is_empty() {
        return Err(StainError::EmptyInput);
    }
    let x0 = mat3::to_row_major(&model.d_bar);
    let report = bfgs_minimize(
        |x| match energy_on(&mat3::from_row_major(x), &od.values, model) {
            Ok(e) => (e.total, e.gradient.to_vec()),
            Err(_) => (f64::NAN, vec![f64::NAN; 9]),
        },
        &x0,
        grad_tol,
        500,
    )?;
    let d = mat3::from_row_major(&report.x_star);
    Ok(StainFit { model: model.clone().with_d(d), report })
}

/// Per-stain density planes `S = D·O`.
#[derive(Debug, Clone, PartialEq)]
pub struct StainDensityImage {
    pub width: u32,
    pub height: u32,
    pub planes: [Vec<f64>; 3],
}

pub fn apply_decomposition(od: &OdImage, d: &Mat3) -> StainDensityImage {
    let n = od.values.len();
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, o) in od.values.iter().enumerate() {
        let s = mat3::mul_vec(d, o);
        for k in 0..3 {
            planes[k][i] = s[k];
        }
    }
    StainDensityImage { width: od.width, height: od.height, planes }
}

/// Maps one hematoxylin density to 8 bits: clamp to `[0, ln 256]`, scale to
/// `[0, 255]`.
#[inline]
pub fn hematoxylin_to_u8(s: f64) -> u8 {
    let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, OD_MAX) };
    (s / OD_MAX * 255.0).round() as u8
}

pub fn hematoxylin_plane_to_image(s: &StainDensityImage) -> GrayImage {
    GrayImage {
        width: s.width,
        height: s.height,
        data: s.planes[0].iter().map(|&v| hematoxylin_to_u8(v)).collect(),
    }
}

/// Central-difference step for the energy. `E` is quadratic in `D`, so the
/// difference carries no truncation error and a wide step only reduces
/// cancellation when `λ‖D − D̄‖²` is large.
pub const ENERGY_FD_STEP: f64 = 1e-3;

/// Largest relative disagreement between the analytic energy gradient and
/// central differences over `cases` random `(D, λ, tile)` draws.
pub fn energy_gradient_check(cases: usize, seed: u64) -> Result<f64, StainError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let lambda = 10f64.powf(rng.gen_range(-3.0..3.0));
        let m = default_stain_model().with_lambda(lambda);
        let d = [[0.0; 3]; 3].map(|r| r.map(|_: f64| rng.gen_range(-2.0..2.0)));
        let values = (0..20).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..3.0))).collect();
        let od = OdImage::from_values(20, 1, values);
        let e = energy(&d, &od, &m)?;
        let num = finite_diff_grad(
            |x| energy(&mat3::from_row_major(x), &od, &m).map_or(f64::NAN, |e| e.total),
            &mat3::to_row_major(&d),
            ENERGY_FD_STEP,
        );
        for (a, n) in e.gradient.iter().zip(&num) {
            worst = worst.max(relative_error(*a, *n, 1e-7));
        }
    }
    Ok(worst)
}
