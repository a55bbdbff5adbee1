//! Black-box classifiers, softmax machinery, and the built-in synthetic
//! models used by tests and the command-line harness.
//!
//! Consumers of a classifier may only call [`Classifier::eval`]. The
//! [`OracleClassifier`] extension exposes an analytic Jacobian and exists so
//! that derivative-free estimates can be checked against ground truth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::enkf::direction_weight;
use crate::error::{check_dim, check_finite, Error, Result};

/// Raw classifier scores `f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(DVector<f64>);

impl Logits {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logits must have at least one class".into()));
        }
        check_finite("logits", values.as_slice())?;
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn softmax(&self) -> ProbVector {
        let max = self.0.max();
        let exps = self.0.map(|l| (l - max).exp());
        let total = exps.sum();
        ProbVector(exps / total)
    }
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(DVector<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("probability vector is empty".into()));
        }
        check_finite("probabilities", values.as_slice())?;
        if let Some(i) = values.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidInput(format!(
                "probability at index {i} is {} (outside [0, 1])",
                values[i]
            )));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: ClassIndex) -> f64 {
        self.0[c.0]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> ClassIndex {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        ClassIndex(best)
    }

    /// Element-wise mean of several probability vectors.
    pub fn mean<'a>(probs: impl IntoIterator<Item = &'a ProbVector>) -> Result<ProbVector> {
        let mut iter = probs.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::InvalidInput("cannot average zero probability vectors".into()))?;
        let mut acc = first.0.clone();
        let mut count = 1usize;
        for p in iter {
            check_dim("probability mean", acc.len(), p.len())?;
            acc += &p.0;
            count += 1;
        }
        acc /= count as f64;
        // Renormalize away accumulated rounding.
        let sum = acc.sum();
        Ok(ProbVector(acc / sum))
    }
}

/// Shift-stabilized softmax of raw scores.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    Ok(Logits::from_slice(logits)?.softmax())
}

/// A class label in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassIndex(pub usize);

impl ClassIndex {
    pub fn checked(c: usize, n_classes: usize) -> Result<Self> {
        if c < n_classes {
            Ok(Self(c))
        } else {
            Err(Error::InvalidInput(format!(
                "class index {c} out of range for {n_classes} classes"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for ClassIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Evaluation-only forward model `f: R^d -> R^n`.
///
/// Implementations must be deterministic and free of interior mutation, so
/// that particles can be scored concurrently.
pub trait Classifier: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<Logits>;
}

/// Test-only extension exposing the analytic Jacobian `df/dx` (n x d).
pub trait OracleClassifier: Classifier {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `argmax softmax(f(x))`, lowest index on ties.
pub fn predict(model: &dyn Classifier, x: &DVector<f64>) -> Result<ClassIndex> {
    Ok(model.eval(x)?.softmax().argmax())
}

/// `J^T (e_c - p)`, the exact gradient of `log softmax(f(x))_c` when `J` is
/// the Jacobian of the logits.
pub fn oracle_log_prob_gradient(
    jacobian: &DMatrix<f64>,
    p: &ProbVector,
    c: ClassIndex,
) -> Result<DVector<f64>> {
    check_dim("jacobian rows vs probabilities", jacobian.nrows(), p.len())?;
    let w = direction_weight(c, p)?;
    Ok(jacobian.tr_mul(w.values()))
}

/// Central-difference Jacobian of the logits using only black-box calls.
pub fn finite_difference_jacobian(
    model: &dyn Classifier,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    check_dim("finite-difference input", model.dim_in(), x.len())?;
    let mut jac = DMatrix::zeros(model.dim_out(), model.dim_in());
    let mut probe = x.clone();
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let plus = model.eval(&probe)?.into_inner();
        probe[j] = x[j] - step;
        let minus = model.eval(&probe)?.into_inner();
        probe[j] = x[j];
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}

/// `f(x) = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl LinearSoftmax {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        check_dim("linear bias", weights.nrows(), bias.len())?;
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidParameter("linear model needs n, d >= 1".into()));
        }
        check_finite("linear weights", weights.as_slice())?;
        check_finite("linear bias", bias.as_slice())?;
        Ok(Self { weights, bias })
    }

    /// The all-zero model: every class always has logit zero.
    pub fn constant(n_classes: usize, dim: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n_classes, dim),
            bias: DVector::zeros(n_classes),
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }
}

impl Classifier for LinearSoftmax {
    fn dim_in(&self) -> usize {
        self.weights.ncols()
    }

    fn dim_out(&self) -> usize {
        self.weights.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<Logits> {
        check_dim("linear classifier input", self.dim_in(), x.len())?;
        Logits::new(&self.weights * x + &self.bias)
    }
}

impl OracleClassifier for LinearSoftmax {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("linear classifier input", self.dim_in(), x.len())?;
        Ok(self.weights.clone())
    }
}

/// Radial scores `f_c(x) = -||x - mu_c||^2 / h^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSoftmax {
    /// One center per row.
    centers: DMatrix<f64>,
    bandwidth: f64,
}

impl RbfSoftmax {
    pub fn new(centers: DMatrix<f64>, bandwidth: f64) -> Result<Self> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(Error::InvalidParameter("rbf model needs n, d >= 1".into()));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rbf bandwidth must be positive, got {bandwidth}"
            )));
        }
        check_finite("rbf centers", centers.as_slice())?;
        Ok(Self { centers, bandwidth })
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

impl Classifier for RbfSoftmax {
    fn dim_in(&self) -> usize {
        self.centers.ncols()
    }

    fn dim_out(&self) -> usize {
        self.centers.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<Logits> {
        check_dim("rbf classifier input", self.dim_in(), x.len())?;
        let h2 = self.bandwidth * self.bandwidth;
        let scores = DVector::from_fn(self.dim_out(), |c, _| {
            let d2: f64 = self
                .centers
                .row(c)
                .iter()
                .zip(x.iter())
                .map(|(m, v)| (v - m) * (v - m))
                .sum();
            -d2 / h2
        });
        Logits::new(scores)
    }
}

impl OracleClassifier for RbfSoftmax {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("rbf classifier input", self.dim_in(), x.len())?;
        let scale = -2.0 / (self.bandwidth * self.bandwidth);
        Ok(DMatrix::from_fn(self.dim_out(), self.dim_in(), |c, j| {
            scale * (x[j] - self.centers[(c, j)])
        }))
    }
}

/// A scalar field `R^d -> R` with known gradient.
pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `f(x) = c + a^T x + x^T Q x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticField {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticField {
    pub fn new(constant: f64, linear: DVector<f64>, quadratic: DMatrix<f64>) -> Result<Self> {
        let d = linear.len();
        if d == 0 {
            return Err(Error::InvalidParameter("quadratic field needs d >= 1".into()));
        }
        check_dim("quadratic rows", d, quadratic.nrows())?;
        check_dim("quadratic cols", d, quadratic.ncols())?;
        check_finite("quadratic field", linear.as_slice())?;
        check_finite("quadratic field", quadratic.as_slice())?;
        Ok(Self {
            constant,
            linear,
            quadratic,
        })
    }

    /// The 2-D toy field `f(x, y) = -x + y^2`.
    pub fn toy() -> Self {
        Self {
            constant: 0.0,
            linear: DVector::from_column_slice(&[-1.0, 0.0]),
            quadratic: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        }
    }
}

impl ScalarField for QuadraticField {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.linear.dot(x) + x.dot(&(&self.quadratic * x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.linear + (&self.quadratic + self.quadratic.transpose()) * x
    }
}

/// Lifts a scalar field to the 2-class logits `[f(x), 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarToyWrapper<F> {
    field: F,
}

impl<F: ScalarField> ScalarToyWrapper<F> {
    pub fn new(field: F) -> Self {
        Self { field }
    }

    pub fn field(&self) -> &F {
        &self.field
    }
}

impl<F: ScalarField> Classifier for ScalarToyWrapper<F> {
    fn dim_in(&self) -> usize {
        self.field.dim()
    }

    fn dim_out(&self) -> usize {
        2
    }

    fn eval(&self, x: &DVector<f64>) -> Result<Logits> {
        check_dim("scalar toy input", self.dim_in(), x.len())?;
        Logits::from_slice(&[self.field.value(x), 0.0])
    }
}

impl<F: ScalarField> OracleClassifier for ScalarToyWrapper<F> {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("scalar toy input", self.dim_in(), x.len())?;
        let mut jac = DMatrix::zeros(2, self.dim_in());
        jac.set_row(0, &self.field.gradient(x).transpose());
        Ok(jac)
    }
}

/// Any of the built-in models, as loaded from a parameter file.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinClassifier {
    Linear(LinearSoftmax),
    Rbf(RbfSoftmax),
    Quadratic(ScalarToyWrapper<QuadraticField>),
}

impl Classifier for BuiltinClassifier {
    fn dim_in(&self) -> usize {
        match self {
            Self::Linear(m) => m.dim_in(),
            Self::Rbf(m) => m.dim_in(),
            Self::Quadratic(m) => m.dim_in(),
        }
    }

    fn dim_out(&self) -> usize {
        match self {
            Self::Linear(m) => m.dim_out(),
            Self::Rbf(m) => m.dim_out(),
            Self::Quadratic(m) => m.dim_out(),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> Result<Logits> {
        match self {
            Self::Linear(m) => m.eval(x),
            Self::Rbf(m) => m.eval(x),
            Self::Quadratic(m) => m.eval(x),
        }
    }
}

impl OracleClassifier for BuiltinClassifier {
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::Linear(m) => m.jacobian(x),
            Self::Rbf(m) => m.jacobian(x),
            Self::Quadratic(m) => m.jacobian(x),
        }
    }
}

/// On-disk classifier description. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierFile {
    LinearSoftmax {
        dim_in: usize,
        dim_out: usize,
        /// `dim_out x dim_in`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    RbfSoftmax {
        dim_in: usize,
        dim_out: usize,
        /// `dim_out x dim_in`, one center per row.
        centers: Vec<f64>,
        bandwidth: f64,
    },
    /// Scalar field `constant + linear^T x + x^T quadratic x` lifted to
    /// logits `[f(x), 0]`; `dim_out` must be 2.
    ScalarQuadratic {
        dim_in: usize,
        dim_out: usize,
        #[serde(default)]
        constant: f64,
        linear: Vec<f64>,
        /// `dim_in x dim_in`.
        quadratic: Vec<f64>,
    },
}

fn matrix_from(name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "`{name}` has {} entries, expected {rows} x {cols} = {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn vector_from(name: &str, len: usize, data: &[f64]) -> Result<DVector<f64>> {
    if data.len() != len {
        return Err(Error::Format(format!(
            "`{name}` has {} entries, expected {len}",
            data.len()
        )));
    }
    Ok(DVector::from_column_slice(data))
}

impl ClassifierFile {
    pub fn build(&self) -> Result<BuiltinClassifier> {
        match self {
            Self::LinearSoftmax {
                dim_in,
                dim_out,
                weights,
                bias,
            } => Ok(BuiltinClassifier::Linear(LinearSoftmax::new(
                matrix_from("weights", *dim_out, *dim_in, weights)?,
                vector_from("bias", *dim_out, bias)?,
            )?)),
            Self::RbfSoftmax {
                dim_in,
                dim_out,
                centers,
                bandwidth,
            } => Ok(BuiltinClassifier::Rbf(RbfSoftmax::new(
                matrix_from("centers", *dim_out, *dim_in, centers)?,
                *bandwidth,
            )?)),
            Self::ScalarQuadratic {
                dim_in,
                dim_out,
                constant,
                linear,
                quadratic,
            } => {
                if *dim_out != 2 {
                    return Err(Error::Format(format!(
                        "scalar_quadratic lifts to 2 classes, `dim_out` is {dim_out}"
                    )));
                }
                let field = QuadraticField::new(
                    *constant,
                    vector_from("linear", *dim_in, linear)?,
                    matrix_from("quadratic", *dim_in, *dim_in, quadratic)?,
                )?;
                Ok(BuiltinClassifier::Quadratic(ScalarToyWrapper::new(field)))
            }
        }
    }

    pub fn from_json(text: &str) -> Result<BuiltinClassifier> {
        let file: ClassifierFile =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.build()
    }
}

impl From<&LinearSoftmax> for ClassifierFile {
    fn from(m: &LinearSoftmax) -> Self {
        Self::LinearSoftmax {
            dim_in: m.dim_in(),
            dim_out: m.dim_out(),
            weights: m.weights.transpose().as_slice().to_vec(),
            bias: m.bias.as_slice().to_vec(),
        }
    }
}

impl From<&RbfSoftmax> for ClassifierFile {
    fn from(m: &RbfSoftmax) -> Self {
        Self::RbfSoftmax {
            dim_in: m.dim_in(),
            dim_out: m.dim_out(),
            centers: m.centers.transpose().as_slice().to_vec(),
            bandwidth: m.bandwidth,
        }
    }
}
