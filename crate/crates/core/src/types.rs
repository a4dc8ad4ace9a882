//! Domain types shared by the learner, the mechanism and the protocol.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Class identifier.
pub type Label = u32;

/// One labeled, bias-augmented feature vector `[1, x_1, ..., x_p]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: Label,
}

impl DataPoint {
    /// Builds a point from raw embedding values, prepending the bias slot.
    pub fn from_raw(values: &[f64], label: Label) -> Self {
        let mut features = Vec::with_capacity(values.len() + 1);
        features.push(1.0);
        features.extend_from_slice(values);
        DataPoint { features, label }
    }
}

/// An ordered collection of points over a fixed dimension and class set.
///
/// `classes` is sorted and deduplicated; it is the canonical row order of
/// every [`ModelStack`] trained on the dataset. Local datasets keep the
/// global class set even if some classes are absent locally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<DataPoint>,
    dim: usize,
    classes: Vec<Label>,
}

impl Dataset {
    /// Validates shape and labels. `classes` may be given in any order.
    pub fn new(points: Vec<DataPoint>, mut classes: Vec<Label>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        classes.sort_unstable();
        classes.dedup();
        let cols = points[0].features.len();
        if cols < 2 {
            return Err(Error::param("points need at least one feature besides the bias slot"));
        }
        for (i, point) in points.iter().enumerate() {
            if point.features.len() != cols {
                return Err(Error::param(format!(
                    "point {i} has {} coordinates, expected {cols}",
                    point.features.len()
                )));
            }
            if classes.binary_search(&point.label).is_err() {
                return Err(Error::param(format!(
                    "point {i} has label {} outside the class set",
                    point.label
                )));
            }
        }
        Ok(Dataset {
            points,
            dim: cols - 1,
            classes,
        })
    }

    /// Infers the class set from the labels present.
    pub fn from_points(points: Vec<DataPoint>) -> Result<Self> {
        let classes = points.iter().map(|p| p.label).collect();
        Self::new(points, classes)
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<DataPoint> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Embedding dimension `p` (excluding the bias slot).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Model width `p + 1`.
    pub fn cols(&self) -> usize {
        self.dim + 1
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    /// Selects points by index, keeping this dataset's class set.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let points = indices.iter().map(|&i| self.points[i].clone()).collect();
        Dataset::new(points, self.classes.clone())
    }

    /// Copy with point `index` replaced; used to build neighboring datasets.
    pub fn with_replaced(&self, index: usize, point: DataPoint) -> Result<Dataset> {
        let mut points = self.points.clone();
        points[index] = point;
        Dataset::new(points, self.classes.clone())
    }

    /// Concatenates datasets that share dimension and class set.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let points = parts.iter().flat_map(|d| d.points.iter().cloned()).collect();
        Dataset::new(points, first.classes.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    HuberHinge,
    Logistic,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "huber_hinge" | "huber" => Ok(LossKind::HuberHinge),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::param(format!("unknown loss {other:?}"))),
        }
    }
}

/// Training hyperparameters `(h, c, Λ, R, M)` plus batch size and loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Huber smoothness.
    pub h: f64,
    /// Input clipping bound.
    pub c: f64,
    /// L2 regularization strength.
    pub lambda: f64,
    /// Model clipping radius.
    pub radius: f64,
    /// Number of SGD steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub loss: LossKind,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            h: 0.1,
            c: 1.0,
            lambda: 10.0,
            radius: 0.07,
            iterations: 1500,
            batch_size: 20,
            loss: LossKind::HuberHinge,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("h", self.h),
            ("c", self.c),
            ("lambda", self.lambda),
            ("radius", self.radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be >= 1"));
        }
        Ok(())
    }

    /// Validates against a local dataset of `n` points.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > n {
            return Err(Error::param(format!(
                "batch size {} exceeds local dataset size {n}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Lipschitz constant `c + RΛ` of the per-sample objective.
    pub fn lipschitz(&self) -> f64 {
        self.c + self.radius * self.lambda
    }

    /// Smoothness used by the learning-rate schedule.
    pub fn smoothness(&self) -> f64 {
        match self.loss {
            LossKind::HuberHinge => self.c * self.c / (2.0 * self.h) + self.lambda,
            LossKind::Logistic => self.c * self.c / 4.0 + self.lambda,
        }
    }

    /// Number of SGD steps that make up `epochs` passes over `n` points.
    pub fn steps_for_epochs(epochs: usize, n: usize, batch_size: usize) -> usize {
        epochs * n.div_ceil(batch_size)
    }
}

/// `|K|` one-vs-rest hyperplanes of width `p + 1`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStack {
    classes: Vec<Label>,
    cols: usize,
    weights: Vec<f64>,
}

impl ModelStack {
    pub fn zeros(classes: &[Label], cols: usize) -> Self {
        ModelStack {
            classes: classes.to_vec(),
            cols,
            weights: vec![0.0; classes.len() * cols],
        }
    }

    pub fn from_flat(classes: Vec<Label>, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if classes.is_empty() || cols == 0 {
            return Err(Error::param("model needs at least one class and one column"));
        }
        if weights.len() != classes.len() * cols {
            return Err(Error::param(format!(
                "expected {} weights for {} classes x {cols} columns, got {}",
                classes.len() * cols,
                classes.len(),
                weights.len()
            )));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("class list must be strictly increasing"));
        }
        Ok(ModelStack {
            classes,
            cols,
            weights,
        })
    }

    pub fn from_rows(classes: Vec<Label>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::param("rows have unequal widths"));
        }
        Self::from_flat(classes, cols, rows.concat())
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.weights[index * self.cols..(index + 1) * self.cols]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.weights[index * self.cols..(index + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks_exact(self.cols)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.rows().map(norm).collect()
    }

    /// Per-row Euclidean distance to `other`.
    pub fn row_distances(&self, other: &ModelStack) -> Result<Vec<f64>> {
        self.check_same_shape(other)?;
        Ok(self
            .rows()
            .zip(other.rows())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .collect())
    }

    pub fn check_same_shape(&self, other: &ModelStack) -> Result<()> {
        if self.classes != other.classes || self.cols != other.cols {
            return Err(Error::param("model stacks have different shapes or class sets"));
        }
        Ok(())
    }

    /// Entry-wise mean of equally shaped models.
    pub fn average(models: &[ModelStack]) -> Result<ModelStack> {
        let first = models.first().ok_or_else(|| Error::param("cannot average zero models"))?;
        let mut acc = ModelStack::zeros(&first.classes, first.cols);
        for m in models {
            acc.check_same_shape(m)?;
            for (a, w) in acc.weights.iter_mut().zip(&m.weights) {
                *a += w;
            }
        }
        let n = models.len() as f64;
        acc.weights.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Noise multiplier and DP parameters of one release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Noise multiplier σ. Zero disables noise (ε = ∞), for debugging only.
    pub sigma: f64,
    pub delta: f64,
    /// Assumed lower bound `t` on the fraction of honest users.
    pub honest_fraction: f64,
    /// Group size Υ.
    pub group_size: usize,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        PrivacySpec {
            sigma: 8.0,
            delta: 1e-5,
            honest_fraction: 0.5,
            group_size: 1,
        }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.honest_fraction > 0.0 && self.honest_fraction <= 1.0) {
            return Err(Error::param(format!(
                "honest fraction must lie in (0,1], got {}",
                self.honest_fraction
            )));
        }
        if self.group_size == 0 {
            return Err(Error::param("group size must be >= 1"));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
