//! Sensitivity-bounded local learner.
//!
//! One-vs-rest linear classifiers trained by projected mini-batch SGD on
//!
//! ```text
//! J(f, D, k) = (Λ/2)·fᵀf + (1/N)·Σ ℓ(fᵀ·clip(x)·y_k)
//! ```
//!
//! with `y_k = ±1`, `ℓ` the Huber-smoothed hinge or the logistic loss, step
//! sizes `min(1/β, 1/(Λm))` and projection onto the radius-`R` ball after
//! every step. The projection and strong convexity bound the change of each
//! row under replacement of one point by `2(c + RΛ)/(NΛ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{clip_dataset, read_matrix, write_matrix};
use crate::rng::{Rng, Seed};
use crate::types::{dot, norm, Dataset, Hyperparams, Label, LossKind, ModelStack};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Huber smoothness; ignored for the logistic loss.
    pub h: f64,
}

impl LossSpec {
    pub fn from_hyperparams(xi: &Hyperparams) -> Self {
        LossSpec { kind: xi.loss, h: xi.h }
    }

    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::HuberHinge => huber_loss(z, self.h),
            LossKind::Logistic => logistic_loss(z),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::HuberHinge => huber_grad(z, self.h),
            LossKind::Logistic => logistic_grad(z),
        }
    }
}

/// Huber-smoothed hinge loss with transition width `2h` around margin 1.
pub fn huber_loss(z: f64, h: f64) -> f64 {
    if z > 1.0 + h {
        0.0
    } else if z < 1.0 - h {
        1.0 - z
    } else {
        (1.0 + h - z).powi(2) / (4.0 * h)
    }
}

pub fn huber_grad(z: f64, h: f64) -> f64 {
    if z > 1.0 + h {
        0.0
    } else if z < 1.0 - h {
        -1.0
    } else {
        -(1.0 + h - z) / (2.0 * h)
    }
}

/// `ln(1 + e^{-z})`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn logistic_grad(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// `+1` for the positive class of the one-vs-rest problem, `-1` otherwise.
pub fn ovr_label(y: Label, k: Label) -> f64 {
    if y == k {
        1.0
    } else {
        -1.0
    }
}

/// Sensitivity bound `2(c + RΛ)/(NΛ)` of one trained row.
pub fn sensitivity(xi: &Hyperparams, n: usize) -> f64 {
    2.0 * (xi.c + xi.radius * xi.lambda) / (n as f64 * xi.lambda)
}

/// Clipped design matrix of a dataset, the form the optimizer works on.
#[derive(Clone, Debug)]
pub struct ClippedData {
    cols: usize,
    xs: Vec<f64>,
    labels: Vec<Label>,
}

impl ClippedData {
    pub fn new(dataset: &Dataset, c: f64) -> Self {
        ClippedData {
            cols: dataset.cols(),
            xs: clip_dataset(dataset, c).concat(),
            labels: dataset.points().iter().map(|p| p.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    /// Objective value at `f` for class `k`.
    pub fn objective(&self, f: &[f64], k: Label, lambda: f64, loss: LossSpec) -> f64 {
        let data_term: f64 = (0..self.len())
            .map(|i| loss.value(dot(f, self.x(i)) * ovr_label(self.label(i), k)))
            .sum();
        0.5 * lambda * dot(f, f) + data_term / self.len() as f64
    }

    /// Gradient of [`ClippedData::objective`].
    pub fn gradient(&self, f: &[f64], k: Label, lambda: f64, loss: LossSpec) -> Vec<f64> {
        let mut g: Vec<f64> = f.iter().map(|v| lambda * v).collect();
        let scale = 1.0 / self.len() as f64;
        for i in 0..self.len() {
            let x = self.x(i);
            let y = ovr_label(self.label(i), k);
            let coef = loss.derivative(dot(f, x) * y) * y * scale;
            if coef != 0.0 {
                g.iter_mut().zip(x).for_each(|(g, x)| *g += coef * x);
            }
        }
        g
    }
}

fn check_width(f: &[f64], dataset: &Dataset) -> Result<()> {
    if f.len() != dataset.cols() {
        return Err(Error::param(format!(
            "model has {} coordinates, data has {}",
            f.len(),
            dataset.cols()
        )));
    }
    Ok(())
}

/// Regularized empirical objective of row `f` for class `k`.
pub fn objective(f: &[f64], dataset: &Dataset, k: Label, xi: &Hyperparams) -> Result<f64> {
    check_width(f, dataset)?;
    let data = ClippedData::new(dataset, xi.c);
    Ok(data.objective(f, k, xi.lambda, LossSpec::from_hyperparams(xi)))
}

pub fn objective_gradient(f: &[f64], dataset: &Dataset, k: Label, xi: &Hyperparams) -> Result<Vec<f64>> {
    check_width(f, dataset)?;
    let data = ClippedData::new(dataset, xi.c);
    Ok(data.gradient(f, k, xi.lambda, LossSpec::from_hyperparams(xi)))
}

/// Projects `f` onto the ball of radius `r`; a no-op inside the ball.
pub fn project_to_ball(f: &mut [f64], r: f64) {
    let n = norm(f);
    if n > r {
        let s = r / n;
        f.iter_mut().for_each(|v| *v *= s);
    }
}

/// Learning rate of step `m` (1-based).
pub fn learning_rate(xi: &Hyperparams, m: usize) -> f64 {
    (1.0 / xi.smoothness()).min(1.0 / (xi.lambda * m as f64))
}

/// Diagnostics of one training call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Per class, the full objective after each step (when recorded).
    pub objective: Option<Vec<Vec<f64>>>,
    pub final_norms: Vec<f64>,
    pub iterations: usize,
    pub beta: f64,
    pub lambda: f64,
}

/// Trains one row per class; see the module docs for the update rule.
pub fn train(dataset: &Dataset, xi: &Hyperparams, rng: &mut Rng) -> Result<ModelStack> {
    train_traced(dataset, xi, rng, false).map(|(m, _)| m)
}

pub fn train_traced(
    dataset: &Dataset,
    xi: &Hyperparams,
    rng: &mut Rng,
    record_objective: bool,
) -> Result<(ModelStack, TrainTrace)> {
    xi.validate_for(dataset.len())?;
    let data = ClippedData::new(dataset, xi.c);
    let seed = rng.next_seed();
    let rows: Vec<(Vec<f64>, Option<Vec<f64>>)> = dataset
        .classes()
        .par_iter()
        .map(|&k| train_class(&data, k, xi, &seed, record_objective))
        .collect();
    let mut model = ModelStack::zeros(dataset.classes(), dataset.cols());
    let mut objective = record_objective.then(Vec::new);
    for (i, (row, trace)) in rows.into_iter().enumerate() {
        model.row_mut(i).copy_from_slice(&row);
        if let (Some(all), Some(t)) = (objective.as_mut(), trace) {
            all.push(t);
        }
    }
    let trace = TrainTrace {
        objective,
        final_norms: model.row_norms(),
        iterations: xi.iterations,
        beta: xi.smoothness(),
        lambda: xi.lambda,
    };
    Ok((model, trace))
}

fn train_class(
    data: &ClippedData,
    k: Label,
    xi: &Hyperparams,
    seed: &Seed,
    record: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    use rand::seq::SliceRandom;

    let loss = LossSpec::from_hyperparams(xi);
    let n = data.len();
    let mut rng = Rng::spawn(seed, format!("sgd/class/{k}").as_bytes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut f = vec![0.0; data.cols()];
    let mut step = vec![0.0; data.cols()];
    let mut trace = record.then(|| Vec::with_capacity(xi.iterations));

    for m in 1..=xi.iterations {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + xi.batch_size).min(n)];
        cursor += batch.len();

        step.iter_mut().for_each(|s| *s = 0.0);
        for &i in batch {
            let x = data.x(i);
            let y = ovr_label(data.label(i), k);
            let coef = loss.derivative(dot(&f, x) * y) * y;
            if coef != 0.0 {
                step.iter_mut().zip(x).for_each(|(s, x)| *s += coef * x);
            }
        }
        let alpha = learning_rate(xi, m);
        let shrink = 1.0 - alpha * xi.lambda;
        let batch_scale = alpha / batch.len() as f64;
        f.iter_mut()
            .zip(&step)
            .for_each(|(f, s)| *f = shrink * *f - batch_scale * s);
        project_to_ball(&mut f, xi.radius);

        if let Some(t) = trace.as_mut() {
            t.push(data.objective(&f, k, xi.lambda, loss));
        }
    }
    (f, trace)
}

/// Class with the largest margin `fᵀx`; ties go to the smallest label.
///
/// `x` must be bias-augmented and clipped with the training bound.
pub fn predict(model: &ModelStack, x: &[f64]) -> Result<Label> {
    if x.len() != model.cols() {
        return Err(Error::param(format!(
            "input has {} coordinates, model has {}",
            x.len(),
            model.cols()
        )));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in model.rows().enumerate() {
        let score = dot(row, x);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(model.classes()[best])
}

/// Top-1 accuracy on `dataset`, clipping inputs with bound `c`.
pub fn accuracy(model: &ModelStack, dataset: &Dataset, c: f64) -> Result<f64> {
    let data = ClippedData::new(dataset, c);
    let mut correct = 0usize;
    for i in 0..data.len() {
        if predict(model, data.x(i))? == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// JSON sidecar stored next to a model matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub hyper: Hyperparams,
    pub classes: Vec<Label>,
    pub seed: u64,
}

/// Path of the sidecar belonging to `model_path` (`<model_path>.json`).
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `model` as a float32 `DPHM` matrix plus its JSON sidecar.
pub fn save_model(model: &ModelStack, hyper: &Hyperparams, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f32> = model.as_flat().iter().map(|&v| v as f32).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, model.num_classes(), model.cols(), &values)?;
    w.flush()?;
    let meta = ModelMeta {
        hyper: hyper.clone(),
        classes: model.classes().to_vec(),
        seed,
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a model written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelStack, ModelMeta)> {
    let path = path.as_ref();
    let (rows, cols, values) = read_matrix(BufReader::new(File::open(path)?))?;
    let meta: ModelMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if meta.classes.len() != rows {
        return Err(Error::param(format!(
            "sidecar lists {} classes, matrix has {rows} rows",
            meta.classes.len()
        )));
    }
    let weights = values.into_iter().map(f64::from).collect();
    Ok((ModelStack::from_flat(meta.classes.clone(), cols, weights)?, meta))
}
