//! Dataset ingestion, synthetic benchmarks, input clipping and partitioning.
//!
//! Two on-disk formats are supported:
//!
//!  - CSV rows `label,feat_1,...,feat_p` (UTF-8, optional header).
//!  - A raw matrix: magic `DPHM`, `u32` rows, `u32` cols, then row-major
//!    little-endian `f32` values. Datasets store the label in column 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::types::{norm, DataPoint, Dataset, Label};
use crate::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"DPHM";

/// Rescales `x` onto the ball of radius `c` if it lies outside.
///
/// The whole vector, bias slot included, is clipped.
pub fn clip_point(x: &[f64], c: f64) -> Vec<f64> {
    let n = norm(x);
    let scale = c / n.max(c);
    x.iter().map(|v| v * scale).collect()
}

/// Clips every point of `dataset` to norm `c`.
pub fn clip_dataset(dataset: &Dataset, c: f64) -> Vec<Vec<f64>> {
    dataset.points().iter().map(|p| clip_point(&p.features, c)).collect()
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    parse_csv(BufReader::new(File::open(path)?), has_header)
}

/// Parses CSV rows of `label,feat_1,...,feat_p`. Row numbers in errors are
/// 1-based file line numbers.
pub fn parse_csv(reader: impl BufRead, has_header: bool) -> Result<Dataset> {
    let mut points = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let row = i + 1;
        if has_header && i == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: Label = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                row,
                message: format!("bad label: {e}"),
            })?;
        let values = fields
            .enumerate()
            .map(|(j, f)| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    message: format!("bad feature {}: {e}", j + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                row,
                message: "row has no features".into(),
            });
        }
        if let Some(w) = width {
            if w != values.len() {
                return Err(Error::Parse {
                    row,
                    message: format!("row has {} features, expected {w}", values.len()),
                });
            }
        }
        width = Some(values.len());
        points.push(DataPoint::from_raw(&values, label));
    }
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::from_points(points)
}

/// Writes `dataset` as headerless CSV, dropping the bias slot.
pub fn write_csv(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    for p in dataset.points() {
        write!(writer, "{}", p.label)?;
        for v in &p.features[1..] {
            write!(writer, ",{v}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes a `DPHM` matrix.
pub fn write_matrix(mut writer: impl Write, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::param("matrix payload does not match its shape"));
    }
    let rows = u32::try_from(rows).map_err(|_| Error::param("too many rows"))?;
    let cols = u32::try_from(cols).map_err(|_| Error::param("too many columns"))?;
    writer.write_all(MATRIX_MAGIC)?;
    writer.write_all(&rows.to_le_bytes())?;
    writer.write_all(&cols.to_le_bytes())?;
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `DPHM` matrix, returning `(rows, cols, values)`.
pub fn read_matrix(mut reader: impl Read) -> Result<(usize, usize, Vec<f32>)> {
    let mut header = [0u8; 12];
    reader.read_exact(&mut header)?;
    if &header[..4] != MATRIX_MAGIC {
        return Err(Error::Parse {
            row: 0,
            message: "missing DPHM magic".into(),
        });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::Parse {
            row: 0,
            message: format!(
                "payload holds {} bytes, header announces {rows}x{cols} f32 values",
                payload.len()
            ),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

/// Loads a dataset stored as a `DPHM` matrix with the label in column 0.
pub fn load_matrix_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let (rows, cols, values) = read_matrix(BufReader::new(File::open(path)?))?;
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    if cols < 2 {
        return Err(Error::param("matrix dataset needs a label column and a feature column"));
    }
    let points = values
        .chunks_exact(cols)
        .enumerate()
        .map(|(i, row)| {
            let label = row[0];
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("label {label} is not a class identifier"),
                });
            }
            let raw: Vec<f64> = row[1..].iter().map(|&v| v as f64).collect();
            Ok(DataPoint::from_raw(&raw, label as Label))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_points(points)
}

/// Loads a dataset, picking the format from the file's leading bytes.
pub fn load_dataset(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let is_matrix = File::open(path)?.read_exact(&mut magic).is_ok() && &magic == MATRIX_MAGIC;
    if is_matrix {
        load_matrix_dataset(path)
    } else {
        load_csv(path, has_header)
    }
}

/// Gaussian class blobs around pairwise well-separated centers.
///
/// With `num_classes <= dim` the centers form a regular simplex
/// `(separation/√2)·e_k`, so every pair is exactly `separation` apart.
/// Otherwise random centers are rescaled until the closest pair is exactly
/// `separation` apart. Labels are `0..num_classes`.
pub fn synth_blobs(
    rng: &mut Rng,
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    separation: f64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::param("class count, dimension and per-class count must be >= 1"));
    }
    if !(spread >= 0.0) || !(separation >= 0.0) {
        return Err(Error::param("spread and separation must be non-negative"));
    }
    let centers = blob_centers(rng, num_classes, dim, separation);
    let mut points = Vec::with_capacity(num_classes * per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let raw: Vec<f64> = center
                .iter()
                .map(|mu| mu + spread * rng.standard_normal())
                .collect();
            points.push(DataPoint::from_raw(&raw, k as Label));
        }
    }
    Dataset::new(points, (0..num_classes as Label).collect())
}

fn blob_centers(rng: &mut Rng, k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if k <= dim {
        let r = separation / std::f64::consts::SQRT_2;
        return (0..k)
            .map(|i| {
                let mut c = vec![0.0; dim];
                c[i] = r;
                c
            })
            .collect();
    }
    let mut centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.standard_normal()).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let d = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = if min_dist > 0.0 { separation / min_dist } else { 0.0 };
    centers.iter_mut().flatten().for_each(|v| *v *= scale);
    centers
}

/// How the global pool is split among simulated users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_users: usize,
    /// Fixed local dataset size; `None` splits the whole pool evenly.
    pub points_per_user: Option<usize>,
}

/// Randomly splits `dataset` into disjoint local datasets.
///
/// On an even split every point is assigned and the first `n mod |U|` users
/// receive one extra point.
pub fn partition(dataset: &Dataset, plan: &PartitionPlan, rng: &mut Rng) -> Result<Vec<Dataset>> {
    let n = dataset.len();
    let users = plan.num_users;
    if users == 0 {
        return Err(Error::param("partition needs at least one user"));
    }
    let sizes: Vec<usize> = match plan.points_per_user {
        Some(0) => return Err(Error::param("points per user must be >= 1")),
        Some(per) => {
            let need = users.checked_mul(per).unwrap_or(usize::MAX);
            if need > n {
                return Err(Error::Size(format!(
                    "{users} users x {per} points needs {need} points, dataset has {n}"
                )));
            }
            vec![per; users]
        }
        None => {
            if users > n {
                return Err(Error::Size(format!("{users} users but only {n} points")));
            }
            (0..users).map(|u| n / users + usize::from(u < n % users)).collect()
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut offset = 0;
    sizes
        .iter()
        .map(|&size| {
            let local = dataset.subset(&order[offset..offset + size]);
            offset += size;
            local
        })
        .collect()
}

/// Sorted-order linearly interpolated quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::param(format!("quantile level must lie in [0,1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// The `q`-quantile of the feature-vector norms, as a data-independent
/// clipping bound when computed on a public surrogate dataset.
pub fn quantile_clip_bound(dataset: &Dataset, q: f64) -> Result<f64> {
    let norms: Vec<f64> = dataset.points().iter().map(|p| norm(&p.features)).collect();
    quantile(&norms, q)
}

/// Splits indices into `folds` groups with per-class proportions preserved.
pub fn stratified_folds(dataset: &Dataset, folds: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > dataset.len() {
        return Err(Error::param(format!(
            "fold count must lie in [2, {}], got {folds}",
            dataset.len()
        )));
    }
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for &class in dataset.classes() {
        let mut members: Vec<usize> = dataset
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(rng);
        for i in members {
            out[next].push(i);
            next = (next + 1) % folds;
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}
