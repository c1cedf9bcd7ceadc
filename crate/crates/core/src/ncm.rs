//! Nearest-class-mean classification. Class means are taken over
//! pre-projection features, then projected and normalized.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::project_and_normalize;
use crate::tensorio::{self, DType};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// Ascending class ids; row `c` of `prototypes` belongs to `class_ids[c]`.
    pub class_ids: Vec<i64>,
    /// `C × d`, unit rows.
    pub prototypes: Matrix,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub predictions: Vec<i64>,
    pub correct: usize,
    pub total: usize,
}

#[derive(Serialize, Deserialize)]
struct PrototypeSidecar {
    class_ids: Vec<i64>,
    counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Writes `prototypes.iso` and `classes.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensorio::write_matrix(dir.join("prototypes.iso"), &self.prototypes, DType::F64)?;
        let path = dir.join("classes.json");
        let side = PrototypeSidecar {
            class_ids: self.class_ids.clone(),
            counts: self.counts.clone(),
        };
        let text = serde_json::to_string_pretty(&side).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let prototypes = tensorio::read_matrix(dir.join("prototypes.iso"))?;
        let path = dir.join("classes.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: PrototypeSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        if side.class_ids.len() != prototypes.nrows() || side.counts.len() != prototypes.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} prototypes, {} class ids, {} counts",
                prototypes.nrows(),
                side.class_ids.len(),
                side.counts.len()
            )));
        }
        Ok(Self {
            class_ids: side.class_ids,
            prototypes,
            counts: side.counts,
        })
    }
}

/// `normalize(W · mean_c)` for every class `c` present in `labels`.
pub fn compute_prototypes(w: &Matrix, features: &Matrix, labels: &[i64]) -> Result<PrototypeSet> {
    if labels.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let mut groups: BTreeMap<i64, (Vector, usize)> = BTreeMap::new();
    for (row, &label) in features.row_iter().zip(labels) {
        let entry = groups
            .entry(label)
            .or_insert_with(|| (Vector::zeros(features.ncols()), 0));
        entry.0 += row.transpose();
        entry.1 += 1;
    }
    if groups.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    let mut means = Matrix::zeros(groups.len(), features.ncols());
    let mut class_ids = Vec::with_capacity(groups.len());
    let mut counts = Vec::with_capacity(groups.len());
    for (c, (label, (sum, n))) in groups.into_iter().enumerate() {
        means.row_mut(c).copy_from(&(sum / n as f64).transpose());
        class_ids.push(label);
        counts.push(n);
    }
    let prototypes = project_and_normalize(w, &means).map_err(|e| match e {
        Error::DegenerateEmbedding { row } => Error::Degenerate(format!(
            "prototype of class {} projects to zero",
            class_ids[row]
        )),
        other => other,
    })?;
    Ok(PrototypeSet {
        class_ids,
        prototypes,
        counts,
    })
}

/// Assigns every test row to the prototype with the highest cosine
/// similarity; ties go to the lowest class id.
pub fn classify(
    prototypes: &PrototypeSet,
    w: &Matrix,
    test_features: &Matrix,
    test_labels: &[i64],
) -> Result<ClassificationReport> {
    if test_labels.len() != test_features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} test rows",
            test_labels.len(),
            test_features.nrows()
        )));
    }
    if prototypes.prototypes.ncols() != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "prototypes live in dimension {}, projector outputs {}",
            prototypes.prototypes.ncols(),
            w.nrows()
        )));
    }
    if prototypes.is_empty() {
        return Err(Error::InvalidParameter("empty prototype set".into()));
    }
    let projected = project_and_normalize(w, test_features)?;
    let scores = projected * prototypes.prototypes.transpose();
    let predictions: Vec<i64> = scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            prototypes.class_ids[best]
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(test_labels)
        .filter(|(p, t)| p == t)
        .count();
    let total = test_labels.len();
    Ok(ClassificationReport {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        predictions,
        correct,
        total,
    })
}
