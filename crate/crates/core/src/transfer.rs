//! Building visual prototypes for unseen classes out of seen ones.
//!
//! The pipeline is: score seen/unseen class pairs by label relatedness,
//! keep only defensible pairs (nearest neighbours, not claimed harder by
//! another unseen class, positively related), pick the best few seen
//! classes per unseen class, and average their visual prototypes with
//! relatedness weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RepresentationSet;
use crate::embeddings::{relatedness_matrix, LabelEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferParams {
    /// Pruning threshold: a seen class is dropped for an unseen class when
    /// some other unseen class is at most theta times as far from it.
    pub theta: f64,
    /// Nearest seen classes kept per unseen class.
    pub k: usize,
    /// Seen classes combined per unseen class.
    pub rho: usize,
}

impl TransferParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1]", self.theta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.rho == 0 {
            return Err(Error::Config("rho must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which (unseen, seen) pairs may participate in composition, with the two
/// intermediate votes kept for inspection.
#[derive(Debug, Clone)]
pub struct EligibilityMask {
    rows: usize,
    cols: usize,
    pub knn: Vec<bool>,
    pub lambda: Vec<bool>,
    pub eligible: Vec<bool>,
}

impl EligibilityMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_eligible(&self, unseen: usize, seen: usize) -> bool {
        self.eligible[unseen * self.cols + seen]
    }

    /// Eligible seen columns of one row, ascending.
    pub fn row(&self, unseen: usize) -> Vec<usize> {
        (0..self.cols).filter(|&i| self.is_eligible(unseen, i)).collect()
    }
}

fn check_relatedness(m: &Tensor) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Contract("relatedness matrix is empty".into()));
    }
    if m.data().iter().any(|&v| !v.is_finite() || !(-1.0..=1.0).contains(&v)) {
        return Err(Error::Contract("relatedness entries must lie in [-1, 1]".into()));
    }
    Ok(())
}

/// Decide which (unseen, seen) pairs may be combined.
pub fn eligibility(m: &Tensor, params: &TransferParams) -> Result<EligibilityMask> {
    params.validate()?;
    check_relatedness(m)?;
    let rows = m.rows();
    let cols = m.cols();
    let k_eff = params.k.min(cols);

    let mut knn = vec![false; rows * cols];
    for j in 0..rows {
        let mut order: Vec<usize> = (0..cols).collect();
        // Distance ties resolve toward the smaller seen index.
        order.sort_by(|&a, &b| {
            let da = 1.0 - m.at(j, a);
            let db = 1.0 - m.at(j, b);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        for &i in &order[..k_eff] {
            knn[j * cols + i] = true;
        }
    }

    // A seen class is pruned for unseen j when another unseen class sits
    // relatively much closer to it: min over others of their distance,
    // divided by j's own distance, at or below theta.
    let mut lambda = vec![true; rows * cols];
    for i in 0..cols {
        for j in 0..rows {
            let mut min_other = f64::INFINITY;
            for k in 0..rows {
                if k != j {
                    min_other = min_other.min(1.0 - m.at(k, i));
                }
            }
            if min_other.is_finite() {
                let ratio = min_other / (1.0 - m.at(j, i)).max(1e-12);
                if ratio <= params.theta {
                    lambda[j * cols + i] = false;
                }
            }
        }
    }

    let eligible = (0..rows * cols)
        .map(|idx| knn[idx] && lambda[idx] && m.data()[idx] > 0.0)
        .collect();
    Ok(EligibilityMask { rows, cols, knn, lambda, eligible })
}

/// A solved assignment: selected seen columns per unseen row (ascending)
/// and the summed relatedness of every selected cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub per_row: Vec<Vec<usize>>,
    pub objective: f64,
}

/// Pick at most rho eligible seen classes per unseen class, maximizing the
/// total relatedness. Rows are independent, so the per-row greedy choice of
/// the rho largest entries is exact; ties fall toward the larger seen index,
/// which makes the flattened selection matrix lexicographically smallest
/// among optima.
pub fn solve(m: &Tensor, mask: &EligibilityMask, rho: usize) -> Result<Selection> {
    check_relatedness(m)?;
    if mask.rows() != m.rows() || mask.cols() != m.cols() {
        return Err(Error::Shape("eligibility mask does not match the matrix".into()));
    }
    if rho == 0 {
        return Err(Error::Config("rho must be at least 1".into()));
    }
    let mut per_row = Vec::with_capacity(m.rows());
    for j in 0..m.rows() {
        let mut cells = mask.row(j);
        cells.sort_by(|&a, &b| {
            m.at(j, b)
                .partial_cmp(&m.at(j, a))
                .unwrap()
                .then(b.cmp(&a))
        });
        cells.truncate(rho);
        cells.sort_unstable();
        per_row.push(cells);
    }
    // Row-major summation order: kept identical to the enumeration oracle
    // so equal selections give bitwise-equal objectives.
    let mut objective = 0.0;
    for (j, row) in per_row.iter().enumerate() {
        for &i in row {
            objective += m.at(j, i);
        }
    }
    Ok(Selection { per_row, objective })
}

/// Exhaustive reference solver over every admissible selection. Only for
/// matrices with at most 24 cells.
pub fn solve_exact_bruteforce(m: &Tensor, mask: &EligibilityMask, rho: usize) -> Result<Selection> {
    check_relatedness(m)?;
    if mask.rows() != m.rows() || mask.cols() != m.cols() {
        return Err(Error::Shape("eligibility mask does not match the matrix".into()));
    }
    if rho == 0 {
        return Err(Error::Config("rho must be at least 1".into()));
    }
    let rows = m.rows();
    let cols = m.cols();
    if rows * cols > 24 {
        return Err(Error::Scale(format!(
            "{} cells exceed the enumeration budget of 24",
            rows * cols
        )));
    }
    let cells: Vec<usize> = (0..rows * cols).filter(|&idx| mask.eligible[idx]).collect();
    let n = cells.len();
    let mut best: Option<(f64, u32)> = None;
    'subset: for bits in 0u32..(1u32 << n) {
        let mut counts = vec![0usize; rows];
        let mut flat: u32 = 0;
        for (b, &idx) in cells.iter().enumerate() {
            if bits >> b & 1 == 1 {
                counts[idx / cols] += 1;
                if counts[idx / cols] > rho {
                    continue 'subset;
                }
                flat |= 1 << idx;
            }
        }
        let mut objective = 0.0;
        for idx in 0..rows * cols {
            if flat >> idx & 1 == 1 {
                objective += m.data()[idx];
            }
        }
        let better = match best {
            None => true,
            Some((obj, sel)) => {
                objective > obj
                    || (objective == obj && {
                        let d = flat ^ sel;
                        // First differing flattened position decides; the
                        // candidate wins when it has a 0 there.
                        d != 0 && flat >> d.trailing_zeros() & 1 == 0
                    })
            }
        };
        if better {
            best = Some((objective, flat));
        }
    }
    let (objective, flat) = best.expect("the empty selection is always admissible");
    let per_row = (0..rows)
        .map(|j| (0..cols).filter(|&i| flat >> (j * cols + i) & 1 == 1).collect())
        .collect();
    Ok(Selection { per_row, objective })
}

/// One visual prototype with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeEntry {
    pub class_id: usize,
    pub label: String,
    pub vector: Vec<f64>,
    /// Instances averaged (seen) or seen classes combined (transferred).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeFile {
    pub dim: usize,
    pub entries: Vec<PrototypeEntry>,
}

impl PrototypeFile {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Format("prototype dim must be positive".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::Format("prototype file has no entries".into()));
        }
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(Error::Format(format!(
                    "prototype {} has {} values, expected {}",
                    e.class_id,
                    e.vector.len(),
                    self.dim
                )));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("prototype {} is not finite", e.class_id)));
            }
            if e.count == 0 {
                return Err(Error::Format(format!("prototype {} has count 0", e.class_id)));
            }
        }
        if self.entries.windows(2).any(|w| w[0].class_id >= w[1].class_id) {
            return Err(Error::Format(
                "prototype class ids must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Mean representation per class.
pub fn build_seen_prototypes(reps: &RepresentationSet) -> Result<PrototypeFile> {
    reps.validate()?;
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; reps.dim]; reps.labels.len()];
    let mut counts = vec![0usize; reps.labels.len()];
    for item in &reps.items {
        for (s, v) in sums[item.class_id].iter_mut().zip(&item.vector) {
            *s += v;
        }
        counts[item.class_id] += 1;
    }
    let entries = reps
        .labels
        .iter()
        .enumerate()
        .map(|(class_id, label)| {
            if counts[class_id] == 0 {
                return Err(Error::Composition(format!(
                    "class {class_id} ({label}) has no representations"
                )));
            }
            let n = counts[class_id] as f64;
            Ok(PrototypeEntry {
                class_id,
                label: label.clone(),
                vector: sums[class_id].iter().map(|s| s / n).collect(),
                count: counts[class_id],
            })
        })
        .collect::<Result<_>>()?;
    Ok(PrototypeFile { dim: reps.dim, entries })
}

/// One seen contributor to a transferred prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedSeen {
    pub seen_id: usize,
    pub m: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRow {
    pub unseen_id: usize,
    pub label: String,
    pub vector: Vec<f64>,
    pub selected: Vec<SelectedSeen>,
    /// True when no seen class was eligible and the single most related one
    /// was used regardless.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvRow {
    pub theta: f64,
    pub k: usize,
    pub rho: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferOutput {
    pub dim: usize,
    pub params: TransferParams,
    pub objective: f64,
    pub rows: Vec<TransferRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cv_table: Option<Vec<CvRow>>,
}

impl TransferOutput {
    pub fn to_prototype_file(&self) -> PrototypeFile {
        PrototypeFile {
            dim: self.dim,
            entries: self
                .rows
                .iter()
                .map(|r| PrototypeEntry {
                    class_id: r.unseen_id,
                    label: r.label.clone(),
                    vector: r.vector.clone(),
                    count: r.selected.len(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn check_alignment(seen_protos: &PrototypeFile, seen_emb: &[LabelEmbedding]) -> Result<()> {
    seen_protos.validate()?;
    if seen_protos.entries.len() != seen_emb.len() {
        return Err(Error::Contract(format!(
            "{} seen prototypes for {} seen embeddings",
            seen_protos.entries.len(),
            seen_emb.len()
        )));
    }
    for (entry, emb) in seen_protos.entries.iter().zip(seen_emb) {
        if entry.class_id != emb.class_id || entry.label != emb.label {
            return Err(Error::Contract(format!(
                "seen prototype {} ({}) does not match embedding {} ({})",
                entry.class_id, entry.label, emb.class_id, emb.label
            )));
        }
    }
    Ok(())
}

fn compose_rows(
    m: &Tensor,
    selection: &Selection,
    seen_protos: &PrototypeFile,
    unseen_emb: &[LabelEmbedding],
) -> Result<Vec<TransferRow>> {
    let dim = seen_protos.dim;
    let mut rows = Vec::with_capacity(unseen_emb.len());
    for (j, emb) in unseen_emb.iter().enumerate() {
        let mut cells = selection.per_row[j].clone();
        let fallback = cells.is_empty();
        if fallback {
            // No eligible seen class: take the single most related one,
            // ties toward the smaller id.
            let mut best = 0;
            for i in 1..m.cols() {
                if m.at(j, i) > m.at(j, best) {
                    best = i;
                }
            }
            cells.push(best);
        }
        let weights: Vec<f64> = if fallback {
            vec![1.0]
        } else {
            let total: f64 = cells.iter().map(|&i| m.at(j, i)).sum();
            if !(total.is_finite() && total > 0.0) {
                return Err(Error::Composition(format!(
                    "selected relatedness for unseen {j} sums to {total}"
                )));
            }
            cells.iter().map(|&i| m.at(j, i) / total).collect()
        };
        let mut vector = vec![0.0; dim];
        for (&i, &w) in cells.iter().zip(&weights) {
            for (v, p) in vector.iter_mut().zip(&seen_protos.entries[i].vector) {
                *v += w * p;
            }
        }
        rows.push(TransferRow {
            unseen_id: emb.class_id,
            label: emb.label.clone(),
            vector,
            selected: cells
                .iter()
                .zip(&weights)
                .map(|(&i, &w)| SelectedSeen {
                    seen_id: seen_protos.entries[i].class_id,
                    m: m.at(j, i),
                    weight: w,
                })
                .collect(),
            fallback,
        });
    }
    Ok(rows)
}

/// Full transfer: relatedness, eligibility, selection, composition.
pub fn transfer_prototypes(
    seen_protos: &PrototypeFile,
    seen_emb: &[LabelEmbedding],
    unseen_emb: &[LabelEmbedding],
    params: &TransferParams,
) -> Result<TransferOutput> {
    params.validate()?;
    check_alignment(seen_protos, seen_emb)?;
    let m = relatedness_matrix(unseen_emb, seen_emb)?;
    let mask = eligibility(&m, params)?;
    let selection = solve(&m, &mask, params.rho)?;
    let rows = compose_rows(&m, &selection, seen_protos, unseen_emb)?;
    Ok(TransferOutput {
        dim: seen_protos.dim,
        params: *params,
        objective: selection.objective,
        rows,
        cv_table: None,
    })
}

/// Ablation: every positively related seen class contributes, with no
/// neighbourhood or claim pruning.
pub fn transfer_prototypes_unconstrained(
    seen_protos: &PrototypeFile,
    seen_emb: &[LabelEmbedding],
    unseen_emb: &[LabelEmbedding],
) -> Result<TransferOutput> {
    check_alignment(seen_protos, seen_emb)?;
    let m = relatedness_matrix(unseen_emb, seen_emb)?;
    check_relatedness(&m)?;
    let cols = m.cols();
    let per_row: Vec<Vec<usize>> = (0..m.rows())
        .map(|j| (0..cols).filter(|&i| m.at(j, i) > 0.0).collect())
        .collect();
    let mut objective = 0.0;
    for (j, row) in per_row.iter().enumerate() {
        for &i in row {
            objective += m.at(j, i);
        }
    }
    let selection = Selection { per_row, objective };
    let rows = compose_rows(&m, &selection, seen_protos, unseen_emb)?;
    Ok(TransferOutput {
        dim: seen_protos.dim,
        params: TransferParams { theta: 1.0, k: cols.max(1), rho: cols.max(1) },
        objective: selection.objective,
        rows,
        cv_table: None,
    })
}

pub const CV_THETA_GRID: [f64; 4] = [0.5, 0.7, 0.8, 0.9];
pub const CV_K_GRID: [usize; 3] = [3, 5, 10];
pub const CV_RHO_GRID: [usize; 3] = [2, 3, 5];
const CV_FOLDS: usize = 5;

fn default_theta_grid() -> Vec<f64> {
    CV_THETA_GRID.to_vec()
}

fn default_k_grid() -> Vec<usize> {
    CV_K_GRID.to_vec()
}

fn default_rho_grid() -> Vec<usize> {
    CV_RHO_GRID.to_vec()
}

/// Search space for the cross-validated parameter pick. Axes left out of a
/// grid file fall back to the built-in values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvGrid {
    #[serde(default = "default_theta_grid")]
    pub theta: Vec<f64>,
    #[serde(default = "default_k_grid")]
    pub k: Vec<usize>,
    #[serde(default = "default_rho_grid")]
    pub rho: Vec<usize>,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid {
            theta: default_theta_grid(),
            k: default_k_grid(),
            rho: default_rho_grid(),
        }
    }
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_empty() || self.k.is_empty() || self.rho.is_empty() {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        let probe = TransferParams {
            theta: self.theta[0],
            k: self.k[0],
            rho: self.rho[0],
        };
        for &theta in &self.theta {
            TransferParams { theta, ..probe }.validate()?;
        }
        for &k in &self.k {
            TransferParams { k, ..probe }.validate()?;
        }
        for &rho in &self.rho {
            TransferParams { rho, ..probe }.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub params: TransferParams,
    pub table: Vec<CvRow>,
}

fn nearest_entry(vector: &[f64], protos: &PrototypeFile) -> Result<usize> {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (idx, entry) in protos.entries.iter().enumerate() {
        let dist = 1.0 - cosine(vector, &entry.vector)?;
        // Strict improvement keeps the smaller class id on ties; entries
        // are sorted by id.
        if dist < best_dist {
            best = idx;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// Pick transfer parameters by cross-validation over the seen classes:
/// each fold is held out as pseudo-unseen, its prototypes are rebuilt from
/// the remaining classes, and the grid point with the best mean accuracy
/// wins. Ties prefer smaller k, then smaller rho, then larger theta.
pub fn cv_select_params(
    reps: &RepresentationSet,
    seen_emb: &[LabelEmbedding],
    seed: u64,
) -> Result<CvSelection> {
    cv_select_params_on_grid(reps, seen_emb, seed, &CvGrid::default())
}

/// Same search over a caller-supplied grid.
pub fn cv_select_params_on_grid(
    reps: &RepresentationSet,
    seen_emb: &[LabelEmbedding],
    seed: u64,
    grid: &CvGrid,
) -> Result<CvSelection> {
    grid.validate()?;
    reps.validate()?;
    if reps.labels.len() != seen_emb.len() {
        return Err(Error::Contract(format!(
            "{} representation classes for {} embeddings",
            reps.labels.len(),
            seen_emb.len()
        )));
    }
    for (class_id, (label, emb)) in reps.labels.iter().zip(seen_emb).enumerate() {
        if emb.class_id != class_id || &emb.label != label {
            return Err(Error::Contract(format!(
                "embedding {} ({}) does not match class {class_id} ({label})",
                emb.class_id, emb.label
            )));
        }
    }
    let num_classes = reps.labels.len();
    if num_classes < 2 * CV_FOLDS {
        return Err(Error::Fold(format!(
            "{num_classes} classes cannot fill {CV_FOLDS} folds of at least 2"
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for item in &reps.items {
        counts[item.class_id] += 1;
    }
    if let Some(class_id) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fold(format!("class {class_id} has no representations")));
    }

    // One shuffle fixes the folds for every grid point.
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = num_classes / CV_FOLDS;
    let extra = num_classes % CV_FOLDS;
    let mut folds: Vec<Vec<usize>> = Vec::with_capacity(CV_FOLDS);
    let mut at = 0;
    for f in 0..CV_FOLDS {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = order[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }

    let mut table = Vec::new();
    let mut best: Option<(f64, TransferParams)> = None;
    for &theta in &grid.theta {
        for &k in &grid.k {
            for &rho in &grid.rho {
                let params = TransferParams { theta, k, rho };
                let mut fold_acc = Vec::with_capacity(CV_FOLDS);
                for fold in &folds {
                    fold_acc.push(fold_accuracy(reps, seen_emb, fold, &params)?);
                }
                let accuracy = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
                table.push(CvRow { theta, k, rho, accuracy });
                let better = match &best {
                    None => true,
                    Some((acc, cur)) => {
                        accuracy > *acc
                            || (accuracy == *acc
                                && (k, rho, std::cmp::Reverse(theta.to_bits()))
                                    < (cur.k, cur.rho, std::cmp::Reverse(cur.theta.to_bits())))
                    }
                };
                if better {
                    best = Some((accuracy, params));
                }
            }
        }
    }
    Ok(CvSelection {
        params: best.expect("grid is non-empty").1,
        table,
    })
}

fn fold_accuracy(
    reps: &RepresentationSet,
    seen_emb: &[LabelEmbedding],
    held_out: &[usize],
    params: &TransferParams,
) -> Result<f64> {
    let is_held: Vec<bool> = {
        let mut v = vec![false; reps.labels.len()];
        for &c in held_out {
            v[c] = true;
        }
        v
    };
    let kept: Vec<usize> = (0..reps.labels.len()).filter(|&c| !is_held[c]).collect();

    // Pseudo-seen prototypes: class means restricted to the kept classes,
    // re-indexed densely.
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; reps.dim]; kept.len()];
    let mut counts = vec![0usize; kept.len()];
    let mut local_of = vec![usize::MAX; reps.labels.len()];
    for (local, &c) in kept.iter().enumerate() {
        local_of[c] = local;
    }
    for item in &reps.items {
        if !is_held[item.class_id] {
            let local = local_of[item.class_id];
            for (s, v) in sums[local].iter_mut().zip(&item.vector) {
                *s += v;
            }
            counts[local] += 1;
        }
    }
    let pseudo_seen = PrototypeFile {
        dim: reps.dim,
        entries: kept
            .iter()
            .enumerate()
            .map(|(local, &c)| PrototypeEntry {
                class_id: local,
                label: reps.labels[c].clone(),
                vector: sums[local].iter().map(|s| s / counts[local] as f64).collect(),
                count: counts[local],
            })
            .collect(),
    };
    let pseudo_seen_emb: Vec<LabelEmbedding> = kept
        .iter()
        .enumerate()
        .map(|(local, &c)| {
            let mut e = seen_emb[c].clone();
            e.class_id = local;
            e
        })
        .collect();
    let pseudo_unseen_emb: Vec<LabelEmbedding> = held_out
        .iter()
        .enumerate()
        .map(|(local, &c)| {
            let mut e = seen_emb[c].clone();
            e.class_id = local;
            e
        })
        .collect();

    let output = transfer_prototypes(&pseudo_seen, &pseudo_seen_emb, &pseudo_unseen_emb, params)?;
    let protos = output.to_prototype_file();

    let mut hits = 0usize;
    let mut total = 0usize;
    for item in &reps.items {
        if is_held[item.class_id] {
            let local = nearest_entry(&item.vector, &protos)?;
            if held_out[local] == item.class_id {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
