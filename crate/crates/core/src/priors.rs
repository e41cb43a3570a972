//! Prior models over the joint class assignment of all objects.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logmath::NeumaierSum;

/// Largest dense prior tensor that may be allocated.
pub const MAX_TENSOR_ENTRIES: usize = 10_000_000;

/// Range of the raw uniform draws used by [`generate_random_prior`].
pub const RAW_DRAW_RANGE: (f64, f64) = (0.001, 1.0);

/// One class label per object (zero-based). Ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassAssignment(pub Vec<usize>);

impl ClassAssignment {
    pub fn new(classes: Vec<usize>) -> Self {
        Self(classes)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, n_objects: usize, n_classes: usize) -> Result<()> {
        if self.0.len() != n_objects {
            return Err(Error::WrongAssignmentLength {
                expected: n_objects,
                got: self.0.len(),
            });
        }
        match self.0.iter().find(|&&c| c >= n_classes) {
            Some(&class) => Err(Error::InvalidClass { class, n_classes }),
            None => Ok(()),
        }
    }

    /// Row-major index into a dense `M^N` tensor; object 0 is most significant.
    pub fn flat_index(&self, n_classes: usize) -> usize {
        self.0.iter().fold(0, |acc, &c| acc * n_classes + c)
    }

    pub fn from_flat_index(mut index: usize, n_objects: usize, n_classes: usize) -> Self {
        let mut classes = vec![0; n_objects];
        for slot in classes.iter_mut().rev() {
            *slot = index % n_classes;
            index /= n_classes;
        }
        Self(classes)
    }

    /// All `M^N` assignments in lexicographic order.
    pub fn enumerate_all(n_objects: usize, n_classes: usize) -> impl Iterator<Item = Self> {
        let total = (n_classes as u128).pow(n_objects as u32) as usize;
        (0..total).map(move |i| Self::from_flat_index(i, n_objects, n_classes))
    }
}

impl std::fmt::Display for ClassAssignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Total number of hypotheses, as a float so that `100^5` style counts don't
/// overflow.
pub fn hypothesis_count(n_objects: usize, n_classes: usize) -> f64 {
    (n_classes as f64).powi(n_objects as i32)
}

/// Exact integer hypothesis count when it fits in `limit`.
pub fn hypothesis_count_within(n_objects: usize, n_classes: usize, limit: usize) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..n_objects {
        total = total.checked_mul(n_classes)?;
        if total > limit {
            return None;
        }
    }
    Some(total)
}

/// Prior `P0(C)` over joint class assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorDocument", into = "PriorDocument")]
pub enum PriorModel {
    /// `P0(C) = prod_n marginals[n][c_n]`.
    Independent { marginals: Vec<Vec<f64>> },
    /// Full row-major tensor over `M^N` assignments.
    Dependent {
        n_objects: usize,
        n_classes: usize,
        tensor: Vec<f64>,
    },
}

/// On-disk layout: marginals as nested arrays, tensors flat with a shape header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PriorDocument {
    Independent { marginals: Vec<Vec<f64>> },
    Dependent { shape: Vec<usize>, data: Vec<f64> },
}

impl From<PriorModel> for PriorDocument {
    fn from(p: PriorModel) -> Self {
        match p {
            PriorModel::Independent { marginals } => PriorDocument::Independent { marginals },
            PriorModel::Dependent {
                n_objects,
                n_classes,
                tensor,
            } => PriorDocument::Dependent {
                shape: vec![n_classes; n_objects],
                data: tensor,
            },
        }
    }
}

impl TryFrom<PriorDocument> for PriorModel {
    type Error = Error;

    fn try_from(doc: PriorDocument) -> Result<Self> {
        match doc {
            PriorDocument::Independent { marginals } => PriorModel::independent(marginals),
            PriorDocument::Dependent { shape, data } => {
                let n_classes = *shape
                    .first()
                    .ok_or_else(|| Error::Format("empty tensor shape".into()))?;
                if shape.iter().any(|&m| m != n_classes) {
                    return Err(Error::Format(format!("non-cubic tensor shape {shape:?}")));
                }
                PriorModel::dependent(shape.len(), n_classes, data)
            }
        }
    }
}

fn check_normalized(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{what} has non-positive entries")));
    }
    let sum: f64 = values.iter().copied().collect::<NeumaierSum>().value();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl PriorModel {
    pub fn independent(marginals: Vec<Vec<f64>>) -> Result<Self> {
        let n_classes = marginals.first().map_or(0, Vec::len);
        if marginals.is_empty() || n_classes < 2 {
            return Err(Error::InvalidConfig(
                "independent prior needs at least one object and two classes".into(),
            ));
        }
        for (n, m) in marginals.iter().enumerate() {
            if m.len() != n_classes {
                return Err(Error::InvalidConfig(format!(
                    "marginal {n} has {} classes, expected {n_classes}",
                    m.len()
                )));
            }
            check_normalized(m, &format!("marginal {n}"))?;
        }
        Ok(Self::Independent { marginals })
    }

    pub fn dependent(n_objects: usize, n_classes: usize, tensor: Vec<f64>) -> Result<Self> {
        let size = hypothesis_count_within(n_objects, n_classes, MAX_TENSOR_ENTRIES).ok_or(
            Error::TensorTooLarge {
                size: hypothesis_count(n_objects, n_classes),
                limit: MAX_TENSOR_ENTRIES,
            },
        )?;
        if n_objects == 0 || n_classes < 2 {
            return Err(Error::InvalidConfig(
                "dependent prior needs at least one object and two classes".into(),
            ));
        }
        if tensor.len() != size {
            return Err(Error::InvalidConfig(format!(
                "tensor has {} entries, expected {size}",
                tensor.len()
            )));
        }
        check_normalized(&tensor, "prior tensor")?;
        Ok(Self::Dependent {
            n_objects,
            n_classes,
            tensor,
        })
    }

    pub fn uniform_independent(n_objects: usize, n_classes: usize) -> Self {
        Self::Independent {
            marginals: vec![vec![1.0 / n_classes as f64; n_classes]; n_objects],
        }
    }

    /// Dense tensor equal to the product of the given marginals.
    pub fn outer_product(marginals: &[Vec<f64>]) -> Result<Self> {
        let n_objects = marginals.len();
        let n_classes = marginals.first().map_or(0, Vec::len);
        let size = hypothesis_count_within(n_objects, n_classes, MAX_TENSOR_ENTRIES).ok_or(
            Error::TensorTooLarge {
                size: hypothesis_count(n_objects, n_classes),
                limit: MAX_TENSOR_ENTRIES,
            },
        )?;
        let tensor = (0..size)
            .map(|i| {
                ClassAssignment::from_flat_index(i, n_objects, n_classes)
                    .0
                    .iter()
                    .zip(marginals)
                    .map(|(&c, m)| m[c])
                    .product()
            })
            .collect::<Vec<f64>>();
        let total: f64 = tensor.iter().copied().collect::<NeumaierSum>().value();
        let tensor = tensor.into_iter().map(|v| v / total).collect();
        Self::dependent(n_objects, n_classes, tensor)
    }

    pub fn n_objects(&self) -> usize {
        match self {
            Self::Independent { marginals } => marginals.len(),
            Self::Dependent { n_objects, .. } => *n_objects,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::Independent { marginals } => marginals[0].len(),
            Self::Dependent { n_classes, .. } => *n_classes,
        }
    }

    pub fn is_independent(&self) -> bool {
        matches!(self, Self::Independent { .. })
    }

    pub fn log_prior(&self, c: &ClassAssignment) -> Result<f64> {
        c.validate(self.n_objects(), self.n_classes())?;
        Ok(self.log_prior_unchecked(c.classes()))
    }

    pub(crate) fn log_prior_unchecked(&self, classes: &[usize]) -> f64 {
        match self {
            Self::Independent { marginals } => classes
                .iter()
                .zip(marginals)
                .map(|(&c, m)| m[c].ln())
                .sum(),
            Self::Dependent {
                n_classes, tensor, ..
            } => {
                let idx = classes.iter().fold(0, |acc, &c| acc * n_classes + c);
                tensor[idx].ln()
            }
        }
    }

    /// `sum_{C} P0(C)^q1` over all assignments.
    pub fn power_sum_all(&self, q1: f64) -> f64 {
        match self {
            // Sum over the product space factorizes into a product of sums.
            Self::Independent { marginals } => marginals
                .iter()
                .map(|m| m.iter().map(|p| p.powf(q1)).collect::<NeumaierSum>().value())
                .product(),
            Self::Dependent { tensor, .. } => tensor
                .iter()
                .map(|p| p.powf(q1))
                .collect::<NeumaierSum>()
                .value(),
        }
    }

    /// `sum_{C in subset} P0(C)^q1`.
    pub fn power_sum_subset(&self, subset: &[ClassAssignment], q1: f64) -> Result<f64> {
        let mut seen = BTreeSet::new();
        let mut sum = NeumaierSum::default();
        for c in subset {
            if !seen.insert(c) {
                return Err(Error::DuplicateHypothesis(c.0.clone()));
            }
            sum.add((q1 * self.log_prior(c)?).exp());
        }
        Ok(sum.value())
    }

    /// Per-object log marginals; only defined for independent priors.
    pub fn log_marginals(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Independent { marginals } => Ok(marginals
                .iter()
                .map(|m| m.iter().map(|p| p.ln()).collect())
                .collect()),
            Self::Dependent { .. } => Err(Error::WrongPriorKind),
        }
    }
}

fn normalized_draws(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|_| rng.random_range(RAW_DRAW_RANGE.0..=RAW_DRAW_RANGE.1))
        .collect();
    let total: f64 = raw.iter().copied().collect::<NeumaierSum>().value();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random prior: entries drawn from `U[0.001, 1]`, then divided by their sum.
/// For independent priors the procedure is applied to each marginal.
pub fn generate_random_prior(
    n_objects: usize,
    n_classes: usize,
    dependent: bool,
    seed: u64,
) -> Result<PriorModel> {
    if n_objects == 0 || n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need N >= 1 and M >= 2 (got N = {n_objects}, M = {n_classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if dependent {
        let size = hypothesis_count_within(n_objects, n_classes, MAX_TENSOR_ENTRIES).ok_or(
            Error::TensorTooLarge {
                size: hypothesis_count(n_objects, n_classes),
                limit: MAX_TENSOR_ENTRIES,
            },
        )?;
        PriorModel::dependent(n_objects, n_classes, normalized_draws(&mut rng, size))
    } else {
        let marginals = (0..n_objects)
            .map(|_| normalized_draws(&mut rng, n_classes))
            .collect();
        PriorModel::independent(marginals)
    }
}
