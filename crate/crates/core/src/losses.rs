//! Multi-column variance loss, Euclidean density loss and their sum.
//!
//! Every loss exists twice: a plain `f64` evaluation over recorded values and
//! a differentiable version recorded on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Attention vectors of a batch, indexed `[image][psm][branch]`. The length
/// is shared within an image and may differ between images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    images: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionRecord {
    pub fn new(images: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let mut record = Self::default();
        for image in images {
            record.push(image)?;
        }
        Ok(record)
    }

    /// Adds one image's `[psm][branch]` vectors.
    pub fn push(&mut self, image: Vec<Vec<Vec<f64>>>) -> Result<()> {
        let k = image.len();
        let s = image.first().map_or(0, Vec::len);
        if k == 0 || s < 2 || image.iter().any(|g| g.len() != s) {
            return Err(Error::shape(
                "attention_record",
                "need at least one PSM and an equal number (≥ 2) of branches in each",
            ));
        }
        if let Some(first) = self.images.first() {
            if first.len() != k || first[0].len() != s {
                return Err(Error::shape(
                    "attention_record",
                    format!("image has {k}×{s} vectors, record holds {}×{}", first.len(), first[0].len()),
                ));
            }
        }
        let m = image[0][0].len();
        for v in image.iter().flatten() {
            if v.len() != m {
                return Err(Error::shape("attention_record", format!("vector lengths {} and {m} differ", v.len())));
            }
            if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(Error::Config("attention vectors must be finite and non-negative".into()));
            }
        }
        self.images.push(image);
        Ok(())
    }

    pub fn images(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn psms(&self) -> usize {
        self.images.first().map_or(0, Vec::len)
    }

    pub fn branches(&self) -> usize {
        self.images.first().map_or(0, |i| i[0].len())
    }
}

/// Channel mean of a C×H×W tensor, flattened row-major to length H·W.
pub fn attention_vector<T: Scalar>(branch_output: &Tensor<T>) -> Result<Vec<f64>> {
    let (c, h, w) = branch_output.chw("attention_vector")?;
    let plane = h * w;
    let data = branch_output.data();
    Ok((0..plane)
        .map(|i| (0..c).map(|ch| data[ch * plane + i].as_f64()).sum::<f64>() / c as f64)
        .collect())
}

pub fn attention_vector_var<T: Scalar>(tape: &mut Tape<T>, branch_output: Var) -> Result<Var> {
    let mean = tape.channel_mean(branch_output)?;
    tape.flatten(mean)
}

/// Entrywise sum of equally long vectors.
pub fn attention_sum(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::shape("attention_sum", "no vectors"))?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != sum.len() {
            return Err(Error::shape(
                "attention_sum",
                format!("lengths {} and {} differ", v.len(), sum.len()),
            ));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(sum)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ⟨a, b⟩ / max(‖a‖·‖b‖, ε).
pub fn guarded_cosine(a: &[f64], b: &[f64], epsilon: f64) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(epsilon)
}

/// Mean guarded cosine between each branch vector and the mean of the other
/// branches of the same image and PSM; 1 when all branches agree.
pub fn group_variance_loss(group: &[Vec<f64>], epsilon: f64) -> Result<f64> {
    let s = group.len();
    if s < 2 {
        return Err(Error::shape("variance_loss", "need at least two branches"));
    }
    let sum = attention_sum(group)?;
    let total: f64 = group
        .iter()
        .map(|v| {
            let others: Vec<f64> = sum.iter().zip(v).map(|(t, x)| (t - x) / (s - 1) as f64).collect();
            guarded_cosine(v, &others, epsilon)
        })
        .sum();
    Ok(total / s as f64)
}

/// Multi-column variance loss averaged over every image, PSM and branch.
pub fn variance_loss(record: &AttentionRecord, epsilon: f64) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::shape("variance_loss", "empty record"));
    }
    let mut total = 0.0;
    let mut groups = 0;
    for group in record.images().iter().flatten() {
        total += group_variance_loss(group, epsilon)?;
        groups += 1;
    }
    Ok(total / groups as f64)
}

/// Differentiable variance loss; each group holds the S attention vectors of
/// one (image, PSM) pair. Gradients flow through the branch sum as well.
pub fn variance_loss_var<T: Scalar>(tape: &mut Tape<T>, groups: &[Vec<Var>], epsilon: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for group in groups {
        let s = group.len();
        if s < 2 {
            return Err(Error::shape("variance_loss", "need at least two branches"));
        }
        let mut sum = group[0];
        for &v in &group[1..] {
            sum = tape.add(sum, v)?;
        }
        for &v in group {
            let rest = tape.sub(sum, v)?;
            let others = tape.scale(rest, T::of(1.0 / (s - 1) as f64));
            let num = tape.dot(v, others)?;
            let nv = tape.norm(v);
            let no = tape.norm(others);
            let prod = tape.mul(nv, no)?;
            let den = tape.max_const(prod, T::of(epsilon));
            terms.push(tape.div(num, den)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::shape("variance_loss", "no groups"));
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, T::of(1.0 / n as f64)))
}

/// (1/N) Σₙ ‖predₙ − gtₙ‖², a per-image sum of squares (not a pixel mean).
pub fn euclidean_loss<T: Scalar>(pred: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(
            "euclidean_loss",
            format!("{} predictions for {} targets", pred.len(), gt.len()),
        ));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "euclidean_loss",
                format!("{:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        total += p
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

pub fn euclidean_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: &[Var], gt: &[Var]) -> Result<Var> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(
            "euclidean_loss",
            format!("{} predictions for {} targets", pred.len(), gt.len()),
        ));
    }
    let mut total = None;
    for (&p, &g) in pred.iter().zip(gt) {
        let d = tape.sub(p, g)?;
        let sq = tape.dot(d, d)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    Ok(tape.scale(total.unwrap(), T::of(1.0 / pred.len() as f64)))
}

/// L = L_E + λ·L_M.
pub fn total_loss(l_e: f64, l_m: f64, lambda: f64) -> f64 {
    l_e + lambda * l_m
}

pub fn total_loss_var<T: Scalar>(tape: &mut Tape<T>, l_e: Var, l_m: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(l_m, T::of(lambda));
    tape.add(l_e, weighted)
}
