//! Output effect signatures: for each abstract variable and each candidate
//! neural site, the stacked per-pair change in featurized output caused by
//! the corresponding interchange intervention over the fit bank. The
//! resulting rows define the two discrete measures fed to transport.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, PatchPlan, PatchRule};
use crate::causal::{
    adder_abs_swap, adder_forward, heq_abs_swap, heq_forward, AdderInput, AdderVar, HeqInput, HeqVar,
};
use crate::error::{Error, Result};
use crate::interventions::{neural_swap, SiteSpec};
use crate::numerics::matrix::{l2_norm, sigmoid, softmax, Matrix};
use crate::transport::DiscreteMeasure;

/// Deterministic map from model outputs (or abstract outputs embedded in the
/// same space) to feature vectors in R^p.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Featurizer {
    /// Softmax over class logits (p = number of classes).
    Softmax,
    /// Elementwise sigmoid over independent bit logits (p = number of bits).
    SigmoidBits,
}

impl Featurizer {
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        match self {
            Featurizer::Softmax => softmax(logits),
            Featurizer::SigmoidBits => logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

/// One pooled effect signature: stacked per-pair feature deltas, in fit-bank
/// order, of length T_ft * p.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureRow {
    pub owner: String,
    pub values: Vec<f64>,
}

impl SignatureRow {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Abstract rows u_1..u_m and neural rows v_1..v_n over the same fit bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureSet {
    pub abstract_rows: Vec<SignatureRow>,
    pub neural_rows: Vec<SignatureRow>,
    pub featurizer: Featurizer,
    /// When set, rows are L2-normalized before entering the measures
    /// (zero rows stay zero).
    pub normalize: bool,
}

impl SignatureSet {
    pub fn new(
        abstract_rows: Vec<SignatureRow>,
        neural_rows: Vec<SignatureRow>,
        featurizer: Featurizer,
        normalize: bool,
    ) -> Result<Self> {
        if abstract_rows.is_empty() || neural_rows.is_empty() {
            return Err(Error::InvalidArgument("signature set needs rows on both sides".into()));
        }
        let len = abstract_rows[0].values.len();
        for row in abstract_rows.iter().chain(&neural_rows) {
            if row.values.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "signature row '{}' length {} vs {}",
                    row.owner,
                    row.values.len(),
                    len
                )));
            }
            if !row.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite signature row '{}'", row.owner)));
            }
        }
        Ok(SignatureSet { abstract_rows, neural_rows, featurizer, normalize })
    }
}

fn maybe_normalize(values: &[f64], normalize: bool) -> Vec<f64> {
    if !normalize {
        return values.to_vec();
    }
    let norm = l2_norm(values);
    if norm == 0.0 {
        values.to_vec()
    } else {
        values.iter().map(|v| v / norm).collect()
    }
}

/// Uniform empirical measures over the (optionally normalized) rows:
/// mu over the m abstract rows, nu over the n neural rows.
pub fn build_measures(set: &SignatureSet) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let abs: Vec<Vec<f64>> =
        set.abstract_rows.iter().map(|r| maybe_normalize(&r.values, set.normalize)).collect();
    let neu: Vec<Vec<f64>> =
        set.neural_rows.iter().map(|r| maybe_normalize(&r.values, set.normalize)).collect();
    Ok((
        DiscreteMeasure::uniform(Matrix::from_rows(&abs)),
        DiscreteMeasure::uniform(Matrix::from_rows(&neu)),
    ))
}

/// One-hot embedding of the binary equality output, matching softmax space.
fn heq_onehot(y: bool) -> Vec<f64> {
    if y {
        vec![0.0, 1.0]
    } else {
        vec![1.0, 0.0]
    }
}

/// Abstract effect signature of an equality variable: per pair, the change
/// in one-hot output caused by forcing the variable to its source value.
pub fn heq_abstract_signature(var: HeqVar, pairs: &[(HeqInput, HeqInput)]) -> Result<SignatureRow> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty fit bank".into()));
    }
    let mut values = Vec::with_capacity(pairs.len() * 2);
    for &(base, source) in pairs {
        let factual = heq_onehot(heq_forward(base).y);
        let swapped = heq_onehot(heq_abs_swap(base, source, var));
        values.extend(swapped.iter().zip(&factual).map(|(s, f)| s - f));
    }
    let owner = match var {
        HeqVar::ZWx => "z_WX",
        HeqVar::ZYz => "z_YZ",
    };
    Ok(SignatureRow { owner: owner.into(), values })
}

/// Abstract effect signature of an adder carry: per pair, the change in the
/// 5 raw output bits caused by forcing the carry to its source value.
pub fn adder_abstract_signature(var: AdderVar, pairs: &[(AdderInput, AdderInput)]) -> Result<SignatureRow> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty fit bank".into()));
    }
    let mut values = Vec::with_capacity(pairs.len() * 5);
    for &(base, source) in pairs {
        let factual = adder_forward(base).output();
        let swapped = adder_abs_swap(base, source, var);
        values.extend(swapped.iter().zip(&factual).map(|(&s, &f)| s as f64 - f as f64));
    }
    Ok(SignatureRow { owner: format!("C{}", var.carry_index()), values })
}

/// Neural effect signature of a site: per pair, the change in featurized
/// logits caused by the hard neural swap at the site (source coordinates
/// from a clean source forward pass).
pub fn neural_signature<B: Backbone>(
    model: &B,
    spec: &SiteSpec,
    pairs: &[(B::Input, B::Input)],
    featurizer: Featurizer,
) -> Result<SignatureRow> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty fit bank".into()));
    }
    if spec.location >= model.num_locations() {
        return Err(Error::InvalidArgument(format!("site location {} out of range", spec.location)));
    }
    let mut values = Vec::new();
    for &(base, source) in pairs {
        let factual = featurizer.apply(&model.forward(base));
        let (_, src_trace) = model.forward_with_trace(source);
        let src = src_trace.at(spec.location).to_vec();
        let spec_cl = spec.clone();
        let rule: PatchRule =
            Box::new(move |a_live: &[f64]| neural_swap(&spec_cl, a_live, &src).expect("validated site"));
        let plan = PatchPlan::new(vec![(spec.location, rule)])?;
        let swapped = featurizer.apply(&model.forward_with_patches(base, &plan));
        values.extend(swapped.iter().zip(&factual).map(|(s, f)| s - f));
    }
    Ok(SignatureRow { owner: spec.label.clone(), values })
}
