//! Intervention machinery: projected neural sites, the neural swap
//! operator, calibrated soft-handle application, and learned-rotation
//! subspace interventions trained against abstract counterfactual targets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, PatchPlan, PatchRule};
use crate::error::{Error, Result};
use crate::numerics::adam::AdamState;
use crate::numerics::matrix::{dot, Matrix};
use crate::numerics::pca::Pca;
use crate::numerics::rng::{standard_normal, SeedStream};
use crate::numerics::tape::{skew_param_count, Tape};

const ORTHO_TOL: f64 = 1e-8;
const DAS_ORTHO_TOL: f64 = 1e-6;
pub const DAS_DEFAULT_LR: f64 = 1e-2;
pub const DAS_DEFAULT_MAX_EPOCHS: usize = 100;
const DAS_PATIENCE: usize = 10;
const DAS_BATCH: usize = 256;

// ---------------------------------------------------------------------------
// Sites
// ---------------------------------------------------------------------------

/// A projected neural site: an activation location plus an orthonormal
/// column frame `w` (d x r) and a centering mean. Site coordinates are
/// h(a) = wᵀ(a − mean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSpec {
    pub location: usize,
    pub w: Matrix,
    pub mean: Vec<f64>,
    pub label: String,
}

impl SiteSpec {
    pub fn new(location: usize, w: Matrix, mean: Vec<f64>, label: String) -> Result<Self> {
        if mean.len() != w.rows {
            return Err(Error::DimensionMismatch(format!(
                "site mean length {} vs activation dim {}",
                mean.len(),
                w.rows
            )));
        }
        if w.orthonormality_defect() > ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "site columns not orthonormal (defect {:.2e})",
                w.orthonormality_defect()
            )));
        }
        Ok(SiteSpec { location, w, mean, label })
    }

    /// Canonical-coordinate site over the listed coordinates (zero mean).
    pub fn canonical(location: usize, d: usize, coords: &[usize], label: String) -> Result<Self> {
        let mut w = Matrix::zeros(d, coords.len());
        for (col, &c) in coords.iter().enumerate() {
            if c >= d {
                return Err(Error::InvalidArgument(format!("coordinate {c} out of range 0..{d}")));
            }
            w.set(c, col, 1.0);
        }
        SiteSpec::new(location, w, vec![0.0; d], label)
    }

    /// Full-vector site: the identity frame (zero mean).
    pub fn full(location: usize, d: usize, label: String) -> Result<Self> {
        let coords: Vec<usize> = (0..d).collect();
        SiteSpec::canonical(location, d, &coords, label)
    }

    /// First `r` principal directions of a fitted PCA, centered at its mean.
    pub fn pca_prefix(location: usize, pca: &Pca, r: usize, label: String) -> Result<Self> {
        let d = pca.rotation.rows;
        if r == 0 || r > pca.rotation.cols {
            return Err(Error::InvalidArgument(format!("PCA prefix size {r} out of range")));
        }
        let mut w = Matrix::zeros(d, r);
        for i in 0..d {
            for j in 0..r {
                w.set(i, j, pca.rotation.get(i, j));
            }
        }
        SiteSpec::new(location, w, pca.mean.clone(), label)
    }

    pub fn rank(&self) -> usize {
        self.w.cols
    }
}

/// h = wᵀ(a − mean).
pub fn site_project(spec: &SiteSpec, a: &[f64]) -> Result<Vec<f64>> {
    if a.len() != spec.w.rows {
        return Err(Error::DimensionMismatch(format!(
            "activation length {} vs site dim {}",
            a.len(),
            spec.w.rows
        )));
    }
    let centered: Vec<f64> = a.iter().zip(&spec.mean).map(|(&x, &m)| x - m).collect();
    spec.w.matvec_t(&centered)
}

/// Replace the site coordinates of the base activation by the source's,
/// leaving the orthogonal complement fixed:
/// a_base + w (h(source) − h(base)).
pub fn neural_swap(spec: &SiteSpec, a_base: &[f64], a_source: &[f64]) -> Result<Vec<f64>> {
    let hb = site_project(spec, a_base)?;
    let hs = site_project(spec, a_source)?;
    let delta: Vec<f64> = hs.iter().zip(&hb).map(|(&s, &b)| s - b).collect();
    let lift = spec.w.matvec(&delta)?;
    Ok(a_base.iter().zip(&lift).map(|(&a, &l)| a + l).collect())
}

// ---------------------------------------------------------------------------
// Soft handles
// ---------------------------------------------------------------------------

/// A calibrated soft intervention handle for one abstract variable: top-K
/// sites with renormalized coupling weights and a global strength lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Handle {
    pub variable: String,
    pub sites: Vec<SiteSpec>,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

impl Handle {
    /// Sites and weights are reordered together by forward-pass location.
    pub fn new(variable: String, sites: Vec<SiteSpec>, weights: Vec<f64>, lambda: f64) -> Result<Self> {
        if sites.is_empty() || sites.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "handle needs matching nonempty sites/weights ({} vs {})",
                sites.len(),
                weights.len()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid lambda {lambda}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(format!("handle weights must sum to 1 (got {total})")));
        }
        let mut idx: Vec<usize> = (0..sites.len()).collect();
        idx.sort_by_key(|&i| sites[i].location);
        let sites_sorted: Vec<SiteSpec> = idx.iter().map(|&i| sites[i].clone()).collect();
        let weights_sorted: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        Ok(Handle { variable, sites: sites_sorted, weights: weights_sorted, lambda })
    }

    /// Locations the handle touches, ascending and deduplicated.
    pub fn locations(&self) -> Vec<usize> {
        let mut locs: Vec<usize> = self.sites.iter().map(|s| s.location).collect();
        locs.dedup();
        locs
    }
}

/// Build the patch plan a handle induces for one source trace.
///
/// At each touched location, in forward-pass order:
///   a <- a_live + lambda * sum_j weight_j * w_j (h_j(source) − h_j(a_live)),
/// where the source-side coordinates come from a clean source forward pass
/// and `a_live` is the activation produced by the already-intervened run.
pub fn handle_plan<'a>(
    handle: &Handle,
    source_trace: &crate::backbones::ActivationTrace,
    num_locations: usize,
) -> Result<PatchPlan<'a>> {
    let mut steps: Vec<(usize, PatchRule<'a>)> = Vec::new();
    for &loc in &handle.locations() {
        if loc >= num_locations {
            return Err(Error::InvalidArgument(format!("handle location {loc} out of range")));
        }
        let members: Vec<usize> =
            (0..handle.sites.len()).filter(|&i| handle.sites[i].location == loc).collect();
        let src_coords: Result<Vec<Vec<f64>>> = members
            .iter()
            .map(|&i| site_project(&handle.sites[i], source_trace.at(loc)))
            .collect();
        let src_coords = src_coords?;
        let lambda = handle.lambda;
        let sites = handle.sites.clone();
        let weights = handle.weights.clone();
        let rule: PatchRule = Box::new(move |a_live: &[f64]| {
            let mut out = a_live.to_vec();
            for (m, hs) in members.iter().zip(&src_coords) {
                let spec = &sites[*m];
                let hb = site_project(spec, a_live).expect("validated site");
                let delta: Vec<f64> = hs.iter().zip(&hb).map(|(&s, &b)| s - b).collect();
                let lift = spec.w.matvec(&delta).expect("validated site");
                let scale = lambda * weights[*m];
                for (o, l) in out.iter_mut().zip(&lift) {
                    *o += scale * l;
                }
            }
            out
        });
        steps.push((loc, rule));
    }
    PatchPlan::new(steps)
}

/// Apply a soft handle to a base/source pair and return the patched logits.
pub fn apply_handle<B: Backbone>(
    model: &B,
    handle: &Handle,
    base: B::Input,
    source: B::Input,
) -> Result<Vec<f64>> {
    let (_, source_trace) = model.forward_with_trace(source);
    let plan = handle_plan(handle, &source_trace, model.num_locations())?;
    Ok(model.forward_with_patches(base, &plan))
}

// ---------------------------------------------------------------------------
// Learned-rotation interventions
// ---------------------------------------------------------------------------

/// Learned orthogonal rotation at a location; intervening swaps the first
/// `k` rotated coordinates from source into base.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DasRotation {
    pub location: usize,
    pub r: Matrix,
    pub k: usize,
    /// Optional fixed rotation applied before `r` (for stacking on PCA).
    pub pre_rotation: Option<Matrix>,
}

impl DasRotation {
    pub fn new(location: usize, r: Matrix, k: usize, pre_rotation: Option<Matrix>) -> Result<Self> {
        let d = r.rows;
        if r.cols != d || k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("invalid rotation shape {}x{} or k={k}", r.rows, r.cols)));
        }
        if r.orthonormality_defect() > DAS_ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthogonal (defect {:.2e})",
                r.orthonormality_defect()
            )));
        }
        Ok(DasRotation { location, r, k, pre_rotation })
    }

    /// The rotation actually applied to activations.
    pub fn effective(&self) -> Result<Matrix> {
        match &self.pre_rotation {
            Some(p) => p.matmul(&self.r),
            None => Ok(self.r.clone()),
        }
    }
}

/// Rotate base and source, replace the first k rotated coordinates of the
/// base by the source's, and rotate back.
pub fn das_intervene(rot: &DasRotation, a_base: &[f64], a_source: &[f64]) -> Result<Vec<f64>> {
    let r = rot.effective()?;
    let d = r.rows;
    if a_base.len() != d || a_source.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "das_intervene dims {} / {} vs {d}",
            a_base.len(),
            a_source.len()
        )));
    }
    let zb = r.matvec_t(a_base)?;
    let zs = r.matvec_t(a_source)?;
    let z: Vec<f64> = (0..d).map(|i| if i < rot.k { zs[i] } else { zb[i] }).collect();
    r.matvec(&z)
}

/// Patch plan swapping the rotation's subspace from a cached source
/// activation into the live base activation.
pub fn das_plan<'a>(rot: &DasRotation, source_activation: &[f64]) -> Result<PatchPlan<'a>> {
    let src = source_activation.to_vec();
    let location = rot.location;
    let rot = rot.clone();
    let rule: PatchRule<'a> =
        Box::new(move |a_live: &[f64]| das_intervene(&rot, a_live, &src).expect("validated rotation"));
    PatchPlan::new(vec![(location, rule)])
}

/// Patched logits for a base/source pair under a learned rotation.
pub fn das_logits<B: Backbone>(
    model: &B,
    rot: &DasRotation,
    base: B::Input,
    source: B::Input,
) -> Result<Vec<f64>> {
    let (_, source_trace) = model.forward_with_trace(source);
    let plan = das_plan(rot, source_trace.at(rot.location))?;
    Ok(model.forward_with_patches(base, &plan))
}

/// Random orthogonal matrix from the QR of a Gaussian matrix (modified
/// Gram-Schmidt, diagonal signs fixed positive for determinism).
pub fn random_orthogonal(rng: &mut impl rand::Rng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| standard_normal(rng)).collect())
        .collect();
    for j in 0..d {
        for i in 0..j {
            let proj = dot(&cols[j], &cols[i]);
            let ci = cols[i].clone();
            for (v, w) in cols[j].iter_mut().zip(&ci) {
                *v -= proj * w;
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt().max(1e-12);
        // Fix the sign so the first entry is nonnegative.
        let sign = if cols[j][0] < 0.0 { -1.0 } else { 1.0 };
        for v in cols[j].iter_mut() {
            *v /= sign * norm;
        }
    }
    let mut m = Matrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// One labeled training pair for rotation learning.
#[derive(Debug, Clone)]
pub struct DasExample<I> {
    pub base: I,
    pub source: I,
    /// Discrete abstract counterfactual output the intervened model must hit.
    pub target: Vec<u8>,
}

/// Train a rotation at `location` with subspace size `k` by minimizing the
/// task loss of the intervened logits against the abstract counterfactual
/// targets. The rotation is parametrized as R0 · Cayley(A) with R0 a fixed
/// random orthogonal initialization, so orthogonality holds by construction
/// throughout training. Early stopping: quit after `DAS_PATIENCE` epochs
/// without improvement in fit accuracy; the best-accuracy parameters win.
pub fn das_train<B: Backbone>(
    model: &B,
    examples: &[DasExample<B::Input>],
    location: usize,
    k: usize,
    seeds: &SeedStream,
    lr: f64,
    max_epochs: usize,
) -> Result<DasRotation> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("das_train needs a nonempty bank".into()));
    }
    let d = model.location_dim(location);
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("subspace size {k} out of 1..={d}")));
    }
    let mut init_rng = seeds.rng(&format!("das-init-loc{location}-k{k}"));
    let r0 = random_orthogonal(&mut init_rng, d);
    if max_epochs == 0 {
        return DasRotation::new(location, r0, k, None);
    }

    // Activations at the trained location are fixed; cache them once.
    let base_acts: Vec<Vec<f64>> =
        examples.iter().map(|e| model.forward_with_trace(e.base).1.activations[location].clone()).collect();
    let src_acts: Vec<Vec<f64>> =
        examples.iter().map(|e| model.forward_with_trace(e.source).1.activations[location].clone()).collect();

    let n_params = skew_param_count(d);
    let mut params = vec![0.0; n_params];
    let mut adam = AdamState::new(n_params, lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = seeds.rng(&format!("das-order-loc{location}-k{k}"));

    let accuracy = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::new(p);
        let r = tape.cayley(0, d, Some(r0.clone()));
        let rot = DasRotation { location, r: tape.value(r).clone(), k, pre_rotation: None };
        let mut correct = 0usize;
        for (e, (ab, asrc)) in examples.iter().zip(base_acts.iter().zip(&src_acts)) {
            let patched = das_intervene(&rot, ab, asrc)?;
            let p2 = patched.clone();
            let rule: PatchRule = Box::new(move |_: &[f64]| p2.clone());
            let plan = PatchPlan::new(vec![(location, rule)])?;
            let logits = model.forward_with_patches(e.base, &plan);
            if model.decide(&logits) == e.target {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    };

    let mut best_params = params.clone();
    let mut best_acc = accuracy(&params)?;
    let mut stale = 0usize;

    for _epoch in 0..max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(DAS_BATCH) {
            let batch = chunk.len();
            let mut base_mat = Matrix::zeros(d, batch);
            let mut src_mat = Matrix::zeros(d, batch);
            let mut bases = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch);
            for (col, &idx) in chunk.iter().enumerate() {
                for row in 0..d {
                    base_mat.set(row, col, base_acts[idx][row]);
                    src_mat.set(row, col, src_acts[idx][row]);
                }
                bases.push(examples[idx].base);
                targets.push(examples[idx].target.clone());
            }
            let mut tape = Tape::new(&params);
            let r = tape.cayley(0, d, Some(r0.clone()));
            let patched = tape.das_patch(r, base_mat, src_mat, k);
            let logits = model.tape_patched_logits(&mut tape, location, patched, &bases);
            let loss = model.tape_loss(&mut tape, logits, &targets);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite rotation loss at location {location}, k={k}"
                )));
            }
            let grads = tape.backward(loss);
            adam.step(&mut params, &grads)?;
        }
        let acc = accuracy(&params)?;
        // Snapshot on ties too: among equally accurate epochs the latest has
        // trained longest and carries the largest margins, which generalizes
        // better off the fit bank. Ties still consume patience so training
        // terminates once accuracy stops improving.
        if acc >= best_acc {
            if acc > best_acc {
                stale = 0;
            } else {
                stale += 1;
            }
            best_acc = acc;
            best_params = params.clone();
        } else {
            stale += 1;
        }
        if stale >= DAS_PATIENCE {
            break;
        }
    }

    let mut tape = Tape::new(&best_params);
    let r = tape.cayley(0, d, Some(r0));
    DasRotation::new(location, tape.value(r).clone(), k, None)
}
