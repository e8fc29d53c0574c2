//! Binary-addition drivers: Stage A transport over recurrent timesteps,
//! then Stage B refinement in the canonical basis, a PCA basis, or via a
//! learned rotation, plus the unguided full rotation sweep.

use crate::backbones::{ActivationTrace, Backbone, GruAdder};
use crate::banks::{as_tuples, AdderBanks, AdderPair};
use crate::causal::{adder_abs_swap, AdderInput, AdderVar, ADDER_TARGET_VARS};
use crate::error::{Error, Result};
use crate::interventions::{
    das_plan, das_train, handle_plan, DasExample, DasRotation, Handle, SiteSpec,
};
use crate::numerics::matrix::Matrix;
use crate::numerics::pca::pca_fit;
use crate::numerics::rng::SeedStream;
use crate::pipeline::{
    interchange_accuracy, lambda_key, runtime_scope, Best, ExperimentResult, SelectedSetting,
    VariableResult,
};
use crate::signatures::{
    adder_abstract_signature, build_measures, neural_signature, Featurizer, SignatureSet,
};
use crate::transport::{sinkhorn_eot, topk_renormalize, Coupling, DEFAULT_MAX_ITERS, DEFAULT_TOL};

pub const ADDITION_DEFAULT_EPS: f64 = 1.0;
const TIMESTEPS: usize = 4;
const TOPK_GRID: [usize; 3] = [1, 2, 4];
const LAMBDA_GRID: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

fn carry_name(var: AdderVar) -> String {
    format!("C{}", var.carry_index())
}

fn targets_for(pairs: &[(AdderInput, AdderInput)], var: AdderVar) -> Vec<Vec<u8>> {
    pairs.iter().map(|&(b, s)| adder_abs_swap(b, s, var).to_vec()).collect()
}

fn cache_source_traces(model: &GruAdder, pairs: &[(AdderInput, AdderInput)]) -> Vec<ActivationTrace> {
    pairs.iter().map(|&(_, s)| model.forward_with_trace(s).1).collect()
}

fn handle_accuracy(
    model: &GruAdder,
    handle: &Handle,
    pairs: &[(AdderInput, AdderInput)],
    targets: &[Vec<u8>],
    source_traces: &[ActivationTrace],
) -> Result<f64> {
    interchange_accuracy(model, pairs, targets, |idx, base, _| {
        let plan = handle_plan(handle, &source_traces[idx], model.num_locations())?;
        Ok(model.forward_with_patches(base, &plan))
    })
}

struct EvalBank {
    pairs: Vec<(AdderInput, AdderInput)>,
    targets: Vec<Vec<u8>>,
    source_traces: Vec<ActivationTrace>,
}

impl EvalBank {
    fn build(model: &GruAdder, pairs: &[&AdderPair], var: AdderVar) -> Self {
        let tuples: Vec<(AdderInput, AdderInput)> = pairs.iter().map(|p| (p.base, p.source)).collect();
        let targets = targets_for(&tuples, var);
        let source_traces = cache_source_traces(model, &tuples);
        EvalBank { pairs: tuples, targets, source_traces }
    }
}

/// Shared per-variable calibration data: the full calibration bank with
/// targets and cached source traces.
struct CalBank {
    pairs: Vec<(AdderInput, AdderInput)>,
    targets: Vec<Vec<Vec<u8>>>,
    source_traces: Vec<ActivationTrace>,
}

impl CalBank {
    fn build(model: &GruAdder, banks: &AdderBanks) -> Self {
        let pairs = as_tuples(&banks.cal);
        let targets = ADDER_TARGET_VARS.iter().map(|&v| targets_for(&pairs, v)).collect();
        let source_traces = cache_source_traces(model, &pairs);
        CalBank { pairs, targets, source_traces }
    }
}

/// Subspace sizes {1, 2, 4, ..., d}.
fn subspace_grid(d: usize) -> Vec<usize> {
    let mut ks = vec![1];
    while *ks.last().unwrap() < d {
        ks.push((ks.last().unwrap() * 2).min(d));
    }
    ks
}

fn stage_a_signature_set(model: &GruAdder, fit: &[(AdderInput, AdderInput)]) -> Result<SignatureSet> {
    let sites: Vec<SiteSpec> = (0..TIMESTEPS)
        .map(|t| SiteSpec::full(t, model.d, format!("h{t}")))
        .collect::<Result<Vec<_>>>()?;
    signature_set(model, fit, &sites)
}

fn signature_set(
    model: &GruAdder,
    fit: &[(AdderInput, AdderInput)],
    sites: &[SiteSpec],
) -> Result<SignatureSet> {
    let abstract_rows = ADDER_TARGET_VARS
        .iter()
        .map(|&v| adder_abstract_signature(v, fit))
        .collect::<Result<Vec<_>>>()?;
    let neural_rows = sites
        .iter()
        .map(|s| neural_signature(model, s, fit, Featurizer::SigmoidBits))
        .collect::<Result<Vec<_>>>()?;
    SignatureSet::new(abstract_rows, neural_rows, Featurizer::SigmoidBits, true)
}

fn fit_coupling(set: &SignatureSet, eps: f64) -> Result<Coupling> {
    let (mu, nu) = build_measures(set)?;
    sinkhorn_eot(&mu, &nu, eps, DEFAULT_MAX_ITERS, DEFAULT_TOL)
}

pub struct StageAOutput {
    pub coupling: Coupling,
    /// Selected timestep per carry, in C1, C2, C3 order.
    pub timesteps: [usize; 3],
    pub result: ExperimentResult,
}

/// Stage A: one entropic coupling between the three carries and the four
/// recurrent timesteps (full-vector sites); each carry keeps its top
/// timestep and is evaluated there with a hard full-state swap.
pub fn run_addition_plot(model: &GruAdder, banks: &AdderBanks, eps: f64) -> Result<StageAOutput> {
    let (out, secs) = runtime_scope(|| -> Result<(Coupling, [usize; 3], Vec<VariableResult>)> {
        let fit = as_tuples(&banks.fit);
        let set = stage_a_signature_set(model, &fit)?;
        let coupling = fit_coupling(&set, eps)?;

        let mut timesteps = [0usize; 3];
        let mut per_variable = Vec::with_capacity(3);
        for (vi, &var) in ADDER_TARGET_VARS.iter().enumerate() {
            let row = coupling.pi.row(vi);
            let mut top = 0;
            for t in 1..TIMESTEPS {
                if row[t] > row[top] {
                    top = t;
                }
            }
            timesteps[vi] = top;

            let handle = Handle::new(
                carry_name(var),
                vec![SiteSpec::full(top, model.d, format!("h{top}"))?],
                vec![1.0],
                1.0,
            )?;
            let (sens_pairs, inv_pairs) = banks.test_partition(var);
            let sens = EvalBank::build(model, &sens_pairs, var);
            let inv = EvalBank::build(model, &inv_pairs, var);
            let sensitivity =
                handle_accuracy(model, &handle, &sens.pairs, &sens.targets, &sens.source_traces)?;
            let invariance =
                handle_accuracy(model, &handle, &inv.pairs, &inv.targets, &inv.source_traces)?;
            per_variable.push(VariableResult {
                variable: carry_name(var),
                sensitivity,
                invariance,
                selected: SelectedSetting { location: Some(top), ..Default::default() },
            });
        }
        Ok((coupling, timesteps, per_variable))
    });
    let (coupling, timesteps, per_variable) = out?;
    let result = ExperimentResult::from_variables("plot", per_variable, secs);
    Ok(StageAOutput { coupling, timesteps, result })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdditionVariant {
    Nat,
    Pca,
    PlotDas,
    FullDas,
}

impl AdditionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AdditionVariant::Nat => "plot-nat",
            AdditionVariant::Pca => "plot-pca",
            AdditionVariant::PlotDas => "plot-das",
            AdditionVariant::FullDas => "full-das",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nat" | "plot-nat" => Ok(AdditionVariant::Nat),
            "pca" | "plot-pca" => Ok(AdditionVariant::Pca),
            "das" | "plot-das" => Ok(AdditionVariant::PlotDas),
            "full-das" => Ok(AdditionVariant::FullDas),
            other => Err(Error::InvalidArgument(format!("unknown addition method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdditionConfig {
    pub eps: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub seeds: SeedStream,
}

impl AdditionConfig {
    pub fn new(seeds: SeedStream) -> Self {
        AdditionConfig {
            eps: ADDITION_DEFAULT_EPS,
            lr: crate::interventions::DAS_DEFAULT_LR,
            max_epochs: crate::interventions::DAS_DEFAULT_MAX_EPOCHS,
            seeds,
        }
    }
}

pub struct AdditionOutput {
    pub result: ExperimentResult,
    pub stage_a: Option<StageAOutput>,
}

/// One calibrated Stage-B handle candidate for a soft-handle variant.
struct HandleCandidate {
    handle: Handle,
    top_k: usize,
    lambda: f64,
    resolution: Option<usize>,
    pca_prefix: Option<usize>,
}

/// Sweep (top-K, lambda) for one coupling row over a site family, offering
/// every candidate to the per-variable selector.
#[allow(clippy::too_many_arguments)]
fn offer_handle_grid(
    model: &GruAdder,
    coupling: &Coupling,
    sites: &[SiteSpec],
    vi: usize,
    var: AdderVar,
    cal: &CalBank,
    resolution: Option<usize>,
    best: &mut Best<HandleCandidate>,
) -> Result<()> {
    for &k in &TOPK_GRID {
        if k > sites.len() {
            continue;
        }
        let hw = topk_renormalize(coupling, vi, k)?;
        let picked: Vec<SiteSpec> = hw.site_indices.iter().map(|&j| sites[j].clone()).collect();
        // For PCA prefixes, report the heaviest selected prefix size.
        let pca_prefix = picked
            .iter()
            .zip(&hw.weights)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(s, _)| s.rank());
        for &lam in &LAMBDA_GRID {
            let handle = Handle::new(carry_name(var), picked.clone(), hw.weights.clone(), lam)?;
            let acc = handle_accuracy(model, &handle, &cal.pairs, &cal.targets[vi], &cal.source_traces)?;
            let key = vec![k as u64, lambda_key(lam), resolution.unwrap_or(0) as u64];
            best.offer(
                acc,
                key,
                HandleCandidate { handle, top_k: k, lambda: lam, resolution, pca_prefix },
            );
        }
    }
    Ok(())
}

fn evaluate_handle_variable(
    model: &GruAdder,
    banks: &AdderBanks,
    var: AdderVar,
    cal_accuracy: f64,
    cand: &HandleCandidate,
    location: usize,
) -> Result<VariableResult> {
    let (sens_pairs, inv_pairs) = banks.test_partition(var);
    let sens = EvalBank::build(model, &sens_pairs, var);
    let inv = EvalBank::build(model, &inv_pairs, var);
    let sensitivity =
        handle_accuracy(model, &cand.handle, &sens.pairs, &sens.targets, &sens.source_traces)?;
    let invariance =
        handle_accuracy(model, &cand.handle, &inv.pairs, &inv.targets, &inv.source_traces)?;
    Ok(VariableResult {
        variable: carry_name(var),
        sensitivity,
        invariance,
        selected: SelectedSetting {
            location: Some(location),
            top_k: Some(cand.top_k),
            lambda: Some(cand.lambda),
            resolution: cand.resolution,
            pca_prefix: cand.pca_prefix,
            subspace: None,
            cal_accuracy,
        },
    })
}

/// Train rotations over (location, k) cells for one carry and keep the best
/// by calibration accuracy.
#[allow(clippy::too_many_arguments)]
fn das_sweep(
    model: &GruAdder,
    examples: &[DasExample<AdderInput>],
    locations: &[usize],
    ks: &[usize],
    cal: &CalBank,
    vi: usize,
    seeds: &SeedStream,
    lr: f64,
    max_epochs: usize,
) -> Result<(f64, DasRotation)> {
    let mut best = Best::new();
    for &location in locations {
        for &k in ks {
            let rot = das_train(model, examples, location, k, seeds, lr, max_epochs)?;
            let acc = interchange_accuracy(model, &cal.pairs, &cal.targets[vi], |idx, base, _| {
                let plan = das_plan(&rot, cal.source_traces[idx].at(location))?;
                Ok(model.forward_with_patches(base, &plan))
            })?;
            best.offer(acc, vec![location as u64, k as u64], rot);
        }
    }
    best.take().ok_or_else(|| Error::Training("empty rotation sweep".into()))
}

fn evaluate_rotation_variable(
    model: &GruAdder,
    banks: &AdderBanks,
    var: AdderVar,
    cal_accuracy: f64,
    rot: &DasRotation,
) -> Result<VariableResult> {
    let (sens_pairs, inv_pairs) = banks.test_partition(var);
    let sens = EvalBank::build(model, &sens_pairs, var);
    let inv = EvalBank::build(model, &inv_pairs, var);
    let eval = |bank: &EvalBank| -> Result<f64> {
        interchange_accuracy(model, &bank.pairs, &bank.targets, |idx, base, _| {
            let plan = das_plan(rot, bank.source_traces[idx].at(rot.location))?;
            Ok(model.forward_with_patches(base, &plan))
        })
    };
    Ok(VariableResult {
        variable: carry_name(var),
        sensitivity: eval(&sens)?,
        invariance: eval(&inv)?,
        selected: SelectedSetting {
            location: Some(rot.location),
            subspace: Some(rot.k),
            cal_accuracy,
            ..Default::default()
        },
    })
}

/// Run one Stage-B variant end to end (Stage A included in the timed scope
/// for the guided variants).
pub fn run_addition_variant(
    model: &GruAdder,
    banks: &AdderBanks,
    variant: AdditionVariant,
    cfg: &AdditionConfig,
) -> Result<AdditionOutput> {
    let (out, secs) = runtime_scope(|| -> Result<(Option<StageAOutput>, Vec<VariableResult>)> {
        let fit = as_tuples(&banks.fit);
        let cal = CalBank::build(model, banks);
        let d = model.d;

        match variant {
            AdditionVariant::Nat => {
                let stage_a = run_addition_plot(model, banks, cfg.eps)?;
                let mut bests: Vec<Best<HandleCandidate>> =
                    (0..3).map(|_| Best::new()).collect();
                let mut locations: Vec<usize> = stage_a.timesteps.to_vec();
                locations.dedup();
                for &loc in &locations {
                    for r in [1usize, 2] {
                        let sites: Vec<SiteSpec> = (0..d / r)
                            .map(|g| {
                                let coords: Vec<usize> = (g * r..(g + 1) * r).collect();
                                SiteSpec::canonical(loc, d, &coords, format!("h{loc}g{g}r{r}"))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let set = signature_set(model, &fit, &sites)?;
                        let coupling = fit_coupling(&set, cfg.eps)?;
                        for (vi, _) in ADDER_TARGET_VARS.iter().enumerate() {
                            if stage_a.timesteps[vi] != loc {
                                continue;
                            }
                            offer_handle_grid(
                                model,
                                &coupling,
                                &sites,
                                vi,
                                ADDER_TARGET_VARS[vi],
                                &cal,
                                Some(r),
                                &mut bests[vi],
                            )?;
                        }
                    }
                }
                let mut per_variable = Vec::with_capacity(3);
                for (vi, best) in bests.into_iter().enumerate() {
                    let var = ADDER_TARGET_VARS[vi];
                    let (cal_acc, cand) =
                        best.take().ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
                    per_variable.push(evaluate_handle_variable(
                        model,
                        banks,
                        var,
                        cal_acc,
                        &cand,
                        stage_a.timesteps[vi],
                    )?);
                }
                Ok((Some(stage_a), per_variable))
            }
            AdditionVariant::Pca => {
                let stage_a = run_addition_plot(model, banks, cfg.eps)?;
                let mut bests: Vec<Best<HandleCandidate>> =
                    (0..3).map(|_| Best::new()).collect();
                let mut locations: Vec<usize> = stage_a.timesteps.to_vec();
                locations.dedup();
                for &loc in &locations {
                    let states: Vec<Vec<f64>> = fit
                        .iter()
                        .map(|&(base, _)| model.forward_with_trace(base).1.at(loc).to_vec())
                        .collect();
                    let pca = pca_fit(&Matrix::from_rows(&states))?;
                    let prefixes = subspace_grid(d);
                    let sites: Vec<SiteSpec> = prefixes
                        .iter()
                        .map(|&r| SiteSpec::pca_prefix(loc, &pca, r, format!("h{loc}pc{r}")))
                        .collect::<Result<Vec<_>>>()?;
                    let set = signature_set(model, &fit, &sites)?;
                    let coupling = fit_coupling(&set, cfg.eps)?;
                    for (vi, &var) in ADDER_TARGET_VARS.iter().enumerate() {
                        if stage_a.timesteps[vi] != loc {
                            continue;
                        }
                        offer_handle_grid(model, &coupling, &sites, vi, var, &cal, None, &mut bests[vi])?;
                    }
                }
                let mut per_variable = Vec::with_capacity(3);
                for (vi, best) in bests.into_iter().enumerate() {
                    let var = ADDER_TARGET_VARS[vi];
                    let (cal_acc, cand) =
                        best.take().ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
                    per_variable.push(evaluate_handle_variable(
                        model,
                        banks,
                        var,
                        cal_acc,
                        &cand,
                        stage_a.timesteps[vi],
                    )?);
                }
                Ok((Some(stage_a), per_variable))
            }
            AdditionVariant::PlotDas | AdditionVariant::FullDas => {
                let stage_a = if variant == AdditionVariant::PlotDas {
                    Some(run_addition_plot(model, banks, cfg.eps)?)
                } else {
                    None
                };
                let ks = subspace_grid(d);
                let mut per_variable = Vec::with_capacity(3);
                for (vi, &var) in ADDER_TARGET_VARS.iter().enumerate() {
                    let targets = targets_for(&fit, var);
                    let examples: Vec<DasExample<AdderInput>> = fit
                        .iter()
                        .zip(&targets)
                        .map(|(&(base, source), t)| DasExample { base, source, target: t.clone() })
                        .collect();
                    let locations: Vec<usize> = match &stage_a {
                        Some(sa) => vec![sa.timesteps[vi]],
                        None => (0..TIMESTEPS).collect(),
                    };
                    let var_seeds =
                        cfg.seeds.child(&format!("{}-{}", variant.name(), carry_name(var)));
                    let (cal_acc, rot) = das_sweep(
                        model,
                        &examples,
                        &locations,
                        &ks,
                        &cal,
                        vi,
                        &var_seeds,
                        cfg.lr,
                        cfg.max_epochs,
                    )?;
                    per_variable.push(evaluate_rotation_variable(model, banks, var, cal_acc, &rot)?);
                }
                Ok((stage_a, per_variable))
            }
        }
    });
    let (stage_a, per_variable) = out?;
    let result = ExperimentResult::from_variables(variant.name(), per_variable, secs);
    Ok(AdditionOutput { result, stage_a })
}
