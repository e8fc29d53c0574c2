//! Trainable neural backbones with activation capture and in-place
//! activation patching at named sites.

pub mod gru;
pub mod mlp;

pub use gru::{train_gru_adder, GruAdder};
pub use mlp::{train_heq_mlp, HeqMlp};

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};

/// Activations recorded at every site location during one forward pass,
/// indexed by location in forward-pass order.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn at(&self, location: usize) -> &[f64] {
        &self.activations[location]
    }
}

/// A replacement rule: maps the live activation at a location to a new one.
pub type PatchRule<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// Ordered patch plan; locations strictly increasing in forward-pass order.
pub struct PatchPlan<'a> {
    steps: Vec<(usize, PatchRule<'a>)>,
}

impl<'a> PatchPlan<'a> {
    pub fn new(steps: Vec<(usize, PatchRule<'a>)>) -> Result<Self> {
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(
                    "patch plan locations must be strictly increasing".into(),
                ));
            }
        }
        Ok(PatchPlan { steps })
    }

    pub fn empty() -> Self {
        PatchPlan { steps: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Apply the rule for `location`, if any, to the live activation.
    pub fn apply(&self, location: usize, activation: &mut Vec<f64>) {
        for (loc, rule) in &self.steps {
            if *loc == location {
                *activation = rule(activation);
            }
        }
    }
}

/// Common surface of the trainable backbones: plain/traced/patched forward
/// passes, output decisions, and tape construction for rotation training.
pub trait Backbone {
    type Input: Copy + Send + Sync;

    /// Number of patchable locations (layers or timesteps).
    fn num_locations(&self) -> usize;
    /// Activation dimension at a location.
    fn location_dim(&self, location: usize) -> usize;

    fn forward(&self, input: Self::Input) -> Vec<f64>;
    fn forward_with_trace(&self, input: Self::Input) -> (Vec<f64>, ActivationTrace);
    fn forward_with_patches(&self, input: Self::Input, plan: &PatchPlan) -> Vec<f64>;

    /// Discrete output read off the logits (argmax class or thresholded bits).
    fn decide(&self, logits: &[f64]) -> Vec<u8>;

    /// Continue the forward pass on the tape from a patched activation at
    /// `location`, with model weights held constant. `bases` supplies the
    /// batch of base inputs (one per column of `patched`). Returns the
    /// logits node.
    fn tape_patched_logits(
        &self,
        tape: &mut Tape,
        location: usize,
        patched: NodeId,
        bases: &[Self::Input],
    ) -> NodeId;

    /// Task loss between batched logits and discrete target outputs.
    fn tape_loss(&self, tape: &mut Tape, logits: NodeId, targets: &[Vec<u8>]) -> NodeId;
}
