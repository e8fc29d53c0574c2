//! The ripple-carry-addition backbone: a single GRU cell scanned over the
//! four bit positions (least-significant first), with a shared per-timestep
//! sum-bit readout and a final carry readout.
//!
//! Gate equations follow the standard GRU cell with separate input and
//! hidden biases:
//!   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//!   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//!   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//!   h' = (1 - z) * n + z * h

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{ActivationTrace, Backbone, PatchPlan};
use crate::causal::{adder_forward, AdderInput};
use crate::error::{Error, Result};
use crate::numerics::adam::AdamState;
use crate::numerics::matrix::{dot, sigmoid, Matrix};
use crate::numerics::rng::SeedStream;
use crate::numerics::tape::{NodeId, Tape};

const TIMESTEPS: usize = 4;
const BATCH: usize = 64;
const LR: f64 = 1e-2;
const MIN_EPOCHS: usize = 50;
const MAX_EPOCHS: usize = 1000;

/// Trainable parameter count for hidden size `d`.
pub fn gru_param_count(d: usize) -> usize {
    3 * d * d + 14 * d + 2
}

/// Offsets into the flat parameter vector, per-gate contiguous.
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    w_ir: usize,
    w_iz: usize,
    w_in: usize,
    w_hr: usize,
    w_hz: usize,
    w_hn: usize,
    b_ir: usize,
    b_iz: usize,
    b_in: usize,
    b_hr: usize,
    b_hz: usize,
    b_hn: usize,
    w_s: usize,
    b_s: usize,
    w_c: usize,
    b_c: usize,
}

impl Layout {
    fn new(d: usize) -> Self {
        let w_ir = 0;
        let w_iz = w_ir + 2 * d;
        let w_in = w_iz + 2 * d;
        let w_hr = w_in + 2 * d;
        let w_hz = w_hr + d * d;
        let w_hn = w_hz + d * d;
        let b_ir = w_hn + d * d;
        let b_iz = b_ir + d;
        let b_in = b_iz + d;
        let b_hr = b_in + d;
        let b_hz = b_hr + d;
        let b_hn = b_hz + d;
        let w_s = b_hn + d;
        let b_s = w_s + d;
        let w_c = b_s + 1;
        let b_c = w_c + d;
        debug_assert_eq!(b_c + 1, gru_param_count(d));
        Layout { d, w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn, w_s, b_s, w_c, b_c }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruAdder {
    pub d: usize,
    pub params: Vec<f64>,
    pub seed: u64,
    pub train_accuracy: f64,
}

impl GruAdder {
    fn layout(&self) -> Layout {
        Layout::new(self.d)
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.params[off..off + rows * cols].to_vec())
    }

    /// x_t for timestep t: the two operand bits at that position.
    fn input_at(input: AdderInput, t: usize) -> [f64; 2] {
        [input.a[t] as f64, input.b[t] as f64]
    }

    /// One cell step on plain vectors.
    fn cell(&self, x: &[f64; 2], h: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let d = l.d;
        let gate = |w_i: usize, b_i: usize, w_h: usize, b_h: usize, i: usize| {
            dot(&self.params[w_i + 2 * i..w_i + 2 * i + 2], x)
                + self.params[b_i + i]
                + dot(&self.params[w_h + d * i..w_h + d * (i + 1)], h)
                + self.params[b_h + i]
        };
        let mut out = vec![0.0; d];
        for i in 0..d {
            let r = sigmoid(gate(l.w_ir, l.b_ir, l.w_hr, l.b_hr, i));
            let z = sigmoid(gate(l.w_iz, l.b_iz, l.w_hz, l.b_hz, i));
            let hn = dot(&self.params[l.w_hn + d * i..l.w_hn + d * (i + 1)], h) + self.params[l.b_hn + i];
            let n = (dot(&self.params[l.w_in + 2 * i..l.w_in + 2 * i + 2], x)
                + self.params[l.b_in + i]
                + r * hn)
                .tanh();
            out[i] = (1.0 - z) * n + z * h[i];
        }
        out
    }

    fn sum_logit(&self, h: &[f64]) -> f64 {
        let l = self.layout();
        dot(self.slice(l.w_s, l.d), h) + self.params[l.b_s]
    }

    fn carry_logit(&self, h: &[f64]) -> f64 {
        let l = self.layout();
        dot(self.slice(l.w_c, l.d), h) + self.params[l.b_c]
    }

    /// Forward pass; logits ordered (C4, S3, S2, S1, S0) to match the
    /// abstract output. Optionally records the hidden state at each
    /// timestep. The patch plan is applied after the timestep's sum
    /// readout: the sum bit S_t is emitted from the freshly computed state,
    /// and a patch at location t rewrites only what is carried forward
    /// (later timesteps and the final carry readout), mirroring how the
    /// carry into position t+1 influences the computation.
    fn run(&self, input: AdderInput, plan: &PatchPlan, trace: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let mut h = vec![0.0; self.d];
        let mut s_logits = [0.0; TIMESTEPS];
        let mut recorded = Vec::with_capacity(TIMESTEPS);
        for t in 0..TIMESTEPS {
            h = self.cell(&Self::input_at(input, t), &h);
            recorded.push(h.clone());
            s_logits[t] = self.sum_logit(&h);
            plan.apply(t, &mut h);
        }
        if let Some(tr) = trace {
            *tr = recorded;
        }
        vec![self.carry_logit(&h), s_logits[3], s_logits[2], s_logits[1], s_logits[0]]
    }

    /// Tape version of one cell step with model weights held constant.
    /// `x_pre_*` carry the per-column input-side contributions (W_i x + b_i,
    /// plus the hidden bias where it adds outside the reset gate).
    fn tape_cell(&self, tape: &mut Tape, h: NodeId, inputs: &[AdderInput], t: usize) -> NodeId {
        let l = self.layout();
        let d = l.d;
        let batch = inputs.len();
        let pre = |w_i: usize, b_i: usize, b_h: Option<usize>| {
            let mut m = Matrix::zeros(d, batch);
            for (col, &inp) in inputs.iter().enumerate() {
                let x = Self::input_at(inp, t);
                for i in 0..d {
                    let mut v = dot(&self.params[w_i + 2 * i..w_i + 2 * i + 2], &x) + self.params[b_i + i];
                    if let Some(bh) = b_h {
                        v += self.params[bh + i];
                    }
                    m.set(i, col, v);
                }
            }
            m
        };
        let cr = pre(l.w_ir, l.b_ir, Some(l.b_hr));
        let cz = pre(l.w_iz, l.b_iz, Some(l.b_hz));
        let cn = pre(l.w_in, l.b_in, None);

        let cr = tape.constant(cr);
        let cz = tape.constant(cz);
        let cn = tape.constant(cn);
        let hr = tape.lin_const(self.mat(l.w_hr, d, d), None, h);
        let hz = tape.lin_const(self.mat(l.w_hz, d, d), None, h);
        let hn = tape.lin_const(self.mat(l.w_hn, d, d), Some(self.slice(l.b_hn, d).to_vec()), h);
        let r_pre = tape.add(cr, hr);
        let r = tape.sigmoid_node(r_pre);
        let z_pre = tape.add(cz, hz);
        let z = tape.sigmoid_node(z_pre);
        let rn = tape.mul(r, hn);
        let n_pre = tape.add(cn, rn);
        let n = tape.tanh_node(n_pre);
        // h' = n + z * (h - n)
        let h_minus_n = tape.sub(h, n);
        let zh = tape.mul(z, h_minus_n);
        tape.add(n, zh)
    }

    fn tape_readout(&self, tape: &mut Tape, h: NodeId, w: usize, b: usize) -> NodeId {
        let l = self.layout();
        tape.lin_const(self.mat(w, 1, l.d), Some(vec![self.params[b]]), h)
    }
}

impl Backbone for GruAdder {
    type Input = AdderInput;

    fn num_locations(&self) -> usize {
        TIMESTEPS
    }

    fn location_dim(&self, _location: usize) -> usize {
        self.d
    }

    fn forward(&self, input: AdderInput) -> Vec<f64> {
        self.run(input, &PatchPlan::empty(), None)
    }

    fn forward_with_trace(&self, input: AdderInput) -> (Vec<f64>, ActivationTrace) {
        let mut activations = Vec::new();
        let logits = self.run(input, &PatchPlan::empty(), Some(&mut activations));
        (logits, ActivationTrace { activations })
    }

    fn forward_with_patches(&self, input: AdderInput, plan: &PatchPlan) -> Vec<f64> {
        self.run(input, plan, None)
    }

    fn decide(&self, logits: &[f64]) -> Vec<u8> {
        logits.iter().map(|&z| (z > 0.0) as u8).collect()
    }

    fn tape_patched_logits(
        &self,
        tape: &mut Tape,
        location: usize,
        patched: NodeId,
        bases: &[AdderInput],
    ) -> NodeId {
        let l = self.layout();
        let batch = bases.len();
        // Sum logits at the patch timestep and before come from the factual
        // run: the patch applies after the timestep's sum readout.
        let mut s_nodes: Vec<Option<NodeId>> = vec![None; TIMESTEPS];
        for t in 0..=location {
            let mut row = Matrix::zeros(1, batch);
            for (col, &inp) in bases.iter().enumerate() {
                let mut h = vec![0.0; self.d];
                for step in 0..=t {
                    h = self.cell(&Self::input_at(inp, step), &h);
                }
                row.set(0, col, self.sum_logit(&h));
            }
            s_nodes[t] = Some(tape.constant(row));
        }
        let mut h = patched;
        for t in location + 1..TIMESTEPS {
            h = self.tape_cell(tape, h, bases, t);
            s_nodes[t] = Some(self.tape_readout(tape, h, l.w_s, l.b_s));
        }
        let carry = self.tape_readout(tape, h, l.w_c, l.b_c);
        let parts = vec![
            carry,
            s_nodes[3].unwrap(),
            s_nodes[2].unwrap(),
            s_nodes[1].unwrap(),
            s_nodes[0].unwrap(),
        ];
        tape.concat_rows(parts)
    }

    fn tape_loss(&self, tape: &mut Tape, logits: NodeId, targets: &[Vec<u8>]) -> NodeId {
        let mut t = Matrix::zeros(5, targets.len());
        for (col, bits) in targets.iter().enumerate() {
            for (row, &b) in bits.iter().enumerate() {
                t.set(row, col, b as f64);
            }
        }
        tape.bce_with_logits(logits, t)
    }
}

fn target_bits(input: AdderInput) -> [u8; 5] {
    adder_forward(input).output()
}

fn exact_count(model: &GruAdder) -> usize {
    (0..256)
        .filter(|&idx| {
            let input = AdderInput::from_index(idx);
            model.decide(&model.forward(input)) == target_bits(input)
        })
        .count()
}

/// Train the adder GRU on all 256 input pairs: per-bit binary cross-entropy,
/// Adam lr 1e-2, batch 64, shuffled epochs until every pair is decided
/// exactly (checked from epoch 50 on, hard cap 1000 epochs). Errors if the
/// cap is reached without exactness.
pub fn train_gru_adder(seeds: &SeedStream, d: usize) -> Result<GruAdder> {
    if d == 0 {
        return Err(Error::InvalidArgument("hidden size must be positive".into()));
    }
    let n = gru_param_count(d);
    let mut init_rng = seeds.rng("gru-init");
    let bound = 1.0 / (d as f64).sqrt();
    let params: Vec<f64> = (0..n).map(|_| init_rng.gen_range(-bound..bound)).collect();
    let mut model = GruAdder { d, params, seed: seeds.base(), train_accuracy: 0.0 };

    let mut order: Vec<usize> = (0..256).collect();
    let mut shuffle_rng = seeds.rng("gru-train-order");
    let mut adam = AdamState::new(n, LR);
    let layout = Layout::new(d);

    for epoch in 0..MAX_EPOCHS {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(BATCH) {
            let inputs: Vec<AdderInput> = chunk.iter().map(|&i| AdderInput::from_index(i)).collect();
            let (_, grads) = training_loss_grads(d, &layout, &model.params, &inputs);
            adam.step(&mut model.params, &grads)?;
        }
        if epoch + 1 >= MIN_EPOCHS && (epoch + 1) % 5 == 0 && exact_count(&model) == 256 {
            break;
        }
    }
    let correct = exact_count(&model);
    model.train_accuracy = correct as f64 / 256.0;
    if correct < 256 {
        return Err(Error::Training(format!(
            "adder GRU (d={d}) fit {correct}/256 pairs exactly (seed {})",
            seeds.base()
        )));
    }
    Ok(model)
}

/// Per-bit binary cross-entropy training loss and its parameter gradients
/// over one batch, through the full unrolled recurrence.
fn training_loss_grads(
    d: usize,
    layout: &Layout,
    params: &[f64],
    inputs: &[AdderInput],
) -> (f64, Vec<f64>) {
    let batch = inputs.len();
    let mut tape = Tape::new(params);
    let mut h = tape.constant(Matrix::zeros(d, batch));
    let mut s_nodes = Vec::with_capacity(TIMESTEPS);
    for t in 0..TIMESTEPS {
        let mut xm = Matrix::zeros(2, batch);
        for (col, &inp) in inputs.iter().enumerate() {
            let xv = GruAdder::input_at(inp, t);
            xm.set(0, col, xv[0]);
            xm.set(1, col, xv[1]);
        }
        let x = tape.constant(xm);
        let ir = tape.affine(layout.w_ir, d, 2, Some(layout.b_ir), x);
        let hr = tape.affine(layout.w_hr, d, d, Some(layout.b_hr), h);
        let r_pre = tape.add(ir, hr);
        let r = tape.sigmoid_node(r_pre);
        let iz = tape.affine(layout.w_iz, d, 2, Some(layout.b_iz), x);
        let hz = tape.affine(layout.w_hz, d, d, Some(layout.b_hz), h);
        let z_pre = tape.add(iz, hz);
        let z = tape.sigmoid_node(z_pre);
        let inn = tape.affine(layout.w_in, d, 2, Some(layout.b_in), x);
        let hn = tape.affine(layout.w_hn, d, d, Some(layout.b_hn), h);
        let rn = tape.mul(r, hn);
        let n_pre = tape.add(inn, rn);
        let nn = tape.tanh_node(n_pre);
        let h_minus_n = tape.sub(h, nn);
        let zh = tape.mul(z, h_minus_n);
        h = tape.add(nn, zh);
        s_nodes.push(tape.affine(layout.w_s, 1, d, Some(layout.b_s), h));
    }
    let carry = tape.affine(layout.w_c, 1, d, Some(layout.b_c), h);
    let logits = tape.concat_rows(vec![carry, s_nodes[3], s_nodes[2], s_nodes[1], s_nodes[0]]);
    let mut targets = Matrix::zeros(5, batch);
    for (col, &inp) in inputs.iter().enumerate() {
        for (row, &bit) in target_bits(inp).iter().enumerate() {
            targets.set(row, col, bit as f64);
        }
    }
    let loss = tape.bce_with_logits(logits, targets);
    let grads = tape.backward(loss);
    (tape.scalar(loss), grads)
}

/// Worst relative finite-difference error of the training-loss parameter
/// gradients at the model's current parameters.
pub fn loss_grad_error(model: &GruAdder, inputs: &[AdderInput]) -> f64 {
    let layout = Layout::new(model.d);
    crate::numerics::tape::grad_check(
        |p| training_loss_grads(model.d, &layout, p, inputs),
        &model.params,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::grad_check;

    fn tiny_model(d: usize) -> GruAdder {
        let mut rng = SeedStream::new(31).rng("tiny-gru");
        let params = (0..gru_param_count(d)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        GruAdder { d, params, seed: 31, train_accuracy: 0.0 }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(gru_param_count(8), 306);
        assert_eq!(gru_param_count(16), 994);
        let l = Layout::new(16);
        assert_eq!(l.b_c + 1, 994);
    }

    #[test]
    fn trace_has_one_state_per_timestep() {
        let m = tiny_model(6);
        let (logits, trace) = m.forward_with_trace(AdderInput::from_ints(9, 5));
        assert_eq!(logits.len(), 5);
        assert_eq!(trace.activations.len(), 4);
        assert!(trace.activations.iter().all(|h| h.len() == 6));
    }

    #[test]
    fn patched_forward_with_identity_rule_matches_plain() {
        let m = tiny_model(5);
        let input = AdderInput::from_ints(11, 6);
        let plan = PatchPlan::new(vec![
            (1, Box::new(|a: &[f64]| a.to_vec()) as _),
            (3, Box::new(|a: &[f64]| a.to_vec()) as _),
        ])
        .unwrap();
        assert_eq!(m.forward_with_patches(input, &plan), m.forward(input));
    }

    #[test]
    fn patching_last_timestep_only_affects_c4_and_s3() {
        let m = tiny_model(5);
        let input = AdderInput::from_ints(3, 12);
        let plan = PatchPlan::new(vec![(
            3,
            Box::new(|a: &[f64]| a.iter().map(|v| v + 1.0).collect()) as _,
        )])
        .unwrap();
        let factual = m.forward(input);
        let patched = m.forward_with_patches(input, &plan);
        // logits order (C4, S3, S2, S1, S0): only the first two can move.
        assert_eq!(factual[2..], patched[2..]);
        assert_ne!(factual[0], patched[0]);
    }

    #[test]
    fn tape_cell_matches_plain_cell() {
        let m = tiny_model(7);
        let inputs = [AdderInput::from_ints(10, 3), AdderInput::from_ints(7, 7)];
        // Run two plain steps, then compare a third step done on the tape.
        let mut hs = Vec::new();
        for &inp in &inputs {
            let mut h = vec![0.0; 7];
            for t in 0..2 {
                h = m.cell(&GruAdder::input_at(inp, t), &h);
            }
            hs.push(h);
        }
        let mut hmat = Matrix::zeros(7, 2);
        for (col, h) in hs.iter().enumerate() {
            for (row, &v) in h.iter().enumerate() {
                hmat.set(row, col, v);
            }
        }
        let mut tape = Tape::new(&[]);
        let hnode = tape.constant(hmat);
        let next = m.tape_cell(&mut tape, hnode, &inputs, 2);
        for (col, (&inp, h)) in inputs.iter().zip(&hs).enumerate() {
            let expected = m.cell(&GruAdder::input_at(inp, 2), h);
            for (row, &e) in expected.iter().enumerate() {
                assert!((tape.value(next).get(row, col) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_patched_logits_matches_patched_forward() {
        let m = tiny_model(6);
        let bases = [AdderInput::from_ints(4, 9), AdderInput::from_ints(15, 15)];
        for loc in 0..TIMESTEPS {
            let mut patched = Matrix::zeros(6, bases.len());
            let mut expected = Vec::new();
            for (col, &base) in bases.iter().enumerate() {
                let (_, trace) = m.forward_with_trace(base);
                let mut repl = trace.at(loc).to_vec();
                repl[2] -= 0.7;
                for (row, &v) in repl.iter().enumerate() {
                    patched.set(row, col, v);
                }
                let r2 = repl.clone();
                let plan =
                    PatchPlan::new(vec![(loc, Box::new(move |_: &[f64]| r2.clone()) as _)]).unwrap();
                expected.push(m.forward_with_patches(base, &plan));
            }
            let mut tape = Tape::new(&[]);
            let pnode = tape.constant(patched);
            let logits = m.tape_patched_logits(&mut tape, loc, pnode, &bases);
            for (col, exp) in expected.iter().enumerate() {
                for (row, &e) in exp.iter().enumerate() {
                    assert!(
                        (tape.value(logits).get(row, col) - e).abs() < 1e-12,
                        "loc {loc} col {col} row {row}"
                    );
                }
            }
        }
    }

    #[test]
    fn training_loss_gradients_match_finite_differences() {
        let d = 4;
        let m = tiny_model(d);
        let inputs = [AdderInput::from_ints(5, 10), AdderInput::from_ints(12, 3), AdderInput::from_ints(0, 15)];
        let layout = Layout::new(d);
        let f = |p: &[f64]| {
            let probe = GruAdder { d, params: p.to_vec(), seed: 0, train_accuracy: 0.0 };
            let mut tape = Tape::new(p);
            let mut h = tape.constant(Matrix::zeros(d, inputs.len()));
            let mut s_nodes = Vec::new();
            for t in 0..TIMESTEPS {
                let mut x = Matrix::zeros(2, inputs.len());
                for (col, &inp) in inputs.iter().enumerate() {
                    let xv = GruAdder::input_at(inp, t);
                    x.set(0, col, xv[0]);
                    x.set(1, col, xv[1]);
                }
                let x = tape.constant(x);
                let ir = tape.affine(layout.w_ir, d, 2, Some(layout.b_ir), x);
                let hr = tape.affine(layout.w_hr, d, d, Some(layout.b_hr), h);
                let rp = tape.add(ir, hr);
                let r = tape.sigmoid_node(rp);
                let iz = tape.affine(layout.w_iz, d, 2, Some(layout.b_iz), x);
                let hz = tape.affine(layout.w_hz, d, d, Some(layout.b_hz), h);
                let zp = tape.add(iz, hz);
                let z = tape.sigmoid_node(zp);
                let inn = tape.affine(layout.w_in, d, 2, Some(layout.b_in), x);
                let hn = tape.affine(layout.w_hn, d, d, Some(layout.b_hn), h);
                let rn = tape.mul(r, hn);
                let np = tape.add(inn, rn);
                let nn = tape.tanh_node(np);
                let hmn = tape.sub(h, nn);
                let zh = tape.mul(z, hmn);
                h = tape.add(nn, zh);
                s_nodes.push(tape.affine(layout.w_s, 1, d, Some(layout.b_s), h));
            }
            let carry = tape.affine(layout.w_c, 1, d, Some(layout.b_c), h);
            let logits = tape.concat_rows(vec![carry, s_nodes[3], s_nodes[2], s_nodes[1], s_nodes[0]]);
            let targets: Vec<Vec<u8>> = inputs.iter().map(|&i| target_bits(i).to_vec()).collect();
            let loss = probe.tape_loss(&mut tape, logits, &targets);
            let grads = tape.backward(loss);
            (tape.scalar(loss), grads)
        };
        let err = grad_check(f, &m.params);
        assert!(err < 1e-4, "err = {err}");
    }
}
