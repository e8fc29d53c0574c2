//! Abstract causal models with do-intervention swap semantics:
//! hierarchical equality and the 4-bit ripple-carry adder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Hierarchical equality
// ---------------------------------------------------------------------------

/// Inputs W, X, Y, Z, each in 1..=100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeqInput {
    pub w: u8,
    pub x: u8,
    pub y: u8,
    pub z: u8,
}

impl HeqInput {
    pub fn new(w: u8, x: u8, y: u8, z: u8) -> Result<Self> {
        for v in [w, x, y, z] {
            if !(1..=100).contains(&v) {
                return Err(Error::InvalidArgument(format!("HEQ value {v} outside 1..=100")));
            }
        }
        Ok(HeqInput { w, x, y, z })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeqVar {
    ZWx,
    ZYz,
}

pub const HEQ_VARS: [HeqVar; 2] = [HeqVar::ZWx, HeqVar::ZYz];

/// Intermediate and output state of the equality model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeqState {
    pub z_wx: bool,
    pub z_yz: bool,
    pub y: bool,
}

/// Generic do-override map for the two equality variables.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeqDo {
    pub z_wx: Option<bool>,
    pub z_yz: Option<bool>,
}

pub fn heq_forward_with_do(input: HeqInput, overrides: HeqDo) -> HeqState {
    let z_wx = overrides.z_wx.unwrap_or(input.w == input.x);
    let z_yz = overrides.z_yz.unwrap_or(input.y == input.z);
    HeqState { z_wx, z_yz, y: z_wx == z_yz }
}

pub fn heq_forward(input: HeqInput) -> HeqState {
    heq_forward_with_do(input, HeqDo::default())
}

/// Value of an equality variable on an input.
pub fn heq_var_value(input: HeqInput, var: HeqVar) -> bool {
    match var {
        HeqVar::ZWx => input.w == input.x,
        HeqVar::ZYz => input.y == input.z,
    }
}

/// Output of the base input with `var` forced to its source value.
pub fn heq_abs_swap(base: HeqInput, source: HeqInput, var: HeqVar) -> bool {
    let mut overrides = HeqDo::default();
    match var {
        HeqVar::ZWx => overrides.z_wx = Some(heq_var_value(source, var)),
        HeqVar::ZYz => overrides.z_yz = Some(heq_var_value(source, var)),
    }
    heq_forward_with_do(base, overrides).y
}

pub fn heq_var_changes(base: HeqInput, source: HeqInput, var: HeqVar) -> bool {
    heq_var_value(base, var) != heq_var_value(source, var)
}

// ---------------------------------------------------------------------------
// 4-bit ripple-carry adder
// ---------------------------------------------------------------------------

/// Two 4-bit operands, least-significant bit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdderInput {
    pub a: [u8; 4],
    pub b: [u8; 4],
}

impl AdderInput {
    pub fn from_ints(a: u8, b: u8) -> Self {
        let bit = |v: u8, i: usize| (v >> i) & 1;
        AdderInput {
            a: [bit(a, 0), bit(a, 1), bit(a, 2), bit(a, 3)],
            b: [bit(b, 0), bit(b, 1), bit(b, 2), bit(b, 3)],
        }
    }

    pub fn a_value(&self) -> u8 {
        self.a.iter().enumerate().map(|(i, &v)| v << i).sum()
    }

    pub fn b_value(&self) -> u8 {
        self.b.iter().enumerate().map(|(i, &v)| v << i).sum()
    }

    /// Index in 0..256 enumerating all input pairs.
    pub fn index(&self) -> usize {
        (self.a_value() as usize) * 16 + self.b_value() as usize
    }

    pub fn from_index(idx: usize) -> Self {
        AdderInput::from_ints((idx / 16) as u8, (idx % 16) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdderVar {
    C1,
    C2,
    C3,
    C4,
}

/// The internal carries reported on (C4 is part of the output).
pub const ADDER_TARGET_VARS: [AdderVar; 3] = [AdderVar::C1, AdderVar::C2, AdderVar::C3];

impl AdderVar {
    pub fn carry_index(&self) -> usize {
        match self {
            AdderVar::C1 => 1,
            AdderVar::C2 => 2,
            AdderVar::C3 => 3,
            AdderVar::C4 => 4,
        }
    }
}

/// Sum bits S0..S3, carries C1..C4, and the 5-bit output (C4, S3, S2, S1, S0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdderState {
    pub s: [u8; 4],
    pub c: [u8; 4],
}

impl AdderState {
    /// Output bits ordered (C4, S3, S2, S1, S0).
    pub fn output(&self) -> [u8; 5] {
        [self.c[3], self.s[3], self.s[2], self.s[1], self.s[0]]
    }
}

/// do-overrides for carries C1..C4 (index 0 is C1).
pub type AdderDo = [Option<u8>; 4];

pub fn adder_forward_with_do(input: AdderInput, overrides: AdderDo) -> AdderState {
    let mut s = [0u8; 4];
    let mut c = [0u8; 4];
    let mut carry_in = 0u8;
    for i in 0..4 {
        let total = input.a[i] + input.b[i] + carry_in;
        s[i] = total % 2;
        let mut carry_out = total / 2;
        if let Some(v) = overrides[i] {
            carry_out = v;
        }
        c[i] = carry_out;
        carry_in = carry_out;
    }
    AdderState { s, c }
}

pub fn adder_forward(input: AdderInput) -> AdderState {
    adder_forward_with_do(input, AdderDo::default())
}

pub fn adder_var_value(input: AdderInput, var: AdderVar) -> u8 {
    adder_forward(input).c[var.carry_index() - 1]
}

/// Output of the base input with carry `var` forced to its source value;
/// everything upstream of the carry keeps its base value.
pub fn adder_abs_swap(base: AdderInput, source: AdderInput, var: AdderVar) -> [u8; 5] {
    let mut overrides = AdderDo::default();
    overrides[var.carry_index() - 1] = Some(adder_var_value(source, var));
    adder_forward_with_do(base, overrides).output()
}

pub fn adder_var_changes(base: AdderInput, source: AdderInput, var: AdderVar) -> bool {
    adder_var_value(base, var) != adder_var_value(source, var)
}
