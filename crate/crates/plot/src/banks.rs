//! Counterfactual pair banks: generation, splitting, sensitivity labeling,
//! and verification for the equality and addition tasks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{
    adder_var_changes, heq_var_changes, AdderInput, AdderVar, HeqInput, HeqVar, ADDER_TARGET_VARS,
    HEQ_VARS,
};
use crate::error::{Error, Result};
use crate::numerics::rng::SeedStream;

const HEQ_FIT_SIZE: usize = 1000;
const HEQ_CAL_SIZE: usize = 1000;
const HEQ_TEST_SIZE: usize = 1000;
const HEQ_ATTEMPT_BUDGET: usize = 10_000_000;

const ADDER_FLIPS: usize = 8;
/// Carry-targeted source quotas per base, for C1..C4.
const ADDER_CARRY_QUOTAS: [usize; 4] = [3, 5, 7, 3];
pub const ADDER_SOURCES_PER_BASE: usize = 26;

/// One base/source pair with per-variable change flags (does the source
/// change the variable's value relative to the base?) and a provenance tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair<I> {
    pub base: I,
    pub source: I,
    pub change_flags: Vec<bool>,
    pub tag: String,
}

pub type HeqPair = CounterfactualPair<HeqInput>;
pub type AdderPair = CounterfactualPair<AdderInput>;

impl HeqPair {
    fn make(base: HeqInput, source: HeqInput, tag: &str) -> Self {
        let change_flags = HEQ_VARS.iter().map(|&v| heq_var_changes(base, source, v)).collect();
        CounterfactualPair { base, source, change_flags, tag: tag.into() }
    }
}

impl AdderPair {
    fn make(base: AdderInput, source: AdderInput, tag: &str) -> Self {
        let change_flags =
            ADDER_TARGET_VARS.iter().map(|&v| adder_var_changes(base, source, v)).collect();
        CounterfactualPair { base, source, change_flags, tag: tag.into() }
    }
}

/// Strip a bank down to the (base, source) tuples consumed by signatures
/// and evaluation.
pub fn as_tuples<I: Copy>(pairs: &[CounterfactualPair<I>]) -> Vec<(I, I)> {
    pairs.iter().map(|p| (p.base, p.source)).collect()
}

/// A labeled holdout bank: pairs that are all sensitive (or all invariant)
/// for one variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestBank<I> {
    pub variable: String,
    pub var_index: usize,
    pub sensitive: bool,
    pub pairs: Vec<CounterfactualPair<I>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeqBanks {
    pub seed: u64,
    pub policy: String,
    pub fit: Vec<HeqPair>,
    pub cal: Vec<HeqPair>,
    /// Four banks: sensitive and invariant for each of z_WX, z_YZ.
    pub test: Vec<TestBank<HeqInput>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdderBanks {
    pub seed: u64,
    pub policy: String,
    pub fit: Vec<AdderPair>,
    pub cal: Vec<AdderPair>,
    pub test: Vec<AdderPair>,
    /// Quota shortfalls recorded during generation (empty in practice).
    pub deficits: Vec<String>,
}

impl AdderBanks {
    /// Split the test pairs into (sensitive, invariant) for one carry.
    pub fn test_partition(&self, var: AdderVar) -> (Vec<&AdderPair>, Vec<&AdderPair>) {
        let idx = var.carry_index() - 1;
        self.test.iter().partition(|p| p.change_flags[idx])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub violations: Vec<String>,
}

impl VerifyReport {
    fn from_violations(violations: Vec<String>) -> Self {
        VerifyReport { pass: violations.is_empty(), violations }
    }
}

// ---------------------------------------------------------------------------
// HEQ banks
// ---------------------------------------------------------------------------

fn sample_heq_input<R: Rng>(rng: &mut R) -> HeqInput {
    // Each pair equal with probability ~1/2 so sensitivity predicates are
    // realized in a reasonable number of draws.
    let half = |rng: &mut R| -> (u8, u8) {
        let a = rng.gen_range(1..=100u8);
        let b = if rng.gen_bool(0.5) { a } else { rng.gen_range(1..=100u8) };
        (a, b)
    };
    let (w, x) = half(rng);
    let (y, z) = half(rng);
    HeqInput { w, x, y, z }
}

fn heq_sample_matching<R: Rng>(
    rng: &mut R,
    seen: &mut HashSet<(HeqInput, HeqInput)>,
    attempts: &mut usize,
    tag: &str,
    want: impl Fn(bool, bool) -> bool,
) -> Result<HeqPair> {
    loop {
        *attempts += 1;
        if *attempts > HEQ_ATTEMPT_BUDGET {
            return Err(Error::BankGeneration("HEQ rejection sampling budget exhausted".into()));
        }
        let base = sample_heq_input(rng);
        let source = sample_heq_input(rng);
        let wx = heq_var_changes(base, source, HeqVar::ZWx);
        let yz = heq_var_changes(base, source, HeqVar::ZYz);
        if want(wx, yz) && seen.insert((base, source)) {
            return Ok(HeqPair::make(base, source, tag));
        }
    }
}

/// Generate the equality banks: a 1000-pair mixed-policy fit bank
/// (~25% z_WX-only-sensitive, ~25% z_YZ-only-sensitive, ~50% invariant in
/// both), a 1000-pair calibration bank balanced between exactly-one-sensitive
/// halves, and four 1000-pair holdout banks (sensitive/invariant per
/// variable, the untargeted variable always held fixed). Pairs are globally
/// deduplicated across all banks.
pub fn gen_heq_banks(seed: u64) -> Result<HeqBanks> {
    let mut rng = SeedStream::new(seed).rng("heq-banks");
    let mut seen = HashSet::new();
    let mut attempts = 0usize;

    let mut fit = Vec::with_capacity(HEQ_FIT_SIZE);
    for _ in 0..HEQ_FIT_SIZE {
        let kind = rng.gen_range(0..4u8);
        let pair = match kind {
            0 => heq_sample_matching(&mut rng, &mut seen, &mut attempts, "fit-wx-sensitive", |wx, yz| {
                wx && !yz
            })?,
            1 => heq_sample_matching(&mut rng, &mut seen, &mut attempts, "fit-yz-sensitive", |wx, yz| {
                !wx && yz
            })?,
            _ => heq_sample_matching(&mut rng, &mut seen, &mut attempts, "fit-invariant", |wx, yz| {
                !wx && !yz
            })?,
        };
        fit.push(pair);
    }

    let mut cal = Vec::with_capacity(HEQ_CAL_SIZE);
    for _ in 0..HEQ_CAL_SIZE / 2 {
        cal.push(heq_sample_matching(&mut rng, &mut seen, &mut attempts, "cal-wx-only", |wx, yz| {
            wx && !yz
        })?);
    }
    for _ in 0..HEQ_CAL_SIZE / 2 {
        cal.push(heq_sample_matching(&mut rng, &mut seen, &mut attempts, "cal-yz-only", |wx, yz| {
            !wx && yz
        })?);
    }

    let mut test = Vec::with_capacity(4);
    for (var_index, name) in [(0usize, "z_WX"), (1, "z_YZ")] {
        for sensitive in [true, false] {
            let tag = format!("test-{name}-{}", if sensitive { "sensitive" } else { "invariant" });
            let mut pairs = Vec::with_capacity(HEQ_TEST_SIZE);
            for _ in 0..HEQ_TEST_SIZE {
                pairs.push(heq_sample_matching(&mut rng, &mut seen, &mut attempts, &tag, |wx, yz| {
                    // The untargeted variable is always held fixed so each
                    // bank isolates exactly one intervention effect.
                    let (flag, other) = if var_index == 0 { (wx, yz) } else { (yz, wx) };
                    flag == sensitive && !other
                })?);
            }
            test.push(TestBank { variable: name.into(), var_index, sensitive, pairs });
        }
    }

    Ok(HeqBanks { seed, policy: "heq-v1".into(), fit, cal, test })
}

/// Recompute every flag and check the equality bank policy quotas.
pub fn verify_heq_banks(banks: &HeqBanks) -> VerifyReport {
    let mut v = Vec::new();
    if banks.fit.len() != HEQ_FIT_SIZE {
        v.push(format!("fit size {} != {HEQ_FIT_SIZE}", banks.fit.len()));
    }
    if banks.cal.len() != HEQ_CAL_SIZE {
        v.push(format!("cal size {} != {HEQ_CAL_SIZE}", banks.cal.len()));
    }
    let mut seen = HashSet::new();
    let mut check_pair = |p: &HeqPair, ctx: &str, v: &mut Vec<String>| {
        for (i, &var) in HEQ_VARS.iter().enumerate() {
            if p.change_flags[i] != heq_var_changes(p.base, p.source, var) {
                v.push(format!("{ctx}: stale change flag on pair {:?}/{:?}", p.base, p.source));
            }
        }
        if !seen.insert((p.base, p.source)) {
            v.push(format!("{ctx}: duplicate pair {:?}/{:?}", p.base, p.source));
        }
    };
    for p in &banks.fit {
        check_pair(p, "fit", &mut v);
        if p.change_flags[0] && p.change_flags[1] {
            v.push(format!("fit pair changes both variables: {:?}/{:?}", p.base, p.source));
        }
    }
    let wx_only = banks.cal.iter().filter(|p| p.change_flags[0] && !p.change_flags[1]).count();
    let yz_only = banks.cal.iter().filter(|p| !p.change_flags[0] && p.change_flags[1]).count();
    if wx_only != HEQ_CAL_SIZE / 2 || yz_only != HEQ_CAL_SIZE / 2 {
        v.push(format!("cal balance {wx_only}/{yz_only} != 500/500"));
    }
    for p in &banks.cal {
        check_pair(p, "cal", &mut v);
        if p.change_flags[0] == p.change_flags[1] {
            v.push(format!("cal pair not exactly-one-sensitive: {:?}/{:?}", p.base, p.source));
        }
    }
    if banks.test.len() != 4 {
        v.push(format!("expected 4 test banks, got {}", banks.test.len()));
    }
    for bank in &banks.test {
        if bank.pairs.len() != HEQ_TEST_SIZE {
            v.push(format!("test bank {}/{} size {}", bank.variable, bank.sensitive, bank.pairs.len()));
        }
        for p in &bank.pairs {
            check_pair(p, &bank.variable, &mut v);
            if p.change_flags[bank.var_index] != bank.sensitive {
                v.push(format!(
                    "test bank {} sensitive={} holds mislabeled pair {:?}/{:?}",
                    bank.variable, bank.sensitive, p.base, p.source
                ));
            }
            if p.change_flags[1 - bank.var_index] {
                v.push(format!(
                    "test bank {} pair changes the untargeted variable: {:?}/{:?}",
                    bank.variable, p.base, p.source
                ));
            }
        }
    }
    VerifyReport::from_violations(v)
}

// ---------------------------------------------------------------------------
// Adder banks
// ---------------------------------------------------------------------------

fn flip_bit(input: AdderInput, bit: usize) -> AdderInput {
    let mut out = input;
    if bit < 4 {
        out.a[bit] ^= 1;
    } else {
        out.b[bit - 4] ^= 1;
    }
    out
}

/// All 26 sources for one base: the 8 single-bit flips, then carry-targeted
/// sources (3 for C1, 5 for C2, 7 for C3, 3 for C4) found by scanning the
/// other inputs in a shuffled order, skipping sources already chosen.
fn adder_sources_for_base<R: Rng>(
    rng: &mut R,
    base: AdderInput,
    deficits: &mut Vec<String>,
) -> Vec<AdderPair> {
    let mut pairs = Vec::with_capacity(ADDER_SOURCES_PER_BASE);
    let mut used: HashSet<AdderInput> = HashSet::new();
    for bit in 0..ADDER_FLIPS {
        let source = flip_bit(base, bit);
        used.insert(source);
        let name = if bit < 4 { format!("flip-a{bit}") } else { format!("flip-b{}", bit - 4) };
        pairs.push(AdderPair::make(base, source, &name));
    }
    let mut candidates: Vec<usize> = (0..256).filter(|&i| i != base.index()).collect();
    candidates.shuffle(rng);
    for (vi, var) in [AdderVar::C1, AdderVar::C2, AdderVar::C3, AdderVar::C4].into_iter().enumerate() {
        let mut found = 0;
        for &ci in &candidates {
            if found == ADDER_CARRY_QUOTAS[vi] {
                break;
            }
            let source = AdderInput::from_index(ci);
            if used.contains(&source) || !adder_var_changes(base, source, var) {
                continue;
            }
            used.insert(source);
            pairs.push(AdderPair::make(base, source, &format!("carry-C{}", var.carry_index())));
            found += 1;
        }
        if found < ADDER_CARRY_QUOTAS[vi] {
            deficits.push(format!(
                "base {} C{}: found {found}/{}",
                base.index(),
                var.carry_index(),
                ADDER_CARRY_QUOTAS[vi]
            ));
        }
    }
    pairs
}

/// Generate the addition banks: shuffle the 256 base inputs into a
/// 128/64/64 split, attach 26 sources to every base (8 bit flips plus 18
/// carry-targeted), and label change flags for C1..C3.
pub fn gen_adder_banks(seed: u64) -> Result<AdderBanks> {
    let mut rng = SeedStream::new(seed).rng("adder-banks");
    let mut bases: Vec<usize> = (0..256).collect();
    bases.shuffle(&mut rng);
    let mut deficits = Vec::new();
    let build = |range: std::ops::Range<usize>, rng: &mut _, deficits: &mut Vec<String>| {
        let mut out = Vec::new();
        for &bi in &bases[range] {
            out.extend(adder_sources_for_base(rng, AdderInput::from_index(bi), deficits));
        }
        out
    };
    let fit = build(0..128, &mut rng, &mut deficits);
    let cal = build(128..192, &mut rng, &mut deficits);
    let test = build(192..256, &mut rng, &mut deficits);
    Ok(AdderBanks { seed, policy: "adder-v1".into(), fit, cal, test, deficits })
}

/// Recompute flags and check the addition bank policy quotas.
pub fn verify_adder_banks(banks: &AdderBanks) -> VerifyReport {
    let mut v = Vec::new();
    let expect = [("fit", &banks.fit, 128usize), ("cal", &banks.cal, 64), ("test", &banks.test, 64)];
    let mut base_sets: Vec<HashSet<usize>> = Vec::new();
    for (name, pairs, n_bases) in expect {
        if pairs.len() != n_bases * ADDER_SOURCES_PER_BASE {
            v.push(format!("{name} size {} != {}", pairs.len(), n_bases * ADDER_SOURCES_PER_BASE));
        }
        let mut per_base: std::collections::HashMap<usize, Vec<&AdderPair>> = Default::default();
        for p in pairs {
            for (i, &var) in ADDER_TARGET_VARS.iter().enumerate() {
                if p.change_flags[i] != adder_var_changes(p.base, p.source, var) {
                    v.push(format!("{name}: stale change flag on base {}", p.base.index()));
                }
            }
            per_base.entry(p.base.index()).or_default().push(p);
        }
        if per_base.len() != n_bases {
            v.push(format!("{name}: {} distinct bases != {n_bases}", per_base.len()));
        }
        for (bi, group) in &per_base {
            if group.len() != ADDER_SOURCES_PER_BASE {
                v.push(format!("{name}: base {bi} has {} sources != {ADDER_SOURCES_PER_BASE}", group.len()));
            }
            let flips = group.iter().filter(|p| p.tag.starts_with("flip-")).count();
            if flips != ADDER_FLIPS {
                v.push(format!("{name}: base {bi} has {flips} bit-flip sources"));
            }
            for p in group {
                let base = p.base;
                let source = p.source;
                if p.tag.starts_with("flip-") {
                    let dist: u32 = (0..4)
                        .map(|i| {
                            (base.a[i] ^ source.a[i]) as u32 + (base.b[i] ^ source.b[i]) as u32
                        })
                        .sum();
                    if dist != 1 {
                        v.push(format!("{name}: flip source at Hamming distance {dist}"));
                    }
                } else if let Some(cs) = p.tag.strip_prefix("carry-C") {
                    let var = match cs {
                        "1" => AdderVar::C1,
                        "2" => AdderVar::C2,
                        "3" => AdderVar::C3,
                        _ => AdderVar::C4,
                    };
                    if !adder_var_changes(base, source, var) {
                        v.push(format!(
                            "{name}: carry-targeted source does not change C{} (base {})",
                            var.carry_index(),
                            base.index()
                        ));
                    }
                }
            }
        }
        base_sets.push(per_base.keys().copied().collect());
    }
    for i in 0..base_sets.len() {
        for j in i + 1..base_sets.len() {
            if base_sets[i].intersection(&base_sets[j]).next().is_some() {
                v.push(format!("base sets {i} and {j} overlap"));
            }
        }
    }
    for var in ADDER_TARGET_VARS {
        let (sens, inv) = banks.test_partition(var);
        if sens.len() + inv.len() != 64 * ADDER_SOURCES_PER_BASE {
            v.push(format!(
                "C{} partition sums to {} != 1664",
                var.carry_index(),
                sens.len() + inv.len()
            ));
        }
    }
    if !banks.deficits.is_empty() {
        v.push(format!("generation deficits: {:?}", banks.deficits));
    }
    VerifyReport::from_violations(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heq_banks_pass_verification() {
        let banks = gen_heq_banks(3).unwrap();
        let report = verify_heq_banks(&banks);
        assert!(report.pass, "{:?}", report.violations);
        assert_eq!(banks.fit.len(), 1000);
        assert_eq!(banks.cal.len(), 1000);
        assert_eq!(banks.test.len(), 4);
        for bank in &banks.test {
            assert_eq!(bank.pairs.len(), 1000);
        }
    }

    #[test]
    fn heq_generation_is_deterministic_per_seed() {
        let a = gen_heq_banks(9).unwrap();
        let b = gen_heq_banks(9).unwrap();
        assert_eq!(a.fit, b.fit);
        assert_eq!(a.cal, b.cal);
        let c = gen_heq_banks(10).unwrap();
        assert_ne!(a.fit, c.fit);
    }

    #[test]
    fn heq_tampered_flag_fails_verification() {
        let mut banks = gen_heq_banks(4).unwrap();
        banks.fit[17].change_flags[0] = !banks.fit[17].change_flags[0];
        let report = verify_heq_banks(&banks);
        assert!(!report.pass);
        assert!(report.violations.iter().any(|m| m.contains("stale change flag")));
    }

    #[test]
    fn adder_banks_pass_verification_and_have_expected_sizes() {
        let banks = gen_adder_banks(3).unwrap();
        let report = verify_adder_banks(&banks);
        assert!(report.pass, "{:?}", report.violations);
        assert_eq!(banks.fit.len(), 3328);
        assert_eq!(banks.cal.len(), 1664);
        assert_eq!(banks.test.len(), 1664);
        assert!(banks.deficits.is_empty());
        for var in ADDER_TARGET_VARS {
            let (sens, inv) = banks.test_partition(var);
            assert_eq!(sens.len() + inv.len(), 1664);
            assert!(!sens.is_empty() && !inv.is_empty());
        }
    }

    #[test]
    fn adder_generation_is_deterministic_per_seed() {
        let a = gen_adder_banks(1).unwrap();
        let b = gen_adder_banks(1).unwrap();
        assert_eq!(a.fit, b.fit);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn banks_roundtrip_through_json() {
        let banks = gen_heq_banks(2).unwrap();
        let text = serde_json::to_string(&banks).unwrap();
        let back: HeqBanks = serde_json::from_str(&text).unwrap();
        assert_eq!(banks.fit, back.fit);
        assert_eq!(banks.cal, back.cal);

        let abanks = gen_adder_banks(2).unwrap();
        let text = serde_json::to_string(&abanks).unwrap();
        let back: AdderBanks = serde_json::from_str(&text).unwrap();
        assert_eq!(abanks.fit, back.fit);
    }

    #[test]
    fn flip_bit_is_an_involution() {
        let base = AdderInput::from_ints(9, 6);
        for bit in 0..8 {
            assert_eq!(flip_bit(flip_bit(base, bit), bit), base);
            let mut dist = 0;
            let f = flip_bit(base, bit);
            for i in 0..4 {
                dist += (base.a[i] ^ f.a[i]) + (base.b[i] ^ f.b[i]);
            }
            assert_eq!(dist, 1);
        }
    }
}
