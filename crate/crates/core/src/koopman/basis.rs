//! Basis dictionaries: raw state, raw control, a constant, then seeded random
//! monomial and sinusoidal features.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{ensure_finite, Error, Result};

/// Everything needed to rebuild a dictionary bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub env_id: EnvId,
    pub seed: u64,
    /// Products of the input variables of total degree 2 or 3.
    pub monomials: usize,
    /// `sin(w . z + phase)` over one or two input variables.
    pub sinusoids: usize,
    /// `u_k sin(+-z_v + phase)`: a unit-frequency harmonic of one input
    /// scaled by one control input.
    #[serde(default)]
    pub modulated: usize,
    /// Indices into `[state..., control...]` that random features may use.
    pub inputs: Vec<usize>,
}

impl BasisSpec {
    /// Raw coordinates only.
    pub fn identity(env_id: EnvId) -> Self {
        Self {
            env_id,
            seed: 0,
            monomials: 0,
            sinusoids: 0,
            modulated: 0,
            inputs: Vec::new(),
        }
    }

    /// 50 random features for the balance bot, 150 for the race car. Car
    /// features skip the world position, on which the dynamics do not depend,
    /// and include control-scaled harmonics for the heading-dependent thrust.
    pub fn default_for(env_id: EnvId, seed: u64) -> Self {
        match env_id {
            EnvId::BalanceBot => Self {
                env_id,
                seed,
                monomials: 25,
                sinusoids: 25,
                modulated: 0,
                inputs: vec![0, 1, 2, 3],
            },
            EnvId::RaceCar => Self {
                env_id,
                seed,
                monomials: 20,
                sinusoids: 10,
                modulated: 50,
                inputs: vec![2, 3, 4, 5, 6, 7, 8],
            },
        }
    }

    pub fn random_count(&self) -> usize {
        self.monomials + self.sinusoids + self.modulated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFunction {
    State(usize),
    Control(usize),
    Constant,
    /// `(variable, exponent)` pairs over `[state..., control...]`.
    Monomial(Vec<(usize, u8)>),
    Sinusoid { weights: Vec<(usize, f64)>, phase: f64 },
    /// `z[gain] * sin(weight * z[var] + phase)`.
    Modulated { gain: usize, var: usize, weight: f64, phase: f64 },
}

impl BasisFunction {
    pub(crate) fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let var = |i: usize| if i < x.len() { x[i] } else { u[i - x.len()] };
        match self {
            BasisFunction::State(i) => x[*i],
            BasisFunction::Control(j) => u[*j],
            BasisFunction::Constant => 1.0,
            BasisFunction::Monomial(terms) => terms.iter().map(|&(v, e)| pow(var(v), e)).product(),
            BasisFunction::Sinusoid { weights, phase } => {
                (weights.iter().map(|&(v, w)| w * var(v)).sum::<f64>() + phase).sin()
            }
            BasisFunction::Modulated { gain, var: v, weight, phase } => var(*gain) * (weight * var(*v) + phase).sin(),
        }
    }

    pub fn is_exempt(&self) -> bool {
        matches!(self, BasisFunction::State(_) | BasisFunction::Control(_) | BasisFunction::Constant)
    }
}

impl fmt::Display for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisFunction::State(i) => write!(f, "state[{i}]"),
            BasisFunction::Control(j) => write!(f, "control[{j}]"),
            BasisFunction::Constant => f.write_str("1"),
            BasisFunction::Monomial(terms) => {
                let parts: Vec<String> = terms.iter().map(|(v, e)| format!("z{v}^{e}")).collect();
                f.write_str(&parts.join("*"))
            }
            BasisFunction::Sinusoid { weights, phase } => {
                let parts: Vec<String> = weights.iter().map(|(v, w)| format!("{w:.3}*z{v}")).collect();
                write!(f, "sin({} + {phase:.3})", parts.join(" + "))
            }
            BasisFunction::Modulated { gain, var, weight, phase } => {
                write!(f, "z{gain}*sin({weight:+.0}*z{var} + {phase:.3})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisDictionary {
    spec: BasisSpec,
    state_dim: usize,
    control_dim: usize,
    functions: Vec<BasisFunction>,
    active: Vec<bool>,
}

impl BasisDictionary {
    pub fn from_spec(spec: &BasisSpec) -> Result<Self> {
        let n = spec.env_id.state_dim();
        let m = spec.env_id.control_space().dims();
        if let Some(bad) = spec.inputs.iter().find(|&&i| i >= n + m) {
            return Err(Error::Config(format!("basis input index {bad} out of range for {} variables", n + m)));
        }
        if spec.random_count() > 0 && spec.inputs.is_empty() {
            return Err(Error::Config("random basis features need at least one input variable".into()));
        }
        let mut distinct = spec.inputs.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if spec.monomials > monomial_capacity(distinct.len()) {
            return Err(Error::Config(format!(
                "{} monomials requested but only {} distinct products exist",
                spec.monomials,
                monomial_capacity(distinct.len())
            )));
        }
        let mut functions: Vec<BasisFunction> = (0..n).map(BasisFunction::State).collect();
        functions.extend((0..m).map(BasisFunction::Control));
        functions.push(BasisFunction::Constant);

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut made = 0;
        while made < spec.monomials {
            let degree = rng.gen_range(2..=3);
            let mut vars: Vec<usize> = (0..degree).map(|_| *spec.inputs.choose(&mut rng).unwrap()).collect();
            vars.sort_unstable();
            let mut terms: Vec<(usize, u8)> = Vec::new();
            for v in vars {
                match terms.last_mut() {
                    Some((last, e)) if *last == v => *e += 1,
                    _ => terms.push((v, 1)),
                }
            }
            let f = BasisFunction::Monomial(terms);
            // a repeated column would make the normal equations singular
            if !functions.contains(&f) {
                functions.push(f);
                made += 1;
            }
        }
        for _ in 0..spec.sinusoids {
            let count = if spec.inputs.len() > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
            let vars: Vec<usize> = spec.inputs.choose_multiple(&mut rng, count).copied().collect();
            let weights = vars
                .into_iter()
                .map(|v| {
                    let w: f64 = rng.gen_range(0.5..2.0);
                    (v, if rng.gen_bool(0.5) { w } else { -w })
                })
                .collect();
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            functions.push(BasisFunction::Sinusoid { weights, phase });
        }
        let gains: Vec<usize> = spec.inputs.iter().copied().filter(|&v| v >= n).collect();
        if spec.modulated > 0 && gains.is_empty() {
            return Err(Error::Config("modulated basis features need a control input".into()));
        }
        for _ in 0..spec.modulated {
            let gain = *gains.choose(&mut rng).unwrap();
            let var = *spec.inputs.choose(&mut rng).unwrap();
            let weight = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            functions.push(BasisFunction::Modulated { gain, var, weight, phase });
        }
        let active = vec![true; functions.len()];
        Ok(Self {
            spec: spec.clone(),
            state_dim: n,
            control_dim: m,
            functions,
            active,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn env_id(&self) -> EnvId {
        self.spec.env_id
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn active_functions(&self) -> impl Iterator<Item = &BasisFunction> + '_ {
        self.functions.iter().zip(&self.active).filter(|(_, a)| **a).map(|(f, _)| f)
    }

    /// Replaces the active mask. Exempt entries are forced on.
    pub fn set_active_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.functions.len() {
            return Err(Error::Config(format!(
                "active mask has {} entries for {} basis functions",
                mask.len(),
                self.functions.len()
            )));
        }
        for ((slot, &m), f) in self.active.iter_mut().zip(mask).zip(&self.functions) {
            *slot = m || f.is_exempt();
        }
        Ok(())
    }

    /// Lifted coordinates of the active functions, in dictionary order.
    pub fn lift(&self, state: &[f64], control: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || control.len() != self.control_dim {
            return Err(Error::Domain(format!(
                "lift expects state/control of length {}/{}, got {}/{}",
                self.state_dim,
                self.control_dim,
                state.len(),
                control.len()
            )));
        }
        ensure_finite("state", state)?;
        ensure_finite("control", control)?;
        let mut out = vec![0.0; self.active_count()];
        self.lift_into(state, control, &mut out);
        Ok(out)
    }

    /// Unchecked lift into a preallocated buffer of `active_count()` entries.
    pub fn lift_into(&self, state: &[f64], control: &[f64], out: &mut [f64]) {
        for (slot, f) in out.iter_mut().zip(self.active_functions()) {
            *slot = f.eval(state, control);
        }
    }

    /// Position of the raw state/control/constant entries in the lifted vector.
    /// They lead the dictionary and can never be pruned, so this is the identity.
    pub fn raw_positions(&self) -> std::ops::Range<usize> {
        0..self.state_dim + self.control_dim + 1
    }
}

/// Flat evaluation plan for the active functions of a dictionary. Entries
/// that depend only on the control are kept apart so a caller holding the
/// control fixed can skip them. Results are bit-identical to
/// [`BasisDictionary::lift_into`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLift {
    state_dim: usize,
    control_dim: usize,
    len: usize,
    control_ops: Vec<Op>,
    state_ops: Vec<Op>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Copy { pos: usize, var: usize },
    Constant { pos: usize },
    Monomial { pos: usize, terms: [(usize, u8); 3], len: usize },
    Sinusoid { pos: usize, terms: [(usize, f64); 2], len: usize, phase: f64 },
    Modulated { pos: usize, gain: usize, var: usize, weight: f64, phase: f64 },
    /// Anything the flat forms cannot hold.
    General { pos: usize, index: usize },
}

impl CompiledLift {
    pub fn new(dict: &BasisDictionary) -> Self {
        let n = dict.state_dim;
        let mut control_ops = Vec::new();
        let mut state_ops = Vec::new();
        let active = dict.functions.iter().enumerate().zip(&dict.active).filter(|(_, a)| **a);
        for (pos, ((index, f), _)) in active.enumerate() {
            let (op, vars): (Op, Vec<usize>) = match f {
                BasisFunction::State(i) => (Op::Copy { pos, var: *i }, vec![*i]),
                BasisFunction::Control(j) => (Op::Copy { pos, var: n + j }, vec![n + j]),
                BasisFunction::Constant => (Op::Constant { pos }, vec![]),
                BasisFunction::Monomial(t) if t.len() <= 3 => {
                    let mut terms = [(0, 0); 3];
                    terms[..t.len()].copy_from_slice(t);
                    (Op::Monomial { pos, terms, len: t.len() }, t.iter().map(|p| p.0).collect())
                }
                BasisFunction::Sinusoid { weights, phase } if weights.len() <= 2 => {
                    let mut terms = [(0, 0.0); 2];
                    terms[..weights.len()].copy_from_slice(weights);
                    let op = Op::Sinusoid {
                        pos,
                        terms,
                        len: weights.len(),
                        phase: *phase,
                    };
                    (op, weights.iter().map(|p| p.0).collect())
                }
                BasisFunction::Modulated { gain, var, weight, phase } => {
                    let op = Op::Modulated {
                        pos,
                        gain: *gain,
                        var: *var,
                        weight: *weight,
                        phase: *phase,
                    };
                    (op, vec![*gain, *var])
                }
                BasisFunction::Monomial(t) => (Op::General { pos, index }, t.iter().map(|p| p.0).collect()),
                BasisFunction::Sinusoid { weights, .. } => {
                    (Op::General { pos, index }, weights.iter().map(|p| p.0).collect())
                }
            };
            if vars.iter().all(|&v| v >= n) {
                control_ops.push(op);
            } else {
                state_ops.push(op);
            }
        }
        Self {
            state_dim: n,
            control_dim: dict.control_dim,
            len: dict.active_count(),
            control_ops,
            state_ops,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Length of the joint `[state..., control...]` buffer.
    pub fn vars(&self) -> usize {
        self.state_dim + self.control_dim
    }

    /// Entries that depend on the control alone. `z` is `[state..., control...]`.
    #[inline]
    pub fn eval_control(&self, dict: &BasisDictionary, z: &[f64], out: &mut [f64]) {
        run(&self.control_ops, dict, self.state_dim, z, out);
    }

    /// Entries that depend on the state.
    #[inline]
    pub fn eval_state(&self, dict: &BasisDictionary, z: &[f64], out: &mut [f64]) {
        run(&self.state_ops, dict, self.state_dim, z, out);
    }
}

#[inline]
fn pow(x: f64, e: u8) -> f64 {
    match e {
        1 => x,
        2 => x * x,
        3 => x * (x * x),
        _ => x.powi(e as i32),
    }
}

#[inline]
fn run(ops: &[Op], dict: &BasisDictionary, n: usize, z: &[f64], out: &mut [f64]) {
    for op in ops {
        match *op {
            Op::Copy { pos, var } => out[pos] = z[var],
            Op::Constant { pos } => out[pos] = 1.0,
            Op::Monomial { pos, terms, len } => {
                out[pos] = terms[..len].iter().map(|&(v, e)| pow(z[v], e)).product();
            }
            Op::Sinusoid { pos, terms, len, phase } => {
                out[pos] = (terms[..len].iter().map(|&(v, w)| w * z[v]).sum::<f64>() + phase).sin();
            }
            Op::Modulated { pos, gain, var, weight, phase } => out[pos] = z[gain] * (weight * z[var] + phase).sin(),
            Op::General { pos, index } => out[pos] = dict.functions[index].eval(&z[..n], &z[n..]),
        }
    }
}

fn monomial_capacity(inputs: usize) -> usize {
    // multisets of size 2 and 3 drawn from `inputs` variables
    let n = inputs;
    n * (n + 1) / 2 + n * (n + 1) * (n + 2) / 6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_lift_appends_constant() {
        let b = BasisDictionary::from_spec(&BasisSpec::identity(EnvId::BalanceBot)).unwrap();
        assert_eq!(b.lift(&[1.0, 2.0, 3.0], &[0.5]).unwrap(), vec![1.0, 2.0, 3.0, 0.5, 1.0]);
    }

    #[test]
    fn origin_lift() {
        let b = BasisDictionary::from_spec(&BasisSpec::default_for(EnvId::BalanceBot, 11)).unwrap();
        let z = b.lift(&[0.0; 3], &[0.0]).unwrap();
        assert_eq!(&z[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        for (f, v) in b.functions().iter().zip(&z).skip(5) {
            match f {
                BasisFunction::Monomial(_) => assert_eq!(*v, 0.0),
                BasisFunction::Sinusoid { phase, .. } => assert_eq!(*v, phase.sin()),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn default_counts_and_layout() {
        let b = BasisDictionary::from_spec(&BasisSpec::default_for(EnvId::BalanceBot, 1)).unwrap();
        assert_eq!(b.functions().len(), 3 + 1 + 1 + 50);
        let c = BasisDictionary::from_spec(&BasisSpec::default_for(EnvId::RaceCar, 1)).unwrap();
        assert_eq!(c.functions().len(), 6 + 3 + 1 + 80);
        assert!(c.functions()[..10].iter().all(BasisFunction::is_exempt));
        assert!(c.functions()[10..].iter().all(|f| !f.is_exempt()));
    }

    #[test]
    fn reconstructible_from_spec() {
        let spec = BasisSpec::default_for(EnvId::RaceCar, 77);
        assert_eq!(
            BasisDictionary::from_spec(&spec).unwrap(),
            BasisDictionary::from_spec(&spec).unwrap()
        );
    }

    #[test]
    fn seeded_features_fixture() {
        let b = BasisDictionary::from_spec(&BasisSpec::default_for(EnvId::BalanceBot, 2024)).unwrap();
        let z = b.lift(&[0.1, -0.2, 0.3], &[0.4]).unwrap();
        let sum: f64 = z.iter().sum();
        assert_eq!(z.len(), 55);
        assert!((sum - SEEDED_LIFT_SUM).abs() < 1e-12, "lift sum {sum:.17}");
    }

    const SEEDED_LIFT_SUM: f64 = 1.158_377_964_191_312_1;

    #[test]
    fn exempt_entries_cannot_be_masked() {
        let mut b = BasisDictionary::from_spec(&BasisSpec::default_for(EnvId::BalanceBot, 3)).unwrap();
        b.set_active_mask(&vec![false; 55]).unwrap();
        assert_eq!(b.active_count(), 5);
        assert_eq!(b.lift(&[1.0, 2.0, 3.0], &[0.5]).unwrap(), vec![1.0, 2.0, 3.0, 0.5, 1.0]);
    }

    #[test]
    fn non_finite_lift_rejected() {
        let b = BasisDictionary::from_spec(&BasisSpec::identity(EnvId::BalanceBot)).unwrap();
        assert!(matches!(b.lift(&[f64::NAN, 0.0, 0.0], &[0.0]), Err(Error::Domain(_))));
        assert!(b.lift(&[0.0, 0.0], &[0.0]).is_err());
    }
}
