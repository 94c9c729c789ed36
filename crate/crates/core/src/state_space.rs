//! Discrete latent state spaces built from binary latent-variable vectors.
//!
//! A state is identified by its bin-compressed key `Σ_p 2^(p-1) v_p + 1`.
//! Infeasible vectors are dropped and the surviving states are renumbered
//! contiguously from 0 in key order, so dense `K × K` storage stays tight.
//! An optional absorbing state carries no latent vector and always takes the
//! last index.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};

/// Upper bound on latent-vector width; keys must fit comfortably in `u64`
/// and enumeration is `2^P`.
pub const MAX_WIDTH: usize = 24;

/// Values of the `P` binary latent variables at one position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentVector(Vec<u8>);

impl LatentVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(GcmError::InvalidArgument(format!(
                "latent bit must be 0 or 1, got {b}"
            )));
        }
        Ok(LatentVector(bits))
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        LatentVector(bits.iter().map(|&b| b as u8).collect())
    }

    /// Decodes a 1-based bin-compressed key back into a vector of `width` bits.
    pub fn from_key(key: u64, width: usize) -> Result<Self> {
        if key == 0 || (width < 64 && key > (1u64 << width)) {
            return Err(GcmError::InvalidArgument(format!(
                "key {key} out of range for width {width}"
            )));
        }
        let raw = key - 1;
        Ok(LatentVector((0..width).map(|p| ((raw >> p) & 1) as u8).collect()))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, p: usize) -> bool {
        self.0[p] == 1
    }

    /// Parses a bit string such as `"101"` (first character is `p = 1`).
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(GcmError::InvalidArgument(format!(
                    "invalid latent bit `{other}` in `{s}`"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(LatentVector(bits))
    }
}

impl fmt::Display for LatentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// 1-based bin-compression of a latent vector: `Σ_p 2^(p-1)·v_p + 1`.
pub fn bin_compress(v: &LatentVector, width: usize) -> Result<u64> {
    if v.len() != width {
        return Err(GcmError::Dimension {
            expected: width,
            found: v.len(),
        });
    }
    Ok(v
        .bits()
        .iter()
        .enumerate()
        .fold(1u64, |acc, (p, &b)| acc + ((b as u64) << p)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateInfo {
    /// `None` for the absorbing state.
    pub bits: Option<LatentVector>,
    pub key: Option<u64>,
}

/// Finite latent state space with per-position click states.
///
/// `click_states[t]` is the single click state at position `t` for
/// `t = 0..=T`; position 0 is the virtual always-clicked position.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    width: usize,
    states: Vec<StateInfo>,
    absorbing: Option<usize>,
    click_states: Vec<usize>,
    by_key: HashMap<u64, usize>,
}

impl StateSpace {
    /// Enumerates all `2^width` vectors, keeps the feasible ones, and assigns
    /// contiguous indices in key order.
    pub fn build(
        width: usize,
        list_size: usize,
        feasible: impl Fn(&LatentVector) -> bool,
        click_rule: impl Fn(usize) -> LatentVector,
        absorbing: bool,
    ) -> Result<Self> {
        if width > MAX_WIDTH {
            return Err(GcmError::definition(format!(
                "latent width {width} exceeds the supported maximum {MAX_WIDTH}"
            )));
        }
        let mut states = Vec::new();
        for raw in 0..(1u64 << width) {
            let v = LatentVector::from_key(raw + 1, width)?;
            if feasible(&v) {
                states.push(StateInfo {
                    key: Some(raw + 1),
                    bits: Some(v),
                });
            }
        }
        let mut space = StateSpace::from_states(width, states, absorbing, Vec::new())?;
        let mut clicks = Vec::with_capacity(list_size + 1);
        for t in 0..=list_size {
            let v = click_rule(t);
            let key = bin_compress(&v, width)?;
            let idx = space.by_key.get(&key).copied().ok_or_else(|| {
                GcmError::definition(format!(
                    "click state {v} for position {t} is not a feasible state"
                ))
            })?;
            clicks.push(idx);
        }
        space.click_states = clicks;
        Ok(space)
    }

    /// Assembles a space from explicit states; used when reloading descriptors
    /// and by the declarative model format.
    pub fn from_parts(
        width: usize,
        bits: Vec<LatentVector>,
        absorbing: bool,
        click_states: Vec<usize>,
    ) -> Result<Self> {
        let states = bits
            .into_iter()
            .map(|v| {
                let key = bin_compress(&v, width)?;
                Ok(StateInfo {
                    bits: Some(v),
                    key: Some(key),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StateSpace::from_states(width, states, absorbing, click_states)
    }

    fn from_states(
        width: usize,
        mut states: Vec<StateInfo>,
        absorbing: bool,
        click_states: Vec<usize>,
    ) -> Result<Self> {
        let mut by_key = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            let key = s.key.expect("non-absorbing state has a key");
            if by_key.insert(key, i).is_some() {
                return Err(GcmError::definition(format!(
                    "duplicate latent vector with key {key}"
                )));
            }
        }
        let absorbing = if absorbing {
            states.push(StateInfo {
                bits: None,
                key: None,
            });
            Some(states.len() - 1)
        } else {
            None
        };
        let space = StateSpace {
            width,
            states,
            absorbing,
            click_states,
            by_key,
        };
        for (t, &c) in space.click_states.iter().enumerate() {
            if c >= space.len() {
                return Err(GcmError::definition(format!(
                    "click state {c} at position {t} is out of range"
                )));
            }
            if Some(c) == space.absorbing {
                return Err(GcmError::definition(format!(
                    "the absorbing state cannot be the click state (position {t})"
                )));
            }
        }
        Ok(space)
    }

    /// Number of states `K`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Latent width `P`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn states(&self) -> &[StateInfo] {
        &self.states
    }

    pub fn absorbing(&self) -> Option<usize> {
        self.absorbing
    }

    /// Largest position with a declared click state.
    pub fn list_size(&self) -> usize {
        self.click_states.len().saturating_sub(1)
    }

    pub fn click_states(&self) -> &[usize] {
        &self.click_states
    }

    pub fn click_state(&self, t: usize) -> usize {
        self.click_states[t]
    }

    pub fn index_of(&self, v: &LatentVector) -> Option<usize> {
        bin_compress(v, self.width)
            .ok()
            .and_then(|k| self.by_key.get(&k).copied())
    }

    pub fn index_of_key(&self, key: u64) -> Option<usize> {
        self.by_key.get(&key).copied()
    }

    pub fn decode(&self, index: usize) -> Option<&LatentVector> {
        self.states.get(index).and_then(|s| s.bits.as_ref())
    }

    /// Ordered `(index, bits, flags)` records for persistence.
    pub fn descriptor(&self) -> Vec<StateRecord> {
        self.states
            .iter()
            .enumerate()
            .map(|(i, s)| StateRecord {
                index: i,
                bits: s.bits.as_ref().map(|b| b.to_string()),
                key: s.key,
                absorbing: Some(i) == self.absorbing,
                click_positions: self
                    .click_states
                    .iter()
                    .enumerate()
                    .filter(|&(_, &c)| c == i)
                    .map(|(t, _)| t)
                    .collect(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub index: usize,
    pub bits: Option<String>,
    pub key: Option<u64>,
    pub absorbing: bool,
    pub click_positions: Vec<usize>,
}

/// A state space optionally extended with the emission bit `ψ_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedStateSpace {
    pub base: StateSpace,
    pub has_emission_bit: bool,
    space: StateSpace,
}

impl AugmentedStateSpace {
    /// The space the E- and M-steps run on.
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// Augmented index of base state `base` with emission bit `bit`.
    pub fn lift(&self, base: usize, bit: bool) -> Option<usize> {
        if !self.has_emission_bit {
            return (!bit).then_some(base);
        }
        if Some(base) == self.base.absorbing() {
            return (!bit).then(|| self.space.absorbing().expect("absorbing kept"));
        }
        let v = self.base.decode(base)?;
        let mut bits = v.bits().to_vec();
        bits.push(bit as u8);
        self.space.index_of(&LatentVector(bits))
    }

    /// Base state and emission bit for an augmented index.
    pub fn project(&self, index: usize) -> (usize, bool) {
        if !self.has_emission_bit {
            return (index, false);
        }
        if Some(index) == self.space.absorbing() {
            return (self.base.absorbing().expect("absorbing kept"), false);
        }
        let v = self.space.decode(index).expect("non-absorbing state");
        let (last, rest) = v.bits().split_last().expect("augmented width ≥ 1");
        let base = self
            .base
            .index_of(&LatentVector(rest.to_vec()))
            .expect("projection of augmented state exists in base");
        (base, *last == 1)
    }
}

/// Appends the emission bit when the emission probability is nontrivial.
///
/// Every non-absorbing state splits into `(bits, 0)` and `(bits, 1)`; the click
/// state at `t` becomes `(C_t, 1)`. The absorbing state is not split.
pub fn augment_for_emission(
    space: &StateSpace,
    emission_nontrivial: bool,
) -> Result<AugmentedStateSpace> {
    if !emission_nontrivial {
        return Ok(AugmentedStateSpace {
            base: space.clone(),
            has_emission_bit: false,
            space: space.clone(),
        });
    }
    let width = space.width() + 1;
    if width > MAX_WIDTH {
        return Err(GcmError::definition("augmented width exceeds maximum"));
    }
    let mut bits: Vec<LatentVector> = Vec::new();
    for flag in [0u8, 1] {
        for s in space.states() {
            if let Some(v) = &s.bits {
                let mut b = v.bits().to_vec();
                b.push(flag);
                bits.push(LatentVector(b));
            }
        }
    }
    let mut aug = StateSpace::from_parts(width, bits, space.absorbing().is_some(), Vec::new())?;
    let clicks = space
        .click_states()
        .iter()
        .map(|&c| {
            let mut b = space.decode(c).expect("click state has bits").bits().to_vec();
            b.push(1);
            aug.index_of(&LatentVector(b)).expect("lifted click state")
        })
        .collect();
    aug.click_states = clicks;
    Ok(AugmentedStateSpace {
        base: space.clone(),
        has_emission_bit: true,
        space: aug,
    })
}
