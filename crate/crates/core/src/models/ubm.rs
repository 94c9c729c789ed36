//! The user browsing model (UBM) as a cascade model.
//!
//! Examination depends on the position of the last click, so the state
//! carries it: block `t'` (last click at `t'`, with `t' = 0` the virtual
//! click) holds the four `(E, R)` combinations, the click state being
//! `(1, 1)`. Latent bits, lowest first: `E`, `R`, then the one-hot last-click
//! indicator `e_0 … e_T`. That gives `4(T + 1)` states plus an absorbing
//! state, laid out block by block:
//!
//! `4t' + 0 = (E0, R0)`, `4t' + 1 = (E1, R0)`, `4t' + 2 = (E0, R1)`,
//! `4t' + 3 = (E1, R1)` (click state for position `t'`).
//!
//! At position `t`, a row in block `t' < t` moves within its block on a skip
//! and jumps to the click state of block `t` on a click, with probability
//! `φ_{r(t)} γ_{t't}`.

use super::{ModelDefinition, ATTRACTION, EXAMINATION};
use crate::activations::ActivationKind;
use crate::compiler::{Factor, ParamRef, ParameterSpec, Positions, TransitionFactorization};
use crate::error::{GcmError, Result};
use crate::state_space::{LatentVector, StateSpace};

/// Slot of `γ_{t't}` for `0 ≤ t' < t`.
pub fn ubm_examination_slot(last_click: usize, t: usize) -> usize {
    debug_assert!(last_click < t);
    t * (t - 1) / 2 + last_click
}

pub fn ubm_states(list_size: usize) -> Result<StateSpace> {
    let width = list_size + 3;
    StateSpace::build(
        width,
        list_size,
        |v| v.bits()[2..].iter().filter(|&&b| b == 1).count() == 1,
        |t| {
            let mut bits = vec![0u8; width];
            bits[0] = 1;
            bits[1] = 1;
            bits[2 + t] = 1;
            LatentVector::new(bits).expect("binary")
        },
        true,
    )
}

/// UBM with per-item attraction and one examination probability per
/// `(last click, position)` pair.
pub fn build_ubm(list_size: usize, items: usize) -> Result<ModelDefinition> {
    if items == 0 {
        return Err(GcmError::definition("UBM needs at least one item"));
    }
    if list_size == 0 {
        return Err(GcmError::definition("UBM needs a list size of at least one"));
    }
    let space = ubm_states(list_size)?;
    let absorbing = space.absorbing().expect("UBM has an absorbing state");
    let blocks = list_size + 1;
    let attr = || ParamRef::item(ATTRACTION);

    let mut f = TransitionFactorization::new();
    f.add(Positions::All, absorbing, absorbing, Factor::one());
    for b in 0..blocks {
        for j in 0..4 {
            let src = 4 * b + j;
            if b >= 1 {
                // The last click cannot be at or after the current position.
                f.add(Positions::Range { from: 1, to: Some(b) }, src, absorbing, Factor::one());
            }
            for t in (b + 1)..=list_size {
                let gamma = || ParamRef::fixed(EXAMINATION, ubm_examination_slot(b, t));
                let at = Positions::Exactly(t);
                f.add_product(at, src, 4 * b, vec![attr().neg(), gamma().neg()]);
                f.add_product(at, src, 4 * b + 1, vec![attr().neg(), gamma().pos()]);
                f.add_product(at, src, 4 * b + 2, vec![attr().pos(), gamma().neg()]);
                f.add_product(at, src, 4 * t + 3, vec![attr().pos(), gamma().pos()]);
            }
        }
    }

    let pairs = list_size * (list_size + 1) / 2;
    let mut labels = vec![String::new(); pairs];
    for t in 1..=list_size {
        for b in 0..t {
            labels[ubm_examination_slot(b, t)] = format!("{b}->{t}");
        }
    }
    let params = vec![
        ParameterSpec::new(ATTRACTION, ActivationKind::Constant, items),
        ParameterSpec {
            slot_labels: labels,
            ..ParameterSpec::new(EXAMINATION, ActivationKind::Constant, pairs)
        },
    ];
    let def = ModelDefinition {
        name: "ubm".into(),
        list_size,
        space,
        params,
        factorization: f,
    };
    def.compile()?;
    Ok(def)
}
