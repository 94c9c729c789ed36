//! The CZM (dynamic Bayesian network) click model as a cascade model.
//!
//! Latent bits per position, lowest first: attraction `R_t`, examination
//! `E_t`, satisfaction with the previous click `S_{t-1}`. Vectors with
//! `S = 1, E = 1` are infeasible, which leaves six states plus an absorbing
//! state:
//!
//! | index | S | E | R | click |
//! |-------|---|---|---|-------|
//! | 0     | 0 | 0 | 0 |       |
//! | 1     | 0 | 0 | 1 |       |
//! | 2     | 0 | 1 | 0 |       |
//! | 3     | 0 | 1 | 1 | yes   |
//! | 4     | 1 | 0 | 0 |       |
//! | 5     | 1 | 0 | 1 |       |
//! | 6     | absorbing     |   |

use super::{ModelDefinition, ATTRACTION, CONTINUATION, SATISFACTION};
use crate::activations::ActivationKind;
use crate::compiler::{Factor, Literal, ParamRef, ParameterSpec, Positions, TransitionFactorization};
use crate::error::{GcmError, Result};
use crate::state_space::{LatentVector, StateSpace};

const E: usize = 1;
const S: usize = 2;

pub fn czm_states(list_size: usize) -> Result<StateSpace> {
    StateSpace::build(
        3,
        list_size,
        |v| !(v.get(S) && v.get(E)),
        |_| LatentVector::new(vec![1, 1, 0]).expect("binary"),
        true,
    )
}

/// CZM with per-item attraction and satisfaction and a global continuation
/// probability.
pub fn build_czm(list_size: usize, items: usize) -> Result<ModelDefinition> {
    if items == 0 {
        return Err(GcmError::definition("CZM needs at least one item"));
    }
    if list_size == 0 {
        return Err(GcmError::definition("CZM needs a list size of at least one"));
    }
    let space = czm_states(list_size)?;
    let click = space.click_state(0);
    let absorbing = space.absorbing().expect("CZM has an absorbing state");
    let examined_skip = space
        .index_of(&LatentVector::new(vec![0, 1, 0])?)
        .expect("feasible state");

    let attr = || ParamRef::item(ATTRACTION);
    let cont = || ParamRef::global(CONTINUATION);
    let sat = || ParamRef::previous_item(SATISFACTION);

    // Target state for (E, R) given S = 0.
    let target = |e: bool, r: bool| -> usize {
        space
            .index_of(&LatentVector::from_bools(&[r, e, false]))
            .expect("feasible state")
    };
    let continue_lits = |e: bool, r: bool| -> Vec<Literal> {
        vec![
            if e { cont().pos() } else { cont().neg() },
            if r { attr().pos() } else { attr().neg() },
        ]
    };

    let mut f = TransitionFactorization::new();
    for k in 0..space.len() {
        if k != examined_skip && k != click {
            f.add(Positions::All, k, absorbing, Factor::one());
        }
    }
    let later = Positions::Range { from: 2, to: None };
    for e in [false, true] {
        for r in [false, true] {
            let to = target(e, r);
            f.add_product(Positions::All, examined_skip, to, continue_lits(e, r));
            let mut lits = continue_lits(e, r);
            lits.push(sat().neg());
            f.add_product(later, click, to, lits);
        }
    }
    for r in [false, true] {
        let satisfied = space
            .index_of(&LatentVector::from_bools(&[r, false, true]))
            .expect("feasible state");
        f.add_product(
            later,
            click,
            satisfied,
            vec![if r { attr().pos() } else { attr().neg() }, sat().pos()],
        );
    }
    // The virtual click at position 0 has S_0 = 0 and the first item is
    // always examined.
    f.add_product(Positions::Exactly(1), click, target(true, false), vec![attr().neg()]);
    f.add_product(Positions::Exactly(1), click, target(true, true), vec![attr().pos()]);

    let params = vec![
        ParameterSpec::new(ATTRACTION, ActivationKind::Constant, items),
        ParameterSpec::new(SATISFACTION, ActivationKind::Constant, items),
        ParameterSpec {
            slot_labels: vec!["global".into()],
            ..ParameterSpec::new(CONTINUATION, ActivationKind::Constant, 1)
        },
    ];
    let def = ModelDefinition {
        name: "czm".into(),
        list_size,
        space,
        params,
        factorization: f,
    };
    def.compile()?;
    Ok(def)
}
