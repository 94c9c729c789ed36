//! Model definitions: a state space, parameter blocks and a transition
//! factorization, plus the built-in cascade models.

mod czm;
mod format;
mod ubm;

pub use czm::{build_czm, czm_states};
pub use format::{parse_definition, write_definition};
pub use ubm::{build_ubm, ubm_examination_slot, ubm_states};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::ActivationKind;
use crate::compiler::{
    compile, validate_factorization, CompiledTransitions, Factor, ParameterSpec, Slot, TransitionFactorization,
    ValidationReport, Weights,
};
use crate::error::{GcmError, Result};
use crate::state_space::StateSpace;

pub const ATTRACTION: &str = "attraction";
pub const SATISFACTION: &str = "satisfaction";
pub const CONTINUATION: &str = "continuation";
pub const EXAMINATION: &str = "examination";

/// Alternative spellings accepted for the canonical parameter names.
const ALIASES: &[(&str, &str)] = &[
    ("relevance", ATTRACTION),
    ("phi_r", ATTRACTION),
    ("phi_a", ATTRACTION),
    ("phi_s", SATISFACTION),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDefinition {
    pub name: String,
    pub list_size: usize,
    pub space: StateSpace,
    pub params: Vec<ParameterSpec>,
    pub factorization: TransitionFactorization,
}

/// How the slots of one parameter block are tied together.
#[derive(Clone, Debug, PartialEq)]
pub enum Sharing {
    /// One weight shared by every slot.
    Global,
    /// One weight per item, looked up by the item at the literal's anchor.
    PerItem { items: usize },
    /// A single logistic-linear activation over named covariate columns.
    Covariates { columns: Vec<String>, bias: bool },
}

impl ModelDefinition {
    pub fn compile(&self) -> Result<CompiledTransitions> {
        compile(&self.factorization, self.space.len(), self.list_size, &self.params)
    }

    pub fn validate(&self, draws: usize, seed: u64) -> ValidationReport {
        validate_factorization(
            &self.factorization,
            self.space.len(),
            self.list_size,
            &self.params,
            draws,
            seed,
        )
    }

    /// Resolves a parameter name, accepting the alias table and `gamma`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        let lower = name.to_ascii_lowercase();
        let canonical = match lower.as_str() {
            "gamma" => {
                if self.params.iter().any(|p| p.name == CONTINUATION) {
                    CONTINUATION
                } else {
                    EXAMINATION
                }
            }
            other => ALIASES
                .iter()
                .find(|(a, _)| *a == other)
                .map(|(_, c)| *c)
                .unwrap_or(other),
        };
        self.params
            .iter()
            .position(|p| p.name == canonical || p.name == name)
    }

    pub fn default_weights(&self) -> Weights {
        Weights::defaults(&self.params)
    }

    /// Constants uniform in `(0.05, 0.95)`, logistic weights uniform in
    /// `(-1, 1)`.
    pub fn random_weights(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Weights {
            blocks: self
                .params
                .iter()
                .map(|s| {
                    (0..s.slots)
                        .map(|_| match s.activation {
                            ActivationKind::Constant => vec![rng.random_range(0.05..0.95)],
                            _ => (0..s.activation.weight_arity())
                                .map(|_| rng.random_range(-1.0..1.0))
                                .collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Re-ties the slots of parameter `name` according to `rule`.
    pub fn share(mut self, name: &str, rule: Sharing) -> Result<Self> {
        let block = self
            .param_index(name)
            .ok_or_else(|| GcmError::definition(format!("cannot share undeclared parameter `{name}`")))?;
        let canonical = self.params[block].name.clone();
        let (slot, spec) = match &rule {
            Sharing::Global => (
                Slot::Fixed(0),
                ParameterSpec {
                    slots: 1,
                    slot_labels: vec!["global".into()],
                    ..self.params[block].clone()
                },
            ),
            Sharing::PerItem { items } => (
                Slot::Item,
                ParameterSpec {
                    slots: *items,
                    slot_labels: Vec::new(),
                    ..self.params[block].clone()
                },
            ),
            Sharing::Covariates { columns, bias } => (
                Slot::Fixed(0),
                ParameterSpec {
                    name: canonical.clone(),
                    activation: ActivationKind::LogisticLinear {
                        columns: columns.clone(),
                        bias: *bias,
                    },
                    slots: 1,
                    slot_labels: vec!["covariates".into()],
                },
            ),
        };
        for rule in &mut self.factorization.rules {
            if let Factor::Product(lits) = &mut rule.factor {
                for l in lits.iter_mut().filter(|l| l.param.name == canonical) {
                    l.param.slot = slot;
                }
            }
        }
        self.params[block] = spec;
        self.compile()?;
        Ok(self)
    }
}
