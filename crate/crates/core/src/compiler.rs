//! Symbolic transition factorizations and their compiled form.
//!
//! A model declares each transition probability `φ_{k'k,t}` as a product of
//! Bernoulli literals `ϑ` or `1 − ϑ`. Compiling a factorization yields, for
//! every position `t`, the structurally nonzero entries together with the
//! signed activation matrices (`+1` where a parameter enters as `ϑ`, `−1`
//! where it enters as `1 − ϑ`), so the E- and M-steps need no model-specific
//! code.

use std::collections::{HashMap, HashSet};
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::ActivationKind;
use crate::data::Session;
use crate::error::{GcmError, Result};

/// Which list position a literal reads its item and covariates from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Anchor {
    Current,
    Previous,
}

/// Which weight vector of a parameter block a literal uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Fixed(usize),
    /// The slot indexed by the item shown at the anchor position.
    Item,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub name: String,
    pub slot: Slot,
    pub anchor: Anchor,
}

impl ParamRef {
    pub fn global(name: &str) -> Self {
        ParamRef {
            name: name.to_string(),
            slot: Slot::Fixed(0),
            anchor: Anchor::Current,
        }
    }

    pub fn fixed(name: &str, slot: usize) -> Self {
        ParamRef {
            name: name.to_string(),
            slot: Slot::Fixed(slot),
            anchor: Anchor::Current,
        }
    }

    pub fn item(name: &str) -> Self {
        ParamRef {
            name: name.to_string(),
            slot: Slot::Item,
            anchor: Anchor::Current,
        }
    }

    pub fn previous_item(name: &str) -> Self {
        ParamRef {
            name: name.to_string(),
            slot: Slot::Item,
            anchor: Anchor::Previous,
        }
    }

    pub fn pos(self) -> Literal {
        Literal {
            param: self,
            positive: true,
        }
    }

    pub fn neg(self) -> Literal {
        Literal {
            param: self,
            positive: false,
        }
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slot {
            Slot::Fixed(s) => write!(f, "{}[{s}]", self.name)?,
            Slot::Item => write!(f, "{}[item]", self.name)?,
        }
        if self.anchor == Anchor::Previous {
            write!(f, "@prev")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Literal {
    pub param: ParamRef,
    pub positive: bool,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.positive {
            write!(f, "~")?;
        }
        write!(f, "{}", self.param)
    }
}

/// A transition probability: structural zero, or a product of literals
/// (the empty product is the constant 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Factor {
    Zero,
    Product(Vec<Literal>),
}

impl Factor {
    pub fn one() -> Self {
        Factor::Product(Vec::new())
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Zero => write!(f, "0"),
            Factor::Product(lits) if lits.is_empty() => write!(f, "1"),
            Factor::Product(lits) => {
                for (i, l) in lits.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{l}")?;
                }
                Ok(())
            }
        }
    }
}

/// Positions a rule applies to (1-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    All,
    Exactly(usize),
    Range { from: usize, to: Option<usize> },
}

impl Positions {
    pub fn contains(&self, t: usize) -> bool {
        match *self {
            Positions::All => true,
            Positions::Exactly(p) => p == t,
            Positions::Range { from, to } => t >= from && to.is_none_or(|e| t <= e),
        }
    }
}

impl fmt::Display for Positions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Positions::All => write!(f, "*"),
            Positions::Exactly(t) => write!(f, "{t}"),
            Positions::Range { from, to: None } => write!(f, "{from}.."),
            Positions::Range { from, to: Some(to) } => write!(f, "{from}..{to}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub positions: Positions,
    pub from: usize,
    pub to: usize,
    pub factor: Factor,
}

/// Transition probabilities declared per `(positions, k', k)`; pairs without
/// a rule are structural zeros.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransitionFactorization {
    pub rules: Vec<Rule>,
}

impl TransitionFactorization {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, positions: Positions, from: usize, to: usize, factor: Factor) -> &mut Self {
        self.rules.push(Rule {
            positions,
            from,
            to,
            factor,
        });
        self
    }

    pub fn add_product(&mut self, positions: Positions, from: usize, to: usize, lits: Vec<Literal>) -> &mut Self {
        self.add(positions, from, to, Factor::Product(lits))
    }

    /// Absorbs a nontrivial click emission `ϑ_y` into the transitions of an
    /// emission-augmented space: entering `(C_t, 1)` gains `ϑ_y`, entering
    /// `(C_t, 0)` gains `1 − ϑ_y`, and the `ψ_y = 1` copies of non-click
    /// states are unreachable.
    pub fn absorb_emission(
        &self,
        aug: &crate::state_space::AugmentedStateSpace,
        emission: &ParamRef,
        list_size: usize,
    ) -> Result<TransitionFactorization> {
        if !aug.has_emission_bit {
            return Ok(self.clone());
        }
        let base = &aug.base;
        let lift = |k: usize, bit: bool| {
            aug.lift(k, bit)
                .ok_or_else(|| GcmError::definition(format!("state {k} cannot be lifted")))
        };
        let mut out = TransitionFactorization::new();
        for t in 1..=list_size {
            let click = base.click_state(t);
            for rule in self.rules.iter().filter(|r| r.positions.contains(t)) {
                let Factor::Product(lits) = &rule.factor else { continue };
                let sources: Vec<usize> = if Some(rule.from) == base.absorbing() {
                    vec![lift(rule.from, false)?]
                } else {
                    vec![lift(rule.from, false)?, lift(rule.from, true)?]
                };
                for src in sources {
                    let at = Positions::Exactly(t);
                    if rule.to == click {
                        let mut on = lits.clone();
                        on.push(emission.clone().pos());
                        let mut off = lits.clone();
                        off.push(emission.clone().neg());
                        out.add_product(at, src, lift(rule.to, true)?, on);
                        out.add_product(at, src, lift(rule.to, false)?, off);
                    } else {
                        out.add_product(at, src, lift(rule.to, false)?, lits.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A named parameter block: one weight vector per slot, shared activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub activation: ActivationKind,
    pub slots: usize,
    /// Optional human-readable slot labels (item names, `(t', t)` pairs).
    pub slot_labels: Vec<String>,
}

impl ParameterSpec {
    pub fn new(name: &str, activation: ActivationKind, slots: usize) -> Self {
        ParameterSpec {
            name: name.to_string(),
            activation,
            slots,
            slot_labels: Vec::new(),
        }
    }

    pub fn slot_label(&self, slot: usize) -> String {
        self.slot_labels
            .get(slot)
            .cloned()
            .unwrap_or_else(|| slot.to_string())
    }
}

/// Parameter weight vectors: `blocks[p][slot]` is `θ` for that slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl Weights {
    pub fn defaults(specs: &[ParameterSpec]) -> Self {
        Weights {
            blocks: specs
                .iter()
                .map(|s| vec![s.activation.default_weights(); s.slots])
                .collect(),
        }
    }

    /// L1 distance over all concatenated weights.
    pub fn l1_distance(&self, other: &Weights) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.iter().zip(b))
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(x, y)| (x - y).abs())
            .sum()
    }

    pub fn check_shape(&self, specs: &[ParameterSpec]) -> Result<()> {
        if self.blocks.len() != specs.len() {
            return Err(GcmError::Dimension {
                expected: specs.len(),
                found: self.blocks.len(),
            });
        }
        for (b, s) in self.blocks.iter().zip(specs) {
            if b.len() != s.slots {
                return Err(GcmError::schema(format!(
                    "parameter `{}` has {} slots, expected {}",
                    s.name,
                    b.len(),
                    s.slots
                )));
            }
            if let Some(w) = b.iter().find(|w| w.len() != s.activation.weight_arity()) {
                return Err(GcmError::schema(format!(
                    "parameter `{}` weight vector has length {}, expected {}",
                    s.name,
                    w.len(),
                    s.activation.weight_arity()
                )));
            }
        }
        Ok(())
    }
}

/// A literal's parameter resolved to a block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockRef {
    pub block: usize,
    pub slot: Slot,
    pub anchor: Anchor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledEntry {
    pub from: usize,
    pub to: usize,
    /// `(index into CompiledStep::params, positive)`.
    pub literals: Vec<(usize, bool)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledStep {
    pub t: usize,
    pub entries: Vec<CompiledEntry>,
    pub params: Vec<BlockRef>,
    /// Per step parameter: `(entry index, ±1)` for every entry it enters.
    pub activation: Vec<Vec<(usize, i8)>>,
}

impl CompiledStep {
    /// Entry values given one activation value per step parameter.
    pub fn entry_values(&self, thetas: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.entries.len());
        self.entry_values_into(thetas, &mut out);
        out
    }

    pub fn observed_values_into(&self, thetas: &[f64], click_state: usize, clicked: bool, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.entries.iter().map(|e| {
            if (e.to == click_state) != clicked {
                return 0.0;
            }
            e.literals
                .iter()
                .map(|&(p, pos)| if pos { thetas[p] } else { 1.0 - thetas[p] })
                .product::<f64>()
        }));
    }

    pub fn entry_values_into(&self, thetas: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.entries.iter().map(|e| {
            e.literals
                .iter()
                .map(|&(p, pos)| if pos { thetas[p] } else { 1.0 - thetas[p] })
                .product::<f64>()
        }));
    }

    pub fn matrix(&self, k: usize, thetas: &[f64]) -> TransitionMatrix {
        let values = self.entry_values(thetas);
        TransitionMatrix {
            k,
            entries: self
                .entries
                .iter()
                .zip(values)
                .map(|(e, v)| (e.from, e.to, v))
                .collect(),
        }
    }
}

/// Compiled factorization for positions `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledTransitions {
    pub states: usize,
    pub steps: Vec<CompiledStep>,
}

impl CompiledTransitions {
    pub fn list_size(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> &CompiledStep {
        &self.steps[t - 1]
    }
}

/// Resolves names, expands position patterns and checks structural rules.
pub fn compile(
    f: &TransitionFactorization,
    states: usize,
    list_size: usize,
    specs: &[ParameterSpec],
) -> Result<CompiledTransitions> {
    let by_name: HashMap<&str, usize> = specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let mut steps = Vec::with_capacity(list_size);
    for t in 1..=list_size {
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        let mut params: Vec<BlockRef> = Vec::new();
        let mut param_index: HashMap<BlockRef, usize> = HashMap::new();
        let mut entries = Vec::new();
        for rule in f.rules.iter().filter(|r| r.positions.contains(t)) {
            if rule.from >= states || rule.to >= states {
                return Err(GcmError::definition(format!(
                    "rule {} {} -> {} references a state outside 0..{states}",
                    rule.positions, rule.from, rule.to
                )));
            }
            if !seen.insert((rule.from, rule.to)) {
                return Err(GcmError::definition(format!(
                    "transition {} -> {} is declared twice at position {t}",
                    rule.from, rule.to
                )));
            }
            let Factor::Product(lits) = &rule.factor else { continue };
            let mut used: HashSet<BlockRef> = HashSet::new();
            let mut literals = Vec::with_capacity(lits.len());
            for lit in lits {
                let &block = by_name.get(lit.param.name.as_str()).ok_or_else(|| {
                    GcmError::definition(format!("unknown parameter `{}`", lit.param.name))
                })?;
                if let Slot::Fixed(s) = lit.param.slot {
                    if s >= specs[block].slots {
                        return Err(GcmError::definition(format!(
                            "slot {s} of `{}` exceeds its {} slots",
                            lit.param.name, specs[block].slots
                        )));
                    }
                }
                if t == 1 && lit.param.anchor == Anchor::Previous {
                    return Err(GcmError::definition(format!(
                        "`{}` reads the previous position, which does not exist at t = 1",
                        lit.param
                    )));
                }
                let r = BlockRef {
                    block,
                    slot: lit.param.slot,
                    anchor: lit.param.anchor,
                };
                if !used.insert(r) {
                    return Err(GcmError::definition(format!(
                        "`{}` appears twice in transition {} -> {} at position {t}",
                        lit.param, rule.from, rule.to
                    )));
                }
                let idx = *param_index.entry(r).or_insert_with(|| {
                    params.push(r);
                    params.len() - 1
                });
                literals.push((idx, lit.positive));
            }
            entries.push(CompiledEntry {
                from: rule.from,
                to: rule.to,
                literals,
            });
        }
        entries.sort_by_key(|e| (e.from, e.to));
        let mut activation = vec![Vec::new(); params.len()];
        for (ei, e) in entries.iter().enumerate() {
            for &(p, pos) in &e.literals {
                activation[p].push((ei, if pos { 1 } else { -1 }));
            }
        }
        steps.push(CompiledStep {
            t,
            entries,
            params,
            activation,
        });
    }
    Ok(CompiledTransitions { states, steps })
}

/// Dense row-major `K × K` transition matrix for one `(session, t)`, stored
/// as its structurally nonzero entries.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub k: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl TransitionMatrix {
    pub fn from_dense(m: &Array2<f64>) -> Self {
        let k = m.nrows();
        let entries = m
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|((i, j), &v)| (i, j, v))
            .collect();
        TransitionMatrix { k, entries }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.k, self.k));
        for &(i, j, v) in &self.entries {
            m[[i, j]] += v;
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.k];
        for &(i, _, v) in &self.entries {
            s[i] += v;
        }
        s
    }
}

/// Signed activation matrix for one `(t, parameter)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub t: usize,
    pub param: ParamRef,
    pub signs: Array2<i8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrices {
    pub matrices: Vec<ActivationMatrix>,
}

impl ActivationMatrices {
    pub fn get(&self, t: usize, param: &ParamRef) -> Option<&Array2<i8>> {
        self.matrices
            .iter()
            .find(|m| m.t == t && &m.param == param)
            .map(|m| &m.signs)
    }
}

/// Dense signed activation matrices, one per `(t, parameter reference)`.
pub fn compile_activation_matrices(compiled: &CompiledTransitions, specs: &[ParameterSpec]) -> ActivationMatrices {
    let k = compiled.states;
    let mut matrices = Vec::new();
    for step in &compiled.steps {
        for (p, r) in step.params.iter().enumerate() {
            let mut signs = Array2::<i8>::zeros((k, k));
            for &(ei, s) in &step.activation[p] {
                let e = &step.entries[ei];
                signs[[e.from, e.to]] = s;
            }
            matrices.push(ActivationMatrix {
                t: step.t,
                param: ParamRef {
                    name: specs[r.block].name.clone(),
                    slot: r.slot,
                    anchor: r.anchor,
                },
                signs,
            });
        }
    }
    ActivationMatrices { matrices }
}

/// Binds weights and a log's covariate columns to a compiled model.
#[derive(Debug)]
pub struct Evaluator<'a> {
    compiled: &'a CompiledTransitions,
    specs: &'a [ParameterSpec],
    weights: &'a Weights,
    columns: Vec<Vec<usize>>,
    fallback: Vec<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        compiled: &'a CompiledTransitions,
        specs: &'a [ParameterSpec],
        weights: &'a Weights,
        covariate_names: &[String],
    ) -> Result<Self> {
        weights.check_shape(specs)?;
        let columns = specs
            .iter()
            .map(|s| {
                s.activation
                    .columns()
                    .iter()
                    .map(|c| {
                        covariate_names.iter().position(|n| n == c).ok_or_else(|| {
                            GcmError::schema(format!(
                                "parameter `{}` needs covariate column `{c}`, which the data lacks",
                                s.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let fallback = weights
            .blocks
            .iter()
            .zip(specs)
            .map(|(slots, s)| {
                let n = slots.len().max(1) as f64;
                let mut mean = vec![0.0; s.activation.weight_arity()];
                for w in slots {
                    mean.iter_mut().zip(w).for_each(|(m, v)| *m += v / n);
                }
                if slots.is_empty() {
                    s.activation.default_weights()
                } else {
                    mean
                }
            })
            .collect();
        Ok(Evaluator {
            compiled,
            specs,
            weights,
            columns,
            fallback,
        })
    }

    pub fn compiled(&self) -> &CompiledTransitions {
        self.compiled
    }

    pub fn specs(&self) -> &[ParameterSpec] {
        self.specs
    }

    fn anchor_position(t: usize, anchor: Anchor) -> usize {
        match anchor {
            Anchor::Current => t,
            Anchor::Previous => t - 1,
        }
    }

    /// Slot index a reference resolves to for `session` at position `t`.
    pub fn slot(&self, session: &Session, t: usize, r: &BlockRef) -> usize {
        match r.slot {
            Slot::Fixed(s) => s,
            Slot::Item => session.item_at(Self::anchor_position(t, r.anchor)),
        }
    }

    pub fn covariates(&self, session: &Session, t: usize, r: &BlockRef) -> Vec<f64> {
        let cols = &self.columns[r.block];
        if cols.is_empty() {
            return Vec::new();
        }
        let row = &session.covariates[Self::anchor_position(t, r.anchor) - 1];
        cols.iter().map(|&c| row[c]).collect()
    }

    fn theta(&self, block: usize, slot: usize) -> &[f64] {
        self.weights.blocks[block]
            .get(slot)
            .map(|w| w.as_slice())
            .unwrap_or(&self.fallback[block])
    }

    /// Activation value of each step parameter for `session` at `t`.
    pub fn thetas(&self, session: &Session, t: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.thetas_into(session, t, &mut out)?;
        Ok(out)
    }

    pub fn thetas_into(&self, session: &Session, t: usize, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        for r in &self.compiled.step(t).params {
            let x = self.covariates(session, t, r);
            let slot = self.slot(session, t, r);
            let v = self.specs[r.block]
                .activation
                .evaluate(self.theta(r.block, slot), &x)
                .map_err(|e| match e {
                    GcmError::NumericGuard(m) => GcmError::NumericGuard(format!(
                        "parameter `{}` slot {slot} at position {t}: {m}",
                        self.specs[r.block].name
                    )),
                    other => other,
                })?;
            out.push(v);
        }
        Ok(())
    }

    /// Entry values of every step for one session, reusing `buf`'s storage.
    /// With `observed = Some(click_states)`, entries whose target contradicts
    /// the session's click at that position are left at zero.
    pub fn session_steps(&self, session: &Session, observed: Option<&[usize]>, buf: &mut SessionSteps<'a>) -> Result<()> {
        buf.k = self.compiled.states;
        buf.steps.resize_with(self.compiled.list_size(), Default::default);
        let mut thetas = std::mem::take(&mut buf.thetas);
        for (i, (step, slot)) in self.compiled.steps.iter().zip(buf.steps.iter_mut()).enumerate() {
            self.thetas_into(session, i + 1, &mut thetas)?;
            match observed {
                Some(cs) => step.observed_values_into(&thetas, cs[i + 1], session.clicks[i], &mut slot.values),
                None => step.entry_values_into(&thetas, &mut slot.values),
            }
            slot.step = Some(step);
        }
        buf.thetas = thetas;
        Ok(())
    }

    pub fn transitions(&self, session: &Session, t: usize) -> Result<TransitionMatrix> {
        let thetas = self.thetas(session, t)?;
        Ok(self.compiled.step(t).matrix(self.compiled.states, &thetas))
    }

    /// `M_1 … M_T` for one session.
    pub fn session_transitions(&self, session: &Session) -> Result<Vec<TransitionMatrix>> {
        (1..=self.compiled.list_size())
            .map(|t| self.transitions(session, t))
            .collect()
    }
}

/// One evaluated step: compiled entries paired with their values.
#[derive(Clone, Debug, Default)]
pub struct EvaluatedStep<'a> {
    step: Option<&'a CompiledStep>,
    values: Vec<f64>,
}

impl<'a> EvaluatedStep<'a> {
    pub fn step(&self) -> &'a CompiledStep {
        self.step.expect("evaluated")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Reusable per-session buffer of evaluated steps.
#[derive(Clone, Debug, Default)]
pub struct SessionSteps<'a> {
    k: usize,
    steps: Vec<EvaluatedStep<'a>>,
    thetas: Vec<f64>,
}

impl<'a> SessionSteps<'a> {
    pub fn steps(&self) -> &[EvaluatedStep<'a>] {
        &self.steps
    }

    pub fn states(&self) -> usize {
        self.k
    }
}

/// Sparse access to one position's transition matrix.
pub trait SparseStep {
    fn states(&self) -> usize;
    /// Calls `f(from, to, value)` for every entry, in a fixed order.
    fn for_each_entry(&self, f: impl FnMut(usize, usize, f64));
}

impl SparseStep for TransitionMatrix {
    fn states(&self) -> usize {
        self.k
    }

    fn for_each_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        for &(a, b, v) in &self.entries {
            f(a, b, v);
        }
    }
}

/// Pairs an evaluated step with the state count.
#[derive(Clone, Copy, Debug)]
pub struct StepView<'s, 'a> {
    pub k: usize,
    pub step: &'s EvaluatedStep<'a>,
}

impl SparseStep for StepView<'_, '_> {
    fn states(&self) -> usize {
        self.k
    }

    fn for_each_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        for (e, &v) in self.step.step().entries.iter().zip(&self.step.values) {
            f(e.from, e.to, v);
        }
    }
}

impl<'a> SessionSteps<'a> {
    pub fn views(&self) -> Vec<StepView<'_, 'a>> {
        self.steps.iter().map(|step| StepView { k: self.k, step }).collect()
    }
}

/// Convenience wrapper: compiled transition matrix for one `(session, t)`.
pub fn evaluate_transitions(
    compiled: &CompiledTransitions,
    specs: &[ParameterSpec],
    weights: &Weights,
    covariate_names: &[String],
    session: &Session,
    t: usize,
) -> Result<TransitionMatrix> {
    Evaluator::new(compiled, specs, weights, covariate_names)?.transitions(session, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowIssue {
    pub t: usize,
    pub row: usize,
    pub sum: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    /// Set when the factorization does not compile at all.
    pub compile_error: Option<String>,
    /// Rows with mass that does not sum to one on some random draw.
    pub offending: Vec<RowIssue>,
    /// Rows without any outgoing transition (states never left at `t`).
    pub empty_rows: Vec<(usize, usize)>,
    pub draws: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.compile_error.is_none() && self.offending.is_empty()
    }
}

/// Checks that every row with mass sums to one on `draws` random parameter
/// draws with each `ϑ` uniform in `(0.01, 0.99)`.
pub fn validate_factorization(
    f: &TransitionFactorization,
    states: usize,
    list_size: usize,
    specs: &[ParameterSpec],
    draws: usize,
    seed: u64,
) -> ValidationReport {
    let compiled = match compile(f, states, list_size, specs) {
        Ok(c) => c,
        Err(e) => {
            return ValidationReport {
                compile_error: Some(e.to_string()),
                ..Default::default()
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        draws,
        ..Default::default()
    };
    let mut flagged: HashSet<(usize, usize)> = HashSet::new();
    for step in &compiled.steps {
        let mut has_mass = vec![false; states];
        for e in &step.entries {
            has_mass[e.from] = true;
        }
        report
            .empty_rows
            .extend((0..states).filter(|&k| !has_mass[k]).map(|k| (step.t, k)));
        for _ in 0..draws {
            let thetas: Vec<f64> = (0..step.params.len()).map(|_| rng.random_range(0.01..0.99)).collect();
            let m = step.matrix(states, &thetas);
            for (row, sum) in m.row_sums().into_iter().enumerate() {
                if has_mass[row] && (sum - 1.0).abs() > 1e-12 && flagged.insert((step.t, row)) {
                    report.offending.push(RowIssue { t: step.t, row, sum });
                }
            }
        }
    }
    report
}
