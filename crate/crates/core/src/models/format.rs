//! Line-oriented text format for model definitions.
//!
//! ```text
//! gcm-model 1
//! name coin
//! list_size 3
//! width 1
//! state 0 0
//! state 1 1
//! absorbing
//! click * 1
//! param p constant slots=1
//! entry * 0 0 : ~p[0]
//! entry * 0 1 : p[0]
//! entry * 1 2 : 1
//! entry * 2 2 : 1
//! ```
//!
//! `states K` may replace explicit `state` lines and takes the first `K`
//! vectors in key order. Position patterns are `*`, `t`, `a..b` and `a..`.
//! Literals are `[~]name[slot|item][@prev]`. `#` starts a comment.

use super::ModelDefinition;
use crate::activations::ActivationKind;
use crate::compiler::{Anchor, Factor, Literal, ParamRef, ParameterSpec, Positions, Slot, TransitionFactorization};
use crate::error::{GcmError, Result};
use crate::state_space::{LatentVector, StateSpace};

const MAGIC: &str = "gcm-model";
const VERSION: u32 = 1;

fn label_is_plain(l: &str) -> bool {
    !l.is_empty() && !l.contains(|c: char| c.is_whitespace() || c == '|')
}

pub fn write_definition(def: &ModelDefinition) -> Result<String> {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("{MAGIC} {VERSION}"));
    line(format!("name {}", def.name));
    line(format!("list_size {}", def.list_size));
    line(format!("width {}", def.space.width()));
    for (i, s) in def.space.states().iter().enumerate() {
        if let Some(bits) = &s.bits {
            line(format!("state {i} {bits}"));
        }
    }
    if def.space.absorbing().is_some() {
        line("absorbing".into());
    }
    let clicks = def.space.click_states();
    let mut start = 0;
    while start < clicks.len() {
        let mut end = start;
        while end + 1 < clicks.len() && clicks[end + 1] == clicks[start] {
            end += 1;
        }
        let pat = if start == 0 && end + 1 == clicks.len() {
            "*".to_string()
        } else if start == end {
            start.to_string()
        } else {
            format!("{start}..{end}")
        };
        line(format!("click {pat} {}", clicks[start]));
        start = end + 1;
    }
    for p in &def.params {
        let mut s = format!("param {} ", p.name);
        match &p.activation {
            ActivationKind::Constant => s.push_str("constant"),
            ActivationKind::LogisticLinear { columns, bias } => {
                s.push_str("logistic");
                if !columns.is_empty() {
                    s.push_str(&format!(" columns={}", columns.join(",")));
                }
                s.push_str(&format!(" bias={bias}"));
            }
            ActivationKind::Custom { function, .. } => {
                return Err(GcmError::definition(format!(
                    "parameter `{}` uses custom activation `{}`, which has no text form",
                    p.name,
                    function.name()
                )))
            }
        }
        s.push_str(&format!(" slots={}", p.slots));
        if !p.slot_labels.is_empty() && p.slot_labels.iter().all(|l| label_is_plain(l)) {
            s.push_str(&format!(" labels={}", p.slot_labels.join("|")));
        }
        line(s);
    }
    for r in &def.factorization.rules {
        line(format!("entry {} {} {} : {}", r.positions, r.from, r.to, r.factor));
    }
    Ok(out)
}

fn err(line: usize, message: impl Into<String>) -> GcmError {
    GcmError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| err(line, format!("expected a non-negative integer for {what}, found `{s}`")))
}

fn parse_positions(s: &str, line: usize) -> Result<Positions> {
    if s == "*" {
        return Ok(Positions::All);
    }
    if let Some((a, b)) = s.split_once("..") {
        let from = parse_usize(a, line, "range start")?;
        let to = if b.is_empty() {
            None
        } else {
            let to = parse_usize(b, line, "range end")?;
            if to < from {
                return Err(err(line, format!("empty position range `{s}`")));
            }
            Some(to)
        };
        return Ok(Positions::Range { from, to });
    }
    Ok(Positions::Exactly(parse_usize(s, line, "position")?))
}

fn parse_literal(tok: &str, line: usize) -> Result<Literal> {
    let (positive, rest) = match tok.strip_prefix('~') {
        Some(r) => (false, r),
        None => (true, tok),
    };
    let (rest, anchor) = match rest.strip_suffix("@prev") {
        Some(r) => (r, Anchor::Previous),
        None => (rest, Anchor::Current),
    };
    let open = rest
        .find('[')
        .ok_or_else(|| err(line, format!("literal `{tok}` lacks a `[slot]` suffix")))?;
    let name = &rest[..open];
    let inner = rest[open + 1..]
        .strip_suffix(']')
        .ok_or_else(|| err(line, format!("literal `{tok}` has an unterminated slot")))?;
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(err(line, format!("invalid parameter name in `{tok}`")));
    }
    let slot = if inner == "item" {
        Slot::Item
    } else {
        Slot::Fixed(parse_usize(inner, line, "slot")?)
    };
    Ok(Literal {
        param: ParamRef {
            name: name.to_string(),
            slot,
            anchor,
        },
        positive,
    })
}

fn parse_factor(s: &str, line: usize) -> Result<Factor> {
    match s.trim() {
        "0" => Ok(Factor::Zero),
        "1" => Ok(Factor::one()),
        "" => Err(err(line, "missing factor after `:`")),
        other => Ok(Factor::Product(
            other
                .split_whitespace()
                .map(|t| parse_literal(t, line))
                .collect::<Result<_>>()?,
        )),
    }
}

fn parse_param(fields: &[&str], line: usize) -> Result<ParameterSpec> {
    let [name, kind, opts @ ..] = fields else {
        return Err(err(line, "expected `param <name> <kind> slots=N ...`"));
    };
    let mut slots = None;
    let mut columns = Vec::new();
    let mut bias = false;
    let mut labels = Vec::new();
    for o in opts {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, found `{o}`")))?;
        match k {
            "slots" => slots = Some(parse_usize(v, line, "slots")?),
            "columns" => columns = v.split(',').filter(|c| !c.is_empty()).map(String::from).collect(),
            "bias" => {
                bias = v
                    .parse()
                    .map_err(|_| err(line, format!("bias must be true or false, found `{v}`")))?
            }
            "labels" => labels = v.split('|').map(String::from).collect(),
            _ => return Err(err(line, format!("unknown parameter option `{k}`"))),
        }
    }
    let activation = match *kind {
        "constant" => {
            if !columns.is_empty() || bias {
                return Err(err(line, "constant parameters take no columns or bias"));
            }
            ActivationKind::Constant
        }
        "logistic" => ActivationKind::LogisticLinear { columns, bias },
        other => return Err(err(line, format!("unknown activation `{other}`"))),
    };
    let slots = slots.ok_or_else(|| err(line, "missing slots=N"))?;
    if !labels.is_empty() && labels.len() != slots {
        return Err(err(line, format!("{} labels for {slots} slots", labels.len())));
    }
    Ok(ParameterSpec {
        name: name.to_string(),
        activation,
        slots,
        slot_labels: labels,
    })
}

pub fn parse_definition(text: &str) -> Result<ModelDefinition> {
    let mut name = None;
    let mut list_size = None;
    let mut width = None;
    let mut bits: Vec<LatentVector> = Vec::new();
    let mut absorbing = false;
    let mut clicks: Vec<(Positions, usize, usize)> = Vec::new();
    let mut params: Vec<ParameterSpec> = Vec::new();
    let mut f = TransitionFactorization::new();
    let mut seen_header = false;

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if !seen_header {
            if fields != [MAGIC, "1"] {
                return Err(err(ln, format!("expected header `{MAGIC} {VERSION}`")));
            }
            seen_header = true;
            continue;
        }
        match fields[0] {
            "name" if fields.len() == 2 => name = Some(fields[1].to_string()),
            "list_size" if fields.len() == 2 => list_size = Some(parse_usize(fields[1], ln, "list_size")?),
            "width" if fields.len() == 2 => width = Some(parse_usize(fields[1], ln, "width")?),
            "state" if fields.len() == 3 => {
                let idx = parse_usize(fields[1], ln, "state index")?;
                if idx != bits.len() {
                    return Err(err(ln, format!("state {idx} is out of order, expected {}", bits.len())));
                }
                let v = LatentVector::parse(fields[2]).map_err(|e| err(ln, e.to_string()))?;
                if Some(v.len()) != width {
                    return Err(err(ln, "state bits must match the declared width"));
                }
                bits.push(v);
            }
            "states" if fields.len() == 2 => {
                let w = width.ok_or_else(|| err(ln, "`states` needs a preceding `width`"))?;
                let k = parse_usize(fields[1], ln, "state count")?;
                if w >= 64 || k as u64 > 1u64 << w {
                    return Err(err(ln, format!("{k} states do not fit in width {w}")));
                }
                for key in 1..=k as u64 {
                    bits.push(LatentVector::from_key(key, w).map_err(|e| err(ln, e.to_string()))?);
                }
            }
            "absorbing" if fields.len() == 1 => absorbing = true,
            "click" if fields.len() == 3 => {
                let p = parse_positions(fields[1], ln)?;
                clicks.push((p, parse_usize(fields[2], ln, "click state")?, ln));
            }
            "param" => params.push(parse_param(&fields[1..], ln)?),
            "entry" => {
                let (head, factor) = content
                    .split_once(':')
                    .ok_or_else(|| err(ln, "expected `entry <positions> <from> <to> : <factor>`"))?;
                let h: Vec<&str> = head.split_whitespace().collect();
                if h.len() != 4 {
                    return Err(err(ln, "expected `entry <positions> <from> <to> : <factor>`"));
                }
                f.add(
                    parse_positions(h[1], ln)?,
                    parse_usize(h[2], ln, "source state")?,
                    parse_usize(h[3], ln, "target state")?,
                    parse_factor(factor, ln)?,
                );
            }
            other => return Err(err(ln, format!("unrecognised line starting with `{other}`"))),
        }
    }
    let last = text.lines().count().max(1);
    if !seen_header {
        return Err(err(last, "empty model definition"));
    }
    let name = name.ok_or_else(|| err(last, "missing `name`"))?;
    let list_size = list_size.ok_or_else(|| err(last, "missing `list_size`"))?;
    let width = width.ok_or_else(|| err(last, "missing `width`"))?;

    let mut click_states = vec![None; list_size + 1];
    for &(p, k, ln) in &clicks {
        for (t, slot) in click_states.iter_mut().enumerate() {
            if p.contains(t) {
                if slot.is_some() {
                    return Err(err(ln, format!("click state for position {t} declared twice")));
                }
                *slot = Some(k);
            }
        }
    }
    let click_states = click_states
        .into_iter()
        .enumerate()
        .map(|(t, c)| c.ok_or_else(|| err(last, format!("no click state for position {t}"))))
        .collect::<Result<Vec<_>>>()?;
    let space = StateSpace::from_parts(width, bits, absorbing, click_states)?;
    let def = ModelDefinition {
        name,
        list_size,
        space,
        params,
        factorization: f,
    };
    def.compile()?;
    Ok(def)
}
