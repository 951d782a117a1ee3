//! Reaction network declaration, parsing and per-regime classification.
//!
//! A model file is line-oriented text with four bracketed sections:
//!
//! ```text
//! [model]
//! name = GENE1
//! N = 100
//!
//! [params]
//! k_on = 2.0
//!
//! [species]
//! G discrete 0
//! P continuous 0.0
//!
//! [reactions]
//! R_on | delta: G=+1 | rate = k_on*(1-G) | order = unit
//! ```
//!
//! Rates are written in scaled form and evaluated on the scaled state
//! `x = (x_C, X_D)`; the simulator multiplies them by the order factor
//! (`1`, `N`, `N/eps` or `1/eps`).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rate_expr::{parse_rate_expr, CompiledRate, EvalError, ParseError, RateExpr, Slot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate name `{name}`")]
    Duplicate { line: usize, name: String },
    #[error("line {line}: reaction `{reaction}` uses unbound identifier `{name}`")]
    UnboundIdentifier {
        line: usize,
        reaction: String,
        name: String,
    },
    #[error("line {line}: unknown species `{name}`")]
    UnknownSpecies { line: usize, name: String },
    #[error("line {line}: sdelta on discrete species `{species}` in reaction `{reaction}`")]
    SdeltaOnDiscrete {
        line: usize,
        reaction: String,
        species: String,
    },
    #[error("line {line}: rate expression: {source}")]
    Expr { line: usize, source: ParseError },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("regime {regime}: {}{reason}", if reaction.is_empty() { String::new() } else { format!("reaction `{reaction}`: ") })]
pub struct ClassifyError {
    pub regime: Regime,
    pub reaction: String,
    pub reason: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error("model uses eps-scaled orders but no eps was given")]
    MissingEps,
    #[error("negative propensity {value} for reaction `{reaction}` at state {state:?}")]
    Negative {
        reaction: String,
        value: f64,
        state: Vec<f64>,
    },
    #[error("reaction `{reaction}`: {source}")]
    Eval { reaction: String, source: EvalError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeciesKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesDecl {
    pub name: String,
    pub kind: SpeciesKind,
    pub init: f64,
    pub fast_range: Option<(i64, i64)>,
    pub is_theta: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingOrder {
    Unit,
    N,
    NOverEps,
    OneOverEps,
}

impl ScalingOrder {
    pub fn factor(self, n: f64, eps: Option<f64>) -> Result<f64, PropensityError> {
        Ok(match self {
            ScalingOrder::Unit => 1.0,
            ScalingOrder::N => n,
            ScalingOrder::NOverEps => n / eps.ok_or(PropensityError::MissingEps)?,
            ScalingOrder::OneOverEps => 1.0 / eps.ok_or(PropensityError::MissingEps)?,
        })
    }

    fn needs_eps(self) -> bool {
        matches!(self, ScalingOrder::NOverEps | ScalingOrder::OneOverEps)
    }
}

impl FromStr for ScalingOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(ScalingOrder::Unit),
            "N" => Ok(ScalingOrder::N),
            "N_over_eps" => Ok(ScalingOrder::NOverEps),
            "one_over_eps" => Ok(ScalingOrder::OneOverEps),
            other => Err(format!("unknown order `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaGate {
    Theta0,
    Theta1,
}

impl ThetaGate {
    fn value(self) -> f64 {
        match self {
            ThetaGate::Theta0 => 0.0,
            ThetaGate::Theta1 => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionDecl {
    pub name: String,
    /// Molecule-count stoichiometry, keyed by species index. Zero entries kept as written.
    pub delta: Vec<(usize, i64)>,
    /// Scaled O(1) jumps of continuous species.
    pub sdelta: Vec<(usize, f64)>,
    pub rate: RateExpr,
    pub order: ScalingOrder,
    pub gate: Option<ThetaGate>,
    pub line: usize,
    compiled: CompiledRate,
    reads: BTreeSet<usize>,
}

impl ReactionDecl {
    /// Scaled rate evaluated on the full scaled state vector.
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.compiled.eval(x)
    }

    /// Species indices read by the rate expression.
    pub fn reads(&self) -> &BTreeSet<usize> {
        &self.reads
    }

    /// Species with a nonzero count change.
    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.delta.iter().filter(|(_, d)| *d != 0).map(|(i, _)| *i)
    }

    pub fn delta_of(&self, species: usize) -> i64 {
        self.delta.iter().filter(|(i, _)| *i == species).map(|(_, d)| *d).sum()
    }

    pub fn sdelta_of(&self, species: usize) -> f64 {
        self.sdelta.iter().filter(|(i, _)| *i == species).map(|(_, d)| *d).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    pub species: Vec<SpeciesDecl>,
    pub reactions: Vec<ReactionDecl>,
    pub params: Vec<(String, f64)>,
    pub default_n: u64,
    pub default_eps: Option<f64>,
}

impl NetworkModel {
    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn reaction_index(&self, name: &str) -> Option<usize> {
        self.reactions.iter().position(|r| r.name == name)
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn is_continuous(&self, species: usize) -> bool {
        self.species[species].kind == SpeciesKind::Continuous
    }

    pub fn theta_index(&self) -> Option<usize> {
        self.species.iter().position(|s| s.is_theta)
    }

    /// Initial molecule counts at scale `n`; continuous species hold `round(n * x_C)`.
    pub fn initial_counts(&self, n: u64) -> Vec<i64> {
        self.species
            .iter()
            .map(|s| match s.kind {
                SpeciesKind::Continuous => (s.init * n as f64).round() as i64,
                SpeciesKind::Discrete => s.init as i64,
            })
            .collect()
    }

    /// Scaled initial state `(x_C, X_D)`.
    pub fn initial_scaled(&self) -> Vec<f64> {
        self.species.iter().map(|s| s.init).collect()
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Model,
    Params,
    Species,
    Reactions,
}

struct RawReaction {
    line: usize,
    name: String,
    delta: Vec<(String, i64)>,
    sdelta: Vec<(String, f64)>,
    rate: RateExpr,
    order: ScalingOrder,
    gate: Option<ThetaGate>,
}

fn syntax(line: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Syntax { line, msg: msg.into() }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn key_value(line: usize, text: &str) -> Result<(&str, &str), ModelError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| syntax(line, format!("expected `key = value`, got `{text}`")))?;
    Ok((k.trim(), v.trim()))
}

fn parse_f64(line: usize, what: &str, s: &str) -> Result<f64, ModelError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| syntax(line, format!("{what}: expected a number, got `{s}`")))
}

fn parse_species(line: usize, text: &str) -> Result<SpeciesDecl, ModelError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() < 3 {
        return Err(syntax(line, "species line needs `name kind init`"));
    }
    let name = fields[0];
    if !is_identifier(name) {
        return Err(syntax(line, format!("invalid species name `{name}`")));
    }
    let kind = match fields[1] {
        "continuous" => SpeciesKind::Continuous,
        "discrete" => SpeciesKind::Discrete,
        other => return Err(syntax(line, format!("unknown species kind `{other}`"))),
    };
    let init = parse_f64(line, "init", fields[2])?;
    let mut decl = SpeciesDecl {
        name: name.to_string(),
        kind,
        init,
        fast_range: None,
        is_theta: false,
    };
    for extra in &fields[3..] {
        if *extra == "theta" {
            decl.is_theta = true;
        } else if let Some(range) = extra.strip_prefix("fast=") {
            let (lo, hi) = range
                .split_once("..")
                .ok_or_else(|| syntax(line, format!("fast range must be `lo..hi`, got `{range}`")))?;
            let lo: i64 = lo
                .parse()
                .map_err(|_| syntax(line, format!("bad fast range bound `{lo}`")))?;
            let hi: i64 = hi
                .parse()
                .map_err(|_| syntax(line, format!("bad fast range bound `{hi}`")))?;
            if lo < 0 || hi < lo {
                return Err(syntax(line, format!("empty or negative fast range {lo}..{hi}")));
            }
            decl.fast_range = Some((lo, hi));
        } else {
            return Err(syntax(line, format!("unexpected species attribute `{extra}`")));
        }
    }

    let invalid = |msg: String| ModelError::Invalid { line, msg };
    match decl.kind {
        SpeciesKind::Continuous => {
            if init < 0.0 {
                return Err(invalid(format!("continuous species `{name}` has negative init")));
            }
            if decl.fast_range.is_some() || decl.is_theta {
                return Err(invalid(format!("continuous species `{name}` cannot be fast or theta")));
            }
        }
        SpeciesKind::Discrete => {
            if init < 0.0 || init.fract() != 0.0 {
                return Err(invalid(format!(
                    "discrete species `{name}` needs a nonnegative integer init"
                )));
            }
            if let Some((lo, hi)) = decl.fast_range {
                if (init as i64) < lo || (init as i64) > hi {
                    return Err(invalid(format!("`{name}` init outside its fast range")));
                }
            }
            if decl.is_theta {
                if decl.fast_range.is_some() {
                    return Err(invalid(format!("theta species `{name}` cannot be fast")));
                }
                if init > 1.0 {
                    return Err(invalid(format!("theta species `{name}` must start in 0 or 1")));
                }
            }
        }
    }
    Ok(decl)
}

fn parse_int_entries(line: usize, text: &str) -> Result<Vec<(String, i64)>, ModelError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (k, v) = key_value(line, entry)?;
            let v = v.strip_prefix('+').unwrap_or(v);
            let d = v
                .parse::<i64>()
                .map_err(|_| syntax(line, format!("delta for `{k}` must be an integer, got `{v}`")))?;
            Ok((k.to_string(), d))
        })
        .collect()
}

fn parse_real_entries(line: usize, text: &str) -> Result<Vec<(String, f64)>, ModelError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (k, v) = key_value(line, entry)?;
            let v = v.strip_prefix('+').unwrap_or(v);
            Ok((k.to_string(), parse_f64(line, "sdelta", v)?))
        })
        .collect()
}

fn parse_reaction(line: usize, text: &str) -> Result<RawReaction, ModelError> {
    let mut fields = text.split('|').map(str::trim);
    let name = fields.next().unwrap_or_default();
    if !is_identifier(name) {
        return Err(syntax(line, format!("invalid reaction name `{name}`")));
    }
    let mut delta = None;
    let mut sdelta = None;
    let mut rate = None;
    let mut order = None;
    let mut gate = None;
    for field in fields {
        if let Some(rest) = field.strip_prefix("sdelta:") {
            sdelta = Some(parse_real_entries(line, rest)?);
        } else if let Some(rest) = field.strip_prefix("delta:") {
            delta = Some(parse_int_entries(line, rest)?);
        } else {
            let (k, v) = key_value(line, field)?;
            match k {
                "rate" => rate = Some(parse_rate_expr(v).map_err(|source| ModelError::Expr { line, source })?),
                "order" => order = Some(v.parse::<ScalingOrder>().map_err(|m| syntax(line, m))?),
                "gate" => {
                    gate = Some(match v {
                        "theta0" => ThetaGate::Theta0,
                        "theta1" => ThetaGate::Theta1,
                        other => return Err(syntax(line, format!("unknown gate `{other}`"))),
                    })
                }
                other => return Err(syntax(line, format!("unknown reaction field `{other}`"))),
            }
        }
    }
    Ok(RawReaction {
        line,
        name: name.to_string(),
        delta: delta.unwrap_or_default(),
        sdelta: sdelta.unwrap_or_default(),
        rate: rate.ok_or_else(|| syntax(line, format!("reaction `{name}` has no rate")))?,
        order: order.ok_or_else(|| syntax(line, format!("reaction `{name}` has no order")))?,
        gate,
    })
}

/// Parses and validates a model file.
pub fn parse_model(text: &str) -> Result<NetworkModel, ModelError> {
    let mut section = Section::None;
    let mut name = None;
    let mut default_n = None;
    let mut default_eps = None;
    let mut params: Vec<(String, f64)> = Vec::new();
    let mut species: Vec<SpeciesDecl> = Vec::new();
    let mut raw: Vec<RawReaction> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut model_line = 1;

    for (i, full) in text.lines().enumerate() {
        let line = i + 1;
        let content = full.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            section = match content {
                "[model]" => {
                    model_line = line;
                    Section::Model
                }
                "[params]" => Section::Params,
                "[species]" => Section::Species,
                "[reactions]" => Section::Reactions,
                other => return Err(syntax(line, format!("unknown section `{other}`"))),
            };
            continue;
        }
        match section {
            Section::None => return Err(syntax(line, "content before the first section")),
            Section::Model => {
                let (k, v) = key_value(line, content)?;
                match k {
                    "name" => name = Some(v.to_string()),
                    "N" => {
                        let n: u64 = v
                            .parse()
                            .ok()
                            .filter(|n| *n > 0)
                            .ok_or_else(|| syntax(line, format!("N must be a positive integer, got `{v}`")))?;
                        default_n = Some(n);
                    }
                    "eps" => {
                        let eps = parse_f64(line, "eps", v)?;
                        if eps <= 0.0 {
                            return Err(ModelError::Invalid {
                                line,
                                msg: "eps must be positive".into(),
                            });
                        }
                        default_eps = Some(eps);
                    }
                    other => return Err(syntax(line, format!("unknown model key `{other}`"))),
                }
            }
            Section::Params => {
                let (k, v) = key_value(line, content)?;
                if !is_identifier(k) {
                    return Err(syntax(line, format!("invalid parameter name `{k}`")));
                }
                if !seen.insert(k.to_string()) {
                    return Err(ModelError::Duplicate {
                        line,
                        name: k.to_string(),
                    });
                }
                params.push((k.to_string(), parse_f64(line, k, v)?));
            }
            Section::Species => {
                let decl = parse_species(line, content)?;
                if !seen.insert(decl.name.clone()) {
                    return Err(ModelError::Duplicate { line, name: decl.name });
                }
                if decl.is_theta && species.iter().any(|s| s.is_theta) {
                    return Err(ModelError::Invalid {
                        line,
                        msg: "at most one theta species is allowed".into(),
                    });
                }
                species.push(decl);
            }
            Section::Reactions => {
                let r = parse_reaction(line, content)?;
                if raw.iter().any(|o| o.name == r.name) {
                    return Err(ModelError::Duplicate { line, name: r.name });
                }
                raw.push(r);
            }
        }
    }

    let name = name.ok_or_else(|| syntax(model_line, "[model] needs a `name`"))?;
    let default_n = default_n.ok_or_else(|| syntax(model_line, "[model] needs `N`"))?;

    let species_ix: HashMap<&str, usize> = species.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let param_values: HashMap<&str, f64> = params.iter().map(|(k, v)| (k.as_str(), *v)).collect();

    let mut reactions = Vec::with_capacity(raw.len());
    for r in raw {
        let line = r.line;
        let resolve = |n: &str| -> Result<usize, ModelError> {
            species_ix.get(n).copied().ok_or_else(|| ModelError::UnknownSpecies {
                line,
                name: n.to_string(),
            })
        };
        let delta = r
            .delta
            .iter()
            .map(|(n, d)| Ok((resolve(n)?, *d)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let sdelta = r
            .sdelta
            .iter()
            .map(|(n, d)| Ok((resolve(n)?, *d)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        for &(s, _) in &sdelta {
            if species[s].kind == SpeciesKind::Discrete {
                return Err(ModelError::SdeltaOnDiscrete {
                    line,
                    reaction: r.name,
                    species: species[s].name.clone(),
                });
            }
            if delta.iter().any(|&(d, v)| d == s && v != 0) {
                return Err(ModelError::Invalid {
                    line,
                    msg: format!(
                        "reaction `{}` has both delta and sdelta on `{}`",
                        r.name, species[s].name
                    ),
                });
            }
        }
        if !sdelta.is_empty() && r.order != ScalingOrder::Unit {
            return Err(ModelError::Invalid {
                line,
                msg: format!("reaction `{}`: sdelta requires order = unit", r.name),
            });
        }
        if r.order.needs_eps() && default_eps.is_none() {
            return Err(ModelError::Invalid {
                line,
                msg: format!("reaction `{}` uses an eps order but [model] declares no eps", r.name),
            });
        }
        if r.gate.is_some() && !species.iter().any(|s| s.is_theta) {
            return Err(ModelError::Invalid {
                line,
                msg: format!("reaction `{}` is gated but no theta species exists", r.name),
            });
        }
        let mut reads = BTreeSet::new();
        for ident in r.rate.identifiers() {
            if let Some(&s) = species_ix.get(ident.as_str()) {
                reads.insert(s);
            } else if !param_values.contains_key(ident.as_str()) {
                return Err(ModelError::UnboundIdentifier {
                    line,
                    reaction: r.name,
                    name: ident,
                });
            }
        }
        let compiled = r
            .rate
            .compile(|n| {
                species_ix
                    .get(n)
                    .map(|&i| Slot::State(i))
                    .or_else(|| param_values.get(n).map(|&v| Slot::Const(v)))
            })
            .expect("identifiers checked above");
        reactions.push(ReactionDecl {
            name: r.name,
            delta,
            sdelta,
            rate: r.rate,
            order: r.order,
            gate: r.gate,
            line,
            compiled,
            reads,
        });
    }

    Ok(NetworkModel {
        name,
        species,
        reactions,
        params,
        default_n,
        default_eps,
    })
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Continuous PDP: fast reactions leave the discrete state unchanged.
    A,
    /// PDP with O(1) jumps of continuous species.
    B,
    /// Averaging over a finite fast discrete block.
    C,
    /// Singular switching through a binary species theta.
    D,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::A => "A",
            Regime::B => "B",
            Regime::C => "C",
            Regime::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Regime::A),
            "B" | "b" => Ok(Regime::B),
            "C" | "c" => Ok(Regime::C),
            "D" | "d" => Ok(Regime::D),
            other => Err(format!("unknown regime `{other}` (expected A, B, C or D)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReactionClass {
    /// Order N, continuous species only.
    RC,
    /// Order 1, discrete species only.
    RD,
    /// Order 1, mixing continuous and discrete species.
    RDCSlow,
    /// Fast (order N) reactions that read discrete species.
    S1,
    /// Order 1 reactions with O(1) scaled continuous jumps.
    S2,
    ThetaFlip,
}

impl fmt::Display for ReactionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReactionClass::RC => "R_C",
            ReactionClass::RD => "R_D",
            ReactionClass::RDCSlow => "R_DC_slow",
            ReactionClass::S1 => "S1",
            ReactionClass::S2 => "S2",
            ReactionClass::ThetaFlip => "theta_flip",
        };
        f.write_str(s)
    }
}

/// A model together with the reaction classes for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedModel {
    pub model: NetworkModel,
    pub regime: Regime,
    pub classes: Vec<ReactionClass>,
    /// Continuous species, in declaration order.
    pub continuous: Vec<usize>,
    /// All discrete species.
    pub discrete: Vec<usize>,
    /// Slow discrete species (all discrete species except the fast block).
    pub slow_discrete: Vec<usize>,
    /// Fast discrete block, regime C only.
    pub fast_block: Vec<usize>,
    pub theta: Option<usize>,
}

impl ClassifiedModel {
    pub fn class(&self, reaction: usize) -> ReactionClass {
        self.classes[reaction]
    }

    pub fn reactions_in(&self, class: ReactionClass) -> impl Iterator<Item = usize> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == class)
            .map(|(i, _)| i)
    }

    /// Order factor of each reaction at scale `(n, eps)`.
    pub fn order_factors(&self, n: f64, eps: Option<f64>) -> Result<Vec<f64>, PropensityError> {
        self.model.reactions.iter().map(|r| r.order.factor(n, eps)).collect()
    }

    /// Fills `out` with propensities at the scaled state `x` and returns their sum.
    pub fn propensities_into(&self, factors: &[f64], x: &[f64], out: &mut [f64]) -> Result<f64, PropensityError> {
        let mut total = 0.0;
        for (r, reaction) in self.model.reactions.iter().enumerate() {
            if let (Some(gate), Some(theta)) = (reaction.gate, self.theta) {
                if x[theta] != gate.value() {
                    out[r] = 0.0;
                    continue;
                }
            }
            let rate = reaction.eval(x).map_err(|source| PropensityError::Eval {
                reaction: reaction.name.clone(),
                source,
            })?;
            let a = factors[r] * rate;
            if a < 0.0 || a.is_nan() {
                return Err(PropensityError::Negative {
                    reaction: reaction.name.clone(),
                    value: a,
                    state: x.to_vec(),
                });
            }
            out[r] = a;
            total += a;
        }
        Ok(total)
    }

    /// Propensity of every reaction at the scaled state `x`.
    pub fn propensity(&self, n: u64, eps: Option<f64>, x: &[f64]) -> Result<Vec<f64>, PropensityError> {
        let factors = self.order_factors(n as f64, eps)?;
        let mut out = vec![0.0; self.model.reactions.len()];
        self.propensities_into(&factors, x, &mut out)?;
        Ok(out)
    }

    /// Count change of reaction `r` at scale `n`; sdelta entries become `round(n * sdelta)`.
    pub fn count_jump(&self, r: usize, n: u64) -> Vec<(usize, i64)> {
        let reaction = &self.model.reactions[r];
        let mut out: Vec<(usize, i64)> = Vec::new();
        let mut add = |s: usize, d: i64| {
            if d == 0 {
                return;
            }
            match out.iter_mut().find(|(i, _)| *i == s) {
                Some(e) => e.1 += d,
                None => out.push((s, d)),
            }
        };
        for &(s, d) in &reaction.delta {
            add(s, d);
        }
        for &(s, d) in &reaction.sdelta {
            add(s, (d * n as f64).round() as i64);
        }
        out.retain(|(_, d)| *d != 0);
        out
    }

    /// Scaled state change of reaction `r` at scale `n`.
    pub fn scaled_jump(&self, r: usize, n: u64) -> Vec<(usize, f64)> {
        self.count_jump(r, n)
            .into_iter()
            .map(|(s, d)| {
                if self.model.is_continuous(s) {
                    (s, d as f64 / n as f64)
                } else {
                    (s, d as f64)
                }
            })
            .collect()
    }
}

/// Assigns every reaction a class under `regime`, rejecting incompatible reactions.
pub fn classify(model: &NetworkModel, regime: Regime) -> Result<ClassifiedModel, ClassifyError> {
    let fail = |r: &ReactionDecl, reason: String| ClassifyError {
        regime,
        reaction: r.name.clone(),
        reason,
    };
    let model_fail = |reason: &str| ClassifyError {
        regime,
        reaction: String::new(),
        reason: reason.to_string(),
    };

    let continuous: Vec<usize> = (0..model.species.len()).filter(|&i| model.is_continuous(i)).collect();
    let discrete: Vec<usize> = (0..model.species.len()).filter(|&i| !model.is_continuous(i)).collect();
    let theta = model.theta_index();
    let fast_block: Vec<usize> = if regime == Regime::C {
        discrete
            .iter()
            .copied()
            .filter(|&i| model.species[i].fast_range.is_some())
            .collect()
    } else {
        Vec::new()
    };
    let slow_discrete: Vec<usize> = discrete.iter().copied().filter(|i| !fast_block.contains(i)).collect();

    if regime == Regime::D {
        if theta.is_none() {
            return Err(model_fail("regime D needs a theta species"));
        }
        if discrete.len() != 1 {
            return Err(model_fail("regime D allows no discrete species other than theta"));
        }
        if model.default_eps.is_none() {
            return Err(model_fail("regime D needs eps in [model]"));
        }
    } else if theta.is_some() {
        return Err(model_fail("theta species are only meaningful under regime D"));
    }

    let mut classes = Vec::with_capacity(model.reactions.len());
    for r in &model.reactions {
        let touches_c = r.touched().any(|s| model.is_continuous(s)) || !r.sdelta.is_empty();
        let touches_d: Vec<usize> = r.touched().filter(|&s| !model.is_continuous(s)).collect();
        let reads_c = r.reads().iter().any(|&s| model.is_continuous(s));
        let reads_d = r.reads().iter().any(|&s| !model.is_continuous(s));

        if regime != Regime::D && (r.gate.is_some() || r.order.needs_eps()) {
            return Err(fail(r, "theta gates and eps orders belong to regime D".into()));
        }

        let class = match regime {
            Regime::A | Regime::B | Regime::C => {
                if !r.sdelta.is_empty() {
                    if regime != Regime::B {
                        return Err(fail(r, "scaled jumps (sdelta) require regime B".into()));
                    }
                    ReactionClass::S2
                } else {
                    match r.order {
                        ScalingOrder::N => {
                            let slow_touched: Vec<usize> = touches_d
                                .iter()
                                .copied()
                                .filter(|s| slow_discrete.contains(s))
                                .collect();
                            if !slow_touched.is_empty() {
                                return Err(fail(
                                    r,
                                    format!(
                                        "order-N reaction changes slow discrete species `{}`",
                                        model.species[slow_touched[0]].name
                                    ),
                                ));
                            }
                            if touches_d.is_empty() && !reads_d {
                                ReactionClass::RC
                            } else {
                                ReactionClass::S1
                            }
                        }
                        ScalingOrder::Unit => {
                            if !touches_c && !reads_c {
                                ReactionClass::RD
                            } else {
                                ReactionClass::RDCSlow
                            }
                        }
                        _ => unreachable!("eps orders rejected above"),
                    }
                }
            }
            Regime::D => {
                let theta = theta.expect("checked above");
                let flips = r.delta_of(theta);
                if !r.sdelta.is_empty() {
                    return Err(fail(r, "scaled jumps are not part of regime D".into()));
                }
                if flips != 0 {
                    if r.touched().any(|s| s != theta) {
                        return Err(fail(r, "theta flips must not change other species".into()));
                    }
                    match (flips, r.order, r.gate) {
                        (1, ScalingOrder::Unit, Some(ThetaGate::Theta0)) => {}
                        (-1, ScalingOrder::OneOverEps, Some(ThetaGate::Theta1)) => {}
                        _ => {
                            return Err(fail(
                                r,
                                "theta 0->1 needs order unit and gate theta0; \
                                 1->0 needs order one_over_eps and gate theta1"
                                    .into(),
                            ))
                        }
                    }
                    ReactionClass::ThetaFlip
                } else {
                    match (r.gate, r.order) {
                        (Some(ThetaGate::Theta0), ScalingOrder::N)
                        | (Some(ThetaGate::Theta1), ScalingOrder::NOverEps) => ReactionClass::RDCSlow,
                        (None, _) => return Err(fail(r, "every regime-D reaction needs a theta gate".into())),
                        _ => {
                            return Err(fail(
                                r,
                                "gate theta0 needs order N, gate theta1 needs order N_over_eps".into(),
                            ))
                        }
                    }
                }
            }
        };
        classes.push(class);
    }

    if regime == Regime::D {
        let ups = model
            .reactions
            .iter()
            .filter(|r| r.delta_of(theta.unwrap()) == 1)
            .count();
        let downs = model
            .reactions
            .iter()
            .filter(|r| r.delta_of(theta.unwrap()) == -1)
            .count();
        if ups != 1 || downs != 1 {
            return Err(model_fail("regime D needs exactly one 0->1 and one 1->0 theta flip"));
        }
    }

    Ok(ClassifiedModel {
        model: model.clone(),
        regime,
        classes,
        continuous,
        discrete,
        slow_discrete,
        fast_block,
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    fn gene1() -> NetworkModel {
        parse_model(models::GENE1).unwrap()
    }

    fn class_map(c: &ClassifiedModel) -> Vec<(String, ReactionClass)> {
        c.model
            .reactions
            .iter()
            .zip(&c.classes)
            .map(|(r, k)| (r.name.clone(), *k))
            .collect()
    }

    #[test]
    fn parses_reference_gene1() {
        let m = gene1();
        assert_eq!(m.name, "GENE1");
        assert_eq!(m.species.len(), 2);
        assert_eq!(m.reactions.len(), 4);
        assert_eq!(m.default_n, 100);
        assert_eq!(
            m.params,
            vec![
                ("k_on".to_string(), 2.0),
                ("k_off".to_string(), 1.0),
                ("k_p".to_string(), 4.0),
                ("gamma".to_string(), 1.0)
            ]
        );
        let r_on = &m.reactions[0];
        assert_eq!(r_on.delta, vec![(0, 1)]);
        assert_eq!(r_on.order, ScalingOrder::Unit);
    }

    #[test]
    fn duplicate_species_is_rejected() {
        let text = "[model]\nname = X\nN = 10\n[species]\nP continuous 0\nP discrete 0\n";
        assert_eq!(
            parse_model(text).unwrap_err(),
            ModelError::Duplicate {
                line: 6,
                name: "P".into()
            }
        );
    }

    #[test]
    fn unbound_rate_identifier_is_rejected() {
        let text = "[model]\nname = X\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = k_x*P | order = N\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::UnboundIdentifier { line: 7, ref name, .. } if name == "k_x"
        ));
    }

    #[test]
    fn sdelta_on_discrete_is_rejected() {
        let text = "[model]\nname = X\nN = 10\n[species]\nG discrete 0\n[reactions]\nR | sdelta: G=0.5 | rate = 1 | order = unit\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::SdeltaOnDiscrete { line: 7, .. }
        ));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = "[model]\nname = X\nN = 10\n[species]\nP liquid 0\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::Syntax { line: 5, .. }
        ));
        let text = "[model]\nname = X\nN = 10\n[reactions]\nR | delta: P=+1 | rate = 1 | order = N\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::UnknownSpecies { line: 5, .. }
        ));
        let text = "[model]\nname = X\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = (1 | order = N\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::Expr { line: 7, .. }
        ));
    }

    #[test]
    fn species_invariants() {
        let bad = [
            "P continuous -1",
            "G discrete 0.5",
            "P continuous 0 fast=0..1",
            "G discrete 3 fast=0..1",
            "T discrete 2 theta",
        ];
        for decl in bad {
            let text = format!("[model]\nname = X\nN = 10\n[species]\n{decl}\n");
            assert!(parse_model(&text).is_err(), "{decl}");
        }
        let text = "[model]\nname = X\nN = 10\neps = 0.1\n[species]\nT discrete 0 theta\nU discrete 0 theta\n";
        assert!(parse_model(text).is_err());
    }

    #[test]
    fn eps_orders_require_eps() {
        let text = "[model]\nname = X\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = 1 | order = N_over_eps\n";
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelError::Invalid { line: 7, .. }
        ));
    }

    #[test]
    fn gene1_regime_a_classes() {
        let c = classify(&gene1(), Regime::A).unwrap();
        let expected = [
            ("R_on", ReactionClass::RD),
            ("R_off", ReactionClass::RD),
            ("R_prod", ReactionClass::S1),
            ("R_deg", ReactionClass::RC),
        ];
        for ((name, class), (en, ec)) in class_map(&c).into_iter().zip(expected) {
            assert_eq!(name, en);
            assert_eq!(class, ec, "{name}");
        }
    }

    #[test]
    fn gene1f_regime_c_classes() {
        let m = parse_model(models::GENE1F).unwrap();
        let c = classify(&m, Regime::C).unwrap();
        let classes: Vec<_> = c.classes.clone();
        assert_eq!(
            classes,
            vec![
                ReactionClass::S1,
                ReactionClass::S1,
                ReactionClass::S1,
                ReactionClass::RC
            ]
        );
        assert_eq!(c.fast_block, vec![0]);
        assert!(c.slow_discrete.is_empty());
    }

    #[test]
    fn gene1f_is_rejected_under_regime_a() {
        // Fast switching changes G at order N: not a regime-A S1 reaction.
        let m = parse_model(models::GENE1F).unwrap();
        let err = classify(&m, Regime::A).unwrap_err();
        assert_eq!(err.reaction, "R_on");
    }

    #[test]
    fn slow_discrete_change_in_fast_reaction_is_rejected() {
        let text = models::GENE1.replace("R_prod| delta: P=+1", "R_prod| delta: P=+1, G=-1");
        let m = parse_model(&text).unwrap();
        let err = classify(&m, Regime::A).unwrap_err();
        assert_eq!(err.reaction, "R_prod");
    }

    #[test]
    fn burst1_regime_d_classes() {
        let m = parse_model(models::BURST1).unwrap();
        let c = classify(&m, Regime::D).unwrap();
        assert_eq!(
            c.classes,
            vec![
                ReactionClass::ThetaFlip,
                ReactionClass::ThetaFlip,
                ReactionClass::RDCSlow,
                ReactionClass::RDCSlow
            ]
        );
        assert_eq!(c.theta, Some(0));
        assert!(classify(&m, Regime::A).is_err());
    }

    #[test]
    fn gene1_has_no_theta_for_regime_d() {
        assert!(classify(&gene1(), Regime::D).is_err());
    }

    #[test]
    fn classify_is_deterministic_and_idempotent() {
        for (text, regime) in [
            (models::GENE1, Regime::A),
            (models::GENE1, Regime::B),
            (models::GENE1F, Regime::C),
            (models::BURST1, Regime::D),
            (models::GENE1B, Regime::B),
        ] {
            let m = parse_model(text).unwrap();
            let first = classify(&m, regime).unwrap();
            let second = classify(&first.model, regime).unwrap();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn gene1_propensities() {
        let c = classify(&gene1(), Regime::A).unwrap();
        // state order: G, P
        let a = c.propensity(100, None, &[1.0, 0.5]).unwrap();
        assert_eq!(a, vec![0.0, 1.0, 400.0, 50.0]);
    }

    #[test]
    fn propensity_scales_only_order_n_entries() {
        let c = classify(&gene1(), Regime::A).unwrap();
        let x = [1.0, 0.7];
        let a = c.propensity(100, None, &x).unwrap();
        let b = c.propensity(200, None, &x).unwrap();
        for (r, reaction) in c.model.reactions.iter().enumerate() {
            match reaction.order {
                ScalingOrder::N => assert_eq!(b[r], 2.0 * a[r]),
                _ => assert_eq!(b[r], a[r]),
            }
        }
    }

    #[test]
    fn negative_propensity_is_an_error() {
        let text = "[model]\nname = X\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = -1 | order = N\n";
        let c = classify(&parse_model(text).unwrap(), Regime::A).unwrap();
        let err = c.propensity(10, None, &[0.0]).unwrap_err();
        assert!(matches!(err, PropensityError::Negative { ref reaction, .. } if reaction == "R"));
    }

    #[test]
    fn burst1_propensities_and_gates() {
        let m = parse_model(models::BURST1).unwrap();
        let c = classify(&m, Regime::D).unwrap();
        // state order: theta, P
        let on = c.propensity(100, Some(0.01), &[1.0, 1.0]).unwrap();
        assert!((on[2] - 10_000.0).abs() < 1e-9);
        assert_eq!(on[0], 0.0);
        assert_eq!(on[3], 0.0);
        assert!((on[1] - 200.0).abs() < 1e-9);
        let off = c.propensity(100, Some(0.01), &[0.0, 1.0]).unwrap();
        assert_eq!(off[1], 0.0);
        assert_eq!(off[2], 0.0);
        assert_eq!(off[0], 0.5);
        assert_eq!(off[3], 100.0);
        assert_eq!(
            c.propensity(100, None, &[0.0, 1.0]).unwrap_err(),
            PropensityError::MissingEps
        );
    }

    #[test]
    fn sdelta_jumps_round_to_counts() {
        let m = parse_model(models::GENE1B).unwrap();
        let c = classify(&m, Regime::B).unwrap();
        let burst = m.reaction_index("R_burst").unwrap();
        assert_eq!(c.class(burst), ReactionClass::S2);
        let p = m.species_index("P").unwrap();
        assert_eq!(c.count_jump(burst, 100), vec![(p, 50)]);
        assert_eq!(c.scaled_jump(burst, 100), vec![(p, 0.5)]);
    }
}
