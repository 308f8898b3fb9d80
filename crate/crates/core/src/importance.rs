//! Token importance: raw scores from the model, z-score normalization, and
//! the logit-space replacement-probability schedule.
//!
//! Raw scores `phi` come from either the norm of the topmost pre-norm FFN
//! output (TNorm) or the norm of the loss gradient at each position's
//! embedding output (GNorm). Normalized scores `psi = alpha * (phi - mean) / std`
//! shift a base probability in logit space: context positions move against
//! `psi`, current positions with it (under the default direction).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::error::{ImportanceError, ModelError};
use crate::model::{ForwardTrace, Model, Tape};
use crate::objective::{self, sig6, Reduction};
use crate::pair::{is_reserved, DocumentPair, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Source => "src",
            Side::Target => "tgt",
        }
    }
}

/// How per-token replacement probabilities are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    TNorm,
    GNorm,
    /// `psi ~ N(0, alpha^2)` per token.
    Random,
    /// Fixed probability for every content token (word dropout/replacement).
    Uniform,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::TNorm => "tnorm",
            Measure::GNorm => "gnorm",
            Measure::Random => "random",
            Measure::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tnorm" => Ok(Measure::TNorm),
            "gnorm" => Ok(Measure::GNorm),
            "random" => Ok(Measure::Random),
            "uniform" => Ok(Measure::Uniform),
            _ => Err(format!("unknown measure `{s}` (tnorm|gnorm|random|uniform)")),
        }
    }
}

/// Sign applied to `psi` on each segment. The default perturbs important
/// current tokens more and important context tokens less.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    CtxDownCurUp,
    CtxUpCurDown,
    BothDown,
    BothUp,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::CtxDownCurUp,
        Direction::CtxUpCurDown,
        Direction::BothDown,
        Direction::BothUp,
    ];

    /// Signs multiplying `psi` for (context, current).
    pub fn signs(self) -> (f64, f64) {
        match self {
            Direction::CtxDownCurUp => (-1.0, 1.0),
            Direction::CtxUpCurDown => (1.0, -1.0),
            Direction::BothDown => (-1.0, -1.0),
            Direction::BothUp => (1.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::CtxDownCurUp => "ctx-down-cur-up",
            Direction::CtxUpCurDown => "ctx-up-cur-down",
            Direction::BothDown => "both-down",
            Direction::BothUp => "both-up",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                format!("unknown direction `{s}` (ctx-down-cur-up|ctx-up-cur-down|both-down|both-up)")
            })
    }
}

/// Everything that turns raw scores into probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub measure: Measure,
    pub alpha: f64,
    pub p_ctx: f64,
    pub p_cur: f64,
    pub direction: Direction,
    pub normalize: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            measure: Measure::GNorm,
            alpha: 0.1,
            p_ctx: 0.1,
            p_cur: 0.1,
            direction: Direction::CtxDownCurUp,
            normalize: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), ImportanceError> {
        if self.measure == Measure::Uniform {
            // Fixed rates may be zero (no perturbation at all).
            for (name, value) in [("p_ctx", self.p_ctx), ("p_cur", self.p_cur)] {
                if !(0.0..1.0).contains(&value) {
                    return Err(ImportanceError::BaseProbability { name, value });
                }
            }
            return Ok(());
        }
        check_base("p_ctx", self.p_ctx)?;
        check_base("p_cur", self.p_cur)?;
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(ImportanceError::Alpha(self.alpha));
        }
        Ok(())
    }
}

fn check_base(name: &'static str, value: f64) -> Result<(), ImportanceError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(ImportanceError::BaseProbability { name, value })
    }
}

/// Per-token scores and probabilities for one side of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTrace {
    pub side: Side,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub probs: Vec<f64>,
    pub measure: Measure,
    pub alpha: f64,
    pub p_ctx: f64,
    pub p_cur: f64,
}

impl ImportanceTrace {
    /// Tab-separated dump lines: `doc_id side position token_id phi psi p`.
    pub fn dump_lines(&self, doc_id: u32, tokens: &[TokenId]) -> Vec<String> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, tok)| {
                format!(
                    "{doc_id}\t{}\t{t}\t{tok}\t{}\t{}\t{}",
                    self.side.as_str(),
                    sig6(self.raw[t]),
                    sig6(self.normalized[t]),
                    sig6(self.probs[t])
                )
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// L2 norm of each tap row. The target tap has one row per decoder input,
/// so `len` may exceed the row count; missing trailing positions score 0.
pub fn tnorm(graph: &Graph, trace: &ForwardTrace, side: Side, len: usize) -> Vec<f64> {
    let tap = match side {
        Side::Source => graph.value(trace.enc.hidden),
        Side::Target => graph.value(trace.dec.hidden),
    };
    row_norms(tap.data(), tap.cols(), len)
}

fn row_norms(data: &[f64], width: usize, len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = data.chunks(width).map(crate::tensor::l2_norm).collect();
    out.resize(len, 0.0);
    out
}

/// GNorm scores from gradients already taken with respect to an
/// original-view NLL root.
pub fn gnorm_from_grads(grads: &Gradients, trace: &ForwardTrace, pair: &DocumentPair) -> (Vec<f64>, Vec<f64>) {
    let gs = grads.wrt(trace.enc.embed);
    let gt = grads.wrt(trace.dec.embed);
    (
        row_norms(gs.data(), gs.cols(), pair.src_tokens.len()),
        row_norms(gt.data(), gt.cols(), pair.tgt_tokens.len()),
    )
}

/// Gradient-norm importance for both sides. Runs its own dropout-free pass
/// and never touches the parameters.
pub fn gnorm(model: &Model, pair: &DocumentPair, reduction: Reduction) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new(model);
    let (trace, loss, _) = objective::original_loss(&mut tape, pair, reduction)?;
    let grads = tape.graph.backward(loss)?;
    Ok(gnorm_from_grads(&grads, &trace, pair))
}

/// Hidden-state-norm importance for both sides from a dropout-free pass.
pub fn tnorm_scores(model: &Model, pair: &DocumentPair) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new(model);
    let trace = tape.forward(&pair.src_tokens, pair.decoder_input())?;
    Ok((
        tnorm(&tape.graph, &trace, Side::Source, pair.src_tokens.len()),
        tnorm(&tape.graph, &trace, Side::Target, pair.tgt_tokens.len()),
    ))
}

/// `psi_t = alpha * (phi_t - mean) / std` with the population standard
/// deviation; a constant input maps to all zeros.
///
/// Scores are first taken relative to the first one and divided by the
/// largest such offset. Both steps are exact or correctly rounded on exact
/// affine images of the input, so any exactly representable shift and any
/// positive scale with an exact product leave the output bit-identical.
pub fn normalize(raw: &[f64], alpha: f64) -> Vec<f64> {
    let Some(&reference) = raw.first() else {
        return Vec::new();
    };
    let rel: Vec<f64> = raw.iter().map(|v| v - reference).collect();
    let span = rel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if span == 0.0 || !span.is_finite() {
        return vec![0.0; raw.len()];
    }
    let unit: Vec<f64> = rel.iter().map(|v| v / span).collect();
    let n = raw.len() as f64;
    let mean = unit.iter().sum::<f64>() / n;
    let dev: Vec<f64> = unit.iter().map(|v| v - mean).collect();
    let var = dev.iter().map(|d| d * d).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; raw.len()];
    }
    dev.iter().map(|d| alpha * (d / std)).collect()
}

/// Normalizes only the positions flagged in `include`; the rest get 0.
pub fn normalize_subset(raw: &[f64], include: &[bool], alpha: f64) -> Vec<f64> {
    let picked: Vec<f64> = raw
        .iter()
        .zip(include)
        .filter(|(_, &inc)| inc)
        .map(|(v, _)| *v)
        .collect();
    let mut psi = normalize(&picked, alpha).into_iter();
    include
        .iter()
        .map(|&inc| if inc { psi.next().unwrap_or(0.0) } else { 0.0 })
        .collect()
}

/// Per-token replacement probabilities from normalized scores. Positions
/// before `cur_start` are context. Reserved tokens always get 0.
pub fn replacement_probs(
    psi: &[f64],
    tokens: &[TokenId],
    cur_start: usize,
    p_ctx: f64,
    p_cur: f64,
    direction: Direction,
) -> Result<Vec<f64>, ImportanceError> {
    check_base("p_ctx", p_ctx)?;
    check_base("p_cur", p_cur)?;
    if psi.len() != tokens.len() {
        return Err(ImportanceError::Length {
            what: "psi",
            got: psi.len(),
            expected: tokens.len(),
        });
    }
    let (ctx_sign, cur_sign) = direction.signs();
    let (ctx_logit, cur_logit) = (logit(p_ctx), logit(p_cur));
    Ok(psi
        .iter()
        .zip(tokens)
        .enumerate()
        .map(|(t, (&s, &tok))| {
            if is_reserved(tok) {
                0.0
            } else if t < cur_start {
                if s == 0.0 {
                    p_ctx
                } else {
                    sigmoid(ctx_logit + ctx_sign * s)
                }
            } else if s == 0.0 {
                p_cur
            } else {
                sigmoid(cur_logit + cur_sign * s)
            }
        })
        .collect())
}

/// I.i.d. `N(0, alpha^2)` scores.
pub fn random_scores<R: Rng + ?Sized>(len: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>, ImportanceError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(ImportanceError::Alpha(alpha));
    }
    let dist = Normal::new(0.0, alpha).map_err(|_| ImportanceError::Alpha(alpha))?;
    Ok((0..len).map(|_| dist.sample(rng)).collect())
}

/// Fixed per-segment probability for every content token.
pub fn uniform_probs(tokens: &[TokenId], cur_start: usize, p_ctx: f64, p_cur: f64) -> Vec<f64> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| match (is_reserved(tok), t < cur_start) {
            (true, _) => 0.0,
            (false, true) => p_ctx,
            (false, false) => p_cur,
        })
        .collect()
}

/// Builds the full trace for one side from raw scores (ignored for
/// `Random`, which draws `psi` directly, and `Uniform`, which uses `p_ctx`
/// everywhere).
pub fn build_trace<R: Rng + ?Sized>(
    side: Side,
    tokens: &[TokenId],
    cur_start: usize,
    raw: Vec<f64>,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<ImportanceTrace, ImportanceError> {
    if raw.len() != tokens.len() {
        return Err(ImportanceError::Length {
            what: "raw scores",
            got: raw.len(),
            expected: tokens.len(),
        });
    }
    schedule.validate()?;
    let content: Vec<bool> = tokens.iter().map(|&t| !is_reserved(t)).collect();
    let (normalized, probs) = match schedule.measure {
        Measure::Uniform => (
            vec![0.0; tokens.len()],
            uniform_probs(tokens, cur_start, schedule.p_ctx, schedule.p_cur),
        ),
        Measure::Random => {
            let draws = random_scores(tokens.len(), schedule.alpha, rng)?;
            let psi: Vec<f64> = draws
                .into_iter()
                .zip(&content)
                .map(|(r, &c)| if c { r } else { 0.0 })
                .collect();
            let p = replacement_probs(&psi, tokens, cur_start, schedule.p_ctx, schedule.p_cur, schedule.direction)?;
            (psi, p)
        }
        Measure::TNorm | Measure::GNorm => {
            let psi = if schedule.normalize {
                normalize_subset(&raw, &content, schedule.alpha)
            } else {
                raw.iter()
                    .zip(&content)
                    .map(|(v, &c)| if c { *v } else { 0.0 })
                    .collect()
            };
            let p = replacement_probs(&psi, tokens, cur_start, schedule.p_ctx, schedule.p_cur, schedule.direction)?;
            (psi, p)
        }
    };
    let raw = match schedule.measure {
        Measure::Random | Measure::Uniform => vec![0.0; tokens.len()],
        _ => raw,
    };
    Ok(ImportanceTrace {
        side,
        raw,
        normalized,
        probs,
        measure: schedule.measure,
        alpha: schedule.alpha,
        p_ctx: schedule.p_ctx,
        p_cur: schedule.p_cur,
    })
}
