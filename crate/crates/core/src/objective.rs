//! Training objective: original-view NLL, perturbed-view NLL and the
//! symmetrized-KL agreement between the two predictive distributions.
//!
//! Only current-sentence target positions contribute; context positions on
//! the target side are conditioning, never labels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::model::{ForwardTrace, Tape};
use crate::pair::{DocumentPair, TokenId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Which labels the perturbed view is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbTargets {
    /// Clean labels under perturbed conditioning.
    Original,
    /// The perturbed target tokens themselves.
    Perturbed,
}

/// Switches for the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub original: bool,
    pub perturbed: bool,
    pub agreement: bool,
    pub reduction: Reduction,
    pub perturb_targets: PerturbTargets,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            original: true,
            perturbed: true,
            agreement: true,
            reduction: Reduction::Mean,
            perturb_targets: PerturbTargets::Original,
        }
    }
}

impl LossTerms {
    /// Plain document-level NLL training: original term only.
    pub fn original_only() -> Self {
        Self {
            perturbed: false,
            agreement: false,
            ..Self::default()
        }
    }

    /// Conventional augmentation baseline: train on the perturbed view only.
    pub fn perturbed_only() -> Self {
        Self {
            original: false,
            agreement: false,
            ..Self::default()
        }
    }

    pub fn needs_perturbed_view(&self) -> bool {
        self.perturbed || self.agreement
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_original: f64,
    pub nll_perturbed: f64,
    pub agreement: f64,
    pub total: f64,
    pub token_count: usize,
}

impl LossBreakdown {
    /// `step<TAB>nll_orig<TAB>nll_pert<TAB>agree<TAB>total`
    pub fn log_line(&self, step: u64) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}",
            sig6(self.nll_original),
            sig6(self.nll_perturbed),
            sig6(self.agreement),
            sig6(self.total)
        )
    }
}

/// Formats with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

fn row_weights(mask: &[bool], reduction: Reduction) -> (Vec<f64>, usize) {
    let count = mask.iter().filter(|&&m| m).count();
    let w = match reduction {
        Reduction::Mean if count > 0 => 1.0 / count as f64,
        _ => 1.0,
    };
    (mask.iter().map(|&m| if m { w } else { 0.0 }).collect(), count)
}

/// Negative log-likelihood of `targets` over the rows selected by `mask`.
/// Returns the scalar node and the number of selected rows; with no rows
/// selected the loss is a constant zero.
pub fn nll(
    g: &mut Graph,
    logits: Var,
    targets: &[TokenId],
    mask: &[bool],
    reduction: Reduction,
) -> Result<(Var, usize), ModelError> {
    let rows = g.value(logits).rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(ModelError::Config(format!(
            "nll: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let (weights, count) = row_weights(mask, reduction);
    if count == 0 {
        return Ok((g.leaf(Tensor::scalar(0.0)), 0));
    }
    let lp = g.log_softmax(logits, 1)?;
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick_rows(lp, &idx)?;
    let w = g.leaf(Tensor::vector(weights));
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted);
    Ok((g.scale(s, -1.0), count))
}

/// Per selected row, `0.5 * [KL(P || Q) + KL(Q || P)]` between the softmax
/// distributions of two logit matrices, reduced over rows.
pub fn agreement(
    g: &mut Graph,
    logits_a: Var,
    logits_b: Var,
    mask: &[bool],
    reduction: Reduction,
) -> Result<Var, ModelError> {
    let (sa, sb) = (g.value(logits_a).shape(), g.value(logits_b).shape());
    if sa != sb || sa.len() != 2 || mask.len() != sa[0] {
        return Err(ModelError::Config(format!(
            "agreement: shapes {sa:?} / {sb:?} with {} mask entries",
            mask.len()
        )));
    }
    let (rows, vocab) = (sa[0], sa[1]);
    let (weights, count) = row_weights(mask, reduction);
    if count == 0 {
        return Ok(g.leaf(Tensor::scalar(0.0)));
    }
    // 0.5 * sum_v (p - q)(log p - log q) equals the symmetrized KL.
    let p = g.softmax(logits_a, 1)?;
    let q = g.softmax(logits_b, 1)?;
    let lp = g.log_softmax(logits_a, 1)?;
    let lq = g.log_softmax(logits_b, 1)?;
    let dp = g.sub(p, q)?;
    let dl = g.sub(lp, lq)?;
    let prod = g.mul(dp, dl)?;
    let mut wdata = Vec::with_capacity(rows * vocab);
    for w in weights {
        wdata.extend(std::iter::repeat_n(w * 0.5, vocab));
    }
    let w = g.leaf(Tensor::new(vec![rows, vocab], wdata)?);
    let weighted = g.mul(prod, w)?;
    Ok(g.sum(weighted))
}

/// Graph nodes for each term of one pair's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub nll_original: Var,
    pub nll_perturbed: Option<Var>,
    pub agreement: Option<Var>,
    pub original: ForwardTrace,
    pub perturbed: Option<ForwardTrace>,
    pub token_count: usize,
}

impl LossNodes {
    /// Sum of the enabled terms; `skip_original` leaves out the original NLL
    /// (used when its gradient was already taken in a scoring pass).
    pub fn root(&self, g: &mut Graph, terms: &LossTerms, skip_original: bool) -> Result<Option<Var>, ModelError> {
        let mut parts = Vec::new();
        if terms.original && !skip_original {
            parts.push(self.nll_original);
        }
        if terms.perturbed {
            parts.extend(self.nll_perturbed);
        }
        if terms.agreement {
            parts.extend(self.agreement);
        }
        let mut it = parts.into_iter();
        let Some(mut acc) = it.next() else {
            return Ok(None);
        };
        for p in it {
            acc = g.add(acc, p)?;
        }
        Ok(Some(acc))
    }

    pub fn breakdown(&self, g: &Graph, terms: &LossTerms) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let nll_original = g.value(self.nll_original).item();
        let nll_perturbed = val(self.nll_perturbed);
        let agreement = val(self.agreement);
        let mut total = 0.0;
        if terms.original {
            total += nll_original;
        }
        if terms.perturbed {
            total += nll_perturbed;
        }
        if terms.agreement {
            total += agreement;
        }
        LossBreakdown {
            nll_original,
            nll_perturbed,
            agreement,
            total,
            token_count: self.token_count,
        }
    }
}

/// Original-view forward pass and its NLL.
pub fn original_loss(
    tape: &mut Tape<'_>,
    pair: &DocumentPair,
    reduction: Reduction,
) -> Result<(ForwardTrace, Var, usize), ModelError> {
    let trace = tape.forward(&pair.src_tokens, pair.decoder_input())?;
    let mask = pair.current_label_mask();
    let (loss, count) = nll(
        &mut tape.graph,
        trace.dec.logits,
        pair.decoder_labels(),
        &mask,
        reduction,
    )?;
    Ok((trace, loss, count))
}

/// Adds the perturbed-view pass to a tape that already holds the original
/// view, completing the three-term objective.
pub fn add_perturbed_terms(
    tape: &mut Tape<'_>,
    pair: &DocumentPair,
    perturbed: &DocumentPair,
    original: ForwardTrace,
    nll_original: Var,
    token_count: usize,
    terms: &LossTerms,
) -> Result<LossNodes, ModelError> {
    if perturbed.src_tokens.len() != pair.src_tokens.len()
        || perturbed.tgt_tokens.len() != pair.tgt_tokens.len()
        || perturbed.src_cur_start != pair.src_cur_start
        || perturbed.tgt_cur_start != pair.tgt_cur_start
    {
        return Err(ModelError::Config(
            "perturbed view does not share the pair's segmentation".into(),
        ));
    }
    let mut nodes = LossNodes {
        nll_original,
        nll_perturbed: None,
        agreement: None,
        original,
        perturbed: None,
        token_count,
    };
    if !terms.needs_perturbed_view() {
        return Ok(nodes);
    }
    let mask = pair.current_label_mask();
    let trace = tape.forward(&perturbed.src_tokens, perturbed.decoder_input())?;
    let labels = match terms.perturb_targets {
        PerturbTargets::Original => pair.decoder_labels(),
        PerturbTargets::Perturbed => perturbed.decoder_labels(),
    };
    let (np, _) = nll(&mut tape.graph, trace.dec.logits, labels, &mask, terms.reduction)?;
    nodes.nll_perturbed = Some(np);
    if terms.agreement {
        nodes.agreement = Some(agreement(
            &mut tape.graph,
            original.dec.logits,
            trace.dec.logits,
            &mask,
            terms.reduction,
        )?);
    }
    nodes.perturbed = Some(trace);
    Ok(nodes)
}

/// Full objective for one pair and its perturbed view on a fresh tape
/// region. Returns the per-term nodes; use [`LossNodes::root`] for the
/// differentiable total.
pub fn total_loss(
    tape: &mut Tape<'_>,
    pair: &DocumentPair,
    perturbed: &DocumentPair,
    terms: &LossTerms,
) -> Result<LossNodes, ModelError> {
    let (trace, nll_o, count) = original_loss(tape, pair, terms.reduction)?;
    add_perturbed_terms(tape, pair, perturbed, trace, nll_o, count, terms)
}
