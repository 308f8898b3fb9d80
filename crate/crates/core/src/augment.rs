//! Bernoulli perturbation of document pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ImportanceError;
use crate::importance::{self, ImportanceTrace, Measure, Schedule, Side};
use crate::model::Model;
use crate::objective::Reduction;
use crate::pair::{is_reserved, DocumentPair, TokenId, FIRST_CONTENT, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Selected positions become `MASK`.
    Drop,
    /// Selected positions become a different random content token.
    Replace,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Drop => "drop",
            Strategy::Replace => "replace",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" => Ok(Strategy::Drop),
            "replace" => Ok(Strategy::Replace),
            _ => Err(format!("unknown strategy `{s}` (drop|replace)")),
        }
    }
}

/// A perturbed copy of a pair together with the masks that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedView {
    pub pair: DocumentPair,
    pub mask_src: Vec<bool>,
    pub mask_tgt: Vec<bool>,
    pub strategy: Strategy,
    /// Seed of the stream the masks were drawn from.
    pub seed_state: u64,
}

impl PerturbedView {
    pub fn masked_count(&self) -> usize {
        self.mask_src.iter().chain(&self.mask_tgt).filter(|&&m| m).count()
    }
}

/// Mixes several words into one stream seed (splitmix64 finalizer chain).
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_mask<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Vec<bool> {
    probs.iter().map(|&p| rng.random::<f64>() < p).collect()
}

/// Applies `strategy` at masked positions. Reserved tokens are never
/// touched, whatever the mask says.
pub fn apply_strategy<R: Rng + ?Sized>(
    tokens: &[TokenId],
    mask: &[bool],
    strategy: Strategy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>, ImportanceError> {
    if mask.len() != tokens.len() {
        return Err(ImportanceError::Length {
            what: "mask",
            got: mask.len(),
            expected: tokens.len(),
        });
    }
    if strategy == Strategy::Replace && vocab_size < FIRST_CONTENT as usize + 2 {
        return Err(ImportanceError::Vocabulary(vocab_size));
    }
    Ok(tokens
        .iter()
        .zip(mask)
        .map(|(&tok, &m)| {
            if !m || is_reserved(tok) {
                return tok;
            }
            match strategy {
                Strategy::Drop => MASK,
                Strategy::Replace => loop {
                    let cand = rng.random_range(FIRST_CONTENT..vocab_size as TokenId);
                    if cand != tok {
                        break cand;
                    }
                },
            }
        })
        .collect())
}

/// Perturbation settings for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub schedule: Schedule,
    pub strategy: Strategy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            strategy: Strategy::Replace,
        }
    }
}

/// Importance traces for both sides of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTraces {
    pub src: ImportanceTrace,
    pub tgt: ImportanceTrace,
}

/// Raw scores for both sides under the configured measure; zeros for the
/// measures that do not look at the model.
pub fn raw_scores(
    model: &Model,
    pair: &DocumentPair,
    measure: Measure,
    reduction: Reduction,
) -> Result<(Vec<f64>, Vec<f64>), ImportanceError> {
    Ok(match measure {
        Measure::TNorm => importance::tnorm_scores(model, pair)?,
        Measure::GNorm => importance::gnorm(model, pair, reduction)?,
        Measure::Random | Measure::Uniform => (vec![0.0; pair.src_tokens.len()], vec![0.0; pair.tgt_tokens.len()]),
    })
}

/// Turns raw scores into probabilities for both sides. `score_rng` feeds
/// the random measure; it is separate from the mask stream so random scores
/// can be held fixed across steps.
pub fn traces_from_scores<R: Rng + ?Sized>(
    pair: &DocumentPair,
    raw_src: Vec<f64>,
    raw_tgt: Vec<f64>,
    schedule: &Schedule,
    score_rng: &mut R,
) -> Result<PairTraces, ImportanceError> {
    Ok(PairTraces {
        src: importance::build_trace(Side::Source, &pair.src_tokens, pair.src_cur_start, raw_src, schedule, score_rng)?,
        tgt: importance::build_trace(Side::Target, &pair.tgt_tokens, pair.tgt_cur_start, raw_tgt, schedule, score_rng)?,
    })
}

/// Samples masks from the traces and applies the strategy to both sides.
pub fn perturb_with_traces(
    pair: &DocumentPair,
    traces: &PairTraces,
    strategy: Strategy,
    vocab_size: usize,
    seed: u64,
) -> Result<PerturbedView, ImportanceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask_src = sample_mask(&traces.src.probs, &mut rng);
    let mask_tgt = sample_mask(&traces.tgt.probs, &mut rng);
    let src_tokens = apply_strategy(&pair.src_tokens, &mask_src, strategy, vocab_size, &mut rng)?;
    let tgt_tokens = apply_strategy(&pair.tgt_tokens, &mask_tgt, strategy, vocab_size, &mut rng)?;
    // Reserved positions are never altered, so report them unmasked.
    let clean = |mask: Vec<bool>, toks: &[TokenId]| -> Vec<bool> {
        mask.into_iter().zip(toks).map(|(m, &t)| m && !is_reserved(t)).collect()
    };
    Ok(PerturbedView {
        mask_src: clean(mask_src, &pair.src_tokens),
        mask_tgt: clean(mask_tgt, &pair.tgt_tokens),
        pair: DocumentPair {
            src_tokens,
            tgt_tokens,
            ..pair.clone()
        },
        strategy,
        seed_state: seed,
    })
}

/// Full pipeline for one pair: score, normalize, schedule, sample, apply.
pub fn perturb_document(
    model: &Model,
    pair: &DocumentPair,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(PerturbedView, PairTraces), ImportanceError> {
    cfg.schedule.validate()?;
    let (raw_src, raw_tgt) = raw_scores(model, pair, cfg.schedule.measure, Reduction::Mean)?;
    let mut score_rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 1]));
    let traces = traces_from_scores(pair, raw_src, raw_tgt, &cfg.schedule, &mut score_rng)?;
    let view = perturb_with_traces(pair, &traces, cfg.strategy, model.config().vocab_size, stream_seed(&[seed, 2]))?;
    Ok((view, traces))
}
