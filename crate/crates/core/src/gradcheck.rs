//! Central finite-difference check of the full training objective against
//! reverse-mode gradients, probing parameters and embedding outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{apply_strategy, sample_mask, Strategy};
use crate::error::ModelError;
use crate::model::{ForwardTrace, Model, ModelConfig, Tape};
use crate::objective::{self, LossTerms};
use crate::pair::{DocumentPair, TokenId, FIRST_CONTENT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub model: ModelConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: 100,
            step: 1e-5,
            tolerance: 1e-4,
            model: ModelConfig {
                vocab_size: 24,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 32,
                max_len: 64,
                dropout_rate: 0.0,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ProbeTarget {
    Param { name: String, index: usize },
    SrcEmbed { position: usize, dim: usize },
    TgtEmbed { position: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub target: ProbeTarget,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|)`, with gradients below `1e-8` in both
/// estimates treated as agreeing zeros.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// A random document pair and a perturbed view of it.
pub fn random_case(vocab: usize, rng: &mut ChaCha8Rng) -> (DocumentPair, DocumentPair) {
    let mut sent = |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.random_range(FIRST_CONTENT..vocab as TokenId)).collect() };
    let ctx_s = vec![sent(4), sent(3)];
    let ctx_t = vec![sent(3), sent(4)];
    let cur_s = sent(5);
    let cur_t = sent(4);
    let pair = DocumentPair::from_segments(0, 0, &ctx_s, &cur_s, &ctx_t, &cur_t);
    let ms = sample_mask(&vec![0.3; pair.src_tokens.len()], rng);
    let mt = sample_mask(&vec![0.3; pair.tgt_tokens.len()], rng);
    let src = apply_strategy(&pair.src_tokens, &ms, Strategy::Replace, vocab, rng).expect("vocab has room");
    let tgt = apply_strategy(&pair.tgt_tokens, &mt, Strategy::Replace, vocab, rng).expect("vocab has room");
    let view = DocumentPair {
        src_tokens: src,
        tgt_tokens: tgt,
        ..pair.clone()
    };
    (pair, view)
}

/// Total three-term loss with optional offsets added to the original
/// view's embedding outputs. Returns the tape, the scalar root and the
/// original-view trace.
pub fn loss_with_offsets<'m>(
    model: &'m Model,
    pair: &DocumentPair,
    view: &DocumentPair,
    src_offset: Option<&Tensor>,
    tgt_offset: Option<&Tensor>,
) -> Result<(Tape<'m>, crate::autodiff::Var, ForwardTrace), ModelError> {
    let terms = LossTerms::default();
    let mut tape = Tape::new(model);
    let enc = tape.encode(&pair.src_tokens, src_offset)?;
    let dec = tape.decode(pair.decoder_input(), &pair.src_tokens, &enc, tgt_offset)?;
    let trace = ForwardTrace { enc, dec };
    let mask = pair.current_label_mask();
    let (nll, count) = objective::nll(&mut tape.graph, dec.logits, pair.decoder_labels(), &mask, terms.reduction)?;
    let nodes = objective::add_perturbed_terms(&mut tape, pair, view, trace, nll, count, &terms)?;
    let root = nodes.root(&mut tape.graph, &terms, false)?.expect("all terms on");
    Ok((tape, root, trace))
}

fn loss_value(model: &Model, pair: &DocumentPair, view: &DocumentPair, so: Option<&Tensor>, to: Option<&Tensor>) -> Result<f64, ModelError> {
    let (tape, root, _) = loss_with_offsets(model, pair, view, so, to)?;
    Ok(tape.graph.value(root).item())
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mcfg = cfg.model.clone();
    mcfg.seed = cfg.seed;
    let mut model = Model::new(mcfg)?;
    let (pair, view) = random_case(cfg.model.vocab_size, &mut rng);
    let d = cfg.model.d_model;
    let (ns, nt) = (pair.src_tokens.len(), pair.decoder_input().len());
    let zs = Tensor::zeros(&[ns, d]);
    let zt = Tensor::zeros(&[nt, d]);

    let (tape, root, trace) = loss_with_offsets(&model, &pair, &view, Some(&zs), Some(&zt))?;
    let mut grads = tape.graph.backward(root)?;
    let g_src = grads.wrt(trace.enc.embed);
    let g_tgt = grads.wrt(trace.dec.embed);
    let pgrads = tape.param_grads(&mut grads);
    drop(tape);

    let names: Vec<String> = model.params().names().to_vec();
    let h = cfg.step;
    let mut probes = Vec::with_capacity(cfg.probes);
    for i in 0..cfg.probes {
        let (target, analytic, numeric) = match i % 4 {
            0 => {
                let (pos, dim) = (rng.random_range(0..ns), rng.random_range(0..d));
                let mut plus = zs.clone();
                plus.data_mut()[pos * d + dim] = h;
                let mut minus = zs.clone();
                minus.data_mut()[pos * d + dim] = -h;
                let n = (loss_value(&model, &pair, &view, Some(&plus), Some(&zt))? - loss_value(&model, &pair, &view, Some(&minus), Some(&zt))?) / (2.0 * h);
                (ProbeTarget::SrcEmbed { position: pos, dim }, g_src.data()[pos * d + dim], n)
            }
            1 => {
                let (pos, dim) = (rng.random_range(0..nt), rng.random_range(0..d));
                let mut plus = zt.clone();
                plus.data_mut()[pos * d + dim] = h;
                let mut minus = zt.clone();
                minus.data_mut()[pos * d + dim] = -h;
                let n = (loss_value(&model, &pair, &view, Some(&zs), Some(&plus))? - loss_value(&model, &pair, &view, Some(&zs), Some(&minus))?) / (2.0 * h);
                (ProbeTarget::TgtEmbed { position: pos, dim }, g_tgt.data()[pos * d + dim], n)
            }
            _ => {
                let p = rng.random_range(0..names.len());
                let idx = rng.random_range(0..model.params().tensors()[p].len());
                let orig = model.params().tensors()[p].data()[idx];
                model.params_mut().tensors_mut()[p].data_mut()[idx] = orig + h;
                let lp = loss_value(&model, &pair, &view, Some(&zs), Some(&zt))?;
                model.params_mut().tensors_mut()[p].data_mut()[idx] = orig - h;
                let lm = loss_value(&model, &pair, &view, Some(&zs), Some(&zt))?;
                model.params_mut().tensors_mut()[p].data_mut()[idx] = orig;
                (
                    ProbeTarget::Param {
                        name: names[p].clone(),
                        index: idx,
                    },
                    pgrads[p].data()[idx],
                    (lp - lm) / (2.0 * h),
                )
            }
        };
        probes.push(Probe {
            target,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        probes,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}
