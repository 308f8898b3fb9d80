//! BLEU over token ids, the memorization protocol with planted-token
//! recovery, and the noisy-context robustness harness.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusRecord};
use crate::error::EvalError;
use crate::model::Model;
use crate::pair::{split_context, DocumentPair, TokenId, MASK};

pub const MAX_ORDER: usize = 4;

/// Corpus-level n-gram statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[TokenId], reference: &[TokenId]) {
        self.hyp_len += hyp.len() as u64;
        self.ref_len += reference.len() as u64;
        for n in 1..=MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[TokenId], u64> = HashMap::new();
            if reference.len() >= n {
                for g in reference.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut hyp_counts: HashMap<&[TokenId], u64> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            self.totals[n - 1] += (hyp.len() + 1 - n) as u64;
            self.matches[n - 1] += hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }

    /// Score in `[0, 100]` with exponential smoothing of zero-match orders:
    /// the k-th such order gets precision `1 / (2^k * total)`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                return 0.0;
            }
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.totals[n] as f64)
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU over paired hypotheses and references.
pub fn bleu(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut stats = BleuStats::default();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(EvalError::EmptyReference(i));
        }
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// BLEU over per-document concatenations; `docs[i]` is the document of
/// sentence `i` and sentences keep their order within a document.
pub fn doc_bleu(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>], docs: &[u32]) -> Result<f64, EvalError> {
    if hyps.len() != refs.len() || docs.len() != refs.len() {
        return Err(EvalError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut order: Vec<u32> = Vec::new();
    let mut cat: HashMap<u32, (Vec<TokenId>, Vec<TokenId>)> = HashMap::new();
    for ((h, r), &d) in hyps.iter().zip(refs).zip(docs) {
        let e = cat.entry(d).or_insert_with(|| {
            order.push(d);
            Default::default()
        });
        e.0.extend_from_slice(h);
        e.1.extend_from_slice(r);
    }
    let (dh, dr): (Vec<_>, Vec<_>) = order.iter().map(|d| cat.remove(d).expect("inserted")).unzip();
    bleu(&dh, &dr)
}

/// Per-record outputs of one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outputs {
    pub hyps: Vec<Vec<TokenId>>,
    pub refs: Vec<Vec<TokenId>>,
    pub docs: Vec<u32>,
    pub truncated: usize,
}

/// Metrics of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub s_bleu: f64,
    pub d_bleu: f64,
    pub mem_acc: f64,
    pub planted_recovery: f64,
}

/// How source inputs are presented at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    /// Replace the first `n` current-source tokens with `MASK`, so the
    /// planted target tokens can only come from the context.
    pub mask_current: Option<usize>,
}

fn decode_cap(reference: &[TokenId]) -> usize {
    2 * reference.len() + 2
}

fn masked_source(pair: &DocumentPair, protocol: Protocol) -> Vec<TokenId> {
    let mut src = pair.src_tokens.clone();
    if let Some(n) = protocol.mask_current {
        let end = (pair.src_cur_start + n).min(src.len().saturating_sub(1));
        for t in &mut src[pair.src_cur_start..end] {
            *t = MASK;
        }
    }
    src
}

/// Translates every record with its gold target context.
pub fn translate_gold(model: &Model, corpus: &Corpus, protocol: Protocol) -> Result<Outputs, EvalError> {
    let mut out = Outputs::default();
    for r in &corpus.records {
        let p = &r.pair;
        let reference = p.tgt_current().to_vec();
        let t = model.greedy_translate(&masked_source(p, protocol), p.tgt_prefix(), decode_cap(&reference))?;
        out.truncated += t.truncated as usize;
        out.hyps.push(t.tokens);
        out.refs.push(reference);
        out.docs.push(p.doc_id);
    }
    Ok(out)
}

/// Translates documents in order, replacing target-side context sentences
/// that belong to earlier records of the same document by the model's own
/// earlier outputs.
pub fn translate_documents(model: &Model, corpus: &Corpus) -> Result<Outputs, EvalError> {
    let mut out = Outputs::default();
    let mut previous: HashMap<u32, Vec<Vec<TokenId>>> = HashMap::new();
    let mut order: Vec<&CorpusRecord> = corpus.records.iter().collect();
    order.sort_by_key(|r| (r.pair.doc_id, r.pair.sent_id));
    for r in order {
        let p = &r.pair;
        let mut ctx = split_context(&p.tgt_tokens, p.tgt_cur_start);
        let own = previous.entry(p.doc_id).or_default();
        let k = own.len().min(ctx.len());
        let ctx_len = ctx.len();
        for (j, sent) in own[own.len() - k..].iter().enumerate() {
            ctx[ctx_len - k + j] = sent.clone();
        }
        let (prefix, _) = crate::pair::layout(&ctx, &[]);
        let prefix = &prefix[..prefix.len() - 1];
        let reference = p.tgt_current().to_vec();
        let t = model.greedy_translate(&p.src_tokens, prefix, decode_cap(&reference))?;
        out.truncated += t.truncated as usize;
        own.push(t.tokens.clone());
        out.hyps.push(t.tokens);
        out.refs.push(reference);
        out.docs.push(p.doc_id);
    }
    Ok(out)
}

/// Exact-match rate and accuracy on the first `corr_len` target tokens.
pub fn memorization_scores(outputs: &Outputs, corr_len: usize) -> (f64, f64) {
    let n = outputs.hyps.len().max(1) as f64;
    let exact = outputs.hyps.iter().zip(&outputs.refs).filter(|(h, r)| h == r).count();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (h, r) in outputs.hyps.iter().zip(&outputs.refs) {
        for j in 0..corr_len.min(r.len()) {
            total += 1;
            hits += (h.get(j) == Some(&r[j])) as usize;
        }
    }
    (exact as f64 / n, hits as f64 / total.max(1) as f64)
}

fn corr_len_of(corpus: &Corpus) -> usize {
    corpus.records.iter().map(|r| r.corr_positions.len()).max().unwrap_or(0)
}

/// Memorization protocol: gold context, optional masking, exact match and
/// planted recovery. BLEU fields are computed on the same outputs.
pub fn memorization_eval(model: &Model, corpus: &Corpus, protocol: Protocol) -> Result<Metrics, EvalError> {
    let out = translate_gold(model, corpus, protocol)?;
    metrics_of(&out, corr_len_of(corpus))
}

fn metrics_of(out: &Outputs, corr_len: usize) -> Result<Metrics, EvalError> {
    let (mem_acc, planted_recovery) = memorization_scores(out, corr_len);
    Ok(Metrics {
        s_bleu: bleu(&out.hyps, &out.refs)?,
        d_bleu: doc_bleu(&out.hyps, &out.refs, &out.docs)?,
        mem_acc,
        planted_recovery,
    })
}

type Sentences = Vec<Vec<TokenId>>;

/// Replaces two of three context sentences of every record, on both sides
/// at the same indices, with aligned sentence pairs drawn from records of
/// other documents with matching lengths.
pub fn noisy_corpus(corpus: &Corpus, seed: u64) -> Result<Corpus, EvalError> {
    let docs = corpus.doc_ids();
    let mut distinct = docs.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(EvalError::TooFewDocuments(distinct.len()));
    }
    let split: Vec<(Sentences, Sentences)> = corpus
        .records
        .iter()
        .map(|r| {
            (
                split_context(&r.pair.src_tokens, r.pair.src_cur_start),
                split_context(&r.pair.tgt_tokens, r.pair.tgt_cur_start),
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(corpus.len());
    for (i, r) in corpus.records.iter().enumerate() {
        let p = &r.pair;
        let (mut sc, mut tc) = split[i].clone();
        if sc.len() != 3 || tc.len() != 3 {
            return Err(EvalError::ContextWindow {
                doc_id: p.doc_id,
                sent_id: p.sent_id,
                needed: 3,
                found: sc.len().min(tc.len()),
            });
        }
        for k in sample(&mut rng, 3, 2).into_iter() {
            let (sl, tl) = (sc[k].len(), tc[k].len());
            let candidates: Vec<(usize, usize)> = corpus
                .records
                .iter()
                .enumerate()
                .filter(|(_, o)| o.pair.doc_id != p.doc_id)
                .flat_map(|(j, _)| (0..split[j].0.len().min(split[j].1.len())).map(move |s| (j, s)))
                .filter(|&(j, s)| split[j].0[s].len() == sl && split[j].1[s].len() == tl)
                .collect();
            if candidates.is_empty() {
                return Err(EvalError::TooFewDocuments(1));
            }
            let (j, s) = candidates[rng.random_range(0..candidates.len())];
            sc[k] = split[j].0[s].clone();
            tc[k] = split[j].1[s].clone();
        }
        records.push(CorpusRecord {
            pair: DocumentPair::from_segments(p.doc_id, p.sent_id, &sc, p.src_current(), &tc, p.tgt_current()),
            corr_positions: r.corr_positions.clone(),
        });
    }
    Ok(Corpus { records })
}

/// Gold-context metrics, noisy-context metrics and their difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    pub gold: Metrics,
    pub noisy: Metrics,
}

impl NoisyReport {
    /// `gold - noisy` per metric.
    pub fn delta(&self) -> Metrics {
        Metrics {
            s_bleu: self.gold.s_bleu - self.noisy.s_bleu,
            d_bleu: self.gold.d_bleu - self.noisy.d_bleu,
            mem_acc: self.gold.mem_acc - self.noisy.mem_acc,
            planted_recovery: self.gold.planted_recovery - self.noisy.planted_recovery,
        }
    }
}

pub fn noisy_context_eval(model: &Model, corpus: &Corpus, seed: u64, protocol: Protocol) -> Result<NoisyReport, EvalError> {
    let noisy = noisy_corpus(corpus, seed)?;
    Ok(NoisyReport {
        gold: memorization_eval(model, corpus, protocol)?,
        noisy: memorization_eval(model, &noisy, protocol)?,
    })
}

/// Everything `evaluate` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_bleu: f64,
    pub d_bleu: f64,
    pub mem_acc: f64,
    pub planted_recovery: f64,
    pub masked: Option<Metrics>,
    pub noisy: Option<NoisyReport>,
    pub records: usize,
    pub truncated: usize,
}

impl EvalReport {
    /// Document-level BLEU uses the model's own earlier outputs as target
    /// context; memorization metrics use the gold context.
    pub fn run(model: &Model, corpus: &Corpus, mask_current: Option<usize>, noisy_seed: Option<u64>) -> Result<Self, EvalError> {
        let docs = translate_documents(model, corpus)?;
        let gold = translate_gold(model, corpus, Protocol::default())?;
        let corr = corr_len_of(corpus);
        let (mem_acc, planted_recovery) = memorization_scores(&gold, corr);
        let masked = mask_current
            .map(|n| memorization_eval(model, corpus, Protocol { mask_current: Some(n) }))
            .transpose()?;
        let noisy = noisy_seed
            .map(|s| -> Result<NoisyReport, EvalError> {
                let noisy = noisy_corpus(corpus, s)?;
                Ok(NoisyReport {
                    gold: metrics_of(&gold, corr)?,
                    noisy: memorization_eval(model, &noisy, Protocol::default())?,
                })
            })
            .transpose()?;
        Ok(Self {
            s_bleu: bleu(&docs.hyps, &docs.refs)?,
            d_bleu: doc_bleu(&docs.hyps, &docs.refs, &docs.docs)?,
            mem_acc,
            planted_recovery,
            masked,
            noisy,
            records: corpus.len(),
            truncated: docs.truncated + gold.truncated,
        })
    }

    /// `metric<TAB>value` lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("records\t{}", self.records),
            format!("s_bleu\t{:.4}", self.s_bleu),
            format!("d_bleu\t{:.4}", self.d_bleu),
            format!("mem_acc\t{:.6}", self.mem_acc),
            format!("planted_recovery\t{:.6}", self.planted_recovery),
            format!("truncated\t{}", self.truncated),
        ];
        if let Some(m) = &self.masked {
            out.push(format!("masked.mem_acc\t{:.6}", m.mem_acc));
            out.push(format!("masked.planted_recovery\t{:.6}", m.planted_recovery));
        }
        if let Some(n) = &self.noisy {
            let d = n.delta();
            out.push(format!("noisy.s_bleu\t{:.4}", n.noisy.s_bleu));
            out.push(format!("noisy.d_bleu\t{:.4}", n.noisy.d_bleu));
            out.push(format!("noisy.mem_acc\t{:.6}", n.noisy.mem_acc));
            out.push(format!("noisy.planted_recovery\t{:.6}", n.noisy.planted_recovery));
            out.push(format!("delta.s_bleu\t{:.4}", d.s_bleu));
            out.push(format!("delta.mem_acc\t{:.6}", d.mem_acc));
            out.push(format!("delta.planted_recovery\t{:.6}", d.planted_recovery));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let s = vec![vec![5, 6, 7, 8, 9], vec![9, 8, 7, 6]];
        assert!((bleu(&s, &s).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_tail_example() {
        let v = bleu(&[vec![7, 8, 10, 9]], &[vec![7, 8, 9, 10]]).unwrap();
        // precisions 100, 100/3, 100/4, 100/4
        let expect = (100.0f64 * (100.0 / 3.0) * 25.0 * 25.0).powf(0.25);
        assert!((v - expect).abs() < 1e-9, "{v}");
    }

    #[test]
    fn short_hypothesis_scores_zero_without_fourgrams() {
        assert_eq!(bleu(&[vec![5, 6, 7]], &[vec![5, 6, 7]]).unwrap(), 0.0);
        assert_eq!(bleu(&[vec![]], &[vec![5]]).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let v = bleu(&[vec![5, 6, 7, 8]], &[vec![5, 6, 7, 8, 9, 10, 11, 12]]).unwrap();
        assert!((v - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu(&[vec![5]], &[]), Err(EvalError::CountMismatch { .. })));
        assert!(matches!(bleu(&[vec![5]], &[vec![]]), Err(EvalError::EmptyReference(0))));
    }

    #[test]
    fn doc_bleu_of_single_sentence_docs_equals_sentence_bleu() {
        let h = vec![vec![5, 6, 7, 8, 9], vec![9, 8, 7, 6, 6]];
        let r = vec![vec![5, 6, 7, 9, 9], vec![9, 8, 7, 6]];
        assert_eq!(doc_bleu(&h, &r, &[0, 1]).unwrap(), bleu(&h, &r).unwrap());
    }

    #[test]
    fn memorization_scores_count_positions() {
        let out = Outputs {
            hyps: vec![vec![5, 6, 7], vec![5, 9]],
            refs: vec![vec![5, 6, 7], vec![5, 6, 7]],
            docs: vec![0, 0],
            truncated: 0,
        };
        let (mem, planted) = memorization_scores(&out, 2);
        assert_eq!(mem, 0.5);
        assert_eq!(planted, 0.75);
    }
}
