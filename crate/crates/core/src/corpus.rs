//! Synthetic document-translation corpus: random sentence mappings with a
//! context sub-sequence that determines part of the current target.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::pair::{DocumentPair, TokenId, FIRST_CONTENT, SEP};

pub const HEADER: &str = "iada-corpus v1";

/// Multiplier and offset of the affine correlation rule.
pub const AFFINE_A: u64 = 7;
pub const AFFINE_B: u64 = 13;

/// How the planted context tokens relate to the current target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrRule {
    Copy,
    /// `id -> ((a * (id - 5) + b) mod vocab_content) + 5`
    AffineMap,
}

impl CorrRule {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrRule::Copy => "copy",
            CorrRule::AffineMap => "affine",
        }
    }

    /// Maps a planted context token to the target token it determines.
    pub fn apply(self, id: TokenId, vocab_content: usize) -> TokenId {
        match self {
            CorrRule::Copy => id,
            CorrRule::AffineMap => {
                let raw = (id - FIRST_CONTENT) as u64;
                ((AFFINE_A * raw + AFFINE_B) % vocab_content as u64) as TokenId + FIRST_CONTENT
            }
        }
    }

    /// The context token that [`Self::apply`] maps to `id`.
    pub fn invert(self, id: TokenId, vocab_content: usize) -> TokenId {
        match self {
            CorrRule::Copy => id,
            CorrRule::AffineMap => {
                let v = vocab_content as u64;
                let inv = mod_inverse(AFFINE_A % v, v).expect("validated config");
                let raw = (id - FIRST_CONTENT) as u64;
                ((inv * ((raw + v - AFFINE_B % v) % v)) % v) as TokenId + FIRST_CONTENT
            }
        }
    }
}

impl std::str::FromStr for CorrRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(CorrRule::Copy),
            "affine" => Ok(CorrRule::AffineMap),
            _ => Err(format!("unknown correlation rule `{s}` (copy|affine)")),
        }
    }
}

fn mod_inverse(a: u64, m: u64) -> Option<u64> {
    let (mut t, mut new_t) = (0i128, 1i128);
    let (mut r, mut new_r) = (m as i128, a as i128);
    while new_r != 0 {
        let q = r / new_r;
        (t, new_t) = (new_t, t - q * new_t);
        (r, new_r) = (new_r, r - q * new_r);
    }
    (r == 1).then(|| t.rem_euclid(m as i128) as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_content: usize,
    /// Total documents across all splits.
    pub n_docs: usize,
    pub n_valid_docs: usize,
    pub n_test_docs: usize,
    pub sents_per_doc: usize,
    pub cur_len: usize,
    pub ctx_sent_len: usize,
    pub ctx_window: usize,
    pub corr_len: usize,
    pub seed: u64,
    pub corr_rule: CorrRule,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_content: 200,
            n_docs: 50,
            n_valid_docs: 5,
            n_test_docs: 5,
            sents_per_doc: 5,
            cur_len: 8,
            ctx_sent_len: 8,
            ctx_window: 3,
            corr_len: 4,
            seed: 0,
            corr_rule: CorrRule::Copy,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.corr_len < 1 || self.corr_len > self.ctx_sent_len {
            return bad(format!(
                "corr_len must lie in 1..=ctx_sent_len ({}), got {}",
                self.ctx_sent_len, self.corr_len
            ));
        }
        if self.corr_len > self.cur_len {
            return bad(format!("corr_len {} exceeds cur_len {}", self.corr_len, self.cur_len));
        }
        if self.ctx_window < 1 {
            return bad("ctx_window must be at least 1".into());
        }
        if self.sents_per_doc < 1 {
            return bad("sents_per_doc must be at least 1".into());
        }
        if self.vocab_content < 10 * self.cur_len {
            return bad(format!(
                "vocab_content {} is below 10 * cur_len = {}",
                self.vocab_content,
                10 * self.cur_len
            ));
        }
        if self.n_valid_docs + self.n_test_docs >= self.n_docs {
            return bad(format!(
                "n_docs {} leaves no training documents after {} valid + {} test",
                self.n_docs, self.n_valid_docs, self.n_test_docs
            ));
        }
        if self.corr_rule == CorrRule::AffineMap && mod_inverse(AFFINE_A % self.vocab_content as u64, self.vocab_content as u64).is_none() {
            return bad(format!(
                "affine rule needs vocab_content coprime with {AFFINE_A}, got {}",
                self.vocab_content
            ));
        }
        Ok(())
    }

    /// Model vocabulary covering reserved and content ids.
    pub fn vocab_size(&self) -> usize {
        self.vocab_content + FIRST_CONTENT as usize
    }

    /// Index of the first current token in every laid-out sequence.
    pub fn cur_start(&self) -> usize {
        self.ctx_window * (self.ctx_sent_len + 1) + 1
    }

    pub fn seq_len(&self) -> usize {
        self.cur_start() + self.cur_len + 1
    }
}

/// A pair plus the absolute positions (identical on both sides) of the
/// planted context tokens; `corr_positions[j]` determines target token `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub pair: DocumentPair,
    pub corr_positions: Vec<usize>,
}

impl CorpusRecord {
    /// What an oracle reading the planted source positions predicts for the
    /// first current-target tokens.
    pub fn planted_prediction(&self, rule: CorrRule, vocab_content: usize) -> Vec<TokenId> {
        self.corr_positions
            .iter()
            .map(|&p| rule.apply(self.pair.src_tokens[p], vocab_content))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &DocumentPair> {
        self.records.iter().map(|r| &r.pair)
    }

    pub fn doc_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.pair.doc_id).collect();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Generates all documents from one seeded stream; documents are assigned to
/// train, valid and test in that order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Splits, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_train = cfg.n_docs - cfg.n_valid_docs - cfg.n_test_docs;
    let mut splits = Splits::default();
    for doc in 0..cfg.n_docs {
        let records = generate_document(cfg, doc as u32, &mut rng);
        let dest = if doc < n_train {
            &mut splits.train
        } else if doc < n_train + cfg.n_valid_docs {
            &mut splits.valid
        } else {
            &mut splits.test
        };
        dest.records.extend(records);
    }
    Ok(splits)
}

fn random_sentence<R: Rng>(len: usize, vocab_content: usize, rng: &mut R) -> Vec<TokenId> {
    (0..len)
        .map(|_| FIRST_CONTENT + rng.random_range(0..vocab_content as TokenId))
        .collect()
}

fn fit<R: Rng>(sent: &[TokenId], len: usize, vocab_content: usize, rng: &mut R) -> Vec<TokenId> {
    let mut s = sent[..sent.len().min(len)].to_vec();
    while s.len() < len {
        s.push(FIRST_CONTENT + rng.random_range(0..vocab_content as TokenId));
    }
    s
}

fn generate_document<R: Rng>(cfg: &GeneratorConfig, doc_id: u32, rng: &mut R) -> Vec<CorpusRecord> {
    let v = cfg.vocab_content;
    // Earlier sentences of the document that precede the first record.
    let mut history: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..cfg.ctx_window)
        .map(|_| (random_sentence(cfg.ctx_sent_len, v, rng), random_sentence(cfg.ctx_sent_len, v, rng)))
        .collect();
    let mut out = Vec::with_capacity(cfg.sents_per_doc);
    for sent_id in 0..cfg.sents_per_doc {
        let x = random_sentence(cfg.cur_len, v, rng);
        let y = random_sentence(cfg.cur_len, v, rng);
        let window = &history[history.len() - cfg.ctx_window..];
        let mut src_ctx: Vec<Vec<TokenId>> = Vec::with_capacity(cfg.ctx_window);
        let mut tgt_ctx: Vec<Vec<TokenId>> = Vec::with_capacity(cfg.ctx_window);
        for (s, t) in window {
            src_ctx.push(fit(s, cfg.ctx_sent_len, v, rng));
            tgt_ctx.push(fit(t, cfg.ctx_sent_len, v, rng));
        }
        let k = rng.random_range(0..cfg.ctx_window);
        let offset = rng.random_range(0..=cfg.ctx_sent_len - cfg.corr_len);
        for j in 0..cfg.corr_len {
            let planted = cfg.corr_rule.invert(y[j], v);
            src_ctx[k][offset + j] = planted;
            tgt_ctx[k][offset + j] = planted;
        }
        let base = 1 + k * (cfg.ctx_sent_len + 1) + offset;
        out.push(CorpusRecord {
            pair: DocumentPair::from_segments(doc_id, sent_id as u32, &src_ctx, &x, &tgt_ctx, &y),
            corr_positions: (base..base + cfg.corr_len).collect(),
        });
        history.push((x, y));
    }
    out
}

fn join_ids(ids: &[TokenId]) -> String {
    let mut s = String::with_capacity(ids.len() * 4);
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

/// Serializes a corpus in the line-oriented text format.
pub fn to_string(corpus: &Corpus) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in &corpus.records {
        let p = &r.pair;
        let ctx = |seq: &[TokenId], cur: usize| join_ids(if cur >= 2 { &seq[1..cur - 1] } else { &[] });
        let positions: Vec<String> = r.corr_positions.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.doc_id,
            p.sent_id,
            ctx(&p.src_tokens, p.src_cur_start),
            join_ids(p.src_current()),
            ctx(&p.tgt_tokens, p.tgt_cur_start),
            join_ids(p.tgt_current()),
            positions.join(",")
        );
    }
    out
}

pub fn write(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    std::fs::write(path, to_string(corpus))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Corpus, CorpusError> {
    parse(&std::fs::read_to_string(path)?)
}

const FIELDS: [&str; 7] = ["doc_id", "sent_id", "src_ctx", "src_cur", "tgt_ctx", "tgt_cur", "corr_positions"];

pub fn parse(text: &str) -> Result<Corpus, CorpusError> {
    let mut lines = text.split('\n');
    if lines.next().map(|h| h.trim_end_matches('\r')) != Some(HEADER) {
        return Err(CorpusError::Header { expected: HEADER });
    }
    let mut records = Vec::new();
    let mut trailing_newline_seen = false;
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            trailing_newline_seen = true;
            continue;
        }
        if trailing_newline_seen {
            return Err(CorpusError::Parse {
                line: line_no - 1,
                field: FIELDS[0],
                reason: "blank line inside corpus".into(),
            });
        }
        records.push(parse_record(line, line_no)?);
    }
    Ok(Corpus { records })
}

fn parse_record(line: &str, line_no: usize) -> Result<CorpusRecord, CorpusError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != FIELDS.len() {
        return Err(CorpusError::Parse {
            line: line_no,
            field: FIELDS.get(fields.len()).copied().unwrap_or("corr_positions"),
            reason: format!("expected {} tab-separated fields, found {}", FIELDS.len(), fields.len()),
        });
    }
    let err = |field: &'static str, reason: String| CorpusError::Parse {
        line: line_no,
        field,
        reason,
    };
    let int = |field: &'static str, s: &str| -> Result<u32, CorpusError> { s.parse().map_err(|e| err(field, format!("`{s}`: {e}"))) };
    let ids = |field: &'static str, s: &str| -> Result<Vec<TokenId>, CorpusError> { s.split_whitespace().map(|t| int(field, t)).collect() };
    let doc_id = int("doc_id", fields[0])?;
    let sent_id = int("sent_id", fields[1])?;
    let split_ctx = |v: Vec<TokenId>| -> Vec<Vec<TokenId>> {
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(|&t| t == SEP).map(<[TokenId]>::to_vec).collect()
        }
    };
    let src_ctx = split_ctx(ids("src_ctx", fields[2])?);
    let src_cur = ids("src_cur", fields[3])?;
    let tgt_ctx = split_ctx(ids("tgt_ctx", fields[4])?);
    let tgt_cur = ids("tgt_cur", fields[5])?;
    let corr_positions = if fields[6].is_empty() {
        Vec::new()
    } else {
        fields[6]
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| err("corr_positions", format!("`{s}`: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let pair = DocumentPair::from_segments(doc_id, sent_id, &src_ctx, &src_cur, &tgt_ctx, &tgt_cur);
    if let Some(&bad) = corr_positions.iter().find(|&&p| p >= pair.src_cur_start.min(pair.tgt_cur_start)) {
        return Err(err("corr_positions", format!("position {bad} is outside the context")));
    }
    Ok(CorpusRecord { pair, corr_positions })
}
