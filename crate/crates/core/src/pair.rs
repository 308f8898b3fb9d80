//! Document pairs: context plus current sentence on each side, flattened
//! into one token sequence with an explicit segment boundary.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
/// Smallest id that denotes an ordinary word.
pub const FIRST_CONTENT: TokenId = 5;

pub fn is_reserved(id: TokenId) -> bool {
    id < FIRST_CONTENT
}

/// Lays out `[BOS, c1, SEP, c2, SEP, ..., ck, SEP, current, EOS]` and
/// returns the sequence together with the index of the first current token.
pub fn layout(context: &[Vec<TokenId>], current: &[TokenId]) -> (Vec<TokenId>, usize) {
    let ctx_len: usize = context.iter().map(|s| s.len() + 1).sum();
    let mut seq = Vec::with_capacity(ctx_len + current.len() + 2);
    seq.push(BOS);
    for sent in context {
        seq.extend_from_slice(sent);
        seq.push(SEP);
    }
    let cur_start = seq.len();
    seq.extend_from_slice(current);
    seq.push(EOS);
    (seq, cur_start)
}

/// Splits the context part of a laid-out sequence back into sentences.
pub fn split_context(seq: &[TokenId], cur_start: usize) -> Vec<Vec<TokenId>> {
    if cur_start <= 1 {
        return Vec::new();
    }
    // seq[1..cur_start] is "c1 SEP c2 SEP ... ck SEP"
    seq[1..cur_start - 1]
        .split(|&t| t == SEP)
        .map(<[TokenId]>::to_vec)
        .collect()
}

/// One training instance: source and target documents with their
/// context/current split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentPair {
    pub doc_id: u32,
    pub sent_id: u32,
    pub src_tokens: Vec<TokenId>,
    pub src_cur_start: usize,
    pub tgt_tokens: Vec<TokenId>,
    pub tgt_cur_start: usize,
}

impl DocumentPair {
    pub fn from_segments(
        doc_id: u32,
        sent_id: u32,
        src_ctx: &[Vec<TokenId>],
        src_cur: &[TokenId],
        tgt_ctx: &[Vec<TokenId>],
        tgt_cur: &[TokenId],
    ) -> Self {
        let (src_tokens, src_cur_start) = layout(src_ctx, src_cur);
        let (tgt_tokens, tgt_cur_start) = layout(tgt_ctx, tgt_cur);
        Self {
            doc_id,
            sent_id,
            src_tokens,
            src_cur_start,
            tgt_tokens,
            tgt_cur_start,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.src_cur_start <= self.src_tokens.len() && self.tgt_cur_start <= self.tgt_tokens.len()
    }

    /// Current source sentence without the trailing EOS.
    pub fn src_current(&self) -> &[TokenId] {
        strip_eos(&self.src_tokens[self.src_cur_start..])
    }

    /// Current target sentence without the trailing EOS.
    pub fn tgt_current(&self) -> &[TokenId] {
        strip_eos(&self.tgt_tokens[self.tgt_cur_start..])
    }

    /// Decoder prefix holding BOS and the target context, up to and
    /// including the separator before the current sentence.
    pub fn tgt_prefix(&self) -> &[TokenId] {
        &self.tgt_tokens[..self.tgt_cur_start]
    }

    /// Teacher-forcing input: the target shifted right by one.
    pub fn decoder_input(&self) -> &[TokenId] {
        &self.tgt_tokens[..self.tgt_tokens.len().saturating_sub(1)]
    }

    /// Labels aligned with [`Self::decoder_input`].
    pub fn decoder_labels(&self) -> &[TokenId] {
        &self.tgt_tokens[1.min(self.tgt_tokens.len())..]
    }

    /// For each decoder position, whether its label belongs to the current
    /// sentence (the only positions the loss is computed over).
    pub fn current_label_mask(&self) -> Vec<bool> {
        (1..self.tgt_tokens.len())
            .map(|j| j >= self.tgt_cur_start)
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.src_tokens.len() + self.tgt_tokens.len()
    }
}

fn strip_eos(seg: &[TokenId]) -> &[TokenId] {
    match seg.split_last() {
        Some((&EOS, rest)) => rest,
        _ => seg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_places_separators_and_boundary() {
        let ctx = vec![vec![7, 8], vec![9]];
        let (seq, cur) = layout(&ctx, &[10, 11]);
        assert_eq!(seq, vec![BOS, 7, 8, SEP, 9, SEP, 10, 11, EOS]);
        assert_eq!(cur, 6);
        assert_eq!(split_context(&seq, cur), ctx);
    }

    #[test]
    fn empty_context_layout() {
        let (seq, cur) = layout(&[], &[10]);
        assert_eq!(seq, vec![BOS, 10, EOS]);
        assert_eq!(cur, 1);
        assert!(split_context(&seq, cur).is_empty());
    }

    #[test]
    fn label_mask_covers_current_sentence_and_eos() {
        let p = DocumentPair::from_segments(0, 0, &[vec![7]], &[5], &[vec![8]], &[9, 10]);
        // tgt = BOS 8 SEP 9 10 EOS, cur_start = 3
        assert_eq!(p.decoder_input(), &[BOS, 8, SEP, 9, 10]);
        assert_eq!(p.decoder_labels(), &[8, SEP, 9, 10, EOS]);
        assert_eq!(p.current_label_mask(), vec![false, false, true, true, true]);
        assert_eq!(p.tgt_current(), &[9, 10]);
        assert_eq!(p.tgt_prefix(), &[BOS, 8, SEP]);
    }
}
