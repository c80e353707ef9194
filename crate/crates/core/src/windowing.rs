//! Tokenization with byte offsets and span-centred context windows.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default window size in tokens.
pub const MAX_WINDOW: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("span {start}..{end} overlaps no token")]
    SpanOutside { start: usize, end: usize },
    #[error("span covers {tokens} tokens, more than the window size {max_len}")]
    SpanTooLong { tokens: usize, max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub vocab_id: Option<u32>,
}

/// Splits text into alphanumeric runs and single punctuation characters;
/// whitespace separates tokens and is dropped.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run: Option<usize> = None;
    let push = |tokens: &mut Vec<Token>, start: usize, end: usize| {
        tokens.push(Token {
            surface: text[start..end].to_string(),
            start,
            end,
            vocab_id: None,
        })
    };
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            run.get_or_insert(i);
            continue;
        }
        if let Some(s) = run.take() {
            push(&mut tokens, s, i);
        }
        if !ch.is_whitespace() {
            push(&mut tokens, i, i + ch.len_utf8());
        }
    }
    if let Some(s) = run {
        push(&mut tokens, s, text.len());
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub tokens: Vec<Token>,
    /// Token indices (within `tokens`) covering the concept span.
    pub span_range: Range<usize>,
    /// Index of the first window token in the source token list.
    pub offset: usize,
    pub max_len: usize,
}

impl Window {
    pub fn left_context(&self) -> usize {
        self.span_range.start
    }

    pub fn right_context(&self) -> usize {
        self.tokens.len() - self.span_range.end
    }
}

/// Token index range overlapping the byte range `span`. Tokens partially
/// covered by the span are included whole.
pub fn span_tokens(tokens: &[Token], span: Range<usize>) -> Result<Range<usize>, WindowError> {
    let first = tokens.iter().position(|t| t.end > span.start && t.start < span.end);
    let Some(first) = first else {
        return Err(WindowError::SpanOutside {
            start: span.start,
            end: span.end,
        });
    };
    let last = tokens[first..]
        .iter()
        .take_while(|t| t.start < span.end)
        .count();
    Ok(first..first + last)
}

/// Grows a window around the span one token at a time, alternating left and
/// right (left first) and letting the other side take the turn once one side
/// reaches the note boundary.
pub fn center_window(
    tokens: &[Token],
    span: Range<usize>,
    max_len: usize,
) -> Result<Window, WindowError> {
    let covered = span_tokens(tokens, span)?;
    if covered.len() > max_len {
        return Err(WindowError::SpanTooLong {
            tokens: covered.len(),
            max_len,
        });
    }
    let (mut lo, mut hi) = (covered.start, covered.end);
    let mut left_turn = true;
    while hi - lo < max_len {
        let can_left = lo > 0;
        let can_right = hi < tokens.len();
        match (left_turn, can_left, can_right) {
            (_, false, false) => break,
            (true, true, _) | (false, true, false) => lo -= 1,
            _ => hi += 1,
        }
        left_turn = !left_turn;
    }
    Ok(Window {
        tokens: tokens[lo..hi].to_vec(),
        span_range: covered.start - lo..covered.end - lo,
        offset: lo,
        max_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> (String, Vec<Token>) {
        let text = (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let toks = tokenize(&text);
        (text, toks)
    }

    #[test]
    fn tokenizes_sentence() {
        let t = tokenize("No progression to PDR.");
        let s: Vec<_> = t.iter().map(|t| t.surface.as_str()).collect();
        assert_eq!(s, ["No", "progression", "to", "PDR", "."]);
        assert_eq!((t[3].start, t[3].end), (18, 21));
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n ").is_empty());
    }

    #[test]
    fn punctuation_is_split() {
        let s: Vec<_> = tokenize("anti-VEGF [[E11.319: x]]")
            .into_iter()
            .map(|t| t.surface)
            .collect();
        assert_eq!(s, ["anti", "-", "VEGF", "[", "[", "E11", ".", "319", ":", "x", "]", "]"]);
    }

    #[test]
    fn short_note_fits_whole() {
        let (_, toks) = words(50);
        let w = center_window(&toks, toks[20].start..toks[22].end, MAX_WINDOW).unwrap();
        assert_eq!(w.tokens.len(), 50);
        assert_eq!(w.span_range, 20..23);
    }

    #[test]
    fn left_exhaustion_shifts_budget_right() {
        let (_, toks) = words(300);
        let w = center_window(&toks, toks[2].start..toks[4].end, MAX_WINDOW).unwrap();
        assert_eq!(w.offset, 0);
        assert_eq!(w.tokens.len(), 128);
        assert_eq!(w.tokens.last().unwrap().surface, "w127");
    }

    #[test]
    fn mid_note_is_balanced() {
        let (_, toks) = words(300);
        let w = center_window(&toks, toks[150].start..toks[152].end, MAX_WINDOW).unwrap();
        assert_eq!(w.tokens.len(), 128);
        assert_eq!(w.left_context(), 63);
        assert_eq!(w.right_context(), 62);
    }

    #[test]
    fn partial_token_overlap_includes_token() {
        let toks = tokenize("abc defgh ij");
        assert_eq!(span_tokens(&toks, 5..6).unwrap(), 1..2);
        assert_eq!(span_tokens(&toks, 2..5).unwrap(), 0..2);
    }

    #[test]
    fn errors() {
        let toks = tokenize("a b");
        assert!(matches!(
            center_window(&toks, 10..12, 8),
            Err(WindowError::SpanOutside { .. })
        ));
        let (_, toks) = words(10);
        assert!(matches!(
            center_window(&toks, 0..toks[9].end, 4),
            Err(WindowError::SpanTooLong { .. })
        ));
    }
}
