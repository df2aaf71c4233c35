use super::Span;

/// A word token with its byte range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on whitespace and punctuation boundaries: runs of
/// alphanumeric characters form one token, every other visible character is
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: usize, end: usize| {
        tokens.push(Token {
            text: text[start..end].to_lowercase(),
            start,
            end,
        });
    };
    for (pos, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(pos);
            continue;
        }
        if let Some(start) = word_start.take() {
            flush(&mut tokens, start, pos);
        }
        if !ch.is_whitespace() {
            flush(&mut tokens, pos, pos + ch.len_utf8());
        }
    }
    if let Some(start) = word_start {
        flush(&mut tokens, start, text.len());
    }
    tokens
}

/// Smallest token span covering every token that intersects the byte range
/// `[start, end)`.
pub fn char_range_to_span(tokens: &[Token], start: usize, end: usize) -> Option<Span> {
    let mut hit = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < end && start < t.end)
        .map(|(k, _)| k);
    let first = hit.next()?;
    let last = hit.next_back().unwrap_or(first);
    Some(Span::new(first, last + 1))
}
