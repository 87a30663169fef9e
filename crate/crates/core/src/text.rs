//! String helpers shared by mining, injection and alignment.
//!
//! Offsets handed out by this module are byte offsets unless the function
//! name says otherwise. Persisted offsets are always in chars.

use std::ops::Range;

/// Sentence punctuation that bounds a phrase.
pub const CLAUSE_BREAKS: [char; 4] = ['.', '!', '?', ';'];

/// Lowercase, trim and collapse internal whitespace.
pub fn canonicalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn byte_to_char(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// Byte offset of char index `ch`, or `None` when past the end.
pub fn char_to_byte(text: &str, ch: usize) -> Option<usize> {
    if ch == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (b, _) in text.char_indices() {
        if count == ch {
            return Some(b);
        }
        count += 1;
    }
    (count == ch).then_some(text.len())
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slice by char offsets.
pub fn char_slice(text: &str, range: Range<usize>) -> Option<&str> {
    let start = char_to_byte(text, range.start)?;
    let end = char_to_byte(text, range.end)?;
    (start <= end).then(|| &text[start..end])
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn word_boundary_ok(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    before.is_none_or(|c| !is_word_char(c)) && after.is_none_or(|c| !is_word_char(c))
}

/// All whole-word occurrences of `needle` (byte ranges, possibly overlapping).
pub fn find_words(text: &str, needle: &str) -> Vec<Range<usize>> {
    if needle.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = text[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        if word_boundary_ok(text, start, end) {
            out.push(start..end);
        }
        from = start + text[start..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

pub fn find_word(text: &str, needle: &str) -> Option<Range<usize>> {
    find_words(text, needle).into_iter().next()
}

pub fn contains_word(text: &str, needle: &str) -> bool {
    find_word(text, needle).is_some()
}

/// Number of (possibly overlapping) plain substring occurrences.
pub fn count_occurrences(text: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut n = 0;
    let mut from = 0;
    while let Some(pos) = text[from..].find(needle) {
        n += 1;
        let start = from + pos;
        from = start + text[start..].chars().next().map_or(1, char::len_utf8);
    }
    n
}

/// The phrase containing byte `pos`: the maximal substring bounded by
/// sentence punctuation or the text edges, trimmed of whitespace.
pub fn clause_around(text: &str, pos: usize) -> Range<usize> {
    let start = text[..pos]
        .rfind(CLAUSE_BREAKS)
        .map(|i| i + text[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let end = text[pos..]
        .find(CLAUSE_BREAKS)
        .map(|i| pos + i)
        .unwrap_or(text.len());
    trim_range(text, start..end)
}

/// The phrase that fully contains `range`. When the range itself crosses a
/// clause break the union of the clauses at both ends is returned.
pub fn clause_covering(text: &str, range: Range<usize>) -> Range<usize> {
    let first = clause_around(text, range.start);
    let last = if range.end > range.start {
        let last_char_start = text[..range.end]
            .char_indices()
            .next_back()
            .map_or(range.start, |(i, _)| i);
        clause_around(text, last_char_start.max(range.start))
    } else {
        first.clone()
    };
    first.start.min(range.start)..last.end.max(range.end)
}

pub fn trim_range(text: &str, range: Range<usize>) -> Range<usize> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead == slice.len() {
        return range.start..range.start;
    }
    range.start + lead..range.end - trail
}

pub fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Deterministic 64-bit FNV-1a hash, stable across platforms and runs.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
