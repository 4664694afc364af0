//! Tokenization, normalization and the pipe-delimited record format shared by
//! every model-output grammar in the engine.

use std::collections::BTreeSet;

/// Fixed English stopword list. Exactly fifty entries; keyword extraction
/// must stay reproducible, so never edit this list in place.
pub const STOPWORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "if", "then", "of", "at", "by", "for", "with", "about",
    "to", "from", "in", "on", "into", "over", "is", "are", "was", "were", "be", "been", "being",
    "am", "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "my",
    "your", "his", "its", "our", "their", "this", "that", "these", "those",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Lowercased alphanumeric tokens minus stopwords.
pub fn keywords(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Case-folded, trimmed form used for free-text comparisons.
pub fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Finds `needle` in `haystack` case-insensitively on word boundaries and
/// returns the byte range of the first match in `haystack`.
pub fn find_whole_word(haystack: &str, needle: &str) -> Option<std::ops::Range<usize>> {
    let needle = needle.trim();
    if needle.is_empty() {
        return None;
    }
    let needle_chars: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    let indexed: Vec<(usize, char)> = haystack.char_indices().collect();
    'outer: for start in 0..indexed.len() {
        if start > 0 && indexed[start - 1].1.is_alphanumeric() {
            continue;
        }
        let mut pos = start;
        let mut matched = 0;
        while matched < needle_chars.len() {
            let Some(&(_, c)) = indexed.get(pos) else {
                continue 'outer;
            };
            for lc in c.to_lowercase() {
                if needle_chars.get(matched) != Some(&lc) {
                    continue 'outer;
                }
                matched += 1;
            }
            pos += 1;
        }
        if let Some(&(_, next)) = indexed.get(pos) {
            if next.is_alphanumeric() {
                continue;
            }
        }
        let begin = indexed[start].0;
        let end = indexed.get(pos).map_or(haystack.len(), |&(i, _)| i);
        return Some(begin..end);
    }
    None
}

/// Splits one line of a `TAG|field|field...` record. Returns the tag and its
/// fields, or `None` when the line has no tag prefix. The final field keeps
/// any further `|` characters when `fields` is given.
pub fn split_record(line: &str, fields: usize) -> Option<(&str, Vec<&str>)> {
    let line = line.trim();
    let (tag, rest) = line.split_once('|')?;
    let tag = tag.trim();
    if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_uppercase() || c == '_') {
        return None;
    }
    let parts = if fields == 0 {
        rest.split('|').map(str::trim).collect()
    } else {
        rest.splitn(fields, '|').map(str::trim).collect()
    };
    Some((tag, parts))
}

/// Truncates to at most `max` characters on a char boundary.
pub fn truncate_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}

/// Strips characters that would break a single-line record field.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopword_list_has_fifty_unique_entries() {
        let set: BTreeSet<_> = STOPWORDS.iter().collect();
        assert_eq!(set.len(), 50);
    }

    #[test]
    fn keywords_drop_stopwords_and_punctuation() {
        let kw = keywords("The dragon guards the east bridge");
        let expected: BTreeSet<String> =
            ["dragon", "guards", "east", "bridge"].iter().map(|s| s.to_string()).collect();
        assert_eq!(kw, expected);
        assert!(keywords("  ...  ").is_empty());
        assert_eq!(keywords("Dragon's LAIR"), ["dragon", "s", "lair"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn whole_word_matching() {
        assert_eq!(find_whole_word("Halt, guard!", "Guard"), Some(6..11));
        assert_eq!(find_whole_word("the guardian", "guard"), None);
        assert_eq!(find_whole_word("out of the Black  Forest", "black forest"), None);
        assert_eq!(find_whole_word("out of the black forest.", "Black Forest"), Some(11..23));
        assert_eq!(find_whole_word("", "x"), None);
    }

    #[test]
    fn record_splitting() {
        assert_eq!(split_record("DIALOGUE|Guard|Halt! Who goes there?", 2), Some(("DIALOGUE", vec!["Guard", "Halt! Who goes there?"])));
        assert_eq!(split_record("SET|a|b|c|d", 3), Some(("SET", vec!["a", "b", "c|d"])));
        assert_eq!(split_record("just prose", 2), None);
        assert_eq!(split_record("lower|x", 1), None);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("ab", 5), "ab");
    }
}
