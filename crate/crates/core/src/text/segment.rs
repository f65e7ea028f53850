//! Rule-based sentence segmentation.

/// Lowercased tokens (without the trailing period) that do not end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "fig", "eq",
    "no", "al", "approx", "dept", "inc", "ltd", "co", "jan", "feb", "mar", "apr", "jun", "jul",
    "aug", "sep", "sept", "oct", "nov", "dec", "gen", "gov", "sen", "rep", "u.s",
];

fn is_abbreviation(word: &str) -> bool {
    let w = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    let w = w.strip_suffix('.').unwrap_or(w).to_lowercase();
    ABBREVIATIONS.contains(&w.as_str())
}

/// Splits after `.`, `?` or `!` (optionally followed by closing quotes or
/// brackets) when whitespace or the end of text follows, unless the word
/// ending in `.` is on the abbreviation list. Sentences are trimmed; empty
/// ones are dropped.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '?' | '!' | '"' | '\'' | ')' | ']')
            {
                j += 1;
            }
            let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
            if at_boundary {
                let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
                let word_start = text[..chars[i].0]
                    .rfind(char::is_whitespace)
                    .map_or(0, |p| p + 1);
                let word = &text[word_start.max(start)..=chars[i].0];
                if !(c == '.' && is_abbreviation(word)) {
                    let s = text[start..end].trim();
                    if !s.is_empty() {
                        out.push(s.to_string());
                    }
                    start = end;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_punctuation() {
        assert_eq!(segment_sentences("A. B? C!"), ["A.", "B?", "C!"]);
    }

    #[test]
    fn no_terminal_punctuation() {
        assert_eq!(
            segment_sentences("just one clause here"),
            ["just one clause here"]
        );
        assert!(segment_sentences("   ").is_empty());
    }

    #[test]
    fn abbreviation_is_not_a_boundary() {
        assert_eq!(
            segment_sentences("Dr. Smith left. He returned."),
            ["Dr. Smith left.", "He returned."]
        );
    }

    #[test]
    fn decimals_and_quotes() {
        assert_eq!(
            segment_sentences("It cost 3.5 dollars. \"Why?\" she asked."),
            ["It cost 3.5 dollars.", "\"Why?\"", "she asked."]
        );
    }
}
