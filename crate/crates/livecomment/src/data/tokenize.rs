/// Lowercase, split on Unicode whitespace, strip surrounding punctuation.
/// Emote-style alphanumeric tokens ("PogChamp") survive whole; tokens that
/// are punctuation all the way through are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let lower = word.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_string())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_splits() {
        assert_eq!(tokenize("Hello   WORLD"), vec!["hello", "world"]);
    }

    #[test]
    fn emotes_are_single_tokens() {
        assert_eq!(tokenize("PogChamp"), vec!["pogchamp"]);
    }

    #[test]
    fn empty_string_yields_no_tokens() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn strips_surrounding_punctuation_only() {
        assert_eq!(tokenize("(lol!!) don't ..."), vec!["lol", "don't"]);
    }

    #[test]
    fn idempotent_on_normalized_text() {
        let once = tokenize("Some STREAM chat!! PogChamp :) 123");
        let joined = once.join(" ");
        assert_eq!(tokenize(&joined), once);
    }
}
