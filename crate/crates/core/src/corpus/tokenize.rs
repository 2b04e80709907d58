/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn is_punct(tok: &str) -> bool {
    tok.chars().all(|c| !c.is_alphanumeric())
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
/// `tokenize(detokenize(t)) == t` for tokenizer output.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !is_punct(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rules() {
        assert_eq!(tokenize("Lungs are clear."), ["lungs", "are", "clear", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  a,b  C!"), ["a", ",", "b", "c", "!"]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["lungs", "are", "clear", "."]), "lungs are clear.");
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_tokens(text in "[a-zA-Z .,;:!?-]{0,60}") {
            let t = tokenize(&text);
            prop_assert_eq!(tokenize(&t.join(" ")), t.clone());
            prop_assert_eq!(tokenize(&detokenize(&t)), t);
        }
    }
}
