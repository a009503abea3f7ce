//! Lowercasing word tokenizer.

#[derive(Clone, Copy, PartialEq)]
enum Class {
    Letter,
    Digit,
}

/// Splits on whitespace, letter/digit boundaries and punctuation. Every
/// punctuation character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut class = None;
    for ch in text.chars().flat_map(char::to_lowercase) {
        let next = if ch.is_alphabetic() {
            Some(Class::Letter)
        } else if ch.is_numeric() {
            Some(Class::Digit)
        } else {
            None
        };
        if next.is_none() || next != class {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        match next {
            Some(_) => cur.push(ch),
            None if !ch.is_whitespace() => out.push(ch.to_string()),
            None => {}
        }
        class = next;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True for tokens made of letters or digits.
pub fn is_word(token: &str) -> bool {
    token.chars().all(char::is_alphanumeric)
}
