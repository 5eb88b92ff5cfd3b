use serde::{Deserialize, Serialize};

use super::Kind;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: Kind,
    pub gold: String,
}

/// First standalone capital A-D, i.e. not adjacent to another letter or digit.
/// An `Answer:` prefix is accepted because its own capital is part of a word.
pub fn extract_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !('A'..='D').contains(&c) {
            continue;
        }
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        let word = |x: Option<char>| x.is_some_and(|x| x.is_alphanumeric() || x == '_');
        if !word(before) && !word(after) {
            return Some(c);
        }
    }
    None
}

/// Contents of the first `boxed{...}` with balanced braces.
pub fn extract_boxed(text: &str) -> Option<String> {
    let start = text.find("boxed{")? + "boxed{".len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Trims whitespace and leading zeros, keeping a single zero for zero values.
pub fn normalize_number(s: &str) -> String {
    let t = s.trim();
    let (sign, digits) = match t.strip_prefix('-') {
        Some(rest) => ("-", rest.trim_start()),
        None => ("", t),
    };
    let stripped = digits.trim_start_matches('0');
    if stripped.is_empty() && !digits.is_empty() {
        "0".to_string()
    } else {
        format!("{sign}{stripped}")
    }
}

/// Binary reward: 1 for a matching letter or number, else 0.
pub fn reward(spec: &RewardSpec, predicted: &str) -> f64 {
    let hit = match spec.kind {
        Kind::Multichoice => {
            let gold = spec.gold.trim().chars().next();
            extract_letter(predicted).is_some_and(|c| Some(c) == gold)
        }
        Kind::Numeric => {
            let got = extract_boxed(predicted).unwrap_or_else(|| predicted.to_string());
            normalize_number(&got) == normalize_number(&spec.gold)
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}
