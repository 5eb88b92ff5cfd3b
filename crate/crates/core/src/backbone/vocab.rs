//! Fixed synthetic vocabulary shared by the corpora and both backbones.

pub type Token = u32;

pub const VOCAB_SIZE: usize = 64;

pub const PAD: Token = 0;
pub const TAG_NUMERIC: Token = 1;
pub const TAG_CHOICE: Token = 2;
pub const SEP: Token = 3;
pub const CODE_ONCE: Token = 4;
pub const CODE_IDLE: Token = 5;
pub const CODE_HARM: Token = 6;
pub const CODE_TWICE: Token = 7;
pub const OPT: Token = 8;
pub const DIGIT_0: Token = 10;
pub const LETTER_A: Token = 20;
/// First of the filler/copy symbols, which run to the end of the vocabulary.
pub const FILLER_START: Token = 32;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

pub fn digit_tokens(value: u64) -> Vec<Token> {
    value
        .to_string()
        .bytes()
        .map(|b| DIGIT_0 + (b - b'0') as Token)
        .collect()
}

pub fn is_digit(t: Token) -> bool {
    (DIGIT_0..DIGIT_0 + 10).contains(&t)
}

pub fn is_letter(t: Token) -> bool {
    (LETTER_A..LETTER_A + 4).contains(&t)
}

/// Decodes the `OPT digits` groups of a multi-choice prompt, in order.
pub fn choice_options(tokens: &[Token]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == OPT {
            let mut v: u64 = 0;
            let mut j = i + 1;
            while j < tokens.len() && is_digit(tokens[j]) {
                v = v * 10 + (tokens[j] - DIGIT_0) as u64;
                j += 1;
            }
            if j > i + 1 {
                out.push(v);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out
}
