//! Token id layouts shared by the models.
//!
//! Corpus characters are `0..V`. The extractor's CTC head uses `blank = 0`
//! and `c + 1` for character `c`. The ASR decoder uses `blank = 0`,
//! a shared start/end symbol at `1` and `c + 2` for character `c`.

pub const BLANK: usize = 0;
pub const SOS_EOS: usize = 1;
pub const ASR_SPECIALS: usize = 2;

pub fn ctc_label(c: usize) -> usize {
    c + 1
}

pub fn ctc_char(label: usize) -> Option<usize> {
    label.checked_sub(1)
}

pub fn asr_token(c: usize) -> usize {
    c + ASR_SPECIALS
}

pub fn asr_char(token: usize) -> Option<usize> {
    token.checked_sub(ASR_SPECIALS)
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Printable form of a character sequence for logs and decode files.
pub fn render(chars: &[usize]) -> String {
    chars
        .iter()
        .map(|&c| match ALPHABET.get(c) {
            Some(&b) => (b as char).to_string(),
            None => format!("<{c}>"),
        })
        .collect()
}
