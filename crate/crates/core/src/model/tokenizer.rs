//! Byte-level tokenizer. Ids `0..SPECIAL_COUNT` are reserved for special
//! tokens, byte `b` maps to `b + SPECIAL_COUNT`.

use super::ModelError;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SPECIAL_COUNT: u32 = 3;
pub const BYTE_VOCAB: usize = 256 + SPECIAL_COUNT as usize;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32 + SPECIAL_COUNT).collect()
}

/// Tokenizes with a leading BOS so every prompt has at least one token.
pub fn encode_prompt(text: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(tokenize(text));
    out
}

/// Inverse of [`tokenize`]. Special tokens are rejected.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>, ModelError> {
    tokens
        .iter()
        .map(|&t| {
            if (SPECIAL_COUNT..BYTE_VOCAB as u32).contains(&t) {
                Ok((t - SPECIAL_COUNT) as u8)
            } else {
                Err(ModelError::TokenOutOfRange { token: t, vocab: BYTE_VOCAB })
            }
        })
        .collect()
}

/// Lossy rendering for reports: byte tokens become bytes, specials become
/// `<bos>`, `<eos>`, `<pad>`.
pub fn render(tokens: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            BOS => bytes.extend_from_slice(b"<bos>"),
            EOS => bytes.extend_from_slice(b"<eos>"),
            PAD => bytes.extend_from_slice(b"<pad>"),
            t if t < BYTE_VOCAB as u32 => bytes.push((t - SPECIAL_COUNT) as u8),
            _ => bytes.extend_from_slice(b"<unk>"),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"AB"), vec![65 + SPECIAL_COUNT, 66 + SPECIAL_COUNT]);
        assert_eq!(encode_prompt(b"A"), vec![BOS, 65 + SPECIAL_COUNT]);
    }

    #[test]
    fn random_kib_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bytes: Vec<u8> = (0..1024).map(|_| rng.random()).collect();
        assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn detokenize_rejects_out_of_range() {
        assert!(detokenize(&[BYTE_VOCAB as u32]).is_err());
        assert!(detokenize(&[EOS]).is_err());
    }
}
