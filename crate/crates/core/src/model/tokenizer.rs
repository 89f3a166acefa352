//! Byte-level tokenizer: one id per UTF-8 byte, plus EOS and PAD.

pub type TokenId = u32;

pub const EOS: TokenId = 256;
pub const PAD: TokenId = 257;
pub const BYTE_VOCAB_SIZE: usize = 258;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer {
    pub max_seq_len: usize,
}

impl ByteTokenizer {
    pub fn new(max_seq_len: usize) -> Self {
        assert!(max_seq_len >= 1, "max_seq_len must leave room for EOS");
        ByteTokenizer { max_seq_len }
    }

    /// Bytes truncated to `max_seq_len − 1`, then EOS.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let keep = text.len().min(self.max_seq_len - 1);
        let mut ids: Vec<TokenId> = text.as_bytes()[..keep].iter().map(|&b| b as TokenId).collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize); stops at the first EOS and
    /// ignores PAD. A truncation that split a code point decodes lossily.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
