use super::Token;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<Token>;
    fn decode(&self, tokens: &[Token]) -> String;
    fn vocab_size(&self) -> usize;
}

/// UTF-8 bytes shifted by the number of reserved ids; id 0 is padding.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const PAD: Token = 0;
    pub const RESERVED: Token = 1;
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        text.bytes().map(|b| b as Token + Self::RESERVED).collect()
    }

    fn decode(&self, tokens: &[Token]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| (Self::RESERVED..Self::RESERVED + 256).contains(&t))
            .map(|&t| (t - Self::RESERVED) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        256 + Self::RESERVED as usize
    }
}
