use serde::{Deserialize, Serialize};

/// Byte-level tokenizer.
///
/// The default maps every byte to its own id (0..=255) followed by PAD, BOS
/// and EOS. A restricted alphabet variant shrinks the vocabulary for
/// gradient-checking configurations; bytes outside the alphabet map to UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Tokenizer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphabet: Option<Vec<u8>>,
}

impl Tokenizer {
    pub fn bytes() -> Self {
        Self { alphabet: None }
    }

    /// Tokenizer over the distinct bytes of `alphabet`, in first-seen order.
    pub fn with_alphabet(alphabet: &str) -> Self {
        let mut seen = Vec::new();
        for b in alphabet.bytes() {
            if !seen.contains(&b) {
                seen.push(b);
            }
        }
        Self { alphabet: Some(seen) }
    }

    fn base(&self) -> usize {
        self.alphabet.as_ref().map_or(256, Vec::len)
    }

    pub fn pad(&self) -> usize {
        self.base()
    }

    pub fn bos(&self) -> usize {
        self.base() + 1
    }

    pub fn eos(&self) -> usize {
        self.base() + 2
    }

    /// Only present for alphabet tokenizers.
    pub fn unk(&self) -> Option<usize> {
        self.alphabet.as_ref().map(|a| a.len() + 3)
    }

    pub fn vocab_size(&self) -> usize {
        match &self.alphabet {
            None => 259,
            Some(a) => a.len() + 4,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        match &self.alphabet {
            None => bytes.iter().map(|&b| b as usize).collect(),
            Some(a) => {
                let unk = a.len() + 3;
                bytes
                    .iter()
                    .map(|b| a.iter().position(|c| c == b).unwrap_or(unk))
                    .collect()
            }
        }
    }

    /// Inverse of [`Tokenizer::encode_bytes`]; special and unknown ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        match &self.alphabet {
            None => ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect(),
            Some(a) => ids.iter().filter_map(|&i| a.get(i).copied()).collect(),
        }
    }
}
