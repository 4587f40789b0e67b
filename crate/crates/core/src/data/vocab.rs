//! Synthetic subword vocabulary with fixed special-token ids.

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const FIRST_REGULAR_ID: usize = 4;

pub fn is_special(id: usize) -> bool {
    id < FIRST_REGULAR_ID
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// `[PAD] [CLS] [SEP] [MASK]` followed by `w4 .. w{size-1}`.
    pub fn synthetic(size: usize) -> Self {
        let mut words: Vec<String> = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend((FIRST_REGULAR_ID..size).map(|i| format!("w{i}")));
        Vocabulary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        match word {
            "[PAD]" => Some(PAD_ID),
            "[CLS]" => Some(CLS_ID),
            "[SEP]" => Some(SEP_ID),
            "[MASK]" => Some(MASK_ID),
            w => w
                .strip_prefix('w')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&i| i >= FIRST_REGULAR_ID && i < self.words.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed_and_round_trip() {
        let v = Vocabulary::synthetic(20);
        assert_eq!(v.len(), 20);
        assert_eq!(v.id("[MASK]"), Some(MASK_ID));
        assert_eq!(v.word(CLS_ID), Some("[CLS]"));
        for id in 0..20 {
            assert_eq!(v.id(v.word(id).unwrap()), Some(id));
        }
        assert_eq!(v.id("w20"), None);
        assert!(is_special(SEP_ID) && !is_special(FIRST_REGULAR_ID));
    }
}
