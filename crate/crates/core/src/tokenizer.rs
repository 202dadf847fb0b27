//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by four specials.

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;
/// Bumped whenever the id assignment changes; recorded in checkpoints.
pub const VOCAB_VERSION: u32 = 1;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Result of [`decode`]; `lossy` is set when invalid UTF-8 was replaced with U+FFFD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub lossy: bool,
}

pub fn decode(ids: &[u32]) -> Result<Decoded> {
    let bytes = ids
        .iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::SpecialToken(id)))
        .collect::<Result<Vec<u8>>>()?;
    Ok(match String::from_utf8(bytes) {
        Ok(text) => Decoded { text, lossy: false },
        Err(e) => Decoded {
            text: String::from_utf8_lossy(e.as_bytes()).into_owned(),
            lossy: true,
        },
    })
}

/// A framed training sequence: `[BOS] prompt [SEP] completion [EOS]`.
///
/// `mask[i] == 1` marks positions whose token is a completion token or the final
/// EOS, i.e. the positions that carry next-token loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Framed {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl Framed {
    /// Index of the first masked token (the first completion token, or EOS).
    pub fn completion_start(&self) -> usize {
        self.ids.len() - self.mask_count()
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn frame(prompt_ids: &[u32], completion_ids: &[u32]) -> Framed {
    let len = prompt_ids.len() + completion_ids.len() + 3;
    let mut ids = Vec::with_capacity(len);
    ids.push(BOS);
    ids.extend_from_slice(prompt_ids);
    ids.push(SEP);
    ids.extend_from_slice(completion_ids);
    ids.push(EOS);
    let prefix = prompt_ids.len() + 2;
    let mut mask = vec![0u8; len];
    mask[prefix..].fill(1);
    Framed { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_identity() {
        assert_eq!(encode("A"), vec![65]);
        assert!(encode("").is_empty());
        assert_eq!(decode(&[72, 105]).unwrap().text, "Hi");
        assert_eq!(decode(&[]).unwrap().text, "");
    }

    #[test]
    fn specials_are_rejected_by_decode() {
        let err = decode(&[65, BOS]).unwrap_err();
        assert!(err.to_string().contains("special token in decode"), "{err}");
    }

    #[test]
    fn invalid_utf8_is_replaced_and_flagged() {
        let d = decode(&[0xff, 65]).unwrap();
        assert!(d.lossy);
        assert_eq!(d.text, "\u{fffd}A");
    }

    #[test]
    fn frame_counts() {
        let f = frame(&[1, 2, 3], &[4, 5]);
        assert_eq!(f.ids, vec![BOS, 1, 2, 3, SEP, 4, 5, EOS]);
        assert_eq!(f.mask.len(), f.ids.len());
        assert_eq!(f.mask_count(), 3);
        assert_eq!(f.completion_start(), 5);

        let empty = frame(&[1, 2], &[]);
        assert_eq!(empty.mask_count(), 1);
        assert_eq!(empty.ids[empty.completion_start()], EOS);
    }

    proptest! {
        #[test]
        fn roundtrip(s in ".*") {
            let d = decode(&encode(&s)).unwrap();
            prop_assert!(!d.lossy);
            prop_assert_eq!(d.text, s);
        }

        #[test]
        fn mask_is_contiguous_suffix(p in prop::collection::vec(0u32..256, 0..40),
                                     c in prop::collection::vec(0u32..256, 0..40)) {
            let f = frame(&p, &c);
            prop_assert_eq!(f.mask.len(), f.ids.len());
            let start = f.completion_start();
            prop_assert!(f.mask[..start].iter().all(|&m| m == 0));
            prop_assert!(f.mask[start..].iter().all(|&m| m == 1));
            prop_assert_eq!(f.mask_count(), c.len() + 1);
        }
    }
}
