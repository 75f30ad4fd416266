//! Fixed-length binary watermark messages and their text forms.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A k-bit watermark message.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl fmt::Debug for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMessage({}, k={})", self.to_hex(), self.bits.len())
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Empty("message"));
        }
        Ok(Self { bits })
    }

    /// Builds a message from 0/1 integers; any other value is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let bits = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::invalid(format!("bit {i} has value {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            bits: vec![false; k.max(1)],
        }
    }

    /// Parses `⌈k/4⌉` hex digits, most significant bit of each digit first.
    /// Bits beyond `k` in the final digit are ignored.
    pub fn from_hex(hex: &str, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("message length k must be at least 1"));
        }
        let want = k.div_ceil(4);
        let chars: Vec<char> = hex.trim().chars().collect();
        if chars.len() != want {
            return Err(Error::HexParse {
                index: chars.len().min(want),
                reason: format!("expected {want} hex digits for k={k}, found {}", chars.len()),
            });
        }
        let mut bits = Vec::with_capacity(want * 4);
        for (index, c) in chars.iter().enumerate() {
            let d = c.to_digit(16).ok_or_else(|| Error::HexParse {
                index,
                reason: format!("'{c}' is not a hex digit"),
            })?;
            for s in (0..4).rev() {
                bits.push((d >> s) & 1 == 1);
            }
        }
        bits.truncate(k);
        Ok(Self { bits })
    }

    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|c| {
                let d = c
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (i, &b)| acc | (u32::from(b) << (3 - i)));
                char::from_digit(d, 16).expect("nibble").to_ascii_uppercase()
            })
            .collect()
    }

    /// Uniform random message, deterministic in `seed`.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(k, &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        Self {
            bits: (0..k.max(1)).map(|_| rng.random_bool(0.5)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// 0.0 / 1.0 per bit, the target encoding for the extraction loss.
    pub fn as_targets(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// −1 / +1 per bit, the input encoding for the embedding modules.
    pub fn as_signed(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Thresholds logits at zero: bit is 1 iff the logit is positive.
    pub fn from_logits<T: PartialOrd + Default>(logits: &[T]) -> Result<Self> {
        Self::new(logits.iter().map(|l| *l > T::default()).collect())
    }

    /// Bits packed little-endian into 64-bit words, for fast matching.
    pub fn packed(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.bits.len().div_ceil(64)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }
}

/// One `user_id<TAB>hex_message` record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageRecord {
    pub user_id: String,
    pub message: BitMessage,
}

/// Parses a message file: one `user_id<TAB>hex` per line, `#` comments and
/// blank lines ignored.
pub fn parse_message_file(text: &str, k: usize) -> Result<Vec<MessageRecord>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (id, hex) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!("line {}: expected user_id<TAB>hex", lineno + 1))
        })?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::invalid(format!("line {}: empty user id", lineno + 1)));
        }
        let message = BitMessage::from_hex(hex.trim(), k).map_err(|e| {
            Error::invalid(format!("line {}: {e}", lineno + 1))
        })?;
        out.push(MessageRecord {
            user_id: id.to_string(),
            message,
        });
    }
    Ok(out)
}

pub fn format_message_file(records: &[MessageRecord]) -> String {
    let mut s = String::from("# user_id\thex_message\n");
    for r in records {
        s.push_str(&r.user_id);
        s.push('\t');
        s.push_str(&r.message.to_hex());
        s.push('\n');
    }
    s
}

pub fn read_message_file(path: &Path, k: usize) -> Result<Vec<MessageRecord>> {
    parse_message_file(&std::fs::read_to_string(path)?, k)
}

pub fn write_message_file(path: &Path, records: &[MessageRecord]) -> Result<()> {
    std::fs::write(path, format_message_file(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(m: &BitMessage) -> Vec<u8> {
        m.bits().iter().map(|&b| u8::from(b)).collect()
    }

    /// Independent integer → binary expansion, most significant bit first.
    fn binary_expansion(v: u64, width: usize) -> Vec<u8> {
        (0..width).rev().map(|s| ((v >> s) & 1) as u8).collect()
    }

    #[test]
    fn hex_examples() {
        assert_eq!(bits(&BitMessage::from_hex("F", 4).unwrap()), vec![1, 1, 1, 1]);
        assert_eq!(bits(&BitMessage::from_hex("00", 8).unwrap()), vec![0; 8]);
        let a5 = BitMessage::from_hex("A5", 8).unwrap();
        assert_eq!(bits(&a5), vec![1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(bits(&a5), binary_expansion(0xA5, 8));
    }

    #[test]
    fn hex_matches_integer_expansion_for_all_bytes() {
        for v in 0u64..=255 {
            let m = BitMessage::from_hex(&format!("{v:02x}"), 8).unwrap();
            assert_eq!(bits(&m), binary_expansion(v, 8));
        }
    }

    #[test]
    fn hex_errors_name_the_index() {
        match BitMessage::from_hex("A5G0", 16) {
            Err(Error::HexParse { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        match BitMessage::from_hex("A5", 16) {
            Err(Error::HexParse { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(BitMessage::from_hex("A5F", 8).is_err());
        assert!(BitMessage::from_hex("", 0).is_err());
    }

    #[test]
    fn pad_bits_are_ignored_on_parse() {
        // k = 6 → two digits; the last two bits of the second digit are padding
        let m = BitMessage::from_hex("AF", 6).unwrap();
        assert_eq!(bits(&m), vec![1, 0, 1, 0, 1, 1]);
        assert_eq!(m.to_hex(), "AC");
    }

    #[test]
    fn random_is_deterministic_and_balanced() {
        assert_eq!(BitMessage::random(48, 0), BitMessage::random(48, 0));
        let ones: usize = (0..10_000u64)
            .map(|s| BitMessage::random(48, s).bits().iter().filter(|&&b| b).count())
            .sum();
        let mean = ones as f64 / (10_000.0 * 48.0);
        assert!((0.48..=0.52).contains(&mean), "mean bit {mean}");
    }

    #[test]
    fn single_bit_messages_cover_both_values() {
        let seen: std::collections::HashSet<bool> =
            (0..64u64).map(|s| BitMessage::random(1, s).bit(0)).collect();
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn from_bits_rejects_non_binary() {
        assert!(BitMessage::from_bits(&[0, 1, 2]).is_err());
        assert!(BitMessage::from_bits(&[]).is_err());
    }

    #[test]
    fn message_file_parses_comments_and_tabs() {
        let text = "# registry\nalice\tA5\n\n  # indented comment\nbob\t0F # trailing\n";
        let recs = parse_message_file(text, 8).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].user_id, "bob");
        assert_eq!(recs[1].message.to_hex(), "0F");
        let again = parse_message_file(&format_message_file(&recs), 8).unwrap();
        assert_eq!(again, recs);
        assert!(parse_message_file("alice A5\n", 8).is_err());
    }

    proptest! {
        #[test]
        fn hex_round_trip(raw in proptest::collection::vec(any::<bool>(), 1..130)) {
            let m = BitMessage::new(raw).unwrap();
            prop_assert_eq!(BitMessage::from_hex(&m.to_hex(), m.len()).unwrap(), m);
        }
    }
}
