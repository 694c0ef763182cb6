//! On-disk layouts of the device's stores and the verifier's initial state.
//!
//! All integers are big-endian.
//!
//! ```text
//! LStore   "ADCL" | ver u16 | reserved u32 | { len u32 | message | tag[32] }*
//! KStore   "ADCK" | ver u16 | seq_key[32] | sc_key[32] | seq_index u64 | sc_epoch u64
//! Initial  "ADCI" | ver u16 | k0[32] | k0'[32] | chi[32] | chi'[32] | len u32 | init_message
//! ```

use thiserror::Error;

use super::{InitialState, KStoreState, LogRecord, MAX_MESSAGE_LEN};
use crate::crypto::{Key256, Tag256, Tweak, KEY_LEN};

pub const LSTORE_MAGIC: [u8; 4] = *b"ADCL";
pub const KSTORE_MAGIC: [u8; 4] = *b"ADCK";
pub const INIT_MAGIC: [u8; 4] = *b"ADCI";
pub const FORMAT_VERSION: u16 = 1;

pub const LSTORE_HEADER_LEN: usize = 10;
pub const KSTORE_LEN: usize = 4 + 2 + 2 * KEY_LEN + 8 + 8;
/// Framing overhead of one LStore record on top of its message bytes.
pub const RECORD_OVERHEAD: usize = 4 + KEY_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file too short: {0} bytes")]
    TooShort(usize),
    #[error("unexpected length {got}, expected {expected}")]
    BadLength { got: usize, expected: usize },
}

pub fn lstore_header() -> [u8; LSTORE_HEADER_LEN] {
    let mut h = [0u8; LSTORE_HEADER_LEN];
    h[..4].copy_from_slice(&LSTORE_MAGIC);
    h[4..6].copy_from_slice(&FORMAT_VERSION.to_be_bytes());
    h
}

pub fn encode_record(out: &mut Vec<u8>, record: &LogRecord) {
    out.reserve(RECORD_OVERHEAD + record.message.len());
    out.extend_from_slice(&(record.message.len() as u32).to_be_bytes());
    out.extend_from_slice(&record.message);
    out.extend_from_slice(&record.tag.0);
}

pub fn serialize_lstore(records: &[LogRecord]) -> Vec<u8> {
    let body: usize = records.iter().map(|r| RECORD_OVERHEAD + r.message.len()).sum();
    let mut out = Vec::with_capacity(LSTORE_HEADER_LEN + body);
    out.extend_from_slice(&lstore_header());
    for r in records {
        encode_record(&mut out, r);
    }
    out
}

/// A record viewed in place inside a serialized LStore.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordRef<'a> {
    /// Byte offset of the record's length prefix.
    pub offset: usize,
    pub message: &'a [u8],
    pub tag: &'a [u8; KEY_LEN],
}

impl RecordRef<'_> {
    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.message.len()
    }

    pub fn to_owned_record(&self) -> LogRecord {
        LogRecord { message: self.message.to_vec(), tag: Tag256(*self.tag) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLStore {
    pub records: Vec<LogRecord>,
    /// Set when bytes after the last complete record were discarded.
    pub trailing_garbage: bool,
}

fn check_header(bytes: &[u8], magic: [u8; 4], min_len: usize) -> Result<(), FormatError> {
    if bytes.len() < min_len {
        return Err(FormatError::TooShort(bytes.len()));
    }
    if bytes[..4] != magic {
        return Err(FormatError::BadMagic { expected: magic });
    }
    let version = u16::from_be_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    Ok(())
}

/// Borrowing parse. Stops at the first incomplete or oversized record.
pub fn lstore_records(bytes: &[u8]) -> Result<(Vec<RecordRef<'_>>, bool), FormatError> {
    check_header(bytes, LSTORE_MAGIC, LSTORE_HEADER_LEN)?;
    let mut records = Vec::new();
    let mut pos = LSTORE_HEADER_LEN;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            return Ok((records, true));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_MESSAGE_LEN || rest.len() < RECORD_OVERHEAD + len {
            return Ok((records, true));
        }
        let message = &rest[4..4 + len];
        let tag = rest[4 + len..4 + len + KEY_LEN].try_into().expect("32 bytes");
        records.push(RecordRef { offset: pos, message, tag });
        pos += RECORD_OVERHEAD + len;
    }
    Ok((records, false))
}

pub fn parse_lstore(bytes: &[u8]) -> Result<ParsedLStore, FormatError> {
    let (refs, trailing_garbage) = lstore_records(bytes)?;
    Ok(ParsedLStore { records: refs.iter().map(RecordRef::to_owned_record).collect(), trailing_garbage })
}

pub fn serialize_kstore(state: &KStoreState) -> Vec<u8> {
    let mut out = Vec::with_capacity(KSTORE_LEN);
    out.extend_from_slice(&KSTORE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
    out.extend_from_slice(&state.seq_key.0);
    out.extend_from_slice(&state.sc_key.0);
    out.extend_from_slice(&state.seq_index.to_be_bytes());
    out.extend_from_slice(&state.sc_epoch.to_be_bytes());
    out
}

/// Byte range of the sequential key inside a serialized KStore.
pub const KSTORE_SEQ_KEY: std::ops::Range<usize> = 6..6 + KEY_LEN;
/// Byte range of the state-controlled key inside a serialized KStore.
pub const KSTORE_SC_KEY: std::ops::Range<usize> = 6 + KEY_LEN..6 + 2 * KEY_LEN;

/// What a key store file held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KStoreSnapshot {
    /// Absent or wiped to zero.
    Empty,
    Present(KStoreState),
}

impl KStoreSnapshot {
    pub fn sc_key(&self) -> Option<&Key256> {
        match self {
            KStoreSnapshot::Empty => None,
            KStoreSnapshot::Present(s) => Some(&s.sc_key),
        }
    }
}

pub fn parse_kstore(bytes: &[u8]) -> Result<KStoreSnapshot, FormatError> {
    if bytes.iter().all(|b| *b == 0) {
        return Ok(KStoreSnapshot::Empty);
    }
    check_header(bytes, KSTORE_MAGIC, 6)?;
    if bytes.len() != KSTORE_LEN {
        return Err(FormatError::BadLength { got: bytes.len(), expected: KSTORE_LEN });
    }
    let key = |r: std::ops::Range<usize>| Key256(bytes[r].try_into().expect("32 bytes"));
    let word = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let state = KStoreState {
        seq_key: key(KSTORE_SEQ_KEY),
        sc_key: key(KSTORE_SC_KEY),
        seq_index: word(6 + 2 * KEY_LEN),
        sc_epoch: word(6 + 2 * KEY_LEN + 8),
    };
    if state.seq_key.is_zero() && state.sc_key.is_zero() {
        return Ok(KStoreSnapshot::Empty);
    }
    Ok(KStoreSnapshot::Present(state))
}

pub fn serialize_initial(init: &InitialState) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * KEY_LEN + 4 + init.init_message.len());
    out.extend_from_slice(&INIT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
    out.extend_from_slice(&init.k0.0);
    out.extend_from_slice(&init.k0_prime.0);
    out.extend_from_slice(&init.chi.0);
    out.extend_from_slice(&init.chi_prime.0);
    out.extend_from_slice(&(init.init_message.len() as u32).to_be_bytes());
    out.extend_from_slice(&init.init_message);
    out
}

pub fn parse_initial(bytes: &[u8]) -> Result<InitialState, FormatError> {
    let fixed = 6 + 4 * KEY_LEN + 4;
    check_header(bytes, INIT_MAGIC, fixed)?;
    let block =
        |i: usize| -> [u8; KEY_LEN] { bytes[6 + i * KEY_LEN..6 + (i + 1) * KEY_LEN].try_into().expect("32 bytes") };
    let len = u32::from_be_bytes(bytes[fixed - 4..fixed].try_into().expect("4 bytes")) as usize;
    if bytes.len() != fixed + len {
        return Err(FormatError::BadLength { got: bytes.len(), expected: fixed + len });
    }
    Ok(InitialState {
        k0: Key256(block(0)),
        k0_prime: Key256(block(1)),
        chi: Tweak(block(2)),
        chi_prime: Tweak(block(3)),
        init_message: bytes[fixed..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(msg: &[u8], tag_byte: u8) -> LogRecord {
        LogRecord { message: msg.to_vec(), tag: Tag256([tag_byte; 32]) }
    }

    #[test]
    fn empty_lstore_is_header_only() {
        let bytes = serialize_lstore(&[]);
        assert_eq!(bytes, b"ADCL\x00\x01\x00\x00\x00\x00");
        let parsed = parse_lstore(&bytes).unwrap();
        assert!(parsed.records.is_empty());
        assert!(!parsed.trailing_garbage);
    }

    #[test]
    fn record_layout_is_length_message_tag() {
        let bytes = serialize_lstore(&[record(b"hi", 7)]);
        assert_eq!(&bytes[10..14], &[0, 0, 0, 2]);
        assert_eq!(&bytes[14..16], b"hi");
        assert_eq!(&bytes[16..], &[7u8; 32]);
    }

    #[test]
    fn cut_mid_record_keeps_complete_prefix() {
        let records: Vec<_> = (0..5u8).map(|i| record(&[i; 10], i)).collect();
        let bytes = serialize_lstore(&records);
        for cut in 1..(RECORD_OVERHEAD + 10) {
            let parsed = parse_lstore(&bytes[..bytes.len() - cut]).unwrap();
            assert_eq!(parsed.records, records[..4]);
            assert!(parsed.trailing_garbage);
        }
    }

    #[test]
    fn oversized_length_is_garbage() {
        let mut bytes = serialize_lstore(&[record(b"ok", 1)]);
        bytes.extend_from_slice(&((MAX_MESSAGE_LEN as u32) + 1).to_be_bytes());
        bytes.extend_from_slice(&[0u8; 64]);
        let parsed = parse_lstore(&bytes).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert!(parsed.trailing_garbage);
    }

    #[test]
    fn lstore_header_errors() {
        let mut bytes = serialize_lstore(&[]);
        bytes[0] = b'X';
        assert_eq!(parse_lstore(&bytes), Err(FormatError::BadMagic { expected: LSTORE_MAGIC }));
        let mut bytes = serialize_lstore(&[]);
        bytes[5] = 2;
        assert_eq!(parse_lstore(&bytes), Err(FormatError::BadVersion(2)));
        assert_eq!(parse_lstore(b"ADCL"), Err(FormatError::TooShort(4)));
    }

    #[test]
    fn kstore_empty_and_errors() {
        assert_eq!(parse_kstore(&[]), Ok(KStoreSnapshot::Empty));
        assert_eq!(parse_kstore(&[0u8; KSTORE_LEN]), Ok(KStoreSnapshot::Empty));
        let state = KStoreState { seq_key: Key256([1; 32]), sc_key: Key256([2; 32]), seq_index: 9, sc_epoch: 3 };
        let mut bytes = serialize_kstore(&state);
        assert_eq!(bytes.len(), KSTORE_LEN);
        bytes[KSTORE_SEQ_KEY].fill(0);
        bytes[KSTORE_SC_KEY].fill(0);
        assert_eq!(parse_kstore(&bytes), Ok(KStoreSnapshot::Empty));

        let mut bad = serialize_kstore(&state);
        bad[1] = b'Z';
        assert_eq!(parse_kstore(&bad), Err(FormatError::BadMagic { expected: KSTORE_MAGIC }));
        let short = &serialize_kstore(&state)[..40];
        assert!(matches!(parse_kstore(short), Err(FormatError::BadLength { .. })));
    }

    #[test]
    fn initial_state_round_trip() {
        let init = InitialState {
            k0: Key256([1; 32]),
            k0_prime: Key256([2; 32]),
            chi: Tweak([3; 32]),
            chi_prime: Tweak([4; 32]),
            init_message: b"ADCL-INIT-ish".to_vec(),
        };
        let bytes = serialize_initial(&init);
        assert_eq!(&bytes[..4], b"ADCI");
        assert_eq!(parse_initial(&bytes).unwrap(), init);
        assert!(parse_initial(&bytes[..bytes.len() - 1]).is_err());
    }

    fn arb_record() -> impl Strategy<Value = LogRecord> {
        (proptest::collection::vec(any::<u8>(), 0..200), any::<[u8; 32]>())
            .prop_map(|(message, tag)| LogRecord { message, tag: Tag256(tag) })
    }

    proptest! {
        #[test]
        fn lstore_round_trip(records in proptest::collection::vec(arb_record(), 0..1000)) {
            let parsed = parse_lstore(&serialize_lstore(&records)).unwrap();
            prop_assert!(!parsed.trailing_garbage);
            prop_assert_eq!(parsed.records, records);
        }

        #[test]
        fn kstore_round_trip(seq in any::<[u8; 32]>(), sc in any::<[u8; 32]>(), idx in any::<u64>(), epoch in any::<u64>()) {
            prop_assume!(seq != [0u8; 32] || sc != [0u8; 32]);
            let state = KStoreState { seq_key: Key256(seq), sc_key: Key256(sc), seq_index: idx, sc_epoch: epoch };
            prop_assert_eq!(parse_kstore(&serialize_kstore(&state)).unwrap(), KStoreSnapshot::Present(state));
        }
    }
}
