//! Delayed-key-disclosure authentication over a one-way hash chain.
//!
//! A sender derives `K_N` from a seed and the chain `K_j = H(K_{j+1})` down to
//! `K_0`. Heartbeat `i` carries a MAC keyed by `K_i` and discloses `K_{i-d}`.
//! Because `H` is one-way, seeing `K_i` lets anyone check it against any
//! earlier key but not forge later ones. An observer buffers messages until
//! their key shows up in a later heartbeat and is tied to the chain.
//!
//! The verifier bootstraps on the first disclosure it sees from a source
//! (trust on first use) unless it is seeded with a known anchor.
//!
//! Primitives (wire version 1): `H` = SHA-256 truncated to 16 bytes, tag =
//! HMAC-SHA-256 over `src_addr || encoding-with-mac-zeroed`, truncated to 16 bytes.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{encode_for_mac, Heartbeat, ValidationError};

pub const KEY_LEN: usize = 16;
pub type Key = [u8; KEY_LEN];

pub const DEFAULT_CHAIN_LENGTH: u32 = 1 << 20;
pub const DEFAULT_DISCLOSURE_LAG: u32 = 1;
pub const DEFAULT_VERIFIER_BUFFER: usize = 64;
/// Longest hash walk a verifier performs for one disclosure.
pub const DEFAULT_MAX_SKIP: u32 = 1 << 20;

const CHECKPOINT_SPACING: u32 = 1024;

/// Integrity trailer carried by a signed heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityBlock {
    pub chain_epoch: u16,
    pub key_index: u32,
    #[serde(with = "hex_key")]
    pub mac: [u8; KEY_LEN],
    /// `K_{key_index - lag}`, all zeros while `key_index < lag`.
    #[serde(with = "hex_key")]
    pub disclosed_key: Key,
}

pub(crate) mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(key))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 16];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

/// One step down the chain.
pub fn chain_hash(key: &Key) -> Key {
    let digest = Sha256::digest(key);
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&digest[..KEY_LEN]);
    out
}

/// `H^steps(key)`.
pub fn chain_hash_n(key: &Key, steps: u32) -> Key {
    (0..steps).fold(*key, |k, _| chain_hash(&k))
}

fn chain_root(seed: &Key, epoch: u16) -> Key {
    let mut h = Sha256::new();
    h.update(b"ihb-chain-root-v1");
    h.update(seed);
    h.update(epoch.to_be_bytes());
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&h.finalize()[..KEY_LEN]);
    out
}

/// Tag binding a heartbeat to its source address under chain key `key`.
pub fn compute_mac(key: &Key, src: Ipv4Addr, hb: &Heartbeat) -> Result<[u8; KEY_LEN], ValidationError> {
    let bytes = encode_for_mac(hb)?;
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(&src.octets());
    mac.update(&bytes);
    let tag = mac.finalize().into_bytes();
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&tag[..KEY_LEN]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("chain length must be at least 2, got {0}")]
    TooShort(u32),
    #[error("disclosure lag must be in [1, length), got {0}")]
    BadLag(u32),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Sender-side configuration of the key chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(with = "hex_key")]
    pub seed: Key,
    #[serde(default = "default_length")]
    pub length: u32,
    #[serde(default = "default_lag")]
    pub lag: u32,
}

fn default_length() -> u32 {
    DEFAULT_CHAIN_LENGTH
}

fn default_lag() -> u32 {
    DEFAULT_DISCLOSURE_LAG
}

/// Sender-side chain with a cursor over key indices `1..=length`.
///
/// Only every 1024th key is kept; the segment in use is expanded on demand.
#[derive(Debug, Clone)]
pub struct ChainState {
    seed: Key,
    length: u32,
    lag: u32,
    epoch: u16,
    cursor: u32,
    checkpoints: Vec<Key>,
    segment: Option<(u32, Vec<Key>)>,
}

impl ChainState {
    pub fn new(config: &ChainConfig) -> Result<Self, ChainError> {
        let length = config.length;
        if length < 2 {
            return Err(ChainError::TooShort(length));
        }
        if config.lag == 0 || config.lag >= length {
            return Err(ChainError::BadLag(config.lag));
        }
        let mut state = ChainState {
            seed: config.seed,
            length,
            lag: config.lag,
            epoch: 0,
            cursor: 1,
            checkpoints: Vec::new(),
            segment: None,
        };
        state.build();
        Ok(state)
    }

    fn build(&mut self) {
        let n = self.length;
        let slots = n.div_ceil(CHECKPOINT_SPACING) as usize + 1;
        let mut checkpoints = vec![[0u8; KEY_LEN]; slots];
        let mut key = chain_root(&self.seed, self.epoch);
        let mut j = n;
        loop {
            if j % CHECKPOINT_SPACING == 0 || j == n {
                checkpoints[j.div_ceil(CHECKPOINT_SPACING) as usize] = key;
            }
            if j == 0 {
                break;
            }
            key = chain_hash(&key);
            j -= 1;
        }
        self.checkpoints = checkpoints;
        self.segment = None;
    }

    pub fn length(&self) -> u32 {
        self.length
    }

    pub fn lag(&self) -> u32 {
        self.lag
    }

    pub fn epoch(&self) -> u16 {
        self.epoch
    }

    /// Index the next signature will use.
    pub fn cursor(&self) -> u32 {
        self.cursor
    }

    /// `K_index` of the current epoch.
    pub fn key(&mut self, index: u32) -> Key {
        assert!(index <= self.length, "key index {index} beyond chain length {}", self.length);
        let seg = index.div_ceil(CHECKPOINT_SPACING);
        let top = (seg * CHECKPOINT_SPACING).min(self.length);
        if self.segment.as_ref().map(|(s, _)| *s) != Some(seg) {
            let bottom = top.saturating_sub(CHECKPOINT_SPACING);
            let mut keys = Vec::with_capacity((top - bottom + 1) as usize);
            let mut k = self.checkpoints[seg as usize];
            keys.push(k);
            for _ in bottom..top {
                k = chain_hash(&k);
                keys.push(k);
            }
            // keys[t] = K_{top - t}
            self.segment = Some((seg, keys));
        }
        let (_, keys) = self.segment.as_ref().expect("segment expanded");
        keys[(top - index) as usize]
    }

    /// Attaches an integrity block to `hb` and advances the cursor. An
    /// exhausted chain rolls over to a fresh one under the next epoch.
    pub fn sign(&mut self, hb: &Heartbeat, src: Ipv4Addr) -> Result<Heartbeat, ChainError> {
        if self.cursor > self.length {
            self.epoch = self.epoch.wrapping_add(1);
            self.cursor = 1;
            self.build();
        }
        let index = self.cursor;
        let key = self.key(index);
        let disclosed_key = if index >= self.lag { chain_hash_n(&key, self.lag) } else { [0u8; KEY_LEN] };
        let mut signed = hb.clone();
        signed.integrity = Some(IntegrityBlock {
            chain_epoch: self.epoch,
            key_index: index,
            mac: [0u8; KEY_LEN],
            disclosed_key,
        });
        let mac = compute_mac(&key, src, &signed)?;
        if let Some(block) = signed.integrity.as_mut() {
            block.mac = mac;
        }
        self.cursor += 1;
        Ok(signed)
    }
}

/// Why a message was classified as forged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgeryKind {
    /// No integrity block on a message that was expected to carry one.
    Unsigned,
    /// Key index 0 never authenticates a message.
    BadIndex,
    /// Disclosed key does not hash onto the authenticated chain.
    OffChainKey,
    /// The message's own key was already disclosed, so anyone could have tagged it.
    StaleIndex,
    StaleEpoch,
    /// Claims a new epoch while disclosing a key of the current chain.
    EpochMismatch,
    /// Disclosure claims a position further ahead than the verifier will walk.
    SkipTooLarge,
    /// Tag did not verify once the key became known.
    BadMac,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// The disclosure was accepted and buffered messages were resolved. The
    /// incoming message itself waits for its own key.
    Authenticated { verified: Vec<u32>, rejected: Vec<u32> },
    Buffered,
    Forged(ForgeryKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub epoch: u16,
    pub index: u32,
    #[serde(with = "hex_key")]
    pub key: Key,
}

#[derive(Debug, Clone)]
struct Pending {
    src: Ipv4Addr,
    hb: Heartbeat,
}

impl Pending {
    fn index(&self) -> u32 {
        self.hb.integrity.map_or(0, |b| b.key_index)
    }
}

/// Per-source verifier.
#[derive(Debug, Clone)]
pub struct VerifierState {
    lag: u32,
    capacity: usize,
    max_skip: u32,
    anchor: Option<Anchor>,
    pending: VecDeque<Pending>,
    dropped: u64,
}

impl Default for VerifierState {
    fn default() -> Self {
        Self::new(DEFAULT_DISCLOSURE_LAG, DEFAULT_VERIFIER_BUFFER)
    }
}

impl VerifierState {
    pub fn new(lag: u32, capacity: usize) -> Self {
        VerifierState {
            lag: lag.max(1),
            capacity: capacity.max(1),
            max_skip: DEFAULT_MAX_SKIP,
            anchor: None,
            pending: VecDeque::new(),
            dropped: 0,
        }
    }

    /// Starts from a key known out of band instead of the first disclosure.
    pub fn with_anchor(mut self, anchor: Anchor) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn with_max_skip(mut self, max_skip: u32) -> Self {
        self.max_skip = max_skip;
        self
    }

    pub fn anchor(&self) -> Option<Anchor> {
        self.anchor
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    /// Unverified messages evicted from a full buffer or discarded on epoch change.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn verify(&mut self, src: Ipv4Addr, hb: &Heartbeat) -> Verdict {
        let Some(block) = hb.integrity else {
            return Verdict::Forged(ForgeryKind::Unsigned);
        };
        if block.key_index == 0 {
            return Verdict::Forged(ForgeryKind::BadIndex);
        }
        if let Some(anchor) = self.anchor {
            if block.chain_epoch != anchor.epoch {
                if (block.chain_epoch.wrapping_sub(anchor.epoch) as i16) < 0 {
                    return Verdict::Forged(ForgeryKind::StaleEpoch);
                }
                if self.on_current_chain(&anchor, &block) {
                    return Verdict::Forged(ForgeryKind::EpochMismatch);
                }
                self.dropped += self.pending.len() as u64;
                self.pending.clear();
                self.anchor = None;
            }
        }
        if let Some(anchor) = self.anchor {
            if block.key_index <= anchor.index {
                return Verdict::Forged(ForgeryKind::StaleIndex);
            }
        }

        let mut released = None;
        if block.key_index >= self.lag {
            let disclosed_index = block.key_index - self.lag;
            let disclosed = block.disclosed_key;
            match self.anchor {
                None => {
                    self.anchor = Some(Anchor { epoch: block.chain_epoch, index: disclosed_index, key: disclosed });
                    released = Some(self.release());
                }
                Some(anchor) => {
                    let on_chain = if disclosed_index >= anchor.index {
                        let steps = disclosed_index - anchor.index;
                        if steps > self.max_skip {
                            return Verdict::Forged(ForgeryKind::SkipTooLarge);
                        }
                        chain_hash_n(&disclosed, steps) == anchor.key
                    } else {
                        chain_hash_n(&anchor.key, anchor.index - disclosed_index) == disclosed
                    };
                    if !on_chain {
                        return Verdict::Forged(ForgeryKind::OffChainKey);
                    }
                    if disclosed_index > anchor.index {
                        self.anchor = Some(Anchor { epoch: anchor.epoch, index: disclosed_index, key: disclosed });
                        released = Some(self.release());
                    }
                }
            }
        }

        if self.pending.len() == self.capacity {
            self.pending.pop_front();
            self.dropped += 1;
        }
        self.pending.push_back(Pending { src, hb: hb.clone() });

        match released {
            Some((verified, rejected)) if !verified.is_empty() || !rejected.is_empty() => {
                Verdict::Authenticated { verified, rejected }
            }
            _ => Verdict::Buffered,
        }
    }

    /// A fresh chain shares no keys with the old one, so an old-chain key
    /// under a new epoch number means the epoch field was altered.
    fn on_current_chain(&self, anchor: &Anchor, block: &IntegrityBlock) -> bool {
        if block.key_index < self.lag {
            return false;
        }
        let disclosed_index = block.key_index - self.lag;
        disclosed_index >= anchor.index
            && disclosed_index - anchor.index <= self.max_skip
            && chain_hash_n(&block.disclosed_key, disclosed_index - anchor.index) == anchor.key
    }

    fn release(&mut self) -> (Vec<u32>, Vec<u32>) {
        let anchor = self.anchor.expect("release needs an anchor");
        let mut verified = Vec::new();
        let mut rejected = Vec::new();
        let mut kept = VecDeque::with_capacity(self.pending.len());
        for p in self.pending.drain(..) {
            let index = p.index();
            if index > anchor.index {
                kept.push_back(p);
                continue;
            }
            let key = chain_hash_n(&anchor.key, anchor.index - index);
            let tag = p.hb.integrity.map(|b| b.mac);
            let mut unsigned = p.hb.clone();
            if let Some(b) = unsigned.integrity.as_mut() {
                b.mac = [0u8; KEY_LEN];
            }
            match compute_mac(&key, p.src, &unsigned) {
                Ok(expected) if Some(expected) == tag => verified.push(p.hb.seq),
                _ => rejected.push(p.hb.seq),
            }
        }
        self.pending = kept;
        (verified, rejected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::HostId;

    fn config(length: u32) -> ChainConfig {
        ChainConfig { seed: [7u8; KEY_LEN], length, lag: 1 }
    }

    fn hb(seq: u32) -> Heartbeat {
        Heartbeat::new(HostId(0x1234), 1_000_000, 64, 1_000 + u64::from(seq), seq)
    }

    #[test]
    fn small_chain_links() {
        let mut chain = ChainState::new(&config(4)).unwrap();
        assert_eq!(chain.cursor(), 1);
        for j in 0..4 {
            assert_eq!(chain_hash(&chain.key(j + 1)), chain.key(j));
        }
    }

    #[test]
    fn one_way_chain_exhaustive_1024() {
        let mut chain = ChainState::new(&config(1024)).unwrap();
        let keys: Vec<Key> = (0..=1024).map(|i| chain.key(i)).collect();
        let mut k = keys[1024];
        for i in (0..1024).rev() {
            k = chain_hash(&k);
            assert_eq!(k, keys[i]);
        }
    }

    #[test]
    fn keys_cross_checkpoints() {
        let mut chain = ChainState::new(&config(3000)).unwrap();
        let top = chain.key(3000);
        assert_eq!(chain_hash_n(&top, 3000 - 1023), chain.key(1023));
        assert_eq!(chain_hash_n(&top, 3000 - 2048), chain.key(2048));
        assert_eq!(chain_hash_n(&top, 3000), chain.key(0));
    }

    #[test]
    fn deterministic_from_seed() {
        let mut a = ChainState::new(&config(64)).unwrap();
        let mut b = ChainState::new(&config(64)).unwrap();
        assert_eq!(a.key(0), b.key(0));
        let mut other = config(64);
        other.seed[0] ^= 1;
        assert_ne!(ChainState::new(&other).unwrap().key(0), a.key(0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(ChainState::new(&config(1)).unwrap_err(), ChainError::TooShort(1));
        let mut c = config(4);
        c.lag = 4;
        assert_eq!(ChainState::new(&c).unwrap_err(), ChainError::BadLag(4));
    }

    #[test]
    fn exhaustion_rolls_epoch() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&config(3)).unwrap();
        let first_key = chain.key(1);
        let epochs: Vec<u16> = (0..5)
            .map(|s| chain.sign(&hb(s), src).unwrap().integrity.unwrap().chain_epoch)
            .collect();
        assert_eq!(epochs, vec![0, 0, 0, 1, 1]);
        assert_ne!(chain.key(1), first_key);
        let signed = chain.sign(&hb(9), src).unwrap();
        let bytes = crate::wire::encode(&signed).unwrap();
        assert_eq!(&bytes[29..31], &[0, 1]);
    }

    #[test]
    fn in_order_stream_authenticates_all_but_last() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&config(64)).unwrap();
        let mut verifier = VerifierState::default();
        let mut verified = Vec::new();
        for seq in 1..=5 {
            let signed = chain.sign(&hb(seq), src).unwrap();
            match verifier.verify(src, &signed) {
                Verdict::Authenticated { verified: v, rejected } => {
                    assert!(rejected.is_empty());
                    verified.extend(v);
                }
                Verdict::Buffered => {}
                Verdict::Forged(kind) => panic!("unexpected forgery {kind:?}"),
            }
        }
        assert_eq!(verified, vec![1, 2, 3, 4]);
        assert_eq!(verifier.buffered(), 1);
    }

    #[test]
    fn tampered_payload_rejected_on_release() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&config(64)).unwrap();
        let mut verifier = VerifierState::default();
        let mut first = chain.sign(&hb(1), src).unwrap();
        first.rate_uhz ^= 0x10;
        assert_eq!(verifier.verify(src, &first), Verdict::Buffered);
        let second = chain.sign(&hb(2), src).unwrap();
        assert_eq!(
            verifier.verify(src, &second),
            Verdict::Authenticated { verified: vec![], rejected: vec![1] }
        );
    }

    #[test]
    fn replay_after_disclosure_is_stale() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&config(64)).unwrap();
        let mut verifier = VerifierState::default();
        let msgs: Vec<Heartbeat> = (1..=4).map(|s| chain.sign(&hb(s), src).unwrap()).collect();
        for m in &msgs {
            verifier.verify(src, m);
        }
        assert_eq!(verifier.verify(src, &msgs[2]), Verdict::Forged(ForgeryKind::StaleIndex));
    }

    #[test]
    fn stale_epoch_and_missing_block() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut verifier = VerifierState::default().with_anchor(Anchor { epoch: 5, index: 3, key: [1; 16] });
        let mut m = hb(1);
        assert_eq!(verifier.verify(src, &m), Verdict::Forged(ForgeryKind::Unsigned));
        m.integrity = Some(IntegrityBlock { chain_epoch: 4, key_index: 9, mac: [0; 16], disclosed_key: [0; 16] });
        assert_eq!(verifier.verify(src, &m), Verdict::Forged(ForgeryKind::StaleEpoch));
    }

    #[test]
    fn altered_epoch_is_caught() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&config(64)).unwrap();
        let mut verifier = VerifierState::default();
        verifier.verify(src, &chain.sign(&hb(1), src).unwrap());
        let mut second = chain.sign(&hb(2), src).unwrap();
        second.integrity.as_mut().unwrap().chain_epoch = 2;
        assert_eq!(verifier.verify(src, &second), Verdict::Forged(ForgeryKind::EpochMismatch));
        let third = chain.sign(&hb(3), src).unwrap();
        assert!(matches!(verifier.verify(src, &third), Verdict::Authenticated { .. }));
    }

    #[test]
    fn buffer_overflow_drops_oldest() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let mut chain = ChainState::new(&ChainConfig { seed: [3; 16], length: 64, lag: 3 }).unwrap();
        let mut verifier = VerifierState::new(3, 2);
        for seq in 1..=3 {
            let signed = chain.sign(&hb(seq), src).unwrap();
            assert_eq!(verifier.verify(src, &signed), Verdict::Buffered);
        }
        assert_eq!(verifier.buffered(), 2);
        assert_eq!(verifier.dropped(), 1);
        assert_eq!(verifier.anchor().unwrap().index, 0);
    }
}
