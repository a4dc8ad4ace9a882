//! Single-round secure summation by pairwise canceling masks.
//!
//! Values are encoded into the ring `Z/2⁶⁴` with `scale_bits` fractional bits
//! (two's complement for negatives). User `i` adds `PRG(s_ij)` for every
//! `j > i` and subtracts it for every `j < i`, so the masks cancel exactly in
//! the sum over all users while any strict subset of shares looks uniform.
//!
//! Pairwise seeds come from a simulated trusted setup, and the mask PRG is
//! the crate's ChaCha20 substream generator keyed by `(s_ij, round_tag)`.
//! Missing participants abort the round; there is no dropout recovery.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, Rng, Seed};
use crate::{Error, Result};

pub type UserId = u32;

pub const DEFAULT_SCALE_BITS: u32 = 24;

/// Fixed-point embedding of reals into `Z/2⁶⁴`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointCodec {
    scale_bits: u32,
    clamp: f64,
}

impl FixedPointCodec {
    /// `clamp` is the largest magnitude a single encoded coordinate may have.
    pub fn new(scale_bits: u32, clamp: f64) -> Result<Self> {
        if scale_bits > 52 {
            return Err(Error::param(format!("scale_bits {scale_bits} exceeds f64 precision")));
        }
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(Error::param(format!("clamp bound must be positive, got {clamp}")));
        }
        let codec = FixedPointCodec { scale_bits, clamp };
        codec.validate_users(1)?;
        Ok(codec)
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Worst-case rounding error of one encoded coordinate.
    pub fn resolution(&self) -> f64 {
        0.5 / self.scale()
    }

    /// Checks that the sum of `num_users` clamped values cannot wrap:
    /// `|U|·B·2^scale_bits < 2⁶³`.
    pub fn validate_users(&self, num_users: usize) -> Result<()> {
        let worst = num_users as f64 * (self.clamp * self.scale()).round();
        if worst >= 2f64.powi(63) {
            return Err(Error::param(format!(
                "{num_users} users x clamp {} at {} fractional bits can overflow the ring",
                self.clamp, self.scale_bits
            )));
        }
        Ok(())
    }

    pub fn encode(&self, values: &[f64]) -> Result<Vec<u64>> {
        let scale = self.scale();
        values
            .iter()
            .enumerate()
            .map(|(coordinate, &v)| {
                if !(v.abs() <= self.clamp) {
                    return Err(Error::Saturation {
                        coordinate,
                        value: v,
                        bound: self.clamp,
                    });
                }
                Ok((v * scale).round() as i64 as u64)
            })
            .collect()
    }

    /// Signed reinterpretation divided by `2^scale_bits · divisor`.
    pub fn decode(&self, ring: &[u64], divisor: u64) -> Vec<f64> {
        let denom = self.scale() * divisor.max(1) as f64;
        ring.iter().map(|&w| w as i64 as f64 / denom).collect()
    }
}

/// Pairwise seeds `s_ij = s_ji`, as agreed by an (assumed) authenticated key
/// exchange.
#[derive(Clone, Debug, Default)]
pub struct PairwiseSeedDirectory {
    seeds: HashMap<(UserId, UserId), Seed>,
}

fn ordered(i: UserId, j: UserId) -> (UserId, UserId) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl PairwiseSeedDirectory {
    /// Trusted setup: derives a seed for every pair of `ids` from `master`.
    pub fn provision(master: &Seed, ids: &[UserId]) -> Self {
        let mut dir = PairwiseSeedDirectory::default();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let (lo, hi) = ordered(i, j);
                let label = format!("pair/{lo}/{hi}");
                dir.insert(i, j, derive_seed(master, label.as_bytes()));
            }
        }
        dir
    }

    pub fn insert(&mut self, i: UserId, j: UserId, seed: Seed) {
        self.seeds.insert(ordered(i, j), seed);
    }

    pub fn seed(&self, i: UserId, j: UserId) -> Option<&Seed> {
        self.seeds.get(&ordered(i, j))
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// Expands a pair seed into `len` ring elements for one round.
pub fn mask_stream(seed: &Seed, round_tag: u64, len: usize) -> Vec<u64> {
    let mut label = b"mask/".to_vec();
    label.extend_from_slice(&round_tag.to_le_bytes());
    let mut rng = Rng::spawn(seed, &label);
    (0..len).map(|_| rng.next_u64()).collect()
}

/// Adds user `user`'s pairwise masks to an encoded share.
pub fn mask(
    share: &[u64],
    user: UserId,
    directory: &PairwiseSeedDirectory,
    all_ids: &[UserId],
    round_tag: u64,
) -> Result<Vec<u64>> {
    let mut out = share.to_vec();
    for &other in all_ids {
        if other == user {
            continue;
        }
        let seed = directory.seed(user, other).ok_or_else(|| {
            Error::protocol(format!("no pairwise seed for users {user} and {other}"))
        })?;
        let stream = mask_stream(seed, round_tag, share.len());
        if other > user {
            out.iter_mut().zip(&stream).for_each(|(o, m)| *o = o.wrapping_add(*m));
        } else {
            out.iter_mut().zip(&stream).for_each(|(o, m)| *o = o.wrapping_sub(*m));
        }
    }
    Ok(out)
}

/// The only message a client ever sends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedShare {
    pub round_tag: u64,
    pub user_id: UserId,
    pub payload: Vec<u64>,
}

impl MaskedShare {
    /// `round_tag (u64) | user_id (u32) | len (u32) | payload (u64…)`, all
    /// little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let len = u32::try_from(self.payload.len())
            .map_err(|_| Error::protocol("payload too long for the wire format"))?;
        w.write_all(&self.round_tag.to_le_bytes())?;
        w.write_all(&self.user_id.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.payload.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads one message; `Ok(None)` on a clean end of stream.
    pub fn read_from(mut r: impl Read) -> Result<Option<Self>> {
        let mut header = [0u8; 16];
        let mut filled = 0;
        while filled < header.len() {
            let n = r.read(&mut header[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::protocol("truncated message header"));
            }
            filled += n;
        }
        let round_tag = u64::from_le_bytes(header[..8].try_into().unwrap());
        let user_id = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len * 8];
        r.read_exact(&mut body)
            .map_err(|_| Error::protocol("truncated message payload"))?;
        let payload = body
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Some(MaskedShare {
            round_tag,
            user_id,
            payload,
        }))
    }
}

/// Server-side sum of one round's shares.
///
/// Every id in `expected_ids` must appear exactly once, with a common round
/// tag and payload length; otherwise the round aborts.
pub fn aggregate(shares: &[MaskedShare], expected_ids: &[UserId]) -> Result<Vec<u64>> {
    let expected: BTreeSet<UserId> = expected_ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for s in shares {
        if !expected.contains(&s.user_id) {
            return Err(Error::protocol(format!("unexpected share from user {}", s.user_id)));
        }
        if !seen.insert(s.user_id) {
            return Err(Error::protocol(format!("duplicate share from user {}", s.user_id)));
        }
    }
    let missing: Vec<UserId> = expected.difference(&seen).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Dropout { missing });
    }
    let first = shares
        .first()
        .ok_or_else(|| Error::protocol("no participants"))?;
    let mut sum = vec![0u64; first.payload.len()];
    for s in shares {
        if s.round_tag != first.round_tag {
            return Err(Error::protocol(format!(
                "user {} sent round tag {}, expected {}",
                s.user_id, s.round_tag, first.round_tag
            )));
        }
        if s.payload.len() != sum.len() {
            return Err(Error::protocol(format!(
                "user {} sent {} values, expected {}",
                s.user_id,
                s.payload.len(),
                sum.len()
            )));
        }
        sum.iter_mut()
            .zip(&s.payload)
            .for_each(|(a, v)| *a = a.wrapping_add(*v));
    }
    Ok(sum)
}

/// Ordered log of every message of a run plus the number of aggregations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<MaskedShare>,
    pub aggregations: usize,
}

impl Transcript {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for m in &self.messages {
            m.write_to(&mut buf).expect("writing to a Vec cannot fail");
        }
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut messages = Vec::new();
        while let Some(m) = MaskedShare::read_from(&mut r)? {
            messages.push(m);
        }
        Ok(Transcript {
            messages,
            aggregations: 0,
        })
    }

    /// Hex SHA-256 of the serialized messages.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
