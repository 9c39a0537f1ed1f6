//! Byte-level synthetic corpora: short arithmetic facts and sentences from a
//! small grammar. Each source keeps a held-out split drawn from its own
//! random stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Token ids are bytes.
pub const BYTE_VOCAB: usize = 256;
/// Control bytes used as think tags by the budget demos.
pub const THINK_OPEN: usize = 0x02;
pub const THINK_CLOSE: usize = 0x03;
pub const NEWLINE: usize = b'\n' as usize;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Ids ≥ 256 decode to U+FFFD.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| u8::try_from(i).unwrap_or(b'?')).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const ADJ: &[&str] = &["small", "red", "quiet", "old", "bright", "lazy", "quick"];
const NOUN: &[&str] = &["cat", "dog", "bird", "tree", "river", "house", "child", "stone"];
const VERB: &[&str] = &["sees", "finds", "likes", "follows", "hears", "holds"];
const PLACE: &[&str] = &["near the river", "in the house", "under the tree", "at night", "by the road"];

fn arithmetic_line(r: &mut impl Rng) -> String {
    let a = r.gen_range(0..100);
    let b = r.gen_range(0..100);
    match r.gen_range(0..3) {
        0 => format!("{a}+{b}={}\n", a + b),
        1 => format!("{}-{b}={a}\n", a + b),
        _ => {
            let (a, b) = (a % 13, b % 13);
            format!("{a}*{b}={}\n", a * b)
        }
    }
}

fn prose_line(r: &mut impl Rng) -> String {
    let pick = |r: &mut _, xs: &[&'static str]| *xs.choose(r).expect("non-empty");
    let mut s = format!("the {} {} {} the {}", pick(r, ADJ), pick(r, NOUN), pick(r, VERB), pick(r, NOUN));
    if r.gen_bool(0.5) {
        s.push(' ');
        s.push_str(pick(r, PLACE));
    }
    s.push_str(".\n");
    s
}

fn generate(seed: u64, bytes: usize, line: fn(&mut ChaCha8Rng) -> String) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bytes + 64);
    while out.len() < bytes {
        out.extend(encode(&line(&mut r)));
    }
    out.truncate(bytes);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Arithmetic is the primary stream, prose the secondary one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub primary: TextCorpus,
    pub secondary: TextCorpus,
}

impl CorpusPair {
    pub fn streams(&self) -> DataStreams<'_> {
        DataStreams {
            primary: &self.primary.train,
            secondary: &self.secondary.train,
        }
    }

    /// Held-out text of both sources, primary first.
    pub fn eval_tokens(&self) -> Vec<usize> {
        let mut v = self.primary.eval.clone();
        v.extend_from_slice(&self.secondary.eval);
        v
    }
}

pub fn synthetic_corpus(seed: u64, train_bytes: usize, eval_bytes: usize) -> CorpusPair {
    let src = |k: u64, line| TextCorpus {
        train: generate(seed.wrapping_mul(4).wrapping_add(k), train_bytes, line),
        eval: generate(seed.wrapping_mul(4).wrapping_add(k + 2) ^ 0x9e37_79b9, eval_bytes, line),
    };
    CorpusPair {
        primary: src(0, arithmetic_line),
        secondary: src(1, prose_line),
    }
}

/// Two training streams and the share of rows taken from the first.
#[derive(Clone, Copy, Debug)]
pub struct DataStreams<'a> {
    pub primary: &'a [usize],
    pub secondary: &'a [usize],
}

impl DataStreams<'_> {
    pub fn single(tokens: &[usize]) -> DataStreams<'_> {
        DataStreams {
            primary: tokens,
            secondary: &[],
        }
    }

    /// `rows` windows of `seq_len + 1` tokens; `round(mix · rows)` of them come
    /// from the primary stream. Returns inputs and next-token targets.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rows: usize,
        seq_len: usize,
        mix: f64,
        rng: &mut R,
    ) -> Result<(TokenBatch, Vec<usize>)> {
        let n_primary = if self.secondary.is_empty() {
            rows
        } else {
            (mix * rows as f64).round() as usize
        };
        let mut ids = Vec::with_capacity(rows * seq_len);
        let mut targets = Vec::with_capacity(rows * seq_len);
        for row in 0..rows {
            let src = if row < n_primary { self.primary } else { self.secondary };
            if src.len() < seq_len + 1 {
                return Err(Error::Invalid(format!(
                    "data stream of {} tokens is shorter than a window of {}",
                    src.len(),
                    seq_len + 1
                )));
            }
            let start = rng.gen_range(0..=src.len() - seq_len - 1);
            ids.extend_from_slice(&src[start..start + seq_len]);
            targets.extend_from_slice(&src[start + 1..start + seq_len + 1]);
        }
        Ok((TokenBatch::new(rows, seq_len, ids)?, targets))
    }
}
