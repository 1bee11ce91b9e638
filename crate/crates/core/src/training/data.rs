//! Synthetic byte corpora and preference pairs.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LmModel;

/// Independent seed for the named component of a run.
pub fn sub_seed(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Markov,
    Pattern,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(CorpusKind::Markov),
            "pattern" => Ok(CorpusKind::Pattern),
            _ => Err(Error::Config(format!("unknown corpus kind {s:?}; expected markov or pattern"))),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Markov => "markov",
            CorpusKind::Pattern => "pattern",
        })
    }
}

const ALPHABET: &[u8] = b"abcdefghijklmnop ";

/// Exactly `n` bytes of the requested kind, deterministic per seed.
pub fn gen_corpus(kind: CorpusKind, n: usize, seed: u64) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::Config("corpus length must be positive".into()));
    }
    let mut rng = stream_rng(seed, "corpus");
    Ok(match kind {
        CorpusKind::Markov => markov(n, &mut rng),
        CorpusKind::Pattern => pattern(n, &mut rng),
    })
}

/// Order-2 chain: every pair of previous symbols picks among three successors
/// with skewed weights.
fn markov(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let a = ALPHABET.len();
    let table: Vec<[(usize, f64); 3]> = (0..a * a)
        .map(|_| {
            let w = [rng.random::<f64>().powi(3), rng.random::<f64>().powi(3), rng.random::<f64>().powi(3)];
            let s: f64 = w.iter().sum::<f64>() + 1e-12;
            [
                (rng.random_range(0..a), w[0] / s),
                (rng.random_range(0..a), w[1] / s),
                (rng.random_range(0..a), w[2] / s),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let (mut p2, mut p1) = (rng.random_range(0..a), rng.random_range(0..a));
    while out.len() < n {
        let row = &table[p2 * a + p1];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row[2].0;
        for &(sym, w) in row {
            acc += w;
            if u < acc {
                next = sym;
                break;
            }
        }
        out.push(ALPHABET[next]);
        (p2, p1) = (p1, next);
    }
    out
}

/// Lines of a short random word repeated a few times: `"dcab dcab dcab\n"`.
fn pattern(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let letters = &ALPHABET[..ALPHABET.len() - 1];
    let mut out = Vec::with_capacity(n + 32);
    while out.len() < n {
        let len = rng.random_range(3..=5);
        let word: Vec<u8> = (0..len).map(|_| *letters.choose(rng).unwrap()).collect();
        let reps = rng.random_range(3..=5);
        for r in 0..reps {
            if r > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(&word);
        }
        out.push(b'\n');
    }
    out.truncate(n);
    out
}

pub fn bytes_to_tokens(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// A prompt with a preferred and a dispreferred continuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl PrefPair {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Data("preference pair with an empty part".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::Data("chosen and rejected continuations are identical".into()));
        }
        Ok(())
    }
}

/// Prompts cut from `corpus`; chosen = teacher's greedy continuation,
/// rejected = the same continuation with about half its bytes replaced.
pub fn make_pref_pairs(
    teacher: &LmModel,
    corpus: &[usize],
    n_pairs: usize,
    prompt_len: usize,
    cont_len: usize,
    seed: u64,
) -> Result<Vec<PrefPair>> {
    if prompt_len == 0 || cont_len == 0 || corpus.len() < prompt_len {
        return Err(Error::Data("corpus too short for the requested prompt length".into()));
    }
    let mut rng = stream_rng(seed, "prefs");
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let start = rng.random_range(0..=corpus.len() - prompt_len);
        let prompt = corpus[start..start + prompt_len].to_vec();
        let chosen = teacher.generate(&prompt, cont_len)?[prompt_len..].to_vec();
        let mut rejected = chosen.clone();
        for tok in rejected.iter_mut() {
            if rng.random_bool(0.5) {
                *tok = ALPHABET[rng.random_range(0..ALPHABET.len())] as usize;
            }
        }
        if rejected == chosen {
            let j = rng.random_range(0..cont_len);
            let alt = ALPHABET.iter().map(|&b| b as usize).find(|&b| b != chosen[j]).unwrap();
            rejected[j] = alt;
        }
        let pair = PrefPair {
            prompt,
            chosen,
            rejected,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}
