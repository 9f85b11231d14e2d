//! Byte-pair-style merging over unit-id symbols.
//!
//! Token ids: the five specials first, then the base alphabet in ascending
//! symbol order, then one id per merge in the order merges were learned.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const N_SPECIALS: u32 = 5;
/// Unit id emitted by `decode` for an `UNK` token.
pub const UNK_UNIT: i64 = -1;

pub const SPECIAL_NAMES: [&str; 5] = ["PAD", "CLS", "SEP", "UNK", "MASK"];
pub const DEFAULT_VOCAB_SIZES: [usize; 6] = [1000, 3000, 5000, 8000, 12000, 20000];

pub fn is_special(tok: u32) -> bool {
    tok < N_SPECIALS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    alphabet: Vec<u32>,
    merges: Vec<(u32, u32)>,
    symbol_to_token: HashMap<u32, u32>,
    /// Unit expansion of every non-special token, indexed by `tok - N_SPECIALS`.
    expansions: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BpeFile {
    alphabet: Vec<u32>,
    merges: Vec<[u32; 2]>,
    specials: BTreeMap<String, u32>,
}

impl BpeModel {
    /// Builds a model from an alphabet and merges, checking every merge's operands exist.
    pub fn from_parts(mut alphabet: Vec<u32>, merges: Vec<(u32, u32)>) -> Result<Self> {
        alphabet.sort_unstable();
        if alphabet.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("alphabet", "duplicate symbols"));
        }
        let symbol_to_token: HashMap<u32, u32> =
            alphabet.iter().enumerate().map(|(i, &s)| (s, i as u32 + N_SPECIALS)).collect();
        let mut expansions: Vec<Vec<u32>> = alphabet.iter().map(|&s| vec![s]).collect();
        for (m, &(l, r)) in merges.iter().enumerate() {
            let known = N_SPECIALS + expansions.len() as u32;
            for op in [l, r] {
                if is_special(op) || op >= known {
                    return Err(Error::validation("merges", format!("merge {m} uses token {op} before it exists")));
                }
            }
            let mut e = expansions[(l - N_SPECIALS) as usize].clone();
            e.extend_from_slice(&expansions[(r - N_SPECIALS) as usize]);
            expansions.push(e);
        }
        if expansions.len() as u64 + N_SPECIALS as u64 > u32::MAX as u64 {
            return Err(Error::validation("merges", "vocabulary too large"));
        }
        Ok(BpeModel { alphabet, merges, symbol_to_token, expansions })
    }

    pub fn alphabet(&self) -> &[u32] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIALS as usize + self.expansions.len()
    }

    pub fn token_for_symbol(&self, sym: u32) -> u32 {
        self.symbol_to_token.get(&sym).copied().unwrap_or(UNK)
    }

    pub fn expansion(&self, tok: u32) -> Option<&[u32]> {
        tok.checked_sub(N_SPECIALS).and_then(|i| self.expansions.get(i as usize)).map(Vec::as_slice)
    }

    /// Applies the merges in training order, then wraps with CLS/SEP.
    pub fn encode(&self, units: &[u32]) -> Vec<u32> {
        let mut seq: Vec<u32> = units.iter().map(|&u| self.token_for_symbol(u)).collect();
        for (m, &(l, r)) in self.merges.iter().enumerate() {
            apply_merge(&mut seq, l, r, N_SPECIALS + (self.alphabet.len() + m) as u32);
        }
        let mut out = Vec::with_capacity(seq.len() + 2);
        out.push(CLS);
        out.extend(seq);
        out.push(SEP);
        out
    }

    /// Expands tokens back to unit ids; specials vanish and UNK becomes `UNK_UNIT`.
    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<i64>> {
        let mut out = Vec::new();
        for &t in tokens {
            if t == UNK {
                out.push(UNK_UNIT);
            } else if is_special(t) {
                continue;
            } else {
                let e = self.expansion(t).ok_or_else(|| Error::invalid(format!("unknown token id {t}")))?;
                out.extend(e.iter().map(|&u| u as i64));
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("token sequence expands to no units"));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = BpeFile {
            alphabet: self.alphabet.clone(),
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            specials: SPECIAL_NAMES.iter().enumerate().map(|(i, n)| (n.to_string(), i as u32)).collect(),
        };
        serde_json::to_string(&file).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BpeFile = serde_json::from_str(text)?;
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if file.specials.get(*name) != Some(&(i as u32)) {
                return Err(Error::validation("specials", format!("{name} must map to {i}")));
            }
        }
        if file.specials.len() != SPECIAL_NAMES.len() {
            return Err(Error::validation("specials", "unexpected special token"));
        }
        Self::from_parts(file.alphabet, file.merges.into_iter().map(|[l, r]| (l, r)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "model is not UTF-8"))?;
        Self::from_json(text)
    }
}

fn apply_merge(seq: &mut Vec<u32>, l: u32, r: u32, new: u32) {
    let mut w = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            seq[w] = new;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

/// Learns merges greedily: most frequent adjacent pair first, ties to the
/// smallest `(left, right)`, never across sequences, stopping at
/// `vocab_size` or when no pair occurs twice.
pub fn train_bpe(corpus: &[Vec<u32>], vocab_size: usize) -> Result<BpeModel> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::invalid("cannot train a tokenizer on an empty corpus"));
    }
    let mut alphabet: Vec<u32> = corpus.iter().flatten().copied().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = alphabet.len() + N_SPECIALS as usize;
    if vocab_size < base {
        return Err(Error::validation(
            "vocab_size",
            format!("{vocab_size} is below the {} base symbols plus {N_SPECIALS} specials", alphabet.len()),
        ));
    }
    let model = BpeModel::from_parts(alphabet.clone(), Vec::new())?;
    let mut seqs: Vec<Vec<u32>> =
        corpus.iter().map(|s| s.iter().map(|&u| model.token_for_symbol(u)).collect()).collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for s in &seqs {
        for w in s.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
    }
    let mut merges = Vec::new();
    while base + merges.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            .map(|(&p, _)| p);
        let Some((l, r)) = best else { break };
        let new = (base + merges.len()) as u32;
        merges.push((l, r));
        for s in seqs.iter_mut() {
            if !s.windows(2).any(|w| w[0] == l && w[1] == r) {
                continue;
            }
            for w in s.windows(2) {
                decrement(&mut counts, (w[0], w[1]));
            }
            apply_merge(s, l, r, new);
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
    }
    BpeModel::from_parts(alphabet, merges)
}

fn decrement(counts: &mut HashMap<(u32, u32), i64>, key: (u32, u32)) {
    if let Some(c) = counts.get_mut(&key) {
        *c -= 1;
        if *c == 0 {
            counts.remove(&key);
        }
    }
}

/// Maps text to unit-like symbols (Unicode scalar values) for character-level BPE.
pub fn text_symbols(text: &str) -> Vec<u32> {
    text.chars().map(|c| c as u32).collect()
}
