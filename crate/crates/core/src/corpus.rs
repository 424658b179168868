//! Byte-level BPE and repetition-controlled packing of training windows.
//!
//! Token ids `0..256` are raw bytes, `256..260` are the special tokens and
//! every merge appends one id after that.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::io::atomic_write;
use crate::{par, seed, Error, Result};

pub const BYTE_TOKENS: u32 = 256;
pub const NUM_SPECIALS: u32 = 4;
const FILE_MAGIC: &str = "bpe-v1";

/// Ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub mask: u32,
    pub pad: u32,
    pub docsep: u32,
}

impl Specials {
    /// Layout used by [`Vocab`]: right after the byte alphabet.
    pub const BYTE_LEVEL: Specials = Specials {
        bos: BYTE_TOKENS,
        mask: BYTE_TOKENS + 1,
        pad: BYTE_TOKENS + 2,
        docsep: BYTE_TOKENS + 3,
    };

    pub fn contains(&self, id: u32) -> bool {
        id == self.bos || id == self.mask || id == self.pad || id == self.docsep
    }
}

impl Default for Specials {
    fn default() -> Self {
        Self::BYTE_LEVEL
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    /// Byte content per id; empty for specials.
    token_bytes: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    pub specials: Specials,
}

impl Vocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let first_merge = BYTE_TOKENS + NUM_SPECIALS;
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_bytes.extend((0..NUM_SPECIALS).map(|_| Vec::new()));
        for (k, &(a, b)) in merges.iter().enumerate() {
            let next = first_merge + k as u32;
            let ok = |x: u32| x < next && !Specials::BYTE_LEVEL.contains(x);
            if !ok(a) || !ok(b) {
                return Err(Error::Input(format!(
                    "merge {k} ({a}, {b}) references a token that does not exist yet"
                )));
            }
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
        }
        let mut token_to_id = HashMap::new();
        for (id, bytes) in token_bytes.iter().enumerate() {
            if !bytes.is_empty() {
                token_to_id.entry(bytes.clone()).or_insert(id as u32);
            }
        }
        Ok(Self {
            merges,
            token_bytes,
            token_to_id,
            specials: Specials::BYTE_LEVEL,
        })
    }

    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    /// Applies the merges in training order.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        let first = BYTE_TOKENS + NUM_SPECIALS;
        for (k, &(a, b)) in self.merges.iter().enumerate() {
            if ids.len() < 2 {
                break;
            }
            replace_pair(&mut ids, a, b, first + k as u32);
        }
        ids
    }

    /// Concatenated bytes of the non-special ids.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if self.specials.contains(id) {
                continue;
            }
            let bytes = self
                .token_bytes
                .get(id as usize)
                .ok_or(Error::UnknownToken(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{FILE_MAGIC} {}\n", self.size());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(source, 1, "empty tokenizer file"))?;
        let size: usize = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| {
                Error::parse(source, 1, format!("expected `{FILE_MAGIC} <vocab_size>`"))
            })?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => {
                    return Err(Error::parse(
                        source,
                        i + 2,
                        format!("bad merge line `{line}`"),
                    ))
                }
            }
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != size {
            return Err(Error::parse(
                source,
                1,
                format!("header says {size} tokens but merges give {}", vocab.size()),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}

/// Replaces non-overlapping left-to-right occurrences of `(a, b)` by `new`.
fn replace_pair(ids: &mut Vec<u32>, a: u32, b: u32, new: u32) {
    let mut w = 0;
    let mut r = 0;
    let n = ids.len();
    while r < n {
        if r + 1 < n && ids[r] == a && ids[r + 1] == b {
            ids[w] = new;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}

/// Trains a byte-level BPE on `texts`.
///
/// Each round merges the most frequent adjacent pair (at least two
/// occurrences); ties go to the pair whose byte content is lexicographically
/// smallest. Stops early when no pair repeats.
pub fn train_bpe<S: AsRef<[u8]>>(texts: &[S], vocab_size: usize) -> Result<Vocab> {
    let base = (BYTE_TOKENS + NUM_SPECIALS) as usize;
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the {base} byte and special tokens"
        )));
    }
    if texts.is_empty() {
        return Err(Error::Config(
            "cannot train a tokenizer on an empty corpus".into(),
        ));
    }
    let mut seqs: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| t.as_ref().iter().map(|&b| b as u32).collect())
        .collect();
    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for s in &seqs {
        for w in s.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    token_bytes.extend((0..NUM_SPECIALS).map(|_| Vec::new()));
    let mut merges = Vec::new();

    while token_bytes.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&token_bytes[pa.0 as usize], &token_bytes[pa.1 as usize]);
                    let kb = (&token_bytes[pb.0 as usize], &token_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((a, b)) = best else { break };
        let new = token_bytes.len() as u32;
        for s in &mut seqs {
            merge_counting(s, a, b, new, &mut counts);
        }
        counts.retain(|_, c| *c > 0);
        let mut bytes = token_bytes[a as usize].clone();
        bytes.extend_from_slice(&token_bytes[b as usize]);
        token_bytes.push(bytes);
        merges.push((a, b));
    }
    Vocab::from_merges(merges)
}

/// [`replace_pair`] that also keeps the global pair counts current.
fn merge_counting(
    s: &mut Vec<u32>,
    a: u32,
    b: u32,
    new: u32,
    counts: &mut HashMap<(u32, u32), i64>,
) {
    let n = s.len();
    if n < 2 {
        return;
    }
    let mut bump = |p: (u32, u32), d: i64| *counts.entry(p).or_insert(0) += d;
    let mut w = 0;
    let mut r = 0;
    while r < n {
        if r + 1 < n && s[r] == a && s[r + 1] == b {
            bump((a, b), -1);
            if w > 0 {
                let left = s[w - 1];
                bump((left, a), -1);
                bump((left, new), 1);
            }
            if r + 2 < n {
                let right = s[r + 2];
                bump((b, right), -1);
                bump((new, right), 1);
            }
            s[w] = new;
            r += 2;
        } else {
            s[w] = s[r];
            r += 1;
        }
        w += 1;
    }
    s.truncate(w);
}

/// Fixed-length training windows, each starting with BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    pub window_len: usize,
    pub windows: Vec<Vec<u32>>,
    pub seed: u64,
}

impl PackedDataset {
    pub fn unique_token_count(&self) -> usize {
        self.windows.len() * self.window_len
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Moves the last `ceil(frac · len)` windows (at least one) into a
    /// held-out set.
    pub fn split_heldout(mut self, frac: f64) -> Result<(PackedDataset, PackedDataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config(format!(
                "held-out fraction {frac} outside [0, 1)"
            )));
        }
        let k = ((self.windows.len() as f64 * frac).ceil() as usize).max(1);
        if k >= self.windows.len() {
            return Err(Error::Config(format!(
                "corpus has {} windows; too few to hold out {k}",
                self.windows.len()
            )));
        }
        let val = self.windows.split_off(self.windows.len() - k);
        let held = PackedDataset {
            window_len: self.window_len,
            windows: val,
            seed: self.seed,
        };
        Ok((self, held))
    }
}

/// Shuffles documents by `seed`, joins them with DOCSEP and cuts
/// `[BOS] + (L − 1)` token windows; the trailing partial window is dropped.
pub fn pack<S: AsRef<[u8]> + Sync>(
    vocab: &Vocab,
    texts: &[S],
    window_len: usize,
    seed: u64,
) -> Result<PackedDataset> {
    if window_len < 2 {
        return Err(Error::Config("window length must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.shuffle(&mut seed::rng(seed, "pack"));
    let encoded = par::map(&order, |&i| vocab.encode(texts[i].as_ref()));
    let mut stream = Vec::with_capacity(encoded.iter().map(|e| e.len() + 1).sum());
    for (k, doc) in encoded.into_iter().enumerate() {
        if k > 0 {
            stream.push(vocab.specials.docsep);
        }
        stream.extend(doc);
    }
    let body = window_len - 1;
    let windows = stream
        .chunks_exact(body)
        .map(|c| {
            let mut w = Vec::with_capacity(window_len);
            w.push(vocab.specials.bos);
            w.extend_from_slice(c);
            w
        })
        .collect();
    Ok(PackedDataset {
        window_len,
        windows,
        seed,
    })
}

/// How many unique tokens to train on and how often to repeat them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionPlan {
    pub repetitions: u32,
    pub total_budget_tokens: u64,
    pub subset_tokens: u64,
}

impl RepetitionPlan {
    pub fn new(repetitions: u32, total_budget_tokens: u64) -> Result<Self> {
        if repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        Ok(Self {
            repetitions,
            total_budget_tokens,
            subset_tokens: total_budget_tokens / repetitions as u64,
        })
    }

    /// Number of unique windows of length `window_len` in the subset.
    pub fn subset_windows(&self, window_len: usize) -> usize {
        (self.subset_tokens / window_len as u64) as usize
    }
}

/// Window indices for the whole run: the first `subset_tokens / L` windows
/// of `ds`, repeated `R` times with a fresh shuffle per epoch.
pub fn repetition_stream(
    ds: &PackedDataset,
    plan: &RepetitionPlan,
    seed: u64,
) -> Result<Vec<usize>> {
    let k = plan.subset_windows(ds.window_len);
    if k == 0 {
        return Err(Error::Config(format!(
            "subset of {} tokens is smaller than one window of {}",
            plan.subset_tokens, ds.window_len
        )));
    }
    if k > ds.len() {
        return Err(Error::Config(format!(
            "plan needs {k} unique windows but the dataset has {}",
            ds.len()
        )));
    }
    let mut out = Vec::with_capacity(k * plan.repetitions as usize);
    for epoch in 0..plan.repetitions {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut seed::rng_indexed(seed, "epoch", epoch as u64));
        out.extend(perm);
    }
    Ok(out)
}

/// Reads a corpus: a directory yields one document per regular file (sorted
/// by name), a file is split into documents at blank lines.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| std::fs::read_to_string(p).map_err(Error::from))
            .collect()
    } else {
        Ok(split_blank_lines(&std::fs::read_to_string(path)?))
    }
}

pub fn split_blank_lines(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            if !cur.is_empty() {
                cur.push('\n');
            }
            cur.push_str(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}
