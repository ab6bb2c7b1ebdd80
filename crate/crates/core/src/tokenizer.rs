//! Byte-pair subword vocabulary induction and lossless encode/decode.
//!
//! Text is split into words at spaces. Each space is rewritten as the
//! word-boundary sentinel [`WORD_BOUNDARY`] and glued to the front of the
//! word that follows it, so `"ab cd"` becomes the words `"ab"` and `"▁cd"`.
//! Merges never cross word boundaries, and decoding simply turns sentinels
//! back into spaces.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const WORD_BOUNDARY: char = '\u{2581}';
pub const REPLACEMENT: char = '\u{FFFD}';

const HEADER_PREFIX: &str = "#xfer-vocab v1 size=";

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// `left ++ right -> result`, in the order merges were learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Merge rank that created each token; -1 for specials and characters.
    ranks: Vec<i64>,
    merges: Vec<Merge>,
    index: HashMap<String, u32>,
    chars: HashMap<char, u32>,
    /// Every (left, right) split of every merged token, to its rank and id.
    pair_table: HashMap<(u32, u32), (i64, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.ranks == other.ranks
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub from_text: String,
}

/// Split text into sentinel-prefixed words.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        let c = if ch == ' ' { WORD_BOUNDARY } else { ch };
        if c == WORD_BOUNDARY && !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Learn a BPE vocabulary of at most `vocab_size` entries.
///
/// Each round merges the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)` token strings. Training is
/// deterministic, `_seed` exists for interface parity with the other
/// trainers.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], vocab_size: usize, _seed: u64) -> Result<Vocabulary> {
    if corpus.iter().all(|l| l.as_ref().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut word_counts: HashMap<String, i64> = HashMap::new();
    for line in corpus {
        for w in pretokenize(line.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut word_list: Vec<(String, i64)> = word_counts.into_iter().collect();
    word_list.sort();

    let alphabet: BTreeSet<char> = word_list.iter().flat_map(|(w, _)| w.chars()).collect();
    let floor = alphabet.len() + NUM_SPECIALS;
    if vocab_size < floor {
        return Err(Error::VocabTooSmall { requested: vocab_size, chars: alphabet.len(), floor });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut ranks = vec![-1i64; tokens.len()];
    let mut index: HashMap<String, u32> = HashMap::new();
    for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
        index.insert(t.clone(), i as u32);
    }

    let mut words: Vec<Vec<u32>> =
        word_list.iter().map(|(w, _)| w.chars().map(|c| index[&c.to_string()]).collect()).collect();
    let counts: Vec<i64> = word_list.iter().map(|(_, c)| *c).collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_pair: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += counts[wi];
            where_pair.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[a.0 as usize], &tokens[a.1 as usize]);
                    let kb = (&tokens[b.0 as usize], &tokens[b.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((left, right)) = best else { break };

        let merged = format!("{}{}", tokens[left as usize], tokens[right as usize]);
        let result = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                ranks.push(merges.len() as i64);
                id
            }
        };
        merges.push(Merge { left, right, result });

        let affected: Vec<usize> =
            where_pair.remove(&(left, right)).map(|s| s.into_iter().collect()).unwrap_or_default();
        for wi in affected {
            let c = counts[wi];
            for p in words[wi].windows(2) {
                *pair_counts.get_mut(&(p[0], p[1])).unwrap() -= c;
            }
            words[wi] = merge_word(&words[wi], left, right, result);
            for p in words[wi].windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
                where_pair.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    Ok(Vocabulary::assemble(tokens, ranks, merges))
}

fn merge_word(word: &[u32], left: u32, right: u32, result: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    fn assemble(tokens: Vec<String>, ranks: Vec<i64>, merges: Vec<Merge>) -> Self {
        let mut index = HashMap::new();
        let mut chars = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
            index.insert(t.clone(), i as u32);
            let mut cs = t.chars();
            if let (Some(c), None) = (cs.next(), cs.next()) {
                if ranks[i] < 0 {
                    chars.insert(c, i as u32);
                }
            }
        }
        let mut pair_table: HashMap<(u32, u32), (i64, u32)> = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
            if ranks[i] < 0 {
                continue;
            }
            for (k, _) in t.char_indices().skip(1) {
                if let (Some(&l), Some(&r)) = (index.get(&t[..k]), index.get(&t[k..])) {
                    let e = pair_table.entry((l, r)).or_insert((ranks[i], i as u32));
                    if ranks[i] < e.0 {
                        *e = (ranks[i], i as u32);
                    }
                }
            }
        }
        Vocabulary { tokens, ranks, merges, index, chars, pair_table }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn rank(&self, id: u32) -> Option<i64> {
        self.ranks.get(id as usize).copied()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn tokens(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens.iter().enumerate().map(|(i, t)| (i as u32, t.as_str()))
    }

    /// Whether every character of `text` was seen in training.
    pub fn covers(&self, text: &str) -> bool {
        text.chars().all(|c| self.chars.contains_key(&if c == ' ' { WORD_BOUNDARY } else { c }))
    }

    /// Encode one word into subword ids by repeatedly merging the adjacent
    /// pair that forms the lowest-ranked token (leftmost on ties).
    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.chars().map(|c| self.chars.get(&c).copied().unwrap_or(UNK)).collect();
        loop {
            let mut best: Option<(i64, usize, u32)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(&(rank, id)) = self.pair_table.get(&(syms[i], syms[i + 1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, id));
                    }
                }
            }
            let Some((_, i, id)) = best else { break };
            syms[i] = id;
            syms.remove(i + 1);
        }
        out.extend(syms);
    }

    /// Encode `text`. With `add_cls_sep` the result is `[CLS] .. [SEP]` and
    /// truncation keeps the closing SEP.
    pub fn encode(&self, text: &str, max_len: usize, add_cls_sep: bool) -> TokenSequence {
        let mut ids = Vec::new();
        if add_cls_sep {
            ids.push(CLS);
        }
        for w in pretokenize(text) {
            self.encode_word(&w, &mut ids);
        }
        if add_cls_sep {
            let max_len = max_len.max(2);
            ids.truncate(max_len - 1);
            ids.push(SEP);
        } else {
            ids.truncate(max_len);
        }
        TokenSequence { ids, from_text: text.to_string() }
    }

    /// Inverse of [`encode`](Self::encode) on covered text. PAD/CLS/SEP/MASK
    /// are dropped and UNK becomes U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange { id, size: self.len() })?;
            match id {
                UNK => s.push(REPLACEMENT),
                _ if is_special(id) => {}
                _ => s.push_str(tok),
            }
        }
        Ok(s.replace(WORD_BOUNDARY, " "))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER_PREFIX}{}", self.len()).unwrap();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{i}\t{}\t{}", escape(t), self.ranks[i]).unwrap();
        }
        s
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::format("vocab file", "missing header"))??;
        let size: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::format("vocab file", format!("bad header {header:?}")))?;
        let mut tokens = Vec::with_capacity(size);
        let mut ranks = Vec::with_capacity(size);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut f = line.splitn(3, '\t');
            let bad = || Error::format("vocab file", format!("line {}: {line:?}", n + 2));
            let id: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let tok = unescape(f.next().ok_or_else(bad)?);
            let rank: i64 = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if id != tokens.len() {
                return Err(Error::format(
                    "vocab file",
                    format!("ids must be contiguous, got {id} at position {}", tokens.len()),
                ));
            }
            tokens.push(tok);
            ranks.push(rank);
        }
        if tokens.len() != size || size < NUM_SPECIALS {
            return Err(Error::format("vocab file", format!("header says {size} tokens, found {}", tokens.len())));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s || ranks[i] != -1 {
                return Err(Error::format("vocab file", format!("id {i} must be {s}")));
            }
        }

        // Recover a merge rule for each ranked token: the split whose halves
        // were both available earliest.
        let mut order: Vec<usize> = (NUM_SPECIALS..size).filter(|&i| ranks[i] >= 0).collect();
        order.sort_by_key(|&i| ranks[i]);
        let mut index: HashMap<&str, usize> = HashMap::new();
        for i in NUM_SPECIALS..size {
            index.insert(&tokens[i], i);
        }
        let mut merges = Vec::with_capacity(order.len());
        for &i in &order {
            let t = &tokens[i];
            let best = t
                .char_indices()
                .skip(1)
                .filter_map(|(k, _)| {
                    let l = *index.get(&t[..k])?;
                    let r = *index.get(&t[k..])?;
                    (ranks[l] < ranks[i] && ranks[r] < ranks[i]).then_some((ranks[l].max(ranks[r]), l, r))
                })
                .min();
            let (_, l, r) = best.ok_or_else(|| {
                Error::format("vocab file", format!("token {t:?} is not derivable from earlier tokens"))
            })?;
            merges.push(Merge { left: l as u32, right: r as u32, result: i as u32 });
        }
        Ok(Vocabulary::assemble(tokens, ranks, merges))
    }

    /// 16-byte digest of the canonical vocabulary file.
    pub fn hash(&self) -> [u8; 16] {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest[..16].try_into().unwrap()
    }
}

fn escape(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\t' => s.push_str("\\t"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    let mut it = t.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match it.next() {
            Some('t') => s.push('\t'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            Some(o) => s.push(o),
            None => s.push('\\'),
        }
    }
    s
}

pub fn hash_hex(h: &[u8; 16]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}
