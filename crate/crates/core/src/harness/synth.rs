//! Synthetic sibling languages.
//!
//! A language is an abstract grammar plus a surface lexicon. The grammar
//! (driven by `shared_grammar_seed`) decides the lexeme classes and every
//! sentence skeleton: which abstract lexemes appear in which order. The
//! lexicon (driven by `lexicon_seed` and `token_alphabet`) spells each lexeme
//! as a word. Two specs that share the grammar seed therefore produce the same
//! sentences lexeme for lexeme, and with disjoint alphabets they share no
//! surface token at all.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::transfer::LabeledExample;

/// Latin lowercase letters.
pub const LATIN: &str = "abcdefghijklmnopqrstuvwxyz";
/// A slice of the Ethiopic syllabary.
pub const ETHIOPIC: &str = "ሀለሐመሠረሰቀበተኀነአከወዐዘየደገጠጰጸፀፈፐ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticLangSpec {
    pub lexicon_size: usize,
    pub shared_grammar_seed: u64,
    pub lexicon_seed: u64,
    /// Share of the lexicon that carries sentiment, split evenly between
    /// positive and negative words.
    pub sentiment_lexicon_frac: f64,
    /// Inclusive bounds on words per sentence.
    pub sentence_len_range: (usize, usize),
    pub token_alphabet: String,
    pub corpus_sentences: usize,
    pub labeled_examples: usize,
}

impl Default for SyntheticLangSpec {
    fn default() -> Self {
        SyntheticLangSpec {
            lexicon_size: 120,
            shared_grammar_seed: 7,
            lexicon_seed: 1,
            sentiment_lexicon_frac: 0.3,
            sentence_len_range: (5, 10),
            token_alphabet: LATIN.into(),
            corpus_sentences: 3000,
            labeled_examples: 7000,
        }
    }
}

/// Word classes of the abstract lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordClass {
    Positive,
    Negative,
    Noun,
    Verb,
    Modifier,
    Particle,
}

const TOPICS: usize = 4;
const MIN_SENTENCE_LEN: usize = 5;
/// Chance that a sentence also holds one word of the opposite polarity.
const MINORITY_RATE: f64 = 0.25;

/// Lexeme ids grouped by class. Nouns and verbs are further split into
/// topics; a sentence's verb always shares its subject's topic.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub classes: Vec<WordClass>,
    positive: Vec<usize>,
    negative: Vec<usize>,
    nouns: Vec<Vec<usize>>,
    verbs: Vec<Vec<usize>>,
    modifiers: Vec<usize>,
    particles: Vec<usize>,
}

impl Grammar {
    fn new(spec: &SyntheticLangSpec) -> Result<Grammar> {
        let frac = spec.sentiment_lexicon_frac;
        if !(frac > 0.0 && frac <= 0.5) {
            return Err(Error::invalid(format!("sentiment_lexicon_frac {frac} outside (0, 0.5]")));
        }
        let (lo, hi) = spec.sentence_len_range;
        if lo < MIN_SENTENCE_LEN || hi < lo {
            return Err(Error::invalid(format!(
                "sentence_len_range ({lo}, {hi}) must satisfy {MIN_SENTENCE_LEN} <= min <= max"
            )));
        }
        let n = spec.lexicon_size;
        let n_sent = ((frac * n as f64).round() as usize).max(2);
        let rest = n.saturating_sub(n_sent);
        if rest < 2 * TOPICS + 2 {
            return Err(Error::invalid(format!("lexicon_size {n} too small")));
        }
        let n_pos = n_sent / 2;
        let n_nouns = (rest * 2 / 5).max(TOPICS);
        let n_verbs = (rest / 4).max(TOPICS);
        let n_particles = ((rest - n_nouns - n_verbs) * 2 / 5).max(1);
        let n_mods = rest - n_nouns - n_verbs - n_particles;
        let mut classes = Vec::with_capacity(n);
        classes.extend(std::iter::repeat_n(WordClass::Positive, n_pos));
        classes.extend(std::iter::repeat_n(WordClass::Negative, n_sent - n_pos));
        classes.extend(std::iter::repeat_n(WordClass::Noun, n_nouns));
        classes.extend(std::iter::repeat_n(WordClass::Verb, n_verbs));
        classes.extend(std::iter::repeat_n(WordClass::Modifier, n_mods));
        classes.extend(std::iter::repeat_n(WordClass::Particle, n_particles));
        let of = |c: WordClass| -> Vec<usize> { (0..n).filter(|&i| classes[i] == c).collect() };
        let topics = |ids: Vec<usize>| -> Vec<Vec<usize>> {
            (0..TOPICS).map(|t| ids.iter().copied().skip(t).step_by(TOPICS).collect()).collect()
        };
        Ok(Grammar {
            positive: of(WordClass::Positive),
            negative: of(WordClass::Negative),
            nouns: topics(of(WordClass::Noun)),
            verbs: topics(of(WordClass::Verb)),
            modifiers: of(WordClass::Modifier),
            particles: of(WordClass::Particle),
            classes,
        })
    }

    /// One sentence skeleton with the given polarity: subject and object
    /// noun phrases, then the verb, then optional particles. Sentiment words
    /// sit anywhere before the verb; the label's polarity holds a strict
    /// majority of them.
    fn sentence(&self, label: u8, len_range: (usize, usize), rng: &mut Rng) -> Vec<usize> {
        let len = rng.random_range(len_range.0..=len_range.1);
        // subject, object and verb take three slots
        let room = len - 3;
        let majority = rng.random_range(2..=room.min(3));
        let minority = usize::from(room > majority && rng.random::<f64>() < MINORITY_RATE);
        let (maj, min) = if label == 1 { (&self.positive, &self.negative) } else { (&self.negative, &self.positive) };
        let fillers = len - 3 - majority - minority;
        let topic = rng.random_range(0..TOPICS);
        let subj = *self.nouns[topic].choose(rng).unwrap();
        let obj_topic = rng.random_range(0..TOPICS);
        let obj = *self.nouns[obj_topic].choose(rng).unwrap();
        let verb = *self.verbs[topic].choose(rng).unwrap();
        let n_particles =
            if fillers > 0 && !self.particles.is_empty() { rng.random_range(0..=fillers.min(1)) } else { 0 };
        let n_mods = fillers - n_particles;

        let mut s = Vec::with_capacity(len);
        let mut before_obj = Vec::new();
        for _ in 0..n_mods {
            let m = *self.modifiers.choose(rng).unwrap();
            if rng.random::<bool>() {
                s.push(m);
            } else {
                before_obj.push(m);
            }
        }
        s.push(subj);
        s.extend(before_obj);
        s.push(obj);
        let mut sentiment: Vec<usize> = (0..majority).map(|_| *maj.choose(rng).unwrap()).collect();
        sentiment.extend((0..minority).map(|_| *min.choose(rng).unwrap()));
        sentiment.shuffle(rng);
        let at = rng.random_range(0..=s.len());
        s.splice(at..at, sentiment);
        s.push(verb);
        for _ in 0..n_particles {
            s.push(*self.particles.choose(rng).unwrap());
        }
        s
    }

    /// Label by presence majority: 1 when positive words outnumber negative.
    pub fn label_of(&self, skeleton: &[usize]) -> u8 {
        let pos = skeleton.iter().filter(|&&w| self.classes[w] == WordClass::Positive).count();
        let neg = skeleton.iter().filter(|&&w| self.classes[w] == WordClass::Negative).count();
        u8::from(pos > neg)
    }
}

fn build_lexicon(spec: &SyntheticLangSpec) -> Result<Vec<String>> {
    let alphabet: Vec<char> = spec.token_alphabet.chars().collect::<BTreeSet<_>>().into_iter().collect();
    if alphabet.len() < 2 || alphabet.iter().any(|c| c.is_whitespace()) {
        return Err(Error::invalid("token_alphabet needs at least two non-whitespace characters"));
    }
    let mut rng = SeedStream::new(spec.lexicon_seed).rng("lexicon");
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(spec.lexicon_size);
    let mut attempts = 0usize;
    while words.len() < spec.lexicon_size {
        attempts += 1;
        if attempts > 1000 * spec.lexicon_size.max(1) {
            return Err(Error::invalid("alphabet too small for the requested lexicon"));
        }
        let len = rng.random_range(2..=5);
        let w: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    Ok(words)
}

/// A generated language: raw sentences for unsupervised training and a
/// label-balanced sentiment dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLanguage {
    pub spec: SyntheticLangSpec,
    pub lexicon: Vec<String>,
    pub grammar: Grammar,
    pub corpus: Vec<String>,
    pub dataset: Vec<LabeledExample>,
}

impl SyntheticLanguage {
    pub fn realize(&self, skeleton: &[usize]) -> String {
        skeleton.iter().map(|&w| self.lexicon[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Surface words used anywhere in corpus or dataset.
    pub fn surface_vocabulary(&self) -> BTreeSet<&str> {
        self.corpus.iter().chain(self.dataset.iter().map(|e| &e.text)).flat_map(|s| s.split_whitespace()).collect()
    }

    pub fn class_of(&self, word: &str) -> Option<WordClass> {
        self.lexicon.iter().position(|w| w == word).map(|i| self.grammar.classes[i])
    }
}

fn skeletons(grammar: &Grammar, spec: &SyntheticLangSpec, label: &str, n: usize) -> Vec<(Vec<usize>, u8)> {
    let mut rng = SeedStream::new(spec.shared_grammar_seed).rng(label);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    labels.into_iter().map(|y| (grammar.sentence(y, spec.sentence_len_range, &mut rng), y)).collect()
}

pub fn generate_language(spec: &SyntheticLangSpec) -> Result<SyntheticLanguage> {
    let grammar = Grammar::new(spec)?;
    let lexicon = build_lexicon(spec)?;
    let mut lang = SyntheticLanguage { spec: spec.clone(), lexicon, grammar, corpus: Vec::new(), dataset: Vec::new() };
    let corpus = skeletons(&lang.grammar, spec, "corpus", spec.corpus_sentences);
    lang.corpus = corpus.iter().map(|(s, _)| lang.realize(s)).collect();
    let dataset = skeletons(&lang.grammar, spec, "labeled", spec.labeled_examples);
    lang.dataset = dataset
        .iter()
        .map(|(s, y)| {
            debug_assert_eq!(lang.grammar.label_of(s), *y);
            LabeledExample::new(lang.realize(s), *y)
        })
        .collect();
    Ok(lang)
}

/// Source and target languages built on one grammar, with the translation
/// pairs that fall out of it.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguagePair {
    pub source: SyntheticLanguage,
    pub target: SyntheticLanguage,
    /// `(source sentence, target sentence)`, aligned word for word.
    pub parallel: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguagePairSpec {
    pub source: SyntheticLangSpec,
    pub target: SyntheticLangSpec,
}

impl Default for LanguagePairSpec {
    fn default() -> Self {
        let source = SyntheticLangSpec::default();
        let target = SyntheticLangSpec { lexicon_seed: 2, token_alphabet: ETHIOPIC.into(), ..source.clone() };
        LanguagePairSpec { source, target }
    }
}

pub fn generate_pair(spec: &LanguagePairSpec) -> Result<LanguagePair> {
    let (s, t) = (&spec.source, &spec.target);
    if s.shared_grammar_seed != t.shared_grammar_seed
        || s.lexicon_size != t.lexicon_size
        || s.sentiment_lexicon_frac != t.sentiment_lexicon_frac
        || s.sentence_len_range != t.sentence_len_range
    {
        return Err(Error::invalid(
            "sibling languages must share grammar seed, lexicon size, sentiment share and length range",
        ));
    }
    let source = generate_language(s)?;
    let target = generate_language(t)?;
    let parallel = source.corpus.iter().cloned().zip(target.corpus.iter().cloned()).collect();
    Ok(LanguagePair { source, target, parallel })
}
