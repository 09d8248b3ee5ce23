use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{
    all_words, ADJECTIVES, CONJUNCTIONS, NOUNS, PLACES, PLURAL_DETS, PREPOSITIONS, PROPER_NOUNS, SINGULAR_DETS, VERBS,
};
use super::{extract_edits, label_tokens, Edit, ErrorType, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    /// Each of three corruption slots fires with this probability.
    pub error_rate: f64,
    pub max_corruptions: usize,
    pub two_clause_prob: f64,
    pub pp_prob: f64,
    pub adj_prob: f64,
    pub proper_subject_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            seed: 7,
            error_rate: 0.5,
            max_corruptions: 3,
            two_clause_prob: 0.3,
            pp_prob: 0.5,
            adj_prob: 0.3,
            proper_subject_prob: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        for (name, p) in [
            ("error_rate", self.error_rate),
            ("two_clause_prob", self.two_clause_prob),
            ("pp_prob", self.pp_prob),
            ("adj_prob", self.adj_prob),
            ("proper_subject_prob", self.proper_subject_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Deterministic corpus of `n` examples with default grammar settings.
pub fn generate_corpus(n: usize, seed: u64, error_rate: f64) -> Result<Vec<Example>> {
    generate_with(&CorpusConfig {
        n,
        seed,
        error_rate,
        ..CorpusConfig::default()
    })
}

pub fn generate_with(cfg: &CorpusConfig) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = all_words();
    let mut out = Vec::with_capacity(cfg.n);
    while out.len() < cfg.n {
        let sentence = sentence(cfg, &mut rng);
        let k = (0..cfg.max_corruptions).filter(|_| rng.random_bool(cfg.error_rate)).count();
        let plan = plan_corruptions(&sentence, k, &lexicon, &mut rng);
        let target: Vec<String> = sentence.iter().map(|w| w.text.clone()).collect();
        let (source, edits) = inject_corruptions(&target, &plan)?;
        // Keep only pairs whose canonical extraction reproduces the injected spans.
        let extracted = extract_edits(&source, &target);
        if extracted.iter().map(Edit::key).ne(edits.iter().map(Edit::key)) {
            continue;
        }
        let labels = label_tokens(&target, &edits)?;
        out.push(Example {
            source,
            target,
            edits,
            labels: labels.labels,
            end_label: labels.end_label,
        });
    }
    Ok(out)
}

/// One corruption of a target token: delete it (`None`) or replace it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub index: usize,
    pub replacement: Option<String>,
    pub error_type: ErrorType,
}

/// Applies token corruptions to a correct sentence. Returns the corrupted
/// source and the gold edits (in source coordinates) that undo them.
pub fn inject_corruptions(target: &[String], corruptions: &[Corruption]) -> Result<(Vec<String>, Vec<Edit>)> {
    let mut sorted: Vec<&Corruption> = corruptions.iter().collect();
    sorted.sort_by_key(|c| c.index);
    for w in sorted.windows(2) {
        if w[0].index == w[1].index {
            return Err(Error::invalid(format!("two corruptions of token {}", w[0].index)));
        }
    }
    let mut source = Vec::with_capacity(target.len());
    let mut edits = Vec::with_capacity(sorted.len());
    let mut next = sorted.into_iter().peekable();
    for (i, tok) in target.iter().enumerate() {
        match next.next_if(|c| c.index == i) {
            None => source.push(tok.clone()),
            Some(c) => {
                let pos = source.len();
                match &c.replacement {
                    None => edits.push(Edit::new(pos, pos, tok.clone(), c.error_type)),
                    Some(r) => {
                        source.push(r.clone());
                        edits.push(Edit::new(pos, pos + 1, tok.clone(), c.error_type));
                    }
                }
            }
        }
    }
    if let Some(c) = next.next() {
        return Err(Error::invalid(format!(
            "corruption index {} outside a {}-token sentence",
            c.index,
            target.len()
        )));
    }
    Ok((source, edits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Det { plural: bool, marked: bool },
    Adj,
    Noun { plural: bool, marked: bool },
    Proper,
    Verb { plural: bool },
    Prep,
    Place,
    Comma,
    Conj,
    Period,
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    role: Role,
    /// Agreement group; at most one corruption per group.
    group: usize,
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn starts_with_vowel(w: &str) -> bool {
    w.starts_with(['a', 'e', 'i', 'o', 'u'])
}

fn noun_phrase<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R, group: usize, out: &mut Vec<Word>) -> bool {
    let plural = rng.random_bool(0.4);
    let &(sing, plur) = pick(rng, NOUNS);
    let noun = if plural { plur } else { sing };
    let adj = rng.random_bool(cfg.adj_prob).then(|| *pick(rng, ADJECTIVES));
    let mut det = *pick(rng, if plural { PLURAL_DETS } else { SINGULAR_DETS });
    if det == "a" && starts_with_vowel(adj.unwrap_or(noun)) {
        det = "an";
    }
    let marked = !matches!(det, "the" | "my");
    out.push(Word {
        text: det.into(),
        role: Role::Det { plural, marked },
        group,
    });
    if let Some(a) = adj {
        out.push(Word {
            text: a.into(),
            role: Role::Adj,
            group,
        });
    }
    out.push(Word {
        text: noun.into(),
        role: Role::Noun { plural, marked },
        group,
    });
    plural
}

fn clause<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R, next_group: &mut usize, out: &mut Vec<Word>) {
    let subj = *next_group;
    *next_group += 1;
    let plural = if rng.random_bool(cfg.proper_subject_prob) {
        out.push(Word {
            text: (*pick(rng, PROPER_NOUNS)).into(),
            role: Role::Proper,
            group: subj,
        });
        false
    } else {
        noun_phrase(cfg, rng, subj, out)
    };
    let &(s, p) = pick(rng, VERBS);
    out.push(Word {
        text: (if plural { p } else { s }).into(),
        role: Role::Verb { plural },
        group: subj,
    });
    let obj = *next_group;
    *next_group += 1;
    noun_phrase(cfg, rng, obj, out);
    if rng.random_bool(cfg.pp_prob) {
        let pp = *next_group;
        *next_group += 1;
        let &(place, prep) = pick(rng, PLACES);
        for (text, role) in [(prep, Role::Prep), ("the", Role::Det { plural: false, marked: false }), (place, Role::Place)] {
            out.push(Word {
                text: text.into(),
                role,
                group: pp,
            });
        }
    }
}

fn sentence<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> Vec<Word> {
    let mut words = Vec::with_capacity(24);
    let mut group = 0;
    clause(cfg, rng, &mut group, &mut words);
    if rng.random_bool(cfg.two_clause_prob) {
        words.push(Word {
            text: ",".into(),
            role: Role::Comma,
            group,
        });
        group += 1;
        words.push(Word {
            text: (*pick(rng, CONJUNCTIONS)).into(),
            role: Role::Conj,
            group,
        });
        group += 1;
        clause(cfg, rng, &mut group, &mut words);
    }
    words.push(Word {
        text: ".".into(),
        role: Role::Period,
        group,
    });
    words
}

/// Letter transposition at the first interior position with distinct letters.
fn transpose(word: &str) -> Option<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 4 {
        return None;
    }
    (1..chars.len() - 1).find(|&p| chars[p] != chars[p + 1]).map(|p| {
        let mut c = chars.clone();
        c.swap(p, p + 1);
        c.into_iter().collect()
    })
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Candidate corruptions of one word, grouped by error type.
fn candidates<R: Rng + ?Sized>(words: &[Word], i: usize, lexicon: &[&str], rng: &mut R) -> Vec<(ErrorType, Option<String>)> {
    let w = &words[i];
    let text = w.text.as_str();
    let mut c = Vec::new();
    match w.role {
        Role::Det { plural, .. } => {
            if !plural {
                c.push((ErrorType::Det, None));
            }
            let pool: Vec<&str> = if plural {
                SINGULAR_DETS.iter().copied().filter(|&d| d != "the" && d != "my").collect()
            } else {
                PLURAL_DETS.iter().copied().filter(|&d| d != "the" && d != "my").collect()
            };
            let mut swap = *pick(rng, &pool);
            if text == "a" && rng.random_bool(0.5) {
                swap = "an";
            } else if text == "an" && rng.random_bool(0.5) {
                swap = "a";
            }
            if swap != text {
                c.push((ErrorType::Det, Some(swap.into())));
            }
        }
        Role::Prep => {
            let others: Vec<&str> = PREPOSITIONS.iter().copied().filter(|&p| p != text).collect();
            c.push((ErrorType::Prep, Some((*pick(rng, &others)).into())));
        }
        Role::Comma | Role::Period => c.push((ErrorType::Punct, None)),
        Role::Verb { plural } => {
            let &(s, p) = VERBS.iter().find(|&&(s, p)| s == text || p == text).expect("verb in lexicon");
            c.push((ErrorType::VerbSva, Some((if plural { s } else { p }).into())));
        }
        Role::Noun { plural, marked } if marked => {
            let &(s, p) = NOUNS.iter().find(|&&(s, p)| s == text || p == text).expect("noun in lexicon");
            c.push((ErrorType::NounNum, Some((if plural { s } else { p }).into())));
        }
        _ => {}
    }
    if matches!(w.role, Role::Noun { .. } | Role::Verb { .. } | Role::Adj | Role::Place) {
        if let Some(t) = transpose(text).filter(|t| !lexicon.contains(&t.as_str())) {
            c.push((ErrorType::Spell, Some(t)));
        }
    }
    match w.role {
        Role::Proper => c.push((ErrorType::Orth, Some(text.to_lowercase()))),
        Role::Comma | Role::Period => {}
        _ => c.push((ErrorType::Orth, Some(capitalize(text)))),
    }
    c
}

fn plan_corruptions<R: Rng + ?Sized>(words: &[Word], k: usize, lexicon: &[&str], rng: &mut R) -> Vec<Corruption> {
    let mut plan: Vec<Corruption> = Vec::new();
    let mut used_groups = Vec::new();
    for _ in 0..k {
        let blocked = |i: usize| {
            used_groups.contains(&words[i].group) || plan.iter().any(|c| c.index.abs_diff(i) <= 1)
        };
        let mut by_type: Vec<Vec<(usize, Option<String>)>> = vec![Vec::new(); ErrorType::COUNT];
        for i in (0..words.len()).filter(|&i| !blocked(i)) {
            for (t, r) in candidates(words, i, lexicon, rng) {
                by_type[t.index()].push((i, r));
            }
        }
        let types: Vec<usize> = (0..ErrorType::COUNT).filter(|&t| !by_type[t].is_empty()).collect();
        if types.is_empty() {
            break;
        }
        let t = *pick(rng, &types);
        let (index, replacement) = pick(rng, &by_type[t]).clone();
        used_groups.push(words[index].group);
        plan.push(Corruption {
            index,
            replacement,
            error_type: ErrorType::from_index(t).expect("type index"),
        });
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Contiguous split: train first, then dev, then test.
pub fn split_corpus(examples: Vec<Example>, dev_frac: f64, test_frac: f64) -> Result<CorpusSplit> {
    if dev_frac < 0.0 || test_frac < 0.0 || dev_frac + test_frac >= 1.0 {
        return Err(Error::Config(format!(
            "invalid split fractions dev={dev_frac} test={test_frac}"
        )));
    }
    let n = examples.len();
    let n_dev = (n as f64 * dev_frac).round() as usize;
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_train = n - n_dev - n_test;
    let mut it = examples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let dev = it.by_ref().take(n_dev).collect();
    let test = it.collect();
    Ok(CorpusSplit { train, dev, test })
}
