//! Tag-grammar parsing and the rule-based reward.
//!
//! A response is well formed iff it is exactly
//! `<think> body </think> <answer> body </answer>` optionally followed by a
//! single `<eos>`, where each body is zero or more ordinary tokens. The
//! reward is the sum of an accuracy term, a format term and a repetition
//! penalty computed from the distinct n-gram ratio of the two bodies.

use std::collections::HashSet;
use std::hash::Hash;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::records::{Choice, Letter};
use crate::vocab::{self, normalize_spacing, TokenId, Vocab, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Eos,
    Pad,
    Word,
}

fn kind_of_id(id: TokenId) -> Kind {
    match id {
        vocab::THINK_OPEN => Kind::ThinkOpen,
        vocab::THINK_CLOSE => Kind::ThinkClose,
        vocab::ANSWER_OPEN => Kind::AnswerOpen,
        vocab::ANSWER_CLOSE => Kind::AnswerClose,
        vocab::EOS => Kind::Eos,
        vocab::PAD => Kind::Pad,
        _ => Kind::Word,
    }
}

fn kind_of_word(w: &str) -> Kind {
    match RESERVED.iter().position(|r| *r == w) {
        Some(i) => kind_of_id(i as TokenId),
        None => Kind::Word,
    }
}

/// Returns the think and answer body ranges if `kinds` matches the grammar.
fn match_grammar(kinds: &[Kind]) -> Option<(Range<usize>, Range<usize>)> {
    let mut i = 0;
    let expect = |k: Kind, i: &mut usize| -> Option<()> {
        (kinds.get(*i) == Some(&k)).then(|| *i += 1)
    };
    let body = |i: &mut usize| -> Range<usize> {
        let start = *i;
        while kinds.get(*i) == Some(&Kind::Word) {
            *i += 1;
        }
        start..*i
    };
    expect(Kind::ThinkOpen, &mut i)?;
    let think = body(&mut i);
    expect(Kind::ThinkClose, &mut i)?;
    expect(Kind::AnswerOpen, &mut i)?;
    let answer = body(&mut i);
    expect(Kind::AnswerClose, &mut i)?;
    if kinds.get(i) == Some(&Kind::Eos) {
        i += 1;
    }
    (i == kinds.len()).then_some((think, answer))
}

/// Parsed view of a token-level response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedResponse {
    pub well_formed: bool,
    pub think_body: Vec<TokenId>,
    pub answer_body: Vec<TokenId>,
    pub raw: Vec<TokenId>,
}

impl TaggedResponse {
    /// Think body followed by answer body.
    pub fn body_words(&self) -> Vec<TokenId> {
        let mut w = self.think_body.clone();
        w.extend_from_slice(&self.answer_body);
        w
    }
}

pub fn parse_tagged(raw: &[TokenId]) -> TaggedResponse {
    let kinds: Vec<Kind> = raw.iter().map(|&t| kind_of_id(t)).collect();
    match match_grammar(&kinds) {
        Some((think, answer)) => TaggedResponse {
            well_formed: true,
            think_body: raw[think].to_vec(),
            answer_body: raw[answer].to_vec(),
            raw: raw.to_vec(),
        },
        None => TaggedResponse {
            well_formed: false,
            think_body: Vec::new(),
            answer_body: Vec::new(),
            raw: raw.to_vec(),
        },
    }
}

/// Word-level counterpart of [`TaggedResponse`] for free text such as
/// generated rationales, which may not be encodable in a given vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedText {
    pub well_formed: bool,
    pub think_words: Vec<String>,
    pub answer_words: Vec<String>,
}

/// Parses text after [`normalize_spacing`], so `"</think><answer>"` is fine.
pub fn parse_tagged_text(text: &str) -> TaggedText {
    let normalized = normalize_spacing(text);
    let words: Vec<&str> = normalized.split(' ').filter(|w| !w.is_empty()).collect();
    let kinds: Vec<Kind> = words.iter().map(|w| kind_of_word(w)).collect();
    let owned = |r: Range<usize>| words[r].iter().map(|w| w.to_string()).collect();
    match match_grammar(&kinds) {
        Some((think, answer)) => TaggedText {
            well_formed: true,
            think_words: owned(think),
            answer_words: owned(answer),
        },
        None => TaggedText {
            well_formed: false,
            think_words: Vec::new(),
            answer_words: Vec::new(),
        },
    }
}

pub fn score_format(t: &TaggedResponse) -> f64 {
    if t.well_formed {
        1.0
    } else {
        0.0
    }
}

/// Maps an answer body to a choice letter.
///
/// A single word naming a letter (any case, optional trailing `.` or `)`)
/// wins; otherwise the whole body must equal one choice's text ignoring case.
pub fn extract_choice<S: AsRef<str>>(answer_body: &[S], choices: &[Choice]) -> Option<Letter> {
    if let [word] = answer_body {
        let w = word.as_ref();
        let stem = w.strip_suffix(['.', ')']).unwrap_or(w);
        if let Ok(letter) = stem.to_ascii_uppercase().parse::<Letter>() {
            if choices.iter().any(|c| c.letter == letter) {
                return Some(letter);
            }
        }
    }
    if answer_body.is_empty() {
        return None;
    }
    let joined = answer_body
        .iter()
        .map(|w| w.as_ref().to_lowercase())
        .collect::<Vec<_>>()
        .join(" ");
    choices
        .iter()
        .find(|c| c.text.to_lowercase() == joined)
        .map(|c| c.letter)
}

/// Letter extracted from a parsed response; `None` when malformed.
pub fn extracted_letter(t: &TaggedResponse, choices: &[Choice], vocab: &Vocab) -> Option<Letter> {
    if !t.well_formed {
        return None;
    }
    let words = vocab.words(&t.answer_body).ok()?;
    extract_choice(&words, choices)
}

pub fn score_accuracy(t: &TaggedResponse, gold: Letter, choices: &[Choice], vocab: &Vocab) -> f64 {
    if extracted_letter(t, choices, vocab) == Some(gold) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub ngram_n: usize,
    pub rep_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            ngram_n: 3,
            rep_weight: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ngram_n < 2 {
            return Err(format!("ngram_n must be >= 2, got {}", self.ngram_n));
        }
        if !(self.rep_weight >= 0.0 && self.rep_weight.is_finite()) {
            return Err(format!("rep_weight must be >= 0, got {}", self.rep_weight));
        }
        Ok(())
    }
}

/// `(distinct, total)` contiguous n-gram counts, or `None` below length n.
pub fn ngram_counts<T: Eq + Hash>(words: &[T], n: usize) -> Option<(usize, usize)> {
    if n == 0 || words.len() < n {
        return None;
    }
    let distinct: HashSet<&[T]> = words.windows(n).collect();
    Some((distinct.len(), words.len() - n + 1))
}

pub fn repetition_penalty<T: Eq + Hash>(words: &[T], cfg: &RewardConfig) -> f64 {
    match ngram_counts(words, cfg.ngram_n) {
        None => 0.0,
        Some((distinct, total)) => -cfg.rep_weight * (1.0 - distinct as f64 / total as f64),
    }
}

pub fn score_repetition(t: &TaggedResponse, cfg: &RewardConfig) -> f64 {
    repetition_penalty(&t.body_words(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_fmt: f64,
    pub r_rep: f64,
    pub total: f64,
}

pub fn composite_reward(
    raw: &[TokenId],
    gold: Letter,
    choices: &[Choice],
    vocab: &Vocab,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let t = parse_tagged(raw);
    let r_acc = score_accuracy(&t, gold, choices, vocab);
    let r_fmt = score_format(&t);
    let r_rep = score_repetition(&t, cfg);
    RewardBreakdown {
        r_acc,
        r_fmt,
        r_rep,
        total: r_acc + r_fmt + r_rep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;
    use crate::vocab::{ANSWER_CLOSE as AC, ANSWER_OPEN as AO, EOS, THINK_CLOSE as TC, THINK_OPEN as TO};
    use proptest::prelude::*;

    fn setup() -> (Vocab, Vec<Choice>) {
        let v = build_vocab(&["A", "B", "C", "D", "x", "a", "b", "c", "d", "b.", "maybe", "cyst"]).unwrap();
        let choices = ["benign", "normal", "tumor", "cyst"]
            .iter()
            .enumerate()
            .map(|(i, t)| Choice { letter: Letter::from_index(i).unwrap(), text: t.to_string() })
            .collect();
        (v, choices)
    }

    fn ids(v: &Vocab, s: &str) -> Vec<TokenId> {
        v.encode(s).unwrap()
    }

    #[test]
    fn grammar_match_and_rejections() {
        let (v, _) = setup();
        let t = parse_tagged(&ids(&v, "<think> x </think> <answer> A </answer>"));
        assert!(t.well_formed);
        assert_eq!(t.think_body, ids(&v, "x"));
        assert_eq!(t.answer_body, ids(&v, "A"));
        assert!(!parse_tagged(&ids(&v, "<answer> A </answer>")).well_formed);
        let dup = parse_tagged(&ids(&v, "<think> x </think> <answer> A </answer> <answer> B </answer>"));
        assert!(!dup.well_formed);
        assert!(dup.think_body.is_empty() && dup.answer_body.is_empty());
        assert!(parse_tagged(&[TO, TC, AO, AC, EOS]).well_formed);
        assert!(!parse_tagged(&[TO, TC, AO, AC, EOS, EOS]).well_formed);
    }

    #[test]
    fn format_scores() {
        assert_eq!(score_format(&parse_tagged(&[TO, TC, AO, 6, AC])), 1.0);
        assert_eq!(score_format(&parse_tagged(&[TO, TC, AO, 6])), 0.0);
        assert_eq!(score_format(&parse_tagged(&[TO, TC, AO, AC])), 1.0);
    }

    #[test]
    fn choice_extraction_rules() {
        let (_, ch) = setup();
        assert_eq!(extract_choice(&["B"], &ch), Some(Letter::from_index(1).unwrap()));
        assert_eq!(extract_choice(&["b."], &ch), Some(Letter::from_index(1).unwrap()));
        assert_eq!(extract_choice(&["c)"], &ch), Some(Letter::from_index(2).unwrap()));
        assert_eq!(extract_choice(&["maybe", "B"], &ch), None);
        assert_eq!(extract_choice(&["CYST"], &ch), Some(Letter::from_index(3).unwrap()));
        assert_eq!(extract_choice(&["E"], &ch), None);
        assert_eq!(extract_choice::<&str>(&[], &ch), None);
    }

    #[test]
    fn accuracy_requires_well_formed() {
        let (v, ch) = setup();
        let a = Letter::A;
        let b = Letter::from_index(1).unwrap();
        let ok = parse_tagged(&ids(&v, "<think> </think> <answer> A </answer>"));
        assert_eq!(score_accuracy(&ok, a, &ch, &v), 1.0);
        assert_eq!(score_accuracy(&ok, b, &ch, &v), 0.0);
        let bad = parse_tagged(&ids(&v, "<answer> A </answer>"));
        assert_eq!(score_accuracy(&bad, a, &ch, &v), 0.0);
    }

    #[test]
    fn repetition_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(repetition_penalty(&["a", "b", "c", "d"], &cfg), 0.0);
        // trigrams of a^5: (a,a,a) x3 -> 1 distinct of 3
        let r = repetition_penalty(&["a"; 5], &cfg);
        assert!((r - (-(1.0 - 1.0 / 3.0))).abs() < 1e-15);
        assert_eq!(repetition_penalty(&["a", "b"], &cfg), 0.0);
    }

    #[test]
    fn composite_examples() {
        let (v, ch) = setup();
        let cfg = RewardConfig::default();
        let best = composite_reward(&ids(&v, "<think> x </think> <answer> A </answer> <eos>"), Letter::A, &ch, &v, &cfg);
        assert_eq!((best.r_acc, best.r_fmt, best.r_rep, best.total), (1.0, 1.0, 0.0, 2.0));
        let junk = composite_reward(&ids(&v, "a a a a a a"), Letter::A, &ch, &v, &cfg);
        assert_eq!(junk.total, 0.0);
        let rep = composite_reward(
            &ids(&v, "<think> a a a a </think> <answer> a </answer>"),
            Letter::from_index(1).unwrap(),
            &ch,
            &v,
            &cfg,
        );
        assert_eq!((rep.r_acc, rep.r_fmt), (0.0, 1.0));
        assert!((rep.total - 1.0 / 3.0).abs() < 1e-15);
    }

    fn brute_distinct(words: &[u32], n: usize) -> (usize, usize) {
        let mut seen: Vec<Vec<u32>> = Vec::new();
        let total = words.len() + 1 - n;
        for i in 0..total {
            let g = words[i..i + n].to_vec();
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        (seen.len(), total)
    }

    proptest! {
        #[test]
        fn total_is_component_sum(raw in proptest::collection::vec(0u32..18, 0..20), gold in 0usize..4) {
            let (v, ch) = setup();
            let r = composite_reward(&raw, Letter::from_index(gold).unwrap(), &ch, &v, &RewardConfig::default());
            prop_assert_eq!(r.total, r.r_acc + r.r_fmt + r.r_rep);
            if r.r_acc == 1.0 { prop_assert_eq!(r.r_fmt, 1.0); }
            prop_assert!(r.r_rep <= 0.0 && r.r_rep >= -1.0);
        }

        #[test]
        fn repetition_invariant_under_relabeling(words in proptest::collection::vec(0u32..6, 0..25), offset in 1u32..50) {
            let cfg = RewardConfig::default();
            let relabeled: Vec<u32> = words.iter().map(|w| (w * 7 + offset) % 97).collect();
            prop_assert_eq!(repetition_penalty(&words, &cfg), repetition_penalty(&relabeled, &cfg));
        }

        #[test]
        fn fresh_ngram_recurrence(words in proptest::collection::vec(0u32..4, 3..25)) {
            let n = 3;
            let (d, t) = brute_distinct(&words, n);
            prop_assert_eq!(ngram_counts(&words, n), Some((d, t)));
            let mut longer = words.clone();
            longer.push(1000);
            let (d2, t2) = ngram_counts(&longer, n).unwrap();
            prop_assert_eq!((d2, t2), (d + 1, t + 1));
            let before = d as f64 / t as f64;
            let after = d2 as f64 / t2 as f64;
            prop_assert!(after >= before * t as f64 / (t as f64 + 1.0));
        }
    }
}
