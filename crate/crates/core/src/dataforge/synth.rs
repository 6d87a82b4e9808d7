//! Synthetic multiple-choice tasks.
//!
//! Each family owns two slots of finding tokens. The gold letter is a
//! seeded lookup on the pair of findings, balanced so every letter is the
//! answer for the same number of pairs. A shortcut cue naming the gold
//! letter is embedded with a per-split probability.

use serde::{Deserialize, Serialize};

use crate::prompting::SYSTEM_PREAMBLE;
use crate::records::{Choice, DatasetRecord, Letter, Split, TaskInstance};
use crate::rng::RngStream;
use crate::vocab::{build_vocab, Vocab, VocabError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_families: usize,
    /// Distinct tokens per finding slot.
    pub findings_per_slot: usize,
    pub n_choices: usize,
    /// Size of the pool of uninformative filler tokens.
    pub noise_pool: usize,
    pub noise_per_prompt: usize,
    pub answer_set: Vec<String>,
    /// Shortcut probability for train and iid_test.
    pub p_train: f64,
    /// Shortcut probability for ood_test.
    pub p_ood: f64,
    pub n_train: usize,
    pub n_iid_test: usize,
    pub n_ood_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_families: 1,
            findings_per_slot: 4,
            n_choices: 4,
            noise_pool: 12,
            noise_per_prompt: 2,
            answer_set: ["normal", "benign", "malignant", "inflamed"].map(String::from).to_vec(),
            p_train: 1.0,
            p_ood: 0.0,
            n_train: 500,
            n_iid_test: 192,
            n_ood_test: 192,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_families == 0 || self.findings_per_slot == 0 {
            return Err("n_families and findings_per_slot must be >= 1".into());
        }
        if !(2..=4).contains(&self.n_choices) {
            return Err("n_choices must be in 2..=4".into());
        }
        if self.answer_set.len() != self.n_choices {
            return Err("answer_set length must equal n_choices".into());
        }
        let mut seen = std::collections::HashSet::new();
        if self.answer_set.iter().any(|a| a.contains(char::is_whitespace) || !seen.insert(a)) {
            return Err("answer_set entries must be unique single words".into());
        }
        if self.noise_per_prompt > 0 && self.noise_pool == 0 {
            return Err("noise_pool must be >= 1 when noise_per_prompt > 0".into());
        }
        for p in [self.p_train, self.p_ood] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("shortcut probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::IidTest => self.n_iid_test,
            Split::OodTest => self.n_ood_test,
        }
    }

    fn shortcut_p(&self, split: Split) -> f64 {
        match split {
            Split::OodTest => self.p_ood,
            _ => self.p_train,
        }
    }
}

pub fn finding_token(family: usize, slot: usize, value: usize) -> String {
    let s = if slot == 0 { 'a' } else { 'b' };
    format!("f{family}{s}{value}")
}

pub fn noise_token(i: usize) -> String {
    format!("n{i}")
}

pub fn cue_token(letter: Letter) -> String {
    format!("cue{letter}")
}

/// True for words produced by [`finding_token`].
pub fn is_finding_word(w: &str) -> bool {
    let Some(rest) = w.strip_prefix('f') else { return false };
    let digits = rest.chars().take_while(char::is_ascii_digit).count();
    let tail = &rest[digits..];
    digits > 0
        && (tail.starts_with('a') || tail.starts_with('b'))
        && tail.len() > 1
        && tail[1..].chars().all(|c| c.is_ascii_digit())
}

/// Finding words of a prompt, in order.
pub fn finding_words(prompt: &str) -> Vec<&str> {
    prompt.split_whitespace().filter(|w| is_finding_word(w)).collect()
}

/// Reference rationale: the findings in the think block, then the letter.
pub fn reference_cot(prompt: &str, letter: Letter) -> String {
    let mut s = String::from("<think>");
    for w in finding_words(prompt) {
        s.push(' ');
        s.push_str(w);
    }
    s.push_str(&format!(" </think> <answer> {letter} </answer>"));
    s
}

/// User tokens for the synthetic task family, in a fixed order.
pub fn synth_vocab(spec: &SynthSpec) -> Result<Vocab, VocabError> {
    let mut words: Vec<String> = (0..spec.n_choices).map(|i| Letter::from_index(i).unwrap().to_string()).collect();
    words.extend(SYSTEM_PREAMBLE.iter().map(|s| s.to_string()));
    words.extend(spec.answer_set.iter().cloned());
    for f in 0..spec.n_families {
        for slot in 0..2 {
            for v in 0..spec.findings_per_slot {
                words.push(finding_token(f, slot, v));
            }
        }
    }
    words.extend((0..spec.noise_pool).map(noise_token));
    words.extend((0..spec.n_choices).map(|i| cue_token(Letter::from_index(i).unwrap())));
    build_vocab(&words)
}

/// Per-family gold table indexed by `a * findings_per_slot + b`.
///
/// The table is a seeded Latin square over letters, so neither finding on
/// its own says anything about the answer.
pub fn lookup_table(spec: &SynthSpec, family: usize) -> Vec<Letter> {
    let p = spec.findings_per_slot;
    let n = spec.n_choices;
    let mut rng = RngStream::named(spec.seed, "synth.rule", &[family as u64]);
    let mut row: Vec<usize> = (0..p).collect();
    let mut col: Vec<usize> = (0..p).collect();
    let mut letters: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut row);
    rng.shuffle(&mut col);
    rng.shuffle(&mut letters);
    (0..p * p)
        .map(|i| Letter::from_index(letters[(row[i / p] + col[i % p]) % n]).unwrap())
        .collect()
}

pub fn generate_synthetic_tasks(spec: &SynthSpec) -> Result<Vec<DatasetRecord>, String> {
    spec.validate()?;
    let p = spec.findings_per_slot;
    let tables: Vec<Vec<Letter>> = (0..spec.n_families).map(|f| lookup_table(spec, f)).collect();
    let mut out = Vec::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let mut decks: Vec<Vec<usize>> = vec![Vec::new(); spec.n_families];
        let mut deck_round = vec![0u64; spec.n_families];
        for i in 0..spec.split_size(split) {
            let fam = i % spec.n_families;
            if decks[fam].is_empty() {
                let mut d: Vec<usize> = (0..p * p).collect();
                RngStream::named(spec.seed, "synth.deck", &[si as u64, fam as u64, deck_round[fam]]).shuffle(&mut d);
                d.reverse();
                decks[fam] = d;
                deck_round[fam] += 1;
            }
            let combo = decks[fam].pop().unwrap();
            let (a, b) = (combo / p, combo % p);
            let gold = tables[fam][combo];
            let mut rng = RngStream::named(spec.seed, "synth.instance", &[si as u64, i as u64]);
            let mut words = vec![finding_token(fam, 0, a), finding_token(fam, 1, b)];
            for _ in 0..spec.noise_per_prompt {
                words.push(noise_token(rng.below(spec.noise_pool as u64) as usize));
            }
            let shortcut = rng.bernoulli(spec.shortcut_p(split));
            if shortcut {
                words.push(cue_token(gold));
            }
            let mut texts = spec.answer_set.clone();
            rng.shuffle(&mut texts);
            let choices = texts
                .into_iter()
                .enumerate()
                .map(|(j, text)| Choice { letter: Letter::from_index(j).unwrap(), text })
                .collect();
            out.push(DatasetRecord {
                task: TaskInstance {
                    id: format!("{}-{i:05}", split.as_str()),
                    prompt: words.join(" "),
                    choices,
                    gold,
                    family: format!("fam{fam}"),
                    split,
                    shortcut_letter: shortcut.then_some(gold),
                },
                cot: None,
                provenance: format!("synthetic:seed={}", spec.seed),
            });
        }
    }
    Ok(out)
}
