//! Synthetic factoid QA corpora at the token level.
//!
//! Every fact is `prompt ‖ prefix ‖ entity`: the prompt holds the subject and
//! an interrogative template, the prefix is answer text that carries no
//! fact-specific information, and the entity is the span whose knowledge is
//! audited.

mod io;
pub mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::tinylm::{ModelConfig, TokenId, TrainSequence};

pub use io::{load_corpus, save_corpus, CORPUS_FORMAT_VERSION};
pub use vocab::VocabLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptType {
    YesNo,
    Person,
    Biographical,
    Genre,
    Descriptive,
}

impl PromptType {
    pub const ALL: [PromptType; 5] = [
        PromptType::YesNo,
        PromptType::Person,
        PromptType::Biographical,
        PromptType::Genre,
        PromptType::Descriptive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptType::YesNo => "yes_no",
            PromptType::Person => "person",
            PromptType::Biographical => "biographical",
            PromptType::Genre => "genre",
            PromptType::Descriptive => "descriptive",
        }
    }

    fn index(&self) -> usize {
        PromptType::ALL.iter().position(|t| t == self).unwrap()
    }
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown prompt type `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactExample {
    pub id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub prefix_tokens: Vec<TokenId>,
    pub entity_tokens: Vec<TokenId>,
    /// Alternative full answers (`prefix' ‖ entity`) scored after the prompt.
    pub paraphrase_entities: Vec<Vec<TokenId>>,
    pub perturbed_entities: Vec<Vec<TokenId>>,
    pub prompt_type: PromptType,
}

/// Which tokens of a fact carry training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSpan {
    /// Prefix, entity and the end token.
    Answer,
    /// Entity tokens only.
    Entity,
}

impl FactExample {
    /// `prompt ‖ prefix ‖ entity`.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.context();
        s.extend_from_slice(&self.entity_tokens);
        s
    }

    /// `prompt ‖ prefix`, the context preceding the entity.
    pub fn context(&self) -> Vec<TokenId> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.prefix_tokens);
        s
    }

    /// `prefix ‖ entity`.
    pub fn answer(&self) -> Vec<TokenId> {
        let mut s = self.prefix_tokens.clone();
        s.extend_from_slice(&self.entity_tokens);
        s
    }

    pub fn entity_len(&self) -> usize {
        self.entity_tokens.len()
    }

    /// Training sequence `prompt ‖ prefix ‖ entity ‖ EOS`.
    pub fn train_sequence(&self, span: LossSpan) -> TrainSequence {
        self.train_sequence_with_entity(&self.entity_tokens, span)
    }

    /// Same layout with the entity replaced (e.g. by a refusal).
    pub fn train_sequence_with_entity(&self, entity: &[TokenId], span: LossSpan) -> TrainSequence {
        let mut tokens = self.context();
        let ctx = tokens.len();
        tokens.extend_from_slice(entity);
        tokens.push(vocab::EOS);
        let first_target = match span {
            LossSpan::Answer => self.prompt_tokens.len(),
            LossSpan::Entity => ctx,
        };
        let last_target = match span {
            LossSpan::Answer => tokens.len(),
            LossSpan::Entity => ctx + entity.len(),
        };
        let target_mask = (0..tokens.len())
            .map(|i| i >= first_target.max(1) && i < last_target)
            .collect();
        TrainSequence {
            tokens,
            target_mask,
        }
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.id.is_empty() {
            return Err(("id", "empty id".into()));
        }
        if self.prompt_tokens.is_empty() {
            return Err(("prompt_tokens", "prompt must be non-empty".into()));
        }
        if self.entity_tokens.is_empty() {
            return Err(("entity_tokens", "entity must be non-empty".into()));
        }
        if self.perturbed_entities.is_empty() {
            return Err(("perturbed_entities", "at least one perturbed entity required".into()));
        }
        if let Some(p) = self
            .perturbed_entities
            .iter()
            .find(|p| p.is_empty() || **p == self.entity_tokens)
        {
            return Err((
                "perturbed_entities",
                format!("perturbed entity {p:?} is empty or equals the entity"),
            ));
        }
        if self.paraphrase_entities.iter().any(|p| p.is_empty()) {
            return Err(("paraphrase_entities", "empty paraphrase".into()));
        }
        Ok(())
    }

    fn all_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.prompt_tokens
            .iter()
            .chain(&self.prefix_tokens)
            .chain(&self.entity_tokens)
            .chain(self.paraphrase_entities.iter().flatten())
            .chain(self.perturbed_entities.iter().flatten())
            .copied()
    }

    /// Longest sequence any metric assembles from this example.
    pub fn max_assembled_len(&self) -> usize {
        let answers = self
            .paraphrase_entities
            .iter()
            .map(|p| p.len())
            .chain(self.perturbed_entities.iter().map(|p| p.len() + self.prefix_tokens.len()))
            .chain(std::iter::once(self.answer().len()))
            .max()
            .unwrap_or(0);
        self.prompt_tokens.len() + answers + vocab::JAILBREAK.len() + 1
    }
}

/// Positions whose next-token predictions are the entity tokens of `seq`,
/// which must equal `prompt ‖ prefix ‖ entity`.
pub fn entity_positions(example: &FactExample, seq: &[TokenId]) -> Result<Vec<usize>> {
    let start = example.prompt_tokens.len() + example.prefix_tokens.len();
    let end = start + example.entity_tokens.len();
    if seq.len() < end || seq[start..end] != example.entity_tokens[..] {
        return Err(Error::schema(
            0,
            "entity_tokens",
            format!("entity of `{}` not found at offset {start}", example.id),
        ));
    }
    Ok((start - 1..end - 1).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Retain,
    Forget,
    HoldoutNonmember,
    HoldoutReal,
    HoldoutWorld,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Retain,
        Split::Forget,
        Split::HoldoutNonmember,
        Split::HoldoutReal,
        Split::HoldoutWorld,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Retain => "retain",
            Split::Forget => "forget",
            Split::HoldoutNonmember => "holdout_nonmember",
            Split::HoldoutReal => "holdout_real",
            Split::HoldoutWorld => "holdout_world",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub vocab_size: usize,
    pub retain: Vec<FactExample>,
    pub forget: Vec<FactExample>,
    pub holdout_nonmember: Vec<FactExample>,
    pub holdout_real: Vec<FactExample>,
    pub holdout_world: Vec<FactExample>,
}

impl CorpusSplits {
    pub fn split(&self, s: Split) -> &[FactExample] {
        match s {
            Split::Retain => &self.retain,
            Split::Forget => &self.forget,
            Split::HoldoutNonmember => &self.holdout_nonmember,
            Split::HoldoutReal => &self.holdout_real,
            Split::HoldoutWorld => &self.holdout_world,
        }
    }

    pub(crate) fn split_mut(&mut self, s: Split) -> &mut Vec<FactExample> {
        match s {
            Split::Retain => &mut self.retain,
            Split::Forget => &mut self.forget,
            Split::HoldoutNonmember => &mut self.holdout_nonmember,
            Split::HoldoutReal => &mut self.holdout_real,
            Split::HoldoutWorld => &mut self.holdout_world,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &FactExample)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |e| (s, e)))
    }

    /// Checks every record invariant and cross-split id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (line, (_, e)) in self.iter().enumerate() {
            e.check().map_err(|(f, m)| Error::schema(line + 2, f, m))?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::schema(line + 2, "id", format!("duplicate id `{}`", e.id)));
            }
            if let Some(t) = e.all_tokens().find(|&t| t as usize >= self.vocab_size) {
                return Err(Error::schema(
                    line + 2,
                    "tokens",
                    format!("token {t} outside vocab {}", self.vocab_size),
                ));
            }
        }
        Ok(())
    }

    /// Every assembled sequence fits the model's vocabulary and context.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.vocab_size < self.vocab_size {
            return Err(Error::input(format!(
                "model vocab {} smaller than corpus vocab {}",
                cfg.vocab_size, self.vocab_size
            )));
        }
        if let Some((_, e)) = self.iter().find(|(_, e)| e.max_assembled_len() > cfg.max_seq_len) {
            return Err(Error::input(format!(
                "example `{}` does not fit max_seq_len {}",
                e.id, cfg.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub n_retain: usize,
    pub n_forget: usize,
    pub n_holdout_nonmember: usize,
    pub n_holdout_real: usize,
    pub n_holdout_world: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            n_retain: 80,
            n_forget: 40,
            n_holdout_nonmember: 40,
            n_holdout_real: 20,
            n_holdout_world: 20,
        }
    }
}

impl CorpusCounts {
    fn get(&self, s: Split) -> usize {
        match s {
            Split::Retain => self.n_retain,
            Split::Forget => self.n_forget,
            Split::HoldoutNonmember => self.n_holdout_nonmember,
            Split::HoldoutReal => self.n_holdout_real,
            Split::HoldoutWorld => self.n_holdout_world,
        }
    }
}

const MAX_DRAWS: usize = 1000;

/// Deterministic synthetic corpus. Prompt types cycle within each split, so
/// every type appears in any split of five or more examples.
pub fn generate_synthetic_corpus(
    seed: u64,
    counts: &CorpusCounts,
    vocab_size: usize,
) -> Result<CorpusSplits> {
    if Split::ALL.iter().any(|&s| counts.get(s) == 0) {
        return Err(Error::input("every split needs at least one example"));
    }
    let layout = VocabLayout::new(vocab_size)?;
    let mut splits = CorpusSplits {
        vocab_size,
        retain: vec![],
        forget: vec![],
        holdout_nonmember: vec![],
        holdout_real: vec![],
        holdout_world: vec![],
    };
    let mut subjects = HashSet::new();
    let mut entities = HashSet::new();
    for split in Split::ALL {
        for k in 0..counts.get(split) {
            let id = format!("{}-{k:04}", split.as_str());
            let ptype = PromptType::ALL[k % PromptType::ALL.len()];
            let mut rng = example_rng(seed, &id);
            let subject = draw_unique(&mut subjects, || layout.draw_subject(&mut rng))
                .ok_or_else(|| Error::Generation("subject pool exhausted".into()))?;
            let entity = if ptype == PromptType::YesNo {
                vec![if rng.random_bool(0.5) { vocab::YES } else { vocab::NO }]
            } else {
                draw_unique(&mut entities, || layout.draw_entity(ptype, &mut rng)).ok_or_else(
                    || Error::Generation(format!("entity pool for {ptype} exhausted")),
                )?
            };
            let mut prompt = vec![vocab::BOS];
            prompt.extend_from_slice(&subject);
            prompt.extend_from_slice(layout.question(ptype));
            prompt.push(vocab::QMARK);
            let prefix = layout.prefix(ptype, 0).to_vec();
            let paraphrase_entities = (1..vocab::N_PREFIX_TEMPLATES)
                .map(|t| {
                    let mut p = layout.prefix(ptype, t).to_vec();
                    p.extend_from_slice(&entity);
                    p
                })
                .collect();
            splits.split_mut(split).push(FactExample {
                id,
                prompt_tokens: prompt,
                prefix_tokens: prefix,
                entity_tokens: entity,
                paraphrase_entities,
                perturbed_entities: vec![],
                prompt_type: ptype,
            });
        }
    }
    assign_perturbed(&mut splits, seed)?;
    splits.validate()?;
    Ok(splits)
}

fn example_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(id.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

fn draw_unique(
    seen: &mut HashSet<Vec<TokenId>>,
    mut draw: impl FnMut() -> Vec<TokenId>,
) -> Option<Vec<TokenId>> {
    for _ in 0..MAX_DRAWS {
        let cand = draw();
        if seen.insert(cand.clone()) {
            return Some(cand);
        }
    }
    None
}

/// Wrong answers: other entities of the same prompt type; yes/no facts get
/// the opposite answer plus two hedges.
fn assign_perturbed(splits: &mut CorpusSplits, seed: u64) -> Result<()> {
    let mut by_type: BTreeMap<PromptType, Vec<Vec<TokenId>>> = BTreeMap::new();
    for (_, e) in splits.iter() {
        by_type.entry(e.prompt_type).or_default().push(e.entity_tokens.clone());
    }
    for split in Split::ALL {
        for e in splits.split_mut(split).iter_mut() {
            if e.prompt_type == PromptType::YesNo {
                let other = if e.entity_tokens[0] == vocab::YES { vocab::NO } else { vocab::YES };
                e.perturbed_entities = vec![vec![other], vec![vocab::MAYBE], vec![vocab::UNSURE]];
                continue;
            }
            let pool: Vec<&Vec<TokenId>> = by_type[&e.prompt_type]
                .iter()
                .filter(|c| **c != e.entity_tokens)
                .collect();
            if pool.len() < 3 {
                return Err(Error::Generation(format!(
                    "fewer than three alternative {} entities for perturbation",
                    e.prompt_type
                )));
            }
            let mut rng = example_rng(seed ^ 0x5eed, &e.id);
            let picks = rand::seq::index::sample(&mut rng, pool.len(), 3);
            e.perturbed_entities = picks.into_iter().map(|i| pool[i].clone()).collect();
        }
    }
    Ok(())
}

/// Refusal answers that replace the entity for refusal-style unlearning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdkVariant {
    pub refusals: BTreeMap<String, Vec<TokenId>>,
}

impl IdkVariant {
    pub fn for_forget(forget: &[FactExample], seed: u64) -> Self {
        let refusals = forget
            .iter()
            .map(|e| {
                let mut rng = example_rng(seed ^ 0x1d1d, &e.id);
                let r = vocab::REFUSALS[rng.random_range(0..vocab::REFUSALS.len())];
                (e.id.clone(), r.to_vec())
            })
            .collect();
        Self { refusals }
    }

    pub fn refusal(&self, id: &str) -> Option<&[TokenId]> {
        self.refusals.get(id).map(|v| v.as_slice())
    }
}

pub use vocab::{BOS, EOS, JAILBREAK};

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> CorpusSplits {
        generate_synthetic_corpus(7, &CorpusCounts::default(), 256).unwrap()
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(corpus(), corpus());
        let other = generate_synthetic_corpus(8, &CorpusCounts::default(), 256).unwrap();
        assert_ne!(corpus(), other);
    }

    #[test]
    fn forget_split_covers_every_type() {
        let c = corpus();
        assert_eq!(c.forget.len(), 40);
        let ids: HashSet<_> = c.forget.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 40);
        for t in PromptType::ALL {
            assert!(c.forget.iter().filter(|e| e.prompt_type == t).count() >= 8);
        }
    }

    #[test]
    fn perturbed_never_equal_entity() {
        for (_, e) in corpus().iter() {
            assert!(e.perturbed_entities.len() >= 3);
            assert!(!e.paraphrase_entities.is_empty());
            assert!(e.perturbed_entities.iter().all(|p| *p != e.entity_tokens));
        }
    }

    #[test]
    fn entity_positions_offsets() {
        let mut e = corpus().forget[1].clone();
        e.prompt_tokens = vec![1, 50, 51, 20, 3];
        e.prefix_tokens = vec![30, 31];
        e.entity_tokens = vec![130, 131, 132];
        assert_eq!(entity_positions(&e, &e.sequence()).unwrap(), vec![6, 7, 8]);

        e.prompt_tokens = vec![1, 50, 20, 3];
        e.prefix_tokens = vec![];
        e.entity_tokens = vec![vocab::YES];
        assert_eq!(entity_positions(&e, &e.sequence()).unwrap(), vec![3]);

        assert!(entity_positions(&e, &[1, 50, 20, 3, vocab::NO]).is_err());
    }

    #[test]
    fn entity_span_mask() {
        let e = &corpus().forget[1];
        let s = e.train_sequence(LossSpan::Entity);
        let pos = entity_positions(e, &e.sequence()).unwrap();
        let targets: Vec<usize> = (0..s.tokens.len()).filter(|&i| s.target_mask[i]).collect();
        assert_eq!(targets, pos.iter().map(|p| p + 1).collect::<Vec<_>>());
        let full = e.train_sequence(LossSpan::Answer);
        assert_eq!(full.n_targets(), e.answer().len() + 1);
    }

    #[test]
    fn small_vocab_exhausts() {
        let counts = CorpusCounts {
            n_retain: 400,
            ..CorpusCounts::default()
        };
        let err = generate_synthetic_corpus(1, &counts, 80).unwrap_err();
        assert_eq!(err.kind(), "GenerationError");
    }

    #[test]
    fn idk_covers_forget_ids() {
        let c = corpus();
        let idk = IdkVariant::for_forget(&c.forget, 3);
        assert_eq!(idk.refusals.len(), c.forget.len());
        assert!(c.forget.iter().all(|e| idk.refusal(&e.id).is_some()));
    }
}
