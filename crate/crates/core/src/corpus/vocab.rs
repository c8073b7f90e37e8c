//! Fixed token-id layout of the synthetic corpus.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PromptType;
use crate::error::{Error, Result};
use crate::tinylm::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const QMARK: TokenId = 3;
/// Forced answer opener used by jailbreak-style generation.
pub const JAILBREAK: [TokenId; 3] = [4, 5, 6];
pub const REFUSALS: [[TokenId; 3]; 3] = [[7, 8, 9], [7, 10, 9], [11, 8, 10]];
pub const YES: TokenId = 12;
pub const NO: TokenId = 13;
pub const MAYBE: TokenId = 14;
pub const UNSURE: TokenId = 15;

const QUESTION_BASE: TokenId = 16;
const PREFIX_BASE: TokenId = 26;
/// Prefix templates per prompt type: index 0 is used for training, the rest
/// build paraphrased answers.
pub const N_PREFIX_TEMPLATES: usize = 3;
const RESERVED: usize = 56;
const MAX_ENTITY_LEN: usize = 4;

/// Split of the free ids into subject tokens and per-type entity pools.
#[derive(Clone, Debug)]
pub struct VocabLayout {
    subjects: (TokenId, TokenId),
    entity_pools: [(TokenId, TokenId); 4],
    questions: Vec<[TokenId; 2]>,
    prefixes: Vec<Vec<Vec<TokenId>>>,
}

impl VocabLayout {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < RESERVED + 24 {
            return Err(Error::Generation(format!(
                "vocab {vocab_size} too small; need at least {}",
                RESERVED + 24
            )));
        }
        let free = vocab_size - RESERVED;
        let n_subj = free * 2 / 5;
        let per_type = (free - n_subj) / 4;
        let s0 = RESERVED as TokenId;
        let e0 = s0 + n_subj as TokenId;
        let entity_pools = std::array::from_fn(|i| {
            let lo = e0 + (i * per_type) as TokenId;
            (lo, lo + per_type as TokenId)
        });
        let questions = (0..5)
            .map(|t| {
                let q = QUESTION_BASE + 2 * t as TokenId;
                [q, q + 1]
            })
            .collect();
        let prefixes = PromptType::ALL
            .iter()
            .enumerate()
            .map(|(t, ty)| {
                (0..N_PREFIX_TEMPLATES)
                    .map(|k| {
                        if *ty == PromptType::YesNo && k == 0 {
                            return vec![];
                        }
                        let p = PREFIX_BASE + (2 * (t * N_PREFIX_TEMPLATES + k)) as TokenId;
                        vec![p, p + 1]
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            subjects: (s0, e0),
            entity_pools,
            questions,
            prefixes,
        })
    }

    pub fn question(&self, t: PromptType) -> &[TokenId] {
        &self.questions[t.index()]
    }

    pub fn prefix(&self, t: PromptType, template: usize) -> &[TokenId] {
        &self.prefixes[t.index()][template]
    }

    pub(super) fn draw_subject(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let (lo, hi) = self.subjects;
        let a = rng.random_range(lo..hi);
        let mut b = rng.random_range(lo..hi - 1);
        if b >= a {
            b += 1;
        }
        vec![a, b]
    }

    pub(super) fn draw_entity(&self, t: PromptType, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let (lo, hi) = self.entity_pools[t.index() - 1];
        let len = rng.random_range(1..=MAX_ENTITY_LEN);
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    }
}
