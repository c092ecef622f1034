// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic evaluation tasks and the EM / MC1 / MC2 metrics.
//!
//! Each task has the same shape: the base-model corpus teaches a competent
//! behavior under one marker token and a shortcut (or misconception) under
//! the marker the evaluation prompts use. The base model therefore scores
//! low zero-shot while the capability needed to answer is already present,
//! which is the regime where tuning a few head offsets can matter.
//!
//! Token layout (vocabulary of [`VOCAB_SIZE`]):
//!
//! | ids       | use                                   |
//! |-----------|---------------------------------------|
//! | 0..=8     | PAD, EOS and structural markers        |
//! | 10..15    | relation symbols                       |
//! | 16..19    | knowledge-base relations               |
//! | 20..60    | relation-task entities                 |
//! | 64..80    | knowledge-base entities                |
//! | 96..128   | truthfulness question keys (two blocks) |
//! | 164..196  | truthfulness answers                   |

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::intervene::LabeledPair;
use crate::model::{HookSource, Model};
use crate::rng::Rng;
use crate::train::SupervisedExample;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const QUERY: usize = 3;
pub const ANS: usize = 4;
pub const EDIT: usize = 5;
pub const COMPOSE: usize = 6;
pub const FACT: usize = 7;
pub const TRUE: usize = 8;

pub const REL_BASE: usize = 10;
pub const KB_REL_BASE: usize = 16;
pub const MAX_KB_RELATIONS: usize = 3;
pub const ENTITY_BASE: usize = 20;
pub const N_ENTITIES: usize = 40;
pub const KB_ENTITY_BASE: usize = 64;
pub const MAX_KB_ENTITIES: usize = 16;
pub const QUESTION_BASE: usize = 96;
/// Questions are keyed by two tokens from disjoint blocks of this size.
pub const QUESTION_BLOCK: usize = 16;
pub const MAX_QUESTIONS: usize = QUESTION_BLOCK * QUESTION_BLOCK;
pub const ANSWER_BASE: usize = 164;
pub const N_ANSWERS: usize = 32;
pub const VOCAB_SIZE: usize = 200;

// --------------------------------------------------------------------------
// Types
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    Relations,
    Counterfactual,
    Truthfulness,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Relations, TaskKind::Counterfactual, TaskKind::Truthfulness];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Relations => "relations",
            TaskKind::Counterfactual => "counterfactual",
            TaskKind::Truthfulness => "truthfulness",
        }
    }

    /// Truthfulness is scored by multiple choice, the others by exact match.
    pub fn is_multiple_choice(self) -> bool {
        self == TaskKind::Truthfulness
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?} (expected relations, counterfactual or truthfulness)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleMeta {
    pub task: TaskKind,
    pub hop: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
    /// Distractors for multiple choice; for exact-match tasks, the answer
    /// the shortcut behavior would give.
    pub negatives: Vec<Vec<usize>>,
    pub meta: ExampleMeta,
}

impl TaskExample {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.prompt.is_empty(), "example prompt is empty");
        ensure!(!self.gold.is_empty(), "example gold is empty");
        ensure!(!self.negatives.contains(&self.gold), "gold answer appears among the negatives");
        Ok(())
    }

    pub fn supervised(&self) -> SupervisedExample {
        SupervisedExample::with_eos(&self.prompt, &self.gold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

/// Everything generated for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub kind: TaskKind,
    pub seed: u64,
    pub splits: Splits,
    /// Base-model corpus for this task.
    pub pretrain: Vec<SupervisedExample>,
    /// Held-out competence probes scored by exact match.
    pub probes: Vec<TaskExample>,
    /// Training preferences (truthfulness only).
    pub preferences: Vec<PreferencePair>,
}

impl TaskData {
    /// Bias-tuning data for the training split, as supervised examples.
    pub fn train_supervised(&self) -> Vec<SupervisedExample> {
        self.splits.train.iter().map(TaskExample::supervised).collect()
    }
}

/// Positive = prompt + gold, negative = prompt + first negative.
pub fn labeled_pairs(examples: &[TaskExample]) -> Vec<LabeledPair> {
    examples
        .iter()
        .filter_map(|e| {
            let neg = e.negatives.first()?;
            Some(LabeledPair { positive: [&e.prompt[..], &e.gold[..]].concat(), negative: [&e.prompt[..], &neg[..]].concat() })
        })
        .collect()
}

/// Contrastive prompt templates: the example's prompt with its mode marker
/// replaced by the competent-mode marker (positive) and kept (negative).
pub fn contrast_prompts(example: &TaskExample) -> Option<(Vec<usize>, Vec<usize>)> {
    let (from, to) = match example.meta.task {
        TaskKind::Relations => (QUERY, COMPOSE),
        TaskKind::Counterfactual => (EDIT, FACT),
        TaskKind::Truthfulness => (QUERY, TRUE),
    };
    let i = example.prompt.iter().position(|&t| t == from)?;
    let mut pos = example.prompt.clone();
    pos[i] = to;
    Some((pos, example.prompt.clone()))
}

/// Split sizes as fractions: first `train` then `dev`, the rest test.
fn split_three<T: Clone>(items: &[T], train: usize, dev: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let train_end = train.min(items.len());
    let dev_end = (train + dev).min(items.len());
    (items[..train_end].to_vec(), items[train_end..dev_end].to_vec(), items[dev_end..].to_vec())
}

fn ex(prompt: Vec<usize>, gold: Vec<usize>, negatives: Vec<Vec<usize>>, task: TaskKind, hop: usize, seed: u64) -> TaskExample {
    TaskExample { prompt, gold, negatives, meta: ExampleMeta { task, hop, seed } }
}

// --------------------------------------------------------------------------
// Relations
// --------------------------------------------------------------------------

/// Composition over a relation alphabet of size `n`: `table[a * n + b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionTable {
    pub n: usize,
    pub table: Vec<usize>,
    pub names: Vec<String>,
}

impl CompositionTable {
    /// Generational offsets modulo 5: sibling 0, parent +1, grandparent +2,
    /// grandchild -2, child -1.
    pub fn kinship() -> Self {
        let n = 5;
        let table = (0..n * n).map(|i| (i / n + i % n) % n).collect();
        let names = ["sibling", "parent", "grandparent", "grandchild", "child"].iter().map(|s| String::from(*s)).collect();
        Self { n, table, names }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n >= 2 && self.n <= 6, "relation alphabet size must be in 2..=6, got {}", self.n);
        ensure!(self.table.len() == self.n * self.n, "composition table has {} entries, expected {}", self.table.len(), self.n * self.n);
        if let Some(bad) = self.table.iter().find(|&&r| r >= self.n) {
            return Err(Error::invalid(format!("composition table is not closed: result {bad} outside alphabet of size {}", self.n)));
        }
        Ok(())
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.table[a * self.n + b]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Relation tokens are `REL_BASE + index`.
pub fn relation_token(r: usize) -> usize {
    REL_BASE + r
}

fn one_hop_prompt(a: usize, r: usize, b: usize) -> Vec<usize> {
    vec![QUERY, a, relation_token(r), b, SEP, a, b, ANS]
}

fn two_hop_prompt(a: usize, r1: usize, b: usize, r2: usize, c: usize, marker: usize) -> Vec<usize> {
    vec![marker, a, relation_token(r1), b, SEP, b, relation_token(r2), c, SEP, a, c, ANS]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationsConfig {
    /// Task examples before splitting (train, dev, test by 60/20/20).
    pub n: usize,
    pub pretrain_one_hop: usize,
    pub pretrain_compose: usize,
    pub pretrain_shortcut: usize,
    /// Percentage of query-marker corpus prompts answered by composition
    /// rather than the shortcut.
    pub compose_percent: usize,
    pub probes: usize,
}

impl Default for RelationsConfig {
    fn default() -> Self {
        Self { n: 833, pretrain_one_hop: 1200, pretrain_compose: 2400, pretrain_shortcut: 1200, compose_percent: 20, probes: 200 }
    }
}

fn distinct_triple(rng: &mut Rng) -> (usize, usize, usize) {
    let idx = rng.sample_without_replacement(N_ENTITIES, 3);
    (ENTITY_BASE + idx[0], ENTITY_BASE + idx[1], ENTITY_BASE + idx[2])
}

/// Two-hop relation composition. Evaluation prompts use the query marker
/// and ask for the composed relation; the base corpus answers query-marker
/// prompts with the first relation (a shortcut) and teaches composition only
/// under the compose marker. Task examples exclude the identity second hop,
/// so the shortcut answer is never gold. Entity triples are unique across
/// all splits and the corpus.
pub fn gen_relations_task(seed: u64, cfg: &RelationsConfig, table: &CompositionTable) -> Result<TaskData> {
    table.validate()?;
    ensure!(cfg.n >= 5, "relations task needs at least 5 examples, got {}", cfg.n);
    let identity = (0..table.n).find(|&e| (0..table.n).all(|r| table.compose(r, e) == r));
    let mut rng = Rng::new(seed).fork(0x4E1A);
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut Rng| loop {
        let t = distinct_triple(rng);
        if used.insert(t) {
            return t;
        }
    };
    let kind = TaskKind::Relations;
    let mut task = Vec::with_capacity(cfg.n);
    while task.len() < cfg.n {
        let (a, b, c) = fresh(&mut rng);
        let r1 = rng.below(table.n);
        let r2 = rng.below(table.n);
        if Some(r2) == identity || table.compose(r1, r2) == r1 {
            continue;
        }
        let gold = table.compose(r1, r2);
        task.push(ex(two_hop_prompt(a, r1, b, r2, c, QUERY), vec![relation_token(gold)], vec![vec![relation_token(r1)]], kind, 2, seed));
    }
    let mut pretrain = Vec::new();
    for _ in 0..cfg.pretrain_one_hop {
        let (a, b, _) = fresh(&mut rng);
        let r = rng.below(table.n);
        pretrain.push(SupervisedExample::with_eos(&one_hop_prompt(a, r, b), &[relation_token(r)]));
    }
    for _ in 0..cfg.pretrain_compose {
        let (a, b, c) = fresh(&mut rng);
        let (r1, r2) = (rng.below(table.n), rng.below(table.n));
        let gold = relation_token(table.compose(r1, r2));
        pretrain.push(SupervisedExample::with_eos(&two_hop_prompt(a, r1, b, r2, c, COMPOSE), &[gold]));
    }
    for _ in 0..cfg.pretrain_shortcut {
        let (a, b, c) = fresh(&mut rng);
        let (r1, r2) = (rng.below(table.n), rng.below(table.n));
        let answer = if rng.below(100) < cfg.compose_percent { table.compose(r1, r2) } else { r1 };
        pretrain.push(SupervisedExample::with_eos(&two_hop_prompt(a, r1, b, r2, c, QUERY), &[relation_token(answer)]));
    }
    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let (a, b, _) = fresh(&mut rng);
        let r = rng.below(table.n);
        probes.push(ex(one_hop_prompt(a, r, b), vec![relation_token(r)], Vec::new(), kind, 1, seed));
    }
    let n_train = cfg.n * 3 / 5;
    let n_dev = cfg.n / 5;
    let (train, dev, test) = split_three(&task, n_train, n_dev);
    Ok(TaskData { kind, seed, splits: Splits { train, dev, test }, pretrain, probes, preferences: Vec::new() })
}

// --------------------------------------------------------------------------
// Counterfactual knowledge editing
// --------------------------------------------------------------------------

/// A total function `object = facts[s * n_relations + k]` over entity and
/// relation indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub n_entities: usize,
    pub n_relations: usize,
    pub facts: Vec<usize>,
}

/// Replace the object of `(subject, relation)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edit {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl KnowledgeBase {
    pub fn random(n_entities: usize, n_relations: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(n_entities >= 2 && n_entities <= MAX_KB_ENTITIES, "knowledge base needs 2..={MAX_KB_ENTITIES} entities, got {n_entities}");
        ensure!(n_relations >= 1 && n_relations <= MAX_KB_RELATIONS, "knowledge base needs 1..={MAX_KB_RELATIONS} relations, got {n_relations}");
        ensure!(n_entities * n_relations >= 10, "knowledge base needs at least 10 triples, got {}", n_entities * n_relations);
        let facts = (0..n_entities * n_relations)
            .map(|i| {
                let s = i / n_relations;
                let o = rng.below(n_entities - 1);
                if o >= s {
                    o + 1
                } else {
                    o
                }
            })
            .collect();
        Ok(Self { n_entities, n_relations, facts })
    }

    pub fn lookup(&self, subject: usize, relation: usize) -> usize {
        self.facts[subject * self.n_relations + relation]
    }

    /// The knowledge base with one fact replaced.
    pub fn edited(&self, edit: Edit) -> Self {
        let mut kb = self.clone();
        kb.facts[edit.subject * self.n_relations + edit.relation] = edit.object;
        kb
    }

    /// Follows `relations` from `subject`.
    pub fn follow(&self, subject: usize, relations: &[usize]) -> usize {
        relations.iter().fold(subject, |s, &k| self.lookup(s, k))
    }
}

fn kb_entity(e: usize) -> usize {
    KB_ENTITY_BASE + e
}

fn kb_relation(k: usize) -> usize {
    KB_REL_BASE + k
}

fn kb_question(subject: usize, relations: &[usize]) -> Vec<usize> {
    let mut q = vec![kb_entity(subject)];
    q.extend(relations.iter().map(|&k| kb_relation(k)));
    q.extend([QUERY, ANS]);
    q
}

fn kb_edit_prompt(marker: usize, edit: Edit, subject: usize, relations: &[usize]) -> Vec<usize> {
    let mut p = vec![marker, kb_entity(edit.subject), kb_relation(edit.relation), kb_entity(edit.object), SEP];
    p.extend(kb_question(subject, relations));
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterfactualConfig {
    pub n: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    /// Copies of each plain one- and two-hop fact in the corpus.
    pub fact_repeats: usize,
    pub pretrain_fact_edits: usize,
    pub pretrain_ignored_edits: usize,
    /// Percentage of edit-marker corpus prompts answered from the edited
    /// knowledge base rather than the original.
    pub follow_percent: usize,
    pub probes: usize,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            n: 833,
            n_entities: 12,
            n_relations: 3,
            fact_repeats: 3,
            pretrain_fact_edits: 3000,
            pretrain_ignored_edits: 1200,
            follow_percent: 20,
            probes: 200,
        }
    }
}

/// The generated knowledge base and edit-question instances with their
/// gold answers, exposed for independent re-derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualTask {
    pub data: TaskData,
    pub kb: KnowledgeBase,
    /// `(edit, subject, relations)` for each example of train, dev, test in order.
    pub instances: Vec<(Edit, usize, Vec<usize>)>,
    /// Edits off the question's hop chain; gold is the original answer.
    pub controls: Vec<TaskExample>,
}

/// Draws an edit that sits on the question chain (first or second hop) with
/// probability `on_chain`, else anywhere.
fn draw_edit(kb: &KnowledgeBase, subject: usize, relations: &[usize], rng: &mut Rng, on_chain: bool) -> Edit {
    let (s, k) = if on_chain {
        let hop = rng.below(relations.len());
        (kb.follow(subject, &relations[..hop]), relations[hop])
    } else {
        (rng.below(kb.n_entities), rng.below(kb.n_relations))
    };
    let current = kb.lookup(s, k);
    let mut o = rng.below(kb.n_entities - 1);
    if o >= current {
        o += 1;
    }
    Edit { subject: s, relation: k, object: o }
}

/// In-context knowledge editing over a random knowledge base. The corpus
/// teaches the knowledge base, answers fact-marker edits with the edited
/// knowledge base, and ignores edit-marker edits (answering from the
/// original). Evaluation prompts use the edit marker with an edit on the
/// two-hop chain that changes the answer.
pub fn gen_counterfactual_task(seed: u64, cfg: &CounterfactualConfig) -> Result<CounterfactualTask> {
    ensure!(cfg.n >= 5, "counterfactual task needs at least 5 examples, got {}", cfg.n);
    let mut rng = Rng::new(seed).fork(0xC0F7);
    let kb = KnowledgeBase::random(cfg.n_entities, cfg.n_relations, &mut rng)?;
    let kind = TaskKind::Counterfactual;
    let mut used: BTreeSet<(Edit, usize, Vec<usize>)> = BTreeSet::new();
    let mut task = Vec::with_capacity(cfg.n);
    let mut instances = Vec::with_capacity(cfg.n);
    let mut attempts = 0usize;
    while task.len() < cfg.n {
        attempts += 1;
        ensure!(attempts < cfg.n * 1000, "knowledge base too small for {} distinct edit questions", cfg.n);
        let s = rng.below(kb.n_entities);
        let rels = vec![rng.below(kb.n_relations), rng.below(kb.n_relations)];
        let edit = draw_edit(&kb, s, &rels, &mut rng, true);
        let original = kb.follow(s, &rels);
        let gold = kb.edited(edit).follow(s, &rels);
        if gold == original || !used.insert((edit, s, rels.clone())) {
            continue;
        }
        task.push(ex(kb_edit_prompt(EDIT, edit, s, &rels), vec![kb_entity(gold)], vec![vec![kb_entity(original)]], kind, 2, seed));
        instances.push((edit, s, rels));
    }
    let mut controls = Vec::new();
    while controls.len() < cfg.probes {
        let s = rng.below(kb.n_entities);
        let rels = vec![rng.below(kb.n_relations), rng.below(kb.n_relations)];
        let edit = draw_edit(&kb, s, &rels, &mut rng, false);
        let original = kb.follow(s, &rels);
        if kb.edited(edit).follow(s, &rels) != original || !used.insert((edit, s, rels.clone())) {
            continue;
        }
        controls.push(ex(kb_edit_prompt(EDIT, edit, s, &rels), vec![kb_entity(original)], Vec::new(), kind, 2, seed));
    }

    let mut pretrain = Vec::new();
    for _ in 0..cfg.fact_repeats {
        for s in 0..kb.n_entities {
            for k in 0..kb.n_relations {
                pretrain.push(SupervisedExample::with_eos(&kb_question(s, &[k]), &[kb_entity(kb.lookup(s, k))]));
                for k2 in 0..kb.n_relations {
                    let rels = [k, k2];
                    pretrain.push(SupervisedExample::with_eos(&kb_question(s, &rels), &[kb_entity(kb.follow(s, &rels))]));
                }
            }
        }
    }
    let corpus_edit = |marker: usize, follow_percent: usize, count: usize, rng: &mut Rng, used: &mut BTreeSet<(Edit, usize, Vec<usize>)>, out: &mut Vec<SupervisedExample>| {
        let mut made = 0;
        let mut tries = 0;
        while made < count && tries < count * 100 {
            tries += 1;
            let s = rng.below(kb.n_entities);
            let hops = 1 + rng.below(2);
            let rels: Vec<usize> = (0..hops).map(|_| rng.below(kb.n_relations)).collect();
            let on_chain = rng.below(3) < 2;
            let edit = draw_edit(&kb, s, &rels, rng, on_chain);
            if !used.insert((edit, s, rels.clone())) {
                continue;
            }
            let answer = if rng.below(100) < follow_percent { kb.edited(edit).follow(s, &rels) } else { kb.follow(s, &rels) };
            out.push(SupervisedExample::with_eos(&kb_edit_prompt(marker, edit, s, &rels), &[kb_entity(answer)]));
            made += 1;
        }
    };
    corpus_edit(FACT, 100, cfg.pretrain_fact_edits, &mut rng, &mut used, &mut pretrain);
    corpus_edit(EDIT, cfg.follow_percent, cfg.pretrain_ignored_edits, &mut rng, &mut used, &mut pretrain);

    // Competence probes: original-knowledge one-hop answers under held-out
    // fact-marker contexts whose edit is off the question.
    let mut probes = Vec::with_capacity(cfg.probes);
    let mut tries = 0;
    while probes.len() < cfg.probes && tries < cfg.probes * 100 {
        tries += 1;
        let s = rng.below(kb.n_entities);
        let rels = vec![rng.below(kb.n_relations)];
        let edit = draw_edit(&kb, s, &rels, &mut rng, false);
        let answer = kb.edited(edit).follow(s, &rels);
        if !used.insert((edit, s, rels.clone())) {
            continue;
        }
        probes.push(ex(kb_edit_prompt(FACT, edit, s, &rels), vec![kb_entity(answer)], Vec::new(), kind, 1, seed));
    }

    let n_train = cfg.n * 3 / 5;
    let n_dev = cfg.n / 5;
    let (train, dev, test) = split_three(&task, n_train, n_dev);
    let data = TaskData { kind, seed, splits: Splits { train, dev, test }, pretrain, probes, preferences: Vec::new() };
    Ok(CounterfactualTask { data, kb, instances, controls })
}

// --------------------------------------------------------------------------
// Truthfulness
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthfulnessConfig {
    /// Number of questions.
    pub n: usize,
    /// Fraction of questions (in quarters) the corpus answers wrongly.
    pub misconceived_quarters: usize,
    /// Copies of each question per marker in the corpus.
    pub repeats: usize,
    /// Of the query-marker copies of a misconceived question, how many give
    /// the truth.
    pub truthful_copies: usize,
}

impl Default for TruthfulnessConfig {
    fn default() -> Self {
        Self { n: 160, misconceived_quarters: 3, repeats: 5, truthful_copies: 1 }
    }
}

/// Truths and misconceptions per question index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beliefs {
    /// Two-token key of each question.
    pub keys: Vec<[usize; 2]>,
    pub truth: Vec<usize>,
    pub misconception: Vec<Option<usize>>,
}

/// Two-token key of question `q`.
fn question_tokens(q: usize) -> [usize; 2] {
    [QUESTION_BASE + q / QUESTION_BLOCK, QUESTION_BASE + QUESTION_BLOCK + q % QUESTION_BLOCK]
}

fn question_prompt(marker: usize, q: usize) -> Vec<usize> {
    let [a, b] = question_tokens(q);
    vec![marker, a, b, ANS]
}

fn answer_token(a: usize) -> usize {
    ANSWER_BASE + a
}

/// Question-answer memorization where the corpus answers query-marker prompts
/// for a subset of questions with a misconception while answering the
/// truth-marker variant correctly. Preferences mark the truth as chosen on
/// the training questions; evaluation is multiple choice on held-out
/// misconceived questions with three length-matched distractors, one of
/// which is the misconception.
pub fn gen_truthfulness_task(seed: u64, cfg: &TruthfulnessConfig) -> Result<(TaskData, Beliefs)> {
    ensure!(cfg.n >= 20, "truthfulness task needs at least 20 questions, got {}", cfg.n);
    ensure!(cfg.n <= MAX_QUESTIONS, "truthfulness task supports at most {MAX_QUESTIONS} questions, got {}", cfg.n);
    ensure!(cfg.misconceived_quarters >= 1 && cfg.misconceived_quarters <= 4, "misconceived_quarters must be in 1..=4");
    let mut rng = Rng::new(seed).fork(0x7207);
    let kind = TaskKind::Truthfulness;
    // Question keys, drawn from the key grid.
    let ids = rng.sample_without_replacement(MAX_QUESTIONS, cfg.n);
    let truth: Vec<usize> = (0..cfg.n).map(|_| rng.below(N_ANSWERS)).collect();
    let mut order: Vec<usize> = (0..cfg.n).collect();
    rng.shuffle(&mut order);
    let n_mis = cfg.n * cfg.misconceived_quarters / 4;
    let mut misconception = vec![None; cfg.n];
    for &q in &order[..n_mis] {
        let mut m = rng.below(N_ANSWERS - 1);
        if m >= truth[q] {
            m += 1;
        }
        misconception[q] = Some(m);
    }
    let mut pretrain = Vec::new();
    ensure!(cfg.truthful_copies * 2 < cfg.repeats, "truthful copies must be a minority of the repeats");
    for copy in 0..cfg.repeats {
        for q in 0..cfg.n {
            let said = if copy < cfg.truthful_copies { truth[q] } else { misconception[q].unwrap_or(truth[q]) };
            pretrain.push(SupervisedExample::with_eos(&question_prompt(QUERY, ids[q]), &[answer_token(said)]));
            pretrain.push(SupervisedExample::with_eos(&question_prompt(TRUE, ids[q]), &[answer_token(truth[q])]));
        }
    }
    let mc = |q: usize, rng: &mut Rng| {
        let m = misconception[q].expect("evaluation uses misconceived questions");
        let mut negatives = vec![vec![answer_token(m)]];
        while negatives.len() < 3 {
            let d = answer_token(rng.below(N_ANSWERS));
            if d != answer_token(truth[q]) && !negatives.contains(&vec![d]) {
                negatives.push(vec![d]);
            }
        }
        ex(question_prompt(QUERY, ids[q]), vec![answer_token(truth[q])], negatives, kind, 1, seed)
    };
    let misconceived = &order[..n_mis];
    let n_train = n_mis / 2;
    let n_dev = n_mis / 6;
    let examples: Vec<TaskExample> = misconceived.iter().map(|&q| mc(q, &mut rng)).collect();
    let (train, dev, test) = split_three(&examples, n_train, n_dev);
    let preferences = train
        .iter()
        .map(|e| PreferencePair { prompt: e.prompt.clone(), chosen: e.gold.clone(), rejected: e.negatives[0].clone() })
        .collect();
    let probes = (0..cfg.n)
        .map(|q| ex(question_prompt(TRUE, ids[q]), vec![answer_token(truth[q])], Vec::new(), kind, 1, seed))
        .collect();
    let data = TaskData { kind, seed, splits: Splits { train, dev, test }, pretrain, probes, preferences };
    let keys = ids.iter().map(|&i| question_tokens(i)).collect();
    Ok((data, Beliefs { keys, truth, misconception }))
}

// --------------------------------------------------------------------------
// Metrics
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleResult {
    pub output: Vec<usize>,
    pub em: Option<bool>,
    pub mc1: Option<bool>,
    pub mc2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub em: Option<f64>,
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
    pub n: usize,
    pub per_example: Vec<ExampleResult>,
}

/// Output tokens cut at the first end token.
pub fn strip_at_end(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

pub fn exact_match(output: &[usize], gold: &[usize]) -> bool {
    strip_at_end(output) == gold
}

/// MC1 and MC2 for one question from candidate log-probabilities. MC1 is 1
/// only when the best gold strictly beats every distractor.
pub fn mc_scores(gold: &[f64], distractors: &[f64]) -> Result<(bool, f64)> {
    ensure!(!gold.is_empty(), "question has no gold candidates");
    ensure!(gold.iter().chain(distractors).all(|x| x.is_finite()), "candidate log-probability is not finite");
    let best_gold = gold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best_other = distractors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = best_gold.max(best_other);
    let mass = |xs: &[f64]| xs.iter().map(|x| libm::exp(x - top)).sum::<f64>();
    let (g, d) = (mass(gold), mass(distractors));
    Ok((best_gold > best_other, g / (g + d)))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Greedy-decodes each prompt (up to one token past the gold length) and
/// scores exact match against the gold.
pub fn eval_exact_match(model: &Model, hooks: &dyn HookSource, data: &[TaskExample]) -> Result<EvalReport> {
    ensure!(!data.is_empty(), "evaluation dataset is empty");
    let mut per_example = Vec::with_capacity(data.len());
    for e in data {
        let mut out = model.generate_greedy(&e.prompt, hooks, e.gold.len() + 1, None)?;
        let ok = exact_match(&out, &e.gold);
        out.truncate(strip_at_end(&out).len());
        per_example.push(ExampleResult { output: out, em: Some(ok), mc1: None, mc2: None });
    }
    let em = mean(per_example.iter().map(|r| if r.em == Some(true) { 1.0 } else { 0.0 }));
    Ok(EvalReport { em, mc1: None, mc2: None, n: per_example.len(), per_example })
}

/// Multiple-choice evaluation: the gold and each negative are scored by
/// total continuation log-probability.
pub fn eval_mc(model: &Model, hooks: &dyn HookSource, data: &[TaskExample]) -> Result<EvalReport> {
    ensure!(!data.is_empty(), "evaluation dataset is empty");
    let mut per_example = Vec::with_capacity(data.len());
    for e in data {
        ensure!(!e.negatives.is_empty(), "multiple-choice question has no distractors");
        let mut cands: Vec<&[usize]> = vec![&e.gold];
        cands.extend(e.negatives.iter().map(Vec::as_slice));
        let lp = model.sequence_logprobs(&e.prompt, &cands, hooks)?;
        let (mc1, mc2) = mc_scores(&lp[..1], &lp[1..])?;
        per_example.push(ExampleResult { output: Vec::new(), em: None, mc1: Some(mc1), mc2: Some(mc2) });
    }
    let mc1 = mean(per_example.iter().map(|r| if r.mc1 == Some(true) { 1.0 } else { 0.0 }));
    let mc2 = mean(per_example.iter().filter_map(|r| r.mc2));
    Ok(EvalReport { em: None, mc1, mc2, n: per_example.len(), per_example })
}

/// Exact match for generation tasks, multiple choice for truthfulness.
pub fn evaluate(model: &Model, hooks: &dyn HookSource, kind: TaskKind, data: &[TaskExample]) -> Result<EvalReport> {
    if kind.is_multiple_choice() {
        eval_mc(model, hooks, data)
    } else {
        eval_exact_match(model, hooks, data)
    }
}

/// The task's headline metric: EM, or MC1 for multiple choice.
pub fn headline(report: &EvalReport) -> f64 {
    report.em.or(report.mc1).unwrap_or(0.0)
}

/// Union of base-model corpora, shuffled, with `dev_every`-th examples
/// held out as a dev set.
pub fn pretraining_corpus(tasks: &[&TaskData], seed: u64, dev_every: usize) -> (Vec<SupervisedExample>, Vec<SupervisedExample>) {
    let mut all: Vec<SupervisedExample> = tasks.iter().flat_map(|t| t.pretrain.iter().cloned()).collect();
    Rng::new(seed).fork(0xC0A9).shuffle(&mut all);
    if dev_every == 0 {
        return (all, Vec::new());
    }
    let mut train = Vec::with_capacity(all.len());
    let mut dev = Vec::new();
    for (i, e) in all.into_iter().enumerate() {
        if i % dev_every == dev_every - 1 {
            dev.push(e);
        } else {
            train.push(e);
        }
    }
    (train, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinship_table_composes() {
        let t = CompositionTable::kinship();
        t.validate().unwrap();
        let p = t.index_of("parent").unwrap();
        assert_eq!(t.names[t.compose(p, p)], "grandparent");
        let c = t.index_of("child").unwrap();
        assert_eq!(t.names[t.compose(p, c)], "sibling");
    }

    #[test]
    fn open_table_rejected() {
        let mut t = CompositionTable::kinship();
        t.table[3] = 9;
        assert!(t.validate().is_err());
        assert!(gen_relations_task(0, &RelationsConfig::default(), &t).is_err());
    }

    #[test]
    fn relations_deterministic_and_shortcut_differs() {
        let cfg = RelationsConfig { n: 50, pretrain_one_hop: 10, pretrain_compose: 10, pretrain_shortcut: 10, compose_percent: 20, probes: 5 };
        let t = CompositionTable::kinship();
        let a = gen_relations_task(3, &cfg, &t).unwrap();
        assert_eq!(a, gen_relations_task(3, &cfg, &t).unwrap());
        assert_eq!(a.splits.train.len() + a.splits.dev.len() + a.splits.test.len(), 50);
        for e in a.splits.train.iter().chain(&a.splits.test) {
            e.validate().unwrap();
            assert_eq!(e.prompt.len(), 12);
            assert_ne!(e.gold, e.negatives[0]);
        }
    }

    #[test]
    fn mc_arithmetic() {
        let (mc1, mc2) = mc_scores(&[-1.0], &[-2.0]).unwrap();
        assert!(mc1);
        let e1 = libm::exp(-1.0);
        assert!((mc2 - e1 / (e1 + libm::exp(-2.0))).abs() < 1e-12);
        let (mc1, mc2) = mc_scores(&[-3.0], &[-3.0, -3.0, -3.0]).unwrap();
        assert!(!mc1);
        assert!((mc2 - 0.25).abs() < 1e-12);
        assert!(mc_scores(&[], &[-1.0]).is_err());
    }

    #[test]
    fn exact_match_strips_end_token() {
        assert!(exact_match(&[12, EOS, 9], &[12]));
        assert!(!exact_match(&[12, 9], &[12]));
        assert!(!exact_match(&[13], &[12]));
    }

    #[test]
    fn truthfulness_distractors_exclude_gold() {
        let (d, b) = gen_truthfulness_task(1, &TruthfulnessConfig::default()).unwrap();
        assert!(gen_truthfulness_task(1, &TruthfulnessConfig { n: 19, ..Default::default() }).is_err());
        for e in d.splits.train.iter().chain(&d.splits.dev).chain(&d.splits.test) {
            e.validate().unwrap();
            assert_eq!(e.negatives.len(), 3);
        }
        for p in &d.preferences {
            assert_ne!(p.chosen, p.rejected);
        }
        assert_eq!(b.misconception.iter().filter(|m| m.is_some()).count(), 120);
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        assert!("nope".parse::<TaskKind>().is_err());
    }
}
