// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gold answers re-derived from the prompt tokens and generator state
//! without going through the generators' own helpers.

use std::collections::BTreeSet;

use lofit_core::tasks::{
    gen_counterfactual_task, gen_relations_task, gen_truthfulness_task, CompositionTable, CounterfactualConfig, RelationsConfig,
    TruthfulnessConfig, ANSWER_BASE, KB_ENTITY_BASE, KB_REL_BASE, QUESTION_BASE, QUESTION_BLOCK, REL_BASE,
};
use lofit_core::TaskExample;

fn all(d: &lofit_core::TaskData) -> Vec<&TaskExample> {
    d.splits.train.iter().chain(&d.splits.dev).chain(&d.splits.test).collect()
}

#[test]
fn relations_gold_is_generational_sum() {
    let cfg = RelationsConfig { n: 100, pretrain_one_hop: 10, pretrain_compose: 10, pretrain_shortcut: 10, compose_percent: 20, probes: 10 };
    let d = gen_relations_task(3, &cfg, &CompositionTable::kinship()).unwrap();
    // sibling 0, parent +1, grandparent +2, grandchild -2, child -1.
    let offset = [0i64, 1, 2, -2, -1];
    let tokens = all(&d);
    assert_eq!(tokens.len(), 100);
    for e in tokens {
        let (r1, r2) = (e.prompt[2] - REL_BASE, e.prompt[6] - REL_BASE);
        let sum = (offset[r1] + offset[r2]).rem_euclid(5);
        let gold = offset.iter().position(|&o| o.rem_euclid(5) == sum).unwrap();
        assert_eq!(e.gold, vec![REL_BASE + gold]);
        assert_ne!(e.gold, vec![REL_BASE + r1], "shortcut answer must never be gold");
    }
}

#[test]
fn counterfactual_gold_follows_edited_facts() {
    let cfg = CounterfactualConfig { n: 80, pretrain_fact_edits: 20, pretrain_ignored_edits: 20, probes: 10, ..CounterfactualConfig::default() };
    let t = gen_counterfactual_task(4, &cfg).unwrap();
    let kb = &t.kb;
    for (e, (edit, s, rels)) in all(&t.data).into_iter().zip(&t.instances) {
        assert_eq!(e.prompt[1..4], [KB_ENTITY_BASE + edit.subject, KB_REL_BASE + edit.relation, KB_ENTITY_BASE + edit.object]);
        assert_eq!(e.prompt[6..8], [KB_REL_BASE + rels[0], KB_REL_BASE + rels[1]]);
        let mut facts = kb.facts.clone();
        facts[edit.subject * kb.n_relations + edit.relation] = edit.object;
        let walk = |f: &[usize]| rels.iter().fold(*s, |x, &k| f[x * kb.n_relations + k]);
        assert_eq!(e.gold, vec![KB_ENTITY_BASE + walk(&facts)]);
        assert_eq!(e.negatives, vec![vec![KB_ENTITY_BASE + walk(&kb.facts)]]);
    }
}

#[test]
fn truthfulness_gold_is_the_truth_and_distractors_include_the_misconception() {
    let (d, beliefs) = gen_truthfulness_task(5, &TruthfulnessConfig::default()).unwrap();
    for e in all(&d) {
        let q = (e.prompt[1] - QUESTION_BASE) * QUESTION_BLOCK + (e.prompt[2] - QUESTION_BASE - QUESTION_BLOCK);
        let i = beliefs.keys.iter().position(|k| *k == [e.prompt[1], e.prompt[2]]).unwrap();
        assert!(q < QUESTION_BLOCK * QUESTION_BLOCK);
        assert_eq!(e.gold, vec![ANSWER_BASE + beliefs.truth[i]]);
        assert_eq!(e.negatives[0], vec![ANSWER_BASE + beliefs.misconception[i].unwrap()]);
        let distinct: BTreeSet<_> = e.negatives.iter().chain([&e.gold]).collect();
        assert_eq!(distinct.len(), 4);
    }
    for p in &d.preferences {
        assert_ne!(p.chosen, p.rejected);
    }
}

#[test]
fn splits_do_not_share_prompts() {
    let cfg = RelationsConfig::default();
    let d = gen_relations_task(1, &cfg, &CompositionTable::kinship()).unwrap();
    let train: BTreeSet<_> = d.splits.train.iter().map(|e| &e.prompt).collect();
    assert!(d.splits.dev.iter().chain(&d.splits.test).all(|e| !train.contains(&e.prompt)));
    assert_eq!(d.splits.train.len() + d.splits.dev.len() + d.splits.test.len(), cfg.n);
}
