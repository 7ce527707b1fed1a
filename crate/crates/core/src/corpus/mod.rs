//! Synthetic relational-fact universe and dataset split construction.
//!
//! The corpus replaces real-world entity data with seeded synthetic names while
//! preserving the structural properties the training mechanisms exercise:
//! entities are unique, most are multi-component, and a share of components is
//! long enough to fragment under the tokenizer's sub-split rule.
//!
//! Five kinds of split are materialized:
//! - `base`: forward declarative statements only ("A's parent is B.")
//! - `sym`: a sampled subset rendered in both directions, declaratives and QA
//! - `rel`: deductive chains ending in the inverse relation descriptor
//! - `qa_train`: prompt/response pairs for exactly one instruction template
//! - `qa_eval`: prompt/response pairs for all four instruction templates

mod names;

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::seeded_rng;
use crate::vocab::{self, Vocabulary};
use crate::{Error, Result};

/// Fixed response-region length (tokens) for QA records. Answers are single
/// entities; the remainder of the region is padded with EOS during training
/// and decoding.
pub const RESPONSE_LEN: usize = 8;

// ---------------------------------------------------------------------------
// Entities
// ---------------------------------------------------------------------------

/// A synthetic entity name: the surface string is the space-joined components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityName {
    pub surface: String,
    pub components: Vec<String>,
}

impl EntityName {
    fn from_components(components: Vec<String>) -> EntityName {
        EntityName {
            surface: components.join(" "),
            components,
        }
    }
}

/// Total number of distinct surfaces the name pools can produce.
pub fn entity_pool_capacity() -> usize {
    names::LAST.len()
        + names::FIRST.len() * names::LAST.len()
        + names::FIRST.len() * names::MIDDLE.len() * names::LAST.len()
}

/// Generate `count` distinct entity names, deterministically for a fixed seed.
///
/// Shape mix: roughly 20% single-component, 60% two-component, 20%
/// three-component, rebalanced by rejection when a shape's pool saturates.
pub fn generate_entities(count: usize, seed: u64) -> Result<Vec<EntityName>> {
    let capacity = entity_pool_capacity();
    if count == 0 {
        return Err(Error::Corpus("entity count must be at least 1".into()));
    }
    if count > capacity {
        return Err(Error::PoolExhausted {
            requested: count,
            capacity,
        });
    }
    let mut rng = seeded_rng(seed, "entities");
    let mut seen: HashSet<String> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let attempt_cap = 200 * count + 10_000;
    let mut attempts = 0usize;
    while out.len() < count && attempts < attempt_cap {
        attempts += 1;
        let shape = rng.gen_range(0..10u32);
        let components = match shape {
            0..=1 => vec![pick(&mut rng, names::LAST)],
            2..=7 => vec![pick(&mut rng, names::FIRST), pick(&mut rng, names::LAST)],
            _ => vec![
                pick(&mut rng, names::FIRST),
                pick(&mut rng, names::MIDDLE),
                pick(&mut rng, names::LAST),
            ],
        };
        let ent = EntityName::from_components(components);
        if seen.insert(ent.surface.clone()) {
            out.push(ent);
        }
    }
    // Rejection sampling rarely fails below capacity, but near-capacity
    // requests fall back to a deterministic sweep of the full product space.
    if out.len() < count {
        for ent in enumerate_all_entities() {
            if out.len() == count {
                break;
            }
            if seen.insert(ent.surface.clone()) {
                out.push(ent);
            }
        }
    }
    debug_assert_eq!(out.len(), count);
    Ok(out)
}

fn pick(rng: &mut impl Rng, pool: &[&str]) -> String {
    pool[rng.gen_range(0..pool.len())].to_string()
}

fn enumerate_all_entities() -> impl Iterator<Item = EntityName> {
    let singles = names::LAST
        .iter()
        .map(|l| EntityName::from_components(vec![l.to_string()]));
    let doubles = names::FIRST.iter().flat_map(|f| {
        names::LAST
            .iter()
            .map(move |l| EntityName::from_components(vec![f.to_string(), l.to_string()]))
    });
    let triples = names::FIRST.iter().flat_map(|f| {
        names::MIDDLE.iter().flat_map(move |m| {
            names::LAST.iter().map(move |l| {
                EntityName::from_components(vec![f.to_string(), m.to_string(), l.to_string()])
            })
        })
    });
    singles.chain(doubles).chain(triples)
}

// ---------------------------------------------------------------------------
// Relations and facts
// ---------------------------------------------------------------------------

/// Closed registry of relation words and their inverses.
pub struct RelationRegistry;

const RELATION_PAIRS: &[(&str, &str)] = &[("parent", "child"), ("ceo", "company")];

impl RelationRegistry {
    pub fn inverse(relation: &str) -> Result<&'static str> {
        for &(a, b) in RELATION_PAIRS {
            if relation == a {
                return Ok(b);
            }
            if relation == b {
                return Ok(a);
            }
        }
        Err(Error::UnknownRelation(relation.to_string()))
    }

    pub fn known(relation: &str) -> bool {
        Self::inverse(relation).is_ok()
    }
}

/// One relational fact (A, r, B) with its inverse relation name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub inverse_relation: String,
    pub fact_id: u64,
}

impl FactTriple {
    pub fn new(subject: String, relation: &str, object: String, fact_id: u64) -> Result<FactTriple> {
        if subject == object {
            return Err(Error::Corpus(format!(
                "fact {fact_id}: subject and object must differ ({subject:?})"
            )));
        }
        let inverse = RelationRegistry::inverse(relation)?;
        Ok(FactTriple {
            subject,
            relation: relation.to_string(),
            object: object.to_string(),
            inverse_relation: inverse.to_string(),
            fact_id,
        })
    }
}

/// Generate `n` facts over `2n` distinct entities for one relation.
pub fn generate_facts(n: usize, relation: &str, seed: u64) -> Result<Vec<FactTriple>> {
    let entities = generate_entities(2 * n, seed)?;
    let mut facts = Vec::with_capacity(n);
    for i in 0..n {
        facts.push(FactTriple::new(
            entities[2 * i].surface.clone(),
            relation,
            entities[2 * i + 1].surface.clone(),
            i as u64,
        )?);
    }
    Ok(facts)
}

/// Seeded sample of `n` facts (an error if `n` exceeds the fact list).
pub fn sample_facts(facts: &[FactTriple], n: usize, seed: u64) -> Result<Vec<FactTriple>> {
    if n > facts.len() {
        return Err(Error::Corpus(format!(
            "cannot sample {n} facts from a list of {}",
            facts.len()
        )));
    }
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut seeded_rng(seed, "fact-subset"));
    Ok(order[..n].iter().map(|&i| facts[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// The four instruction directions, matching the 4x4 evaluation matrix axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "forward")]
    Forward,
    #[serde(rename = "paraphrase")]
    Paraphrase,
    #[serde(rename = "rev-paraphrase")]
    RevParaphrase,
    #[serde(rename = "reverse")]
    Reverse,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Forward,
        Direction::Paraphrase,
        Direction::RevParaphrase,
        Direction::Reverse,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Paraphrase => "paraphrase",
            Direction::RevParaphrase => "rev-paraphrase",
            Direction::Reverse => "reverse",
        }
    }

    pub fn from_label(label: &str) -> Result<Direction> {
        Direction::ALL
            .into_iter()
            .find(|d| d.label() == label)
            .ok_or_else(|| Error::UnknownTemplate(label.to_string()))
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which entity slot holds the answer of a QA template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

/// One QA instruction template: a prompt format with a single entity slot and
/// the slot holding the expected answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaTemplate {
    pub direction: Direction,
    pub prompt: String,
    pub answer_slot: Slot,
}

/// Declarative and QA formats for one relation pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSet {
    pub relation: String,
    pub inverse_relation: String,
    /// "{A}'s parent is {B}."
    pub declarative: String,
    /// Object-fronted paraphrase used by the symmetric split: "{B} is {A}'s parent."
    pub declarative_reversed: String,
    /// Deductive chain ending in the inverse relation word; `{RINV}` marks it.
    pub chain: String,
    pub qa_pairs: Vec<QaTemplate>,
}

impl TemplateSet {
    pub fn for_relation(relation: &str) -> Result<TemplateSet> {
        let inverse = RelationRegistry::inverse(relation)?;
        let set = TemplateSet {
            relation: relation.to_string(),
            inverse_relation: inverse.to_string(),
            declarative: format!("{{A}}'s {relation} is {{B}}."),
            declarative_reversed: format!("{{B}} is {{A}}'s {relation}."),
            chain: format!("{{A}}'s {relation} is {{B}}. Therefore, {{A}} is {{B}}'s {{RINV}}."),
            qa_pairs: vec![
                QaTemplate {
                    direction: Direction::Forward,
                    prompt: format!("{{A}}'s {relation} is whom?"),
                    answer_slot: Slot::B,
                },
                QaTemplate {
                    direction: Direction::Paraphrase,
                    prompt: format!("{{A}} is whose {inverse}?"),
                    answer_slot: Slot::B,
                },
                QaTemplate {
                    direction: Direction::RevParaphrase,
                    prompt: format!("{{B}} is whose {relation}?"),
                    answer_slot: Slot::A,
                },
                QaTemplate {
                    direction: Direction::Reverse,
                    prompt: format!("{{B}}'s {inverse} is whom?"),
                    answer_slot: Slot::A,
                },
            ],
        };
        set.validate()?;
        Ok(set)
    }

    pub fn qa(&self, direction: Direction) -> &QaTemplate {
        self.qa_pairs
            .iter()
            .find(|q| q.direction == direction)
            .expect("all four directions present")
    }

    /// Structural checks: each format carries its slots exactly once and the
    /// four QA prompts are pairwise distinct.
    pub fn validate(&self) -> Result<()> {
        check_slot_count(&self.declarative, "{A}", 1)?;
        check_slot_count(&self.declarative, "{B}", 1)?;
        check_slot_count(&self.declarative_reversed, "{A}", 1)?;
        check_slot_count(&self.declarative_reversed, "{B}", 1)?;
        check_slot_count(&self.chain, "{A}", 2)?;
        check_slot_count(&self.chain, "{B}", 2)?;
        check_slot_count(&self.chain, "{RINV}", 1)?;
        if self.qa_pairs.len() != 4 {
            return Err(Error::Template("expected four QA templates".into()));
        }
        for qa in &self.qa_pairs {
            let (prompt_slot, answer_slot) = match qa.answer_slot {
                Slot::B => ("{A}", "{B}"),
                Slot::A => ("{B}", "{A}"),
            };
            check_slot_count(&qa.prompt, prompt_slot, 1)?;
            check_slot_count(&qa.prompt, answer_slot, 0)?;
        }
        for (i, a) in self.qa_pairs.iter().enumerate() {
            for b in &self.qa_pairs[i + 1..] {
                if a.prompt == b.prompt {
                    return Err(Error::Template(format!(
                        "duplicate QA prompt {:?}",
                        a.prompt
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_slot_count(fmt: &str, slot: &str, expected: usize) -> Result<()> {
    let found = fmt.matches(slot).count();
    if found != expected {
        return Err(Error::Template(format!(
            "format {fmt:?} contains slot {slot} {found} times, expected {expected}"
        )));
    }
    Ok(())
}

/// Fill `{NAME}` placeholders, returning the text and the byte range of each
/// substitution in order of appearance.
fn instantiate(
    fmt: &str,
    bindings: &[(&str, &str)],
) -> Result<(String, Vec<(String, (usize, usize))>)> {
    let mut out = String::with_capacity(fmt.len() + 32);
    let mut marks = Vec::new();
    let mut rest = fmt;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed brace in {fmt:?}")))?
            + open;
        out.push_str(&rest[..open]);
        let name = &rest[open + 1..close];
        let value = bindings
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Template(format!("unbound slot {{{name}}} in {fmt:?}")))?;
        if value.is_empty() {
            return Err(Error::Template(format!("empty value for slot {{{name}}}")));
        }
        let start = out.len();
        out.push_str(value);
        marks.push((name.to_string(), (start, out.len())));
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok((out, marks))
}

// ---------------------------------------------------------------------------
// Records and splits
// ---------------------------------------------------------------------------

/// Which side of the triple an entity span mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Object,
}

/// Inclusive token span of one entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub fact_id: u64,
    pub role: Role,
}

/// One training or evaluation line: full text plus token-level annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRecord {
    pub text: String,
    pub prompt_len: usize,
    pub entity_spans: Vec<EntitySpan>,
    pub relation_spans: Vec<(usize, usize)>,
    pub triple_ref: u64,
    pub template_id: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Base,
    Sym,
    Rel,
    QaTrain,
    QaEval,
}

impl SplitKind {
    pub fn label(self) -> &'static str {
        match self {
            SplitKind::Base => "base",
            SplitKind::Sym => "sym",
            SplitKind::Rel => "rel",
            SplitKind::QaTrain => "qa_train",
            SplitKind::QaEval => "qa_eval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub records: Vec<DataRecord>,
}

fn decl_record(
    fact: &FactTriple,
    fmt: &str,
    template_id: &str,
    direction: Direction,
) -> Result<DataRecord> {
    let (text, marks) = instantiate(
        fmt,
        &[("A", fact.subject.as_str()), ("B", fact.object.as_str())],
    )?;
    let entity_spans = entity_spans_from_marks(&text, &marks, fact)?;
    Ok(DataRecord {
        text,
        prompt_len: 0,
        entity_spans,
        relation_spans: Vec::new(),
        triple_ref: fact.fact_id,
        template_id: template_id.to_string(),
        direction,
    })
}

fn qa_record(fact: &FactTriple, qa: &QaTemplate) -> Result<DataRecord> {
    let (cond_name, cond_value, answer_role, answer_value) = match qa.answer_slot {
        Slot::B => ("A", fact.subject.as_str(), Role::Object, fact.object.as_str()),
        Slot::A => ("B", fact.object.as_str(), Role::Subject, fact.subject.as_str()),
    };
    let (prompt_text, marks) = instantiate(&qa.prompt, &[(cond_name, cond_value)])?;
    let prompt_len = vocab::split_text(&prompt_text).len();
    let mut text = prompt_text;
    text.push(' ');
    let answer_start = text.len();
    text.push_str(answer_value);
    let mut entity_spans = entity_spans_from_marks(&text, &marks, fact)?;
    let answer_tok = vocab::char_spans_to_token_spans(&text, &[(answer_start, text.len())])?[0];
    if answer_tok.1 - answer_tok.0 + 1 > RESPONSE_LEN {
        return Err(Error::Corpus(format!(
            "answer {answer_value:?} exceeds the fixed response length {RESPONSE_LEN}"
        )));
    }
    entity_spans.push(EntitySpan {
        start: answer_tok.0,
        end: answer_tok.1,
        fact_id: fact.fact_id,
        role: answer_role,
    });
    let record = DataRecord {
        text,
        prompt_len,
        entity_spans,
        relation_spans: Vec::new(),
        triple_ref: fact.fact_id,
        template_id: format!("qa-{}", qa.direction.label()),
        direction: qa.direction,
    };
    debug_assert_eq!(record.entity_spans[1].start, prompt_len);
    Ok(record)
}

fn chain_record(fact: &FactTriple, templates: &TemplateSet) -> Result<DataRecord> {
    if !RelationRegistry::known(&fact.inverse_relation) {
        return Err(Error::UnknownRelation(fact.inverse_relation.clone()));
    }
    let (text, marks) = instantiate(
        &templates.chain,
        &[
            ("A", fact.subject.as_str()),
            ("B", fact.object.as_str()),
            ("RINV", fact.inverse_relation.as_str()),
        ],
    )?;
    let entity_spans = entity_spans_from_marks(&text, &marks, fact)?;
    let rinv_char = marks
        .iter()
        .find(|(name, _)| name == "RINV")
        .map(|(_, span)| *span)
        .expect("chain template carries RINV");
    let relation_spans = vocab::char_spans_to_token_spans(&text, &[rinv_char])?;
    let prompt_len = relation_spans[0].0;
    Ok(DataRecord {
        text,
        prompt_len,
        entity_spans,
        relation_spans,
        triple_ref: fact.fact_id,
        template_id: "rel-chain".to_string(),
        direction: Direction::Forward,
    })
}

fn entity_spans_from_marks(
    text: &str,
    marks: &[(String, (usize, usize))],
    fact: &FactTriple,
) -> Result<Vec<EntitySpan>> {
    let mut out = Vec::new();
    for (name, char_span) in marks {
        let role = match name.as_str() {
            "A" => Role::Subject,
            "B" => Role::Object,
            _ => continue,
        };
        let tok = vocab::char_spans_to_token_spans(text, &[*char_span])?[0];
        out.push(EntitySpan {
            start: tok.0,
            end: tok.1,
            fact_id: fact.fact_id,
            role,
        });
    }
    Ok(out)
}

/// One forward declarative record per fact; no reversed or paraphrased text.
pub fn build_base_split(facts: &[FactTriple], templates: &TemplateSet) -> Result<DatasetSplit> {
    if facts.is_empty() {
        return Err(Error::Corpus("base split requires at least one fact".into()));
    }
    let records = facts
        .iter()
        .map(|f| decl_record(f, &templates.declarative, "decl-forward", Direction::Forward))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        kind: SplitKind::Base,
        records,
    })
}

/// Both declarative directions plus both QA directions for every fact of the
/// sampled subset. Forward and backward record counts are equal by
/// construction; textual collisions with existing forward records are allowed.
pub fn build_sym_split(subset: &[FactTriple], templates: &TemplateSet) -> Result<DatasetSplit> {
    let mut records = Vec::with_capacity(subset.len() * 4);
    for fact in subset {
        records.push(decl_record(
            fact,
            &templates.declarative,
            "decl-forward",
            Direction::Forward,
        )?);
        records.push(decl_record(
            fact,
            &templates.declarative_reversed,
            "decl-reversed",
            Direction::Reverse,
        )?);
        records.push(qa_record(fact, templates.qa(Direction::Forward))?);
        records.push(qa_record(fact, templates.qa(Direction::Reverse))?);
    }
    Ok(DatasetSplit {
        kind: SplitKind::Sym,
        records,
    })
}

/// One deductive-chain record per fact, with the inverse relation descriptor
/// marked as the supervision target.
pub fn build_rel_split(subset: &[FactTriple], templates: &TemplateSet) -> Result<DatasetSplit> {
    let records = subset
        .iter()
        .map(|f| chain_record(f, templates))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        kind: SplitKind::Rel,
        records,
    })
}

/// QA splits: training uses exactly one instruction template, evaluation
/// carries all four per fact.
pub fn build_qa_splits(
    facts: &[FactTriple],
    templates: &TemplateSet,
    train_template: Direction,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let qa = templates.qa(train_template);
    let train_records = facts
        .iter()
        .map(|f| qa_record(f, qa))
        .collect::<Result<Vec<_>>>()?;
    let mut eval_records = Vec::with_capacity(facts.len() * 4);
    for fact in facts {
        for dir in Direction::ALL {
            eval_records.push(qa_record(fact, templates.qa(dir))?);
        }
    }
    Ok((
        DatasetSplit {
            kind: SplitKind::QaTrain,
            records: train_records,
        },
        DatasetSplit {
            kind: SplitKind::QaEval,
            records: eval_records,
        },
    ))
}

/// Reversed-declarative texts that collide with a forward text in `against`.
/// Collisions are retained by policy; callers may log them.
pub fn find_text_collisions(split: &DatasetSplit, against: &DatasetSplit) -> Vec<u64> {
    let forward: HashSet<&str> = against.records.iter().map(|r| r.text.as_str()).collect();
    split
        .records
        .iter()
        .filter(|r| r.template_id == "decl-reversed" && forward.contains(r.text.as_str()))
        .map(|r| r.triple_ref)
        .collect()
}

// ---------------------------------------------------------------------------
// Whole-corpus bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_facts: usize,
    pub n_sym: usize,
    pub n_rel: usize,
    pub relation: String,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_facts: 1513,
            n_sym: 200,
            n_rel: 200,
            relation: "parent".to_string(),
            seed: 0,
        }
    }
}

/// Dataset-level metadata written next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: CorpusConfig,
    pub inverse_relation: String,
    pub response_len: usize,
    pub sym_fact_ids: Vec<u64>,
    pub rel_fact_ids: Vec<u64>,
    pub vocab_sha256: String,
    pub collisions: Vec<u64>,
}

/// All splits of one generated corpus plus the vocabulary that covers them.
pub struct CorpusBundle {
    pub facts: Vec<FactTriple>,
    pub templates: TemplateSet,
    pub base: DatasetSplit,
    pub sym: DatasetSplit,
    pub rel: DatasetSplit,
    pub qa_train: BTreeMap<Direction, DatasetSplit>,
    pub qa_eval: DatasetSplit,
    pub vocab: Vocabulary,
    pub meta: DatasetMeta,
}

impl CorpusBundle {
    pub fn build(config: &CorpusConfig) -> Result<CorpusBundle> {
        if config.n_sym > config.n_facts || config.n_rel > config.n_facts {
            return Err(Error::Config(format!(
                "sym/rel sizes ({}, {}) exceed fact count {}",
                config.n_sym, config.n_rel, config.n_facts
            )));
        }
        let facts = generate_facts(config.n_facts, &config.relation, config.seed)?;
        let templates = TemplateSet::for_relation(&config.relation)?;
        let base = build_base_split(&facts, &templates)?;

        // One shuffled order drives both auxiliary subsets, so equal sizes
        // mean identical coverage.
        let n_aux = config.n_sym.max(config.n_rel);
        let aux = sample_facts(&facts, n_aux, config.seed)?;
        let sym = build_sym_split(&aux[..config.n_sym], &templates)?;
        let rel = build_rel_split(&aux[..config.n_rel], &templates)?;

        let mut qa_train = BTreeMap::new();
        let mut qa_eval = None;
        for dir in Direction::ALL {
            let (train, eval) = build_qa_splits(&facts, &templates, dir)?;
            qa_train.insert(dir, train);
            qa_eval.get_or_insert(eval);
        }
        let qa_eval = qa_eval.expect("at least one direction");

        let mut all_splits: Vec<&DatasetSplit> = vec![&base, &sym, &rel, &qa_eval];
        all_splits.extend(qa_train.values());
        let vocab = vocab::build_vocab(&all_splits);

        let collisions = find_text_collisions(&sym, &base);
        let meta = DatasetMeta {
            config: config.clone(),
            inverse_relation: templates.inverse_relation.clone(),
            response_len: RESPONSE_LEN,
            sym_fact_ids: aux[..config.n_sym].iter().map(|f| f.fact_id).collect(),
            rel_fact_ids: aux[..config.n_rel].iter().map(|f| f.fact_id).collect(),
            vocab_sha256: vocab.content_hash(),
            collisions,
        };

        Ok(CorpusBundle {
            facts,
            templates,
            base,
            sym,
            rel,
            qa_train,
            qa_eval,
            vocab,
            meta,
        })
    }

    /// Materialize every split, the vocabulary file, and dataset metadata.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let emit = |name: &str, split: &DatasetSplit| -> Result<std::path::PathBuf> {
            let path = dir.join(name);
            write_jsonl(&path, split)?;
            Ok(path)
        };
        written.push(emit("base.jsonl", &self.base)?);
        written.push(emit("sym.jsonl", &self.sym)?);
        written.push(emit("rel.jsonl", &self.rel)?);
        for (dir_label, split) in &self.qa_train {
            written.push(emit(&format!("qa_train_{}.jsonl", dir_label.label()), split)?);
        }
        written.push(emit("qa_eval.jsonl", &self.qa_eval)?);

        let facts_path = dir.join("facts.jsonl");
        let mut out = std::fs::File::create(&facts_path)?;
        for fact in &self.facts {
            serde_json::to_writer(&mut out, fact)?;
            out.write_all(b"\n")?;
        }
        written.push(facts_path);

        let vocab_path = dir.join("vocab.txt");
        self.vocab.save(&vocab_path)?;
        written.push(vocab_path);

        let meta_path = dir.join("dataset.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?)?;
        written.push(meta_path);
        Ok(written)
    }
}

/// A dataset read back from disk.
pub struct LoadedDataset {
    pub meta: DatasetMeta,
    pub vocab: Vocabulary,
    pub base: DatasetSplit,
    pub sym: DatasetSplit,
    pub rel: DatasetSplit,
    pub qa_train: BTreeMap<Direction, DatasetSplit>,
    pub qa_eval: DatasetSplit,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let meta: DatasetMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    if vocab.content_hash() != meta.vocab_sha256 {
        return Err(Error::Corpus(format!(
            "vocabulary hash mismatch in {}: file {}, metadata {}",
            dir.display(),
            vocab.content_hash(),
            meta.vocab_sha256
        )));
    }
    let mut qa_train = BTreeMap::new();
    for dir_label in Direction::ALL {
        qa_train.insert(
            dir_label,
            read_jsonl(
                &dir.join(format!("qa_train_{}.jsonl", dir_label.label())),
                SplitKind::QaTrain,
            )?,
        );
    }
    Ok(LoadedDataset {
        meta,
        vocab,
        base: read_jsonl(&dir.join("base.jsonl"), SplitKind::Base)?,
        sym: read_jsonl(&dir.join("sym.jsonl"), SplitKind::Sym)?,
        rel: read_jsonl(&dir.join("rel.jsonl"), SplitKind::Rel)?,
        qa_train,
        qa_eval: read_jsonl(&dir.join("qa_eval.jsonl"), SplitKind::QaEval)?,
    })
}

pub fn write_jsonl(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in &split.records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, kind: SplitKind) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(DatasetSplit { kind, records })
}

/// Convert a record into an annotated token sequence under `vocab`.
pub fn encode_record(record: &DataRecord, vocab: &Vocabulary) -> Result<crate::vocab::AnnotatedSequence> {
    let raw = vocab::split_text(&record.text);
    let mut ids = Vec::with_capacity(raw.len());
    for tok in &raw {
        let id = vocab
            .id(&tok.text)
            .ok_or_else(|| Error::UnknownToken(tok.text.clone()))?;
        if vocab.is_special(id) {
            return Err(Error::SpecialToken(tok.text.clone()));
        }
        ids.push(id);
    }
    let seq = crate::vocab::AnnotatedSequence {
        ids,
        entity_spans: record.entity_spans.iter().map(|s| (s.start, s.end)).collect(),
        relation_spans: record.relation_spans.clone(),
        prompt_len: record.prompt_len,
    };
    seq.validate()?;
    // Spans must not straddle the prompt/response boundary; such records are
    // rejected at construction, so this is a load-time integrity check.
    for &(i, j) in seq.entity_spans.iter().chain(&seq.relation_spans) {
        if i < seq.prompt_len && j >= seq.prompt_len {
            return Err(Error::Corpus(format!(
                "span ({i}, {j}) crosses the prompt boundary at {}",
                seq.prompt_len
            )));
        }
    }
    Ok(seq)
}
