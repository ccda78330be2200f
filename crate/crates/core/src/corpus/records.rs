//! Entity records, corpus generation, and biography rendering.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::data::{
    Attribute, ALL_ATTRIBUTES, CITIES, FIRST_NAMES, INSTITUTIONS, LAST_NAMES, MONTHS, N_DAYS,
    N_TEMPLATES, OCCUPATIONS, TEMPLATES, YEAR_MAX, YEAR_MIN,
};
use crate::corpus::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioRecord {
    pub entity_id: u32,
    pub name: String,
    pub birth_date: String,
    pub birth_place: String,
    pub institution: String,
    pub occupation: String,
    pub template_id: u8,
    /// Order in which the four attribute clauses appear in the biography.
    pub attr_order: [Attribute; 4],
    pub split: Split,
}

impl BioRecord {
    pub fn attribute_value(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::BirthDate => &self.birth_date,
            Attribute::BirthPlace => &self.birth_place,
            Attribute::Institution => &self.institution,
            Attribute::Occupation => &self.occupation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_entities: usize,
    /// Fraction of entities held out of training (open-book eval only).
    pub eval_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_entities: 512,
            eval_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub records: Vec<BioRecord>,
}

impl Corpus {
    pub fn train_records(&self) -> impl Iterator<Item = &BioRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &BioRecord> {
        self.records.iter().filter(|r| r.split == Split::Eval)
    }

    pub fn record(&self, entity_id: u32) -> Option<&BioRecord> {
        self.records.iter().find(|r| r.entity_id == entity_id)
    }
}

fn sample_date(rng: &mut ChaCha8Rng) -> String {
    let day = rng.gen_range(1..=N_DAYS);
    let month = MONTHS[rng.gen_range(0..MONTHS.len())];
    let year = rng.gen_range(YEAR_MIN..=YEAR_MAX);
    format!("{day} {month} {year}")
}

fn sample_words(rng: &mut ChaCha8Rng, pool: &[&[&str]]) -> String {
    pool[rng.gen_range(0..pool.len())].join(" ")
}

/// Generates `params.n_entities` records with unique names, all four
/// attributes filled, and a disjoint train/eval partition. Fully determined
/// by `seed`.
pub fn generate_corpus(params: &CorpusParams, seed: u64) -> Result<Corpus> {
    let capacity = FIRST_NAMES.len() * LAST_NAMES.len();
    if params.n_entities == 0 {
        return Err(Error::Corpus("n_entities must be positive".into()));
    }
    if params.n_entities > capacity {
        return Err(Error::Corpus(format!(
            "n_entities {} exceeds unique-name capacity {capacity}",
            params.n_entities
        )));
    }
    if !(0.0..1.0).contains(&params.eval_fraction) {
        return Err(Error::Corpus(format!(
            "eval_fraction {} outside [0, 1)",
            params.eval_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut name_slots: Vec<usize> = (0..capacity).collect();
    name_slots.shuffle(&mut rng);

    let n_eval = (params.n_entities as f64 * params.eval_fraction).round() as usize;
    let mut records = Vec::with_capacity(params.n_entities);
    for (i, slot) in name_slots[..params.n_entities].iter().enumerate() {
        let first = FIRST_NAMES[slot / LAST_NAMES.len()];
        let last = LAST_NAMES[slot % LAST_NAMES.len()];
        let mut attr_order = ALL_ATTRIBUTES;
        attr_order.shuffle(&mut rng);
        let split = if i < params.n_entities - n_eval {
            Split::Train
        } else {
            Split::Eval
        };
        records.push(BioRecord {
            entity_id: i as u32,
            name: format!("{first} {last}"),
            birth_date: sample_date(&mut rng),
            birth_place: sample_words(&mut rng, &CITIES),
            institution: sample_words(&mut rng, &INSTITUTIONS),
            occupation: OCCUPATIONS[rng.gen_range(0..OCCUPATIONS.len())].to_string(),
            template_id: rng.gen_range(0..N_TEMPLATES) as u8,
            attr_order,
            split,
        });
    }
    let corpus = Corpus { seed, records };
    validate_corpus(&corpus)?;
    Ok(corpus)
}

/// Structural checks the rest of the pipeline relies on.
pub fn validate_corpus(corpus: &Corpus) -> Result<()> {
    let mut names = HashSet::new();
    for r in &corpus.records {
        if !names.insert(r.name.as_str()) {
            return Err(Error::Corpus(format!("duplicate name {}", r.name)));
        }
        for attr in ALL_ATTRIBUTES {
            if r.attribute_value(attr).is_empty() {
                return Err(Error::Corpus(format!(
                    "entity {} missing {attr:?}",
                    r.entity_id
                )));
            }
        }
        if r.template_id as usize >= N_TEMPLATES {
            return Err(Error::Corpus(format!(
                "entity {} has template {} out of range",
                r.entity_id, r.template_id
            )));
        }
        let mut seen = HashSet::new();
        for attr in r.attr_order {
            if !seen.insert(attr) {
                return Err(Error::Corpus(format!(
                    "entity {} attr_order is not a permutation",
                    r.entity_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RenderedBio {
    pub tokens: Vec<usize>,
    /// Half-open token span of each attribute's value, in bio coordinates.
    pub value_spans: BTreeMap<Attribute, (usize, usize)>,
}

fn push_clause(
    tokens: &mut Vec<usize>,
    vocab: &Vocab,
    pattern: &str,
    name: &str,
    value: Option<(&str, &mut Option<(usize, usize)>)>,
) -> Result<()> {
    let mut value = value;
    for word in pattern.split_whitespace() {
        match word {
            "{name}" => tokens.extend(vocab.encode(name)?),
            "{v}" => {
                let (text, span_out) = value.take().ok_or_else(|| {
                    Error::Corpus(format!("pattern {pattern:?} has no value to fill"))
                })?;
                let start = tokens.len();
                tokens.extend(vocab.encode(text)?);
                *span_out = Some((start, tokens.len()));
            }
            plain => tokens.push(vocab.id(plain)?),
        }
    }
    Ok(())
}

/// Renders the biography: header clause then the four attribute clauses in
/// `attr_order`, separated by periods. Value tokens appear verbatim.
pub fn render_bio(record: &BioRecord, vocab: &Vocab) -> Result<RenderedBio> {
    let template = &TEMPLATES[record.template_id as usize];
    let mut tokens = Vec::with_capacity(48);
    push_clause(&mut tokens, vocab, template.header, &record.name, None)?;
    let mut value_spans = BTreeMap::new();
    for attr in record.attr_order {
        tokens.push(vocab.id(".")?);
        let mut span = None;
        push_clause(
            &mut tokens,
            vocab,
            template.clause(attr),
            &record.name,
            Some((record.attribute_value(attr), &mut span)),
        )?;
        let span = span.expect("every attribute clause fills its value");
        value_spans.insert(attr, span);
    }
    tokens.push(vocab.id(".")?);
    Ok(RenderedBio {
        tokens,
        value_spans,
    })
}
