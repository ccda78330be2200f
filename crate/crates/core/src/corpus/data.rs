//! Static word pools and surface templates.
//!
//! The generator may only emit words listed here; the tokenizer's closed
//! vocabulary is built by sweeping these tables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    BirthDate,
    BirthPlace,
    Institution,
    Occupation,
}

pub const ALL_ATTRIBUTES: [Attribute; 4] = [
    Attribute::BirthDate,
    Attribute::BirthPlace,
    Attribute::Institution,
    Attribute::Occupation,
];

pub const FIRST_NAMES: [&str; 32] = [
    "alice", "boris", "carmen", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas",
    "katya", "lionel", "mariam", "nikolai", "odette", "pavel", "quentin", "rosa", "stefan",
    "tamar", "ulrich", "vera", "wendel", "ximena", "yusuf", "zelda", "anders", "bruna", "cyril",
    "daria", "emil", "freya",
];

pub const LAST_NAMES: [&str; 32] = [
    "almeida", "baranov", "castellano", "duarte", "eriksen", "fontaine", "grushin", "holloway",
    "ibarra", "jankovic", "kowalski", "lindqvist", "moreau", "novak", "okafor", "petrova",
    "quiroga", "rahimi", "sorensen", "takahashi", "ulanova", "vasquez", "weiss", "xu", "yamada",
    "zubiri", "arnette", "bellweather", "crane", "dunmore", "eastman", "fairbanks",
];

pub const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];

/// Days 1..=28 keep every month valid.
pub const N_DAYS: usize = 28;
pub const YEAR_MIN: usize = 1900;
pub const YEAR_MAX: usize = 1999;

pub const CITIES: [&[&str]; 24] = [
    &["karlsruhe"],
    &["new", "york"],
    &["rio", "de", "janeiro"],
    &["cape", "town"],
    &["lisbon"],
    &["osaka"],
    &["tbilisi"],
    &["montreal"],
    &["casablanca"],
    &["bergen"],
    &["valparaiso"],
    &["novosibirsk"],
    &["dresden"],
    &["port", "elizabeth"],
    &["santa", "fe"],
    &["buenos", "aires"],
    &["wellington"],
    &["tampere"],
    &["graz"],
    &["odessa"],
    &["marseille"],
    &["la", "paz"],
    &["kyoto"],
    &["galway"],
];

pub const INSTITUTIONS: [&[&str]; 18] = [
    &["northgate", "university"],
    &["harbor", "institute"],
    &["royal", "academy"],
    &["university", "of", "granite"],
    &["blackwood", "college"],
    &["meridian", "polytechnic"],
    &["saint", "calder", "university"],
    &["westfall", "institute"],
    &["university", "of", "ashford"],
    &["larkspur", "college"],
    &["crownhill", "academy"],
    &["delta", "polytechnic"],
    &["university", "of", "tidewater"],
    &["ironwood", "college"],
    &["summit", "institute"],
    &["riverbend", "university"],
    &["stonebridge", "academy"],
    &["university", "of", "amberfield"],
];

pub const OCCUPATIONS: [&str; 24] = [
    "architect", "boxer", "chemist", "diplomat", "engineer", "firefighter", "geologist",
    "historian", "illustrator", "journalist", "librarian", "magician", "novelist", "oboist",
    "photographer", "quiltmaker", "radiologist", "sculptor", "translator", "urbanist",
    "violinist", "watchmaker", "zoologist", "cartographer",
];

/// Needle strings for the haystack experiments: ten poem titles plus four
/// synthetic strings whose words never appear in any biography pool.
pub fn needle_pool() -> Vec<Vec<&'static str>> {
    vec![
        vec!["auguries", "of", "innocence"],
        vec!["al-burda"],
        vec!["der", "zauberlehrling"],
        vec!["ode", "to", "a", "nightingale"],
        vec!["she", "walks", "in", "beauty"],
        vec!["the", "raven"],
        vec!["the", "road", "not", "taken"],
        vec!["the", "second", "coming"],
        vec!["the", "waste", "land"],
        vec!["über", "die", "berge"],
        vec!["glimmer", "vortex", "prism"],
        vec!["quartz", "nebula"],
        vec!["velvet", "horizon", "drift"],
        vec!["ember", "cascade"],
    ]
}

/// One surface template: a header clause plus one clause per attribute.
/// `{name}`/`{v}` mark the name and value slots.
pub struct BioTemplate {
    pub header: &'static str,
    pub birth_date: &'static str,
    pub birth_place: &'static str,
    pub institution: &'static str,
    pub occupation: &'static str,
}

impl BioTemplate {
    pub fn clause(&self, attr: Attribute) -> &'static str {
        match attr {
            Attribute::BirthDate => self.birth_date,
            Attribute::BirthPlace => self.birth_place,
            Attribute::Institution => self.institution,
            Attribute::Occupation => self.occupation,
        }
    }
}

pub const N_TEMPLATES: usize = 8;

pub const TEMPLATES: [BioTemplate; N_TEMPLATES] = [
    BioTemplate {
        header: "about {name}",
        birth_date: "they were born on {v}",
        birth_place: "they were born in {v}",
        institution: "they studied at {v}",
        occupation: "they worked as {v}",
    },
    BioTemplate {
        header: "biography of {name}",
        birth_date: "their birth date is {v}",
        birth_place: "their birth place is {v}",
        institution: "they were educated at {v}",
        occupation: "their occupation is {v}",
    },
    BioTemplate {
        header: "profile of {name}",
        birth_date: "born on {v}",
        birth_place: "raised in {v}",
        institution: "their alma mater is {v}",
        occupation: "they made a career as {v}",
    },
    BioTemplate {
        header: "about {name}",
        birth_date: "their birth date is {v}",
        birth_place: "raised in {v}",
        institution: "they studied at {v}",
        occupation: "their occupation is {v}",
    },
    BioTemplate {
        header: "biography of {name}",
        birth_date: "born on {v}",
        birth_place: "they were born in {v}",
        institution: "they were educated at {v}",
        occupation: "they made a career as {v}",
    },
    BioTemplate {
        header: "profile of {name}",
        birth_date: "they were born on {v}",
        birth_place: "their birth place is {v}",
        institution: "their alma mater is {v}",
        occupation: "they worked as {v}",
    },
    BioTemplate {
        header: "record of {name}",
        birth_date: "born on {v}",
        birth_place: "their birth place is {v}",
        institution: "they were educated at {v}",
        occupation: "they worked as {v}",
    },
    BioTemplate {
        header: "record of {name}",
        birth_date: "their birth date is {v}",
        birth_place: "they were born in {v}",
        institution: "their alma mater is {v}",
        occupation: "they made a career as {v}",
    },
];

/// Question surface per attribute.
pub fn question_pattern(attr: Attribute) -> &'static str {
    match attr {
        Attribute::BirthDate => "what is the birth date of {name}",
        Attribute::BirthPlace => "where was {name} born",
        Attribute::Institution => "where was {name} educated",
        Attribute::Occupation => "what is the occupation of {name}",
    }
}

/// Cloze statement surface per attribute, used for parametric extraction.
pub fn cloze_pattern(attr: Attribute) -> &'static str {
    match attr {
        Attribute::BirthDate => "{name} was born on",
        Attribute::BirthPlace => "{name} was born in",
        Attribute::Institution => "{name} was educated at",
        Attribute::Occupation => "{name} worked as",
    }
}

/// Every non-name word the templates and questions can emit.
pub const FILLER_WORDS: [&str; 36] = [
    "about", "biography", "profile", "record", "of", "they", "were", "born", "on", "their",
    "birth", "date", "is", "in", "place", "raised", "studied", "at", "educated", "alma", "mater",
    "worked", "as", "occupation", "made", "a", "career", "what", "the", "where", "was", "an",
    ".", ",", "list", "poems",
];
