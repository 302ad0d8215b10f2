//! IOB2-tagged sentences, the CoNLL-style text format, and a generator of
//! particle-anchored synthetic NER data.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityType {
    Per,
    Loc,
    Org,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Per, EntityType::Loc, EntityType::Org];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One IOB2 label. The discriminant is the label index used by the CRF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O = 0,
    BPer = 1,
    IPer = 2,
    BLoc = 3,
    ILoc = 4,
    BOrg = 5,
    IOrg = 6,
}

pub const NUM_TAGS: usize = 7;

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::O, Tag::BPer, Tag::IPer, Tag::BLoc, Tag::ILoc, Tag::BOrg, Tag::IOrg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }

    pub fn begin(ty: EntityType) -> Tag {
        match ty {
            EntityType::Per => Tag::BPer,
            EntityType::Loc => Tag::BLoc,
            EntityType::Org => Tag::BOrg,
        }
    }

    pub fn inside(ty: EntityType) -> Tag {
        match ty {
            EntityType::Per => Tag::IPer,
            EntityType::Loc => Tag::ILoc,
            EntityType::Org => Tag::IOrg,
        }
    }

    pub fn entity(self) -> Option<EntityType> {
        match self {
            Tag::O => None,
            Tag::BPer | Tag::IPer => Some(EntityType::Per),
            Tag::BLoc | Tag::ILoc => Some(EntityType::Loc),
            Tag::BOrg | Tag::IOrg => Some(EntityType::Org),
        }
    }

    pub fn is_begin(self) -> bool {
        matches!(self, Tag::BPer | Tag::BLoc | Tag::BOrg)
    }

    pub fn is_inside(self) -> bool {
        matches!(self, Tag::IPer | Tag::ILoc | Tag::IOrg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::O => "O",
            Tag::BPer => "B-PER",
            Tag::IPer => "I-PER",
            Tag::BLoc => "B-LOC",
            Tag::ILoc => "I-LOC",
            Tag::BOrg => "B-ORG",
            Tag::IOrg => "I-ORG",
        }
    }

    /// Whether `self` may follow `prev` (None = sentence start) in strict IOB2.
    pub fn may_follow(self, prev: Option<Tag>) -> bool {
        match self.entity() {
            Some(ty) if self.is_inside() => prev.is_some_and(|p| p.entity() == Some(ty)),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Tag::ALL.iter().copied().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown tag {s:?}"))
    }
}

/// True when no `I-X` appears without a preceding `B-X`/`I-X`.
pub fn is_valid_iob2(tags: &[Tag]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !t.may_follow(prev) {
            return false;
        }
        prev = Some(t);
    }
    true
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<Tag>,
}

impl TaggedSentence {
    pub fn new(words: Vec<String>, tags: Vec<Tag>) -> Result<Self> {
        if words.len() != tags.len() {
            return Err(Error::Data(format!("{} words but {} tags", words.len(), tags.len())));
        }
        Ok(Self { words, tags })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NerDataset {
    pub id: String,
    pub sentences: Vec<TaggedSentence>,
}

impl NerDataset {
    pub fn new(id: impl Into<String>, sentences: Vec<TaggedSentence>) -> Self {
        Self { id: id.into(), sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(TaggedSentence::len).sum()
    }

    /// Deterministic split: every sentence whose index is ≡ 9 (mod 10) goes to dev.
    pub fn split_dev(&self) -> (NerDataset, NerDataset) {
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for (i, s) in self.sentences.iter().enumerate() {
            if i % 10 == 9 {
                dev.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (NerDataset::new(format!("{}:train", self.id), train), NerDataset::new(format!("{}:dev", self.id), dev))
    }
}

/// Parses `token<TAB>tag` lines with blank lines between sentences. Lines
/// starting with `#` are comments; rows with three or more columns and a
/// numeric first column (CoNLL-U-like exports) read the token and tag from
/// columns two and three.
pub fn parse_conll(text: &str, id: &str) -> Result<NerDataset> {
    let mut sentences = Vec::new();
    let (mut words, mut tags) = (Vec::new(), Vec::new());
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<Tag>| {
        if !words.is_empty() {
            sentences.push(TaggedSentence { words: std::mem::take(words), tags: std::mem::take(tags) });
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (word, tag) = match cols.as_slice() {
            [w, t] => (*w, *t),
            [idx, w, t, ..] if idx.parse::<usize>().is_ok() => (*w, *t),
            _ => {
                return Err(Error::Parse { line: i + 1, msg: format!("expected token<TAB>tag, got {line:?}") });
            }
        };
        let tag = tag.trim().parse::<Tag>().map_err(|msg| Error::Parse { line: i + 1, msg })?;
        words.push(word.to_string());
        tags.push(tag);
    }
    flush(&mut words, &mut tags);
    if sentences.is_empty() {
        return Err(Error::Data(format!("no sentences in {id}")));
    }
    Ok(NerDataset::new(id, sentences))
}

pub fn load_conll(path: &Path) -> Result<NerDataset> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    parse_conll(&fs::read_to_string(path)?, &id)
}

pub fn format_conll(data: &NerDataset) -> String {
    let mut out = String::new();
    for s in &data.sentences {
        for (w, t) in s.words.iter().zip(&s.tags) {
            out.push_str(w);
            out.push('\t');
            out.push_str(t.as_str());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn write_conll(data: &NerDataset, path: &Path) -> Result<()> {
    fs::write(path, format_conll(data))?;
    Ok(())
}

/// Case particles that mark personal names.
pub const PERSON_PARTICLES: [&str; 2] = ["si", "ni"];

/// Word lists of one synthetic "language".
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub names: &'static [&'static str],
    pub places: &'static [&'static str],
    pub org_heads: &'static [&'static str],
    pub org_tails: &'static [&'static str],
}

pub const VERBS: [&str; 10] =
    ["Pumunta", "Umuwi", "Dumating", "Tumawag", "Sumulat", "Bumisita", "Nagpunta", "Lumipat", "Miadto", "Mipauli"];
pub const FILLERS: [&str; 8] = ["kahapon", "ngayon", "bukas", "agad", "muli", "daw", "pa", "na"];
pub const OBLIQUE: &str = "sa";
pub const TOPIC: &str = "ang";
pub const GENITIVE: &str = "ng";

pub const SOURCE_LEXICON: Lexicon = Lexicon {
    names: &[
        "Maria", "Juan", "Jose", "Ana", "Pedro", "Rosa", "Carlos", "Elena", "Miguel", "Luz", "Ramon", "Teresa",
        "Andres", "Gloria", "Emilio", "Corazon", "Manuel", "Imelda", "Rodrigo", "Leni",
    ],
    places: &["Cebu", "Maynila", "Davao", "Iloilo", "Baguio", "Quezon", "Batangas", "Leyte", "Bohol", "Samar"],
    org_heads: &["Bangko", "Kompanya", "Samahan", "Pamantasan", "Kagawaran"],
    org_tails: &["Sentral", "Bayan", "Pilipinas", "Masa", "Agila"],
};

pub const DIALECT_LEXICON: Lexicon = Lexicon {
    names: &[
        "Isko", "Lito", "Nena", "Dodong", "Inday", "Toto", "Neneng", "Caloy", "Pilar", "Berto", "Linda", "Danilo",
        "Marites", "Efren", "Susan", "Ronaldo", "Merly", "Jun", "Rosario", "Bebot",
    ],
    places: &["Sugbo", "Dumaguete", "Ormoc", "Tacloban", "Butuan", "Surigao", "Dipolog", "Ozamiz", "Bogo", "Toledo"],
    org_heads: &["Kooperatiba", "Unibersidad", "Asosasyon", "Tanggapan"],
    org_tails: &["Sugbuanon", "Bisaya", "Mindanao", "Habagatan"],
};

impl Lexicon {
    pub fn all_words(&self) -> Vec<&'static str> {
        self.names.iter().chain(self.places).chain(self.org_heads).chain(self.org_tails).copied().collect()
    }
}

/// Every word the synthetic generators can emit, in a fixed order.
pub fn synthetic_word_list() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(PERSON_PARTICLES);
    words.extend([OBLIQUE, TOPIC, GENITIVE]);
    words.extend(VERBS);
    words.extend(FILLERS);
    words.extend(SOURCE_LEXICON.all_words());
    words.extend(DIALECT_LEXICON.all_words());
    words
}

/// Knobs of the synthetic NER generator.
#[derive(Clone, Debug)]
pub struct SyntheticNerSpec {
    /// Probability that a person mention is preceded by `si`/`ni`.
    pub particle_rate: f64,
    /// Probability that a sentence carries an organisation instead of a place.
    pub org_rate: f64,
    /// Probability that a person name spans two words.
    pub two_word_name_rate: f64,
    pub lexicon: Lexicon,
}

impl SyntheticNerSpec {
    pub fn source(particle_rate: f64) -> Self {
        Self { particle_rate, org_rate: 0.15, two_word_name_rate: 0.1, lexicon: SOURCE_LEXICON }
    }

    pub fn dialect(particle_rate: f64) -> Self {
        Self { lexicon: DIALECT_LEXICON, ..Self::source(particle_rate) }
    }
}

/// Source-lexicon sentences following "<verb> si <Name> sa <Place>" and its
/// zero-marked variant.
pub fn gen_synthetic_ner(n_sentences: usize, particle_rate: f64, rng: &mut impl Rng) -> Result<NerDataset> {
    gen_synthetic_ner_with(n_sentences, &SyntheticNerSpec::source(particle_rate), rng)
}

pub fn gen_synthetic_ner_with(n_sentences: usize, spec: &SyntheticNerSpec, rng: &mut impl Rng) -> Result<NerDataset> {
    if !(0.0..=1.0).contains(&spec.particle_rate) {
        return Err(Error::Config(format!("particle_rate {} outside [0, 1]", spec.particle_rate)));
    }
    let lex = &spec.lexicon;
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| -> String { xs.choose(rng).unwrap().to_string() };
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let mut words = Vec::new();
        let mut tags = Vec::new();
        let mut push = |w: String, t: Tag| {
            words.push(w);
            tags.push(t);
        };
        push(pick(rng, &VERBS), Tag::O);
        if rng.random_bool(0.2) {
            push(pick(rng, &FILLERS), Tag::O);
        }
        if rng.random_bool(spec.particle_rate) {
            push(pick(rng, &PERSON_PARTICLES), Tag::O);
        }
        push(pick(rng, lex.names), Tag::BPer);
        if rng.random_bool(spec.two_word_name_rate) {
            push(pick(rng, lex.names), Tag::IPer);
        }
        push(OBLIQUE.to_string(), Tag::O);
        if rng.random_bool(spec.org_rate) {
            push(pick(rng, lex.org_heads), Tag::BOrg);
            push(pick(rng, lex.org_tails), Tag::IOrg);
        } else {
            push(pick(rng, lex.places), Tag::BLoc);
        }
        if rng.random_bool(0.3) {
            push(pick(rng, &FILLERS), Tag::O);
        }
        sentences.push(TaggedSentence { words, tags });
    }
    Ok(NerDataset::new("synthetic", sentences))
}
