use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Result, Tokenizer};

/// Placeholder for the subject inside prompt templates.
pub const SUBJECT: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub prompt: String,
    pub expected_object: String,
}

/// A counterfactual edit request `(s, r, o) -> o*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub object_true: String,
    pub object_new: String,
    /// Template with one `{}` for the subject.
    pub prompt: String,
    pub paraphrases: Vec<String>,
    pub neighborhood: Vec<Neighbor>,
}

impl Fact {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CorpusError::Invariant { fact: self.id.clone(), msg });
        if self.object_true == self.object_new {
            return fail("object_true equals object_new".into());
        }
        for (what, o) in [("object_true", &self.object_true), ("object_new", &self.object_new)] {
            if o.split_whitespace().count() != 1 || o.trim() != o {
                return fail(format!("{what} {o:?} must be a single word"));
            }
        }
        if self.subject.trim().is_empty() {
            return fail("subject is empty".into());
        }
        for t in std::iter::once(&self.prompt).chain(&self.paraphrases) {
            if t.matches(SUBJECT).count() != 1 {
                return fail(format!("template {t:?} must contain exactly one subject placeholder"));
            }
        }
        for n in &self.neighborhood {
            if contains_words(&n.prompt, &self.subject) {
                return fail(format!("neighborhood prompt {:?} mentions the subject", n.prompt));
            }
        }
        Ok(())
    }

    pub fn fill(&self, template: &str) -> String {
        template.replacen(SUBJECT, &self.subject, 1)
    }

    /// A short text about the subject stating the new object, used as the
    /// consistency reference.
    pub fn reference_text(&self) -> String {
        std::iter::once(&self.prompt)
            .chain(&self.paraphrases)
            .map(|t| format!("{} {} .", self.fill(t), self.object_new))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn contains_words(text: &str, phrase: &str) -> bool {
    let t: Vec<&str> = text.split_whitespace().collect();
    let p: Vec<&str> = phrase.split_whitespace().collect();
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

/// A prompt encoded as `BOS + tokens`, with the index of the last subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub tokens: Vec<usize>,
    pub subject_last: usize,
}

pub fn encode_prompt(tok: &Tokenizer, fact_id: &str, template: &str, subject: &str) -> Result<PromptTokens> {
    let (before, after) = template.split_once(SUBJECT).ok_or_else(|| CorpusError::SubjectNotFound {
        fact: fact_id.to_string(),
        template: template.to_string(),
    })?;
    let subj = tok.tokenize_strict(subject)?;
    if subj.is_empty() {
        return Err(CorpusError::SubjectNotFound { fact: fact_id.to_string(), template: template.to_string() });
    }
    let mut tokens = vec![tok.bos()];
    tokens.extend(tok.tokenize_strict(before)?);
    tokens.extend(subj);
    let subject_last = tokens.len() - 1;
    tokens.extend(tok.tokenize_strict(after)?);
    Ok(PromptTokens { tokens, subject_last })
}

/// `BOS + tokens` for a prompt without a subject marker.
pub fn encode_text(tok: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let mut t = vec![tok.bos()];
    t.extend(tok.tokenize_strict(text)?);
    Ok(t)
}

/// The single token id of an object string.
pub fn object_token(tok: &Tokenizer, object: &str) -> Result<usize> {
    let ids = tok.tokenize_strict(object)?;
    match ids.as_slice() {
        [id] => Ok(*id),
        _ => Err(CorpusError::MultiTokenObject(object.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBatch {
    pub batch_id: usize,
    pub facts: Vec<Fact>,
}

impl EditBatch {
    pub fn new(batch_id: usize, facts: Vec<Fact>) -> Result<Self> {
        if facts.is_empty() {
            return Err(CorpusError::EmptyBatch(batch_id));
        }
        check_unique(&facts)?;
        Ok(Self { batch_id, facts })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSequence {
    pub batches: Vec<EditBatch>,
}

impl EditSequence {
    pub fn new(batches: Vec<EditBatch>) -> Result<Self> {
        let all: Vec<Fact> = batches.iter().flat_map(|b| b.facts.iter().cloned()).collect();
        check_unique(&all)?;
        Ok(Self { batches })
    }

    /// Consecutive batches of `batch_size` facts taken in order.
    pub fn chunked(facts: &[Fact], batch_size: usize, n_batches: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(CorpusError::InvalidCounts("batch_size must be at least 1".into()));
        }
        if batch_size * n_batches > facts.len() {
            return Err(CorpusError::InvalidCounts(format!(
                "{n_batches} batches of {batch_size} need {} facts, only {} available",
                batch_size * n_batches,
                facts.len()
            )));
        }
        let batches = facts
            .chunks(batch_size)
            .take(n_batches)
            .enumerate()
            .map(|(i, c)| EditBatch::new(i, c.to_vec()))
            .collect::<Result<_>>()?;
        Self::new(batches)
    }

    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.batches.iter().flat_map(|b| &b.facts)
    }
}

fn check_unique(facts: &[Fact]) -> Result<()> {
    let mut seen = HashSet::new();
    for f in facts {
        if !seen.insert(f.id.as_str()) {
            return Err(CorpusError::DuplicateId(f.id.clone()));
        }
    }
    Ok(())
}

struct RelationDef {
    name: &'static str,
    prompt: &'static str,
    paraphrases: [&'static str; 2],
    objects: [&'static str; 8],
}

const RELATIONS: [RelationDef; 8] = [
    RelationDef {
        name: "lives_in",
        prompt: "the home city of {}",
        paraphrases: ["the residence of {}", "the town of {}"],
        objects: ["paris", "rome", "berlin", "madrid", "lisbon", "vienna", "oslo", "prague"],
    },
    RelationDef {
        name: "works_as",
        prompt: "the job of {}",
        paraphrases: ["the occupation of {}", "the profession of {}"],
        objects: ["doctor", "lawyer", "pilot", "farmer", "teacher", "baker", "painter", "sailor"],
    },
    RelationDef {
        name: "speaks",
        prompt: "the language of {}",
        paraphrases: ["the mother tongue of {}", "the spoken language of {}"],
        objects: ["french", "german", "italian", "spanish", "dutch", "polish", "greek", "swedish"],
    },
    RelationDef {
        name: "plays",
        prompt: "the instrument of {}",
        paraphrases: ["the instrument played by {}", "the instrument used by {}"],
        objects: ["piano", "violin", "guitar", "drums", "flute", "cello", "harp", "trumpet"],
    },
    RelationDef {
        name: "eats",
        prompt: "the favorite food of {}",
        paraphrases: ["the meal liked by {}", "the dish preferred by {}"],
        objects: ["rice", "bread", "soup", "cheese", "pasta", "salad", "fish", "beans"],
    },
    RelationDef {
        name: "supports",
        prompt: "the team of {}",
        paraphrases: ["the club supported by {}", "the favorite team of {}"],
        objects: ["lions", "eagles", "wolves", "bears", "sharks", "tigers", "hawks", "foxes"],
    },
    RelationDef {
        name: "drives",
        prompt: "the vehicle of {}",
        paraphrases: ["the car driven by {}", "the ride owned by {}"],
        objects: ["truck", "van", "bike", "scooter", "tractor", "bus", "jeep", "taxi"],
    },
    RelationDef {
        name: "studied",
        prompt: "the field of {}",
        paraphrases: ["the subject studied by {}", "the degree of {}"],
        objects: ["physics", "law", "music", "history", "biology", "chemistry", "art", "medicine"],
    },
];

const GIVEN_NAMES: [&str; 8] = ["alba", "bruno", "cira", "dario", "elia", "fausto", "gala", "ines"];

pub const MAX_RELATIONS: usize = RELATIONS.len();
pub const MAX_OBJECTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_relations: usize,
    /// Objects per relation.
    pub n_objects: usize,
    /// Copies of each templated sentence in the corpus.
    pub repeats: usize,
    pub n_neighbors: usize,
    /// Subjects stated in the corpus that never get an edit request. They
    /// supply neighborhood prompts and the knowledge an edit must preserve.
    pub n_background: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { seed: 0, n_subjects: 160, n_relations: 8, n_objects: 8, repeats: 2, n_neighbors: 2, n_background: 64 }
    }
}

/// Generated training corpus and its edit requests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub sentences: Vec<String>,
    pub facts: Vec<Fact>,
    /// One copy of every sentence about a background subject.
    pub background: Vec<String>,
}

impl SynthWorld {
    /// Vocabulary covering the corpus and every string referenced by facts.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: Vec<String> = self.sentences.clone();
        for f in &self.facts {
            words.push(f.subject.clone());
            words.push(f.object_true.clone());
            words.push(f.object_new.clone());
            for t in std::iter::once(&f.prompt).chain(&f.paraphrases) {
                words.push(t.replace(SUBJECT, ""));
            }
            words.extend(f.neighborhood.iter().map(|n| format!("{} {}", n.prompt, n.expected_object)));
        }
        Tokenizer::from_words(words.iter().map(String::as_str))
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut s = String::new();
    for _ in 0..3 {
        s.push(*C.choose(rng).unwrap() as char);
        s.push(*V.choose(rng).unwrap() as char);
    }
    s
}

/// Deterministic fact world: one fact per subject, relations assigned
/// round-robin, every templated sentence repeated `repeats` times.
pub fn synth_world(cfg: &WorldConfig) -> Result<SynthWorld> {
    if cfg.n_subjects < 2 || cfg.n_relations < 1 || cfg.n_objects < 2 || cfg.repeats < 1 {
        return Err(CorpusError::InvalidCounts(
            "need n_subjects >= 2, n_relations >= 1, n_objects >= 2, repeats >= 1".into(),
        ));
    }
    if cfg.n_relations > MAX_RELATIONS || cfg.n_objects > MAX_OBJECTS {
        return Err(CorpusError::InvalidCounts(format!(
            "at most {MAX_RELATIONS} relations and {MAX_OBJECTS} objects per relation"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reserved: HashSet<String> = HashSet::new();
    for r in &RELATIONS {
        for t in std::iter::once(r.prompt).chain(r.paraphrases) {
            reserved.extend(t.split_whitespace().map(str::to_string));
        }
        reserved.extend(r.objects.iter().map(|s| s.to_string()));
    }
    reserved.extend(GIVEN_NAMES.iter().map(|s| s.to_string()));
    reserved.insert(".".into());

    let total = cfg.n_subjects + cfg.n_background;
    let mut subjects = Vec::with_capacity(total);
    while subjects.len() < total {
        let family = pseudo_word(&mut rng);
        if reserved.insert(family.clone()) {
            let given = GIVEN_NAMES.choose(&mut rng).unwrap();
            subjects.push(format!("{given} {family}"));
        }
    }

    struct Draft {
        subject: String,
        rel: usize,
        obj: usize,
        new_obj: usize,
    }
    let mut drafts: Vec<Draft> = subjects
        .into_iter()
        .enumerate()
        .map(|(i, subject)| Draft { subject, rel: i % cfg.n_relations, obj: rng.random_range(0..cfg.n_objects), new_obj: 0 })
        .collect();
    // New objects are drawn from objects the corpus states for some other
    // subject of the same relation, so the model can produce them at all.
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_relations];
    for d in &drafts {
        if !used[d.rel].contains(&d.obj) {
            used[d.rel].push(d.obj);
        }
    }
    used.iter_mut().for_each(|u| u.sort_unstable());
    for d in &mut drafts {
        let known: Vec<usize> = used[d.rel].iter().copied().filter(|&o| o != d.obj).collect();
        let pool: Vec<usize> =
            if known.is_empty() { (0..cfg.n_objects).filter(|&o| o != d.obj).collect() } else { known };
        d.new_obj = *pool.choose(&mut rng).unwrap();
    }

    let mut sentences = Vec::new();
    let mut background = Vec::new();
    for (i, d) in drafts.iter().enumerate() {
        let def = &RELATIONS[d.rel];
        for t in std::iter::once(def.prompt).chain(def.paraphrases) {
            let s = format!("{} {} .", t.replacen(SUBJECT, &d.subject, 1), def.objects[d.obj]);
            if i >= cfg.n_subjects {
                background.push(s.clone());
            }
            for _ in 0..cfg.repeats {
                sentences.push(s.clone());
            }
        }
    }

    // Neighbors come from background subjects when there are any, so that
    // no neighborhood prompt is itself an edit target.
    let pool_range = if cfg.n_background > 0 { cfg.n_subjects..total } else { 0..total };
    let mut facts = Vec::with_capacity(cfg.n_subjects);
    for (i, d) in drafts.iter().enumerate().take(cfg.n_subjects) {
        let def = &RELATIONS[d.rel];
        let mut same: Vec<usize> = pool_range
            .clone()
            .filter(|&j| j != i && drafts[j].rel == d.rel && drafts[j].obj == d.obj)
            .collect();
        let mut other: Vec<usize> = pool_range
            .clone()
            .filter(|&j| j != i && drafts[j].rel == d.rel && drafts[j].obj != d.obj)
            .collect();
        same.shuffle(&mut rng);
        other.shuffle(&mut rng);
        let neighborhood = same
            .into_iter()
            .chain(other)
            .take(cfg.n_neighbors)
            .map(|j| Neighbor {
                prompt: def.prompt.replacen(SUBJECT, &drafts[j].subject, 1),
                expected_object: def.objects[drafts[j].obj].to_string(),
            })
            .collect();
        let fact = Fact {
            id: format!("f{i:04}"),
            subject: d.subject.clone(),
            relation: def.name.to_string(),
            object_true: def.objects[d.obj].to_string(),
            object_new: def.objects[d.new_obj].to_string(),
            prompt: def.prompt.to_string(),
            paraphrases: def.paraphrases.iter().map(|s| s.to_string()).collect(),
            neighborhood,
        };
        fact.validate()?;
        facts.push(fact);
    }
    Ok(SynthWorld { sentences, facts, background })
}
