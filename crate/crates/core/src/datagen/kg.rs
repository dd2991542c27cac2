use std::collections::{BTreeSet, HashMap};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatagenConfig;

/// Relation name and its prompt templates; `{s}` marks the subject.
pub const RELATIONS: [(&str, [&str; 2]); 16] = [
    (
        "capital",
        ["the capital of {s} is", "{s} has its capital at"],
    ),
    ("founder", ["{s} was founded by", "the founder of {s} is"]),
    (
        "language",
        ["the language of {s} is", "people in {s} speak"],
    ),
    ("leader", ["the leader of {s} is", "{s} is led by"]),
    ("neighbor", ["{s} borders", "a neighbor of {s} is"]),
    ("creator", ["{s} was created by", "the creator of {s} is"]),
    ("employer", ["{s} works for", "the employer of {s} is"]),
    (
        "birthplace",
        ["{s} was born in", "the birthplace of {s} is"],
    ),
    ("spouse", ["{s} is married to", "the spouse of {s} is"]),
    ("member", ["{s} is a member of", "{s} belongs to"]),
    ("location", ["{s} is located in", "the location of {s} is"]),
    ("owner", ["{s} is owned by", "the owner of {s} is"]),
    ("teacher", ["{s} studied under", "the teacher of {s} is"]),
    ("rival", ["the rival of {s} is", "{s} competes with"]),
    ("sibling", ["the sibling of {s} is", "{s} grew up with"]),
    ("team", ["{s} plays for", "the team of {s} is"]),
];

pub const SHORT_CONTEXTS: [&str; 3] = ["as we know", "in short", "note that"];

pub const LONG_CONTEXTS: [&str; 3] = [
    "according to records kept for many years it is well known that",
    "people who studied this question for a long time now agree that",
    "after reading several old books on the subject we can say that",
];

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub freq: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthKg {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub triples: Vec<Triple>,
    pub out_degree: Vec<usize>,
    pub in_degree: Vec<usize>,
    #[serde(skip)]
    objects: HashMap<(usize, usize), usize>,
}

impl SynthKg {
    /// Assembles a graph, deriving degrees and the `(head, relation)` index.
    pub fn from_parts(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        triples: Vec<Triple>,
    ) -> Self {
        let n = entities.len();
        let mut out_degree = vec![0; n];
        let mut in_degree = vec![0; n];
        let mut objects = HashMap::new();
        for t in &triples {
            out_degree[t.head] += 1;
            in_degree[t.tail] += 1;
            objects.insert((t.head, t.rel), t.tail);
        }
        Self {
            entities,
            relations,
            triples,
            out_degree,
            in_degree,
            objects,
        }
    }

    pub fn degree(&self, e: usize) -> usize {
        self.out_degree[e] + self.in_degree[e]
    }

    /// The known object of `(head, rel)`, if the graph has one.
    pub fn object(&self, head: usize, rel: usize) -> Option<usize> {
        self.objects.get(&(head, rel)).copied()
    }

    pub fn name(&self, e: usize) -> &str {
        &self.entities[e].name
    }

    pub fn render(&self, head: usize, rel: usize, template: usize) -> String {
        self.relations[rel].templates[template].replace("{s}", self.name(head))
    }

    /// Entities reachable from `e` along one or two triples, excluding `e`.
    pub fn within_two_hops(&self, e: usize) -> BTreeSet<usize> {
        let one: BTreeSet<usize> = self
            .triples
            .iter()
            .filter(|t| t.head == e)
            .map(|t| t.tail)
            .collect();
        let mut all = one.clone();
        for t in &self.triples {
            if one.contains(&t.head) {
                all.insert(t.tail);
            }
        }
        all.remove(&e);
        all
    }

    /// Frequency at the configured quantile of the sorted frequencies.
    pub fn frequency_cut(&self, quantile: f64) -> u32 {
        let mut f: Vec<u32> = self.entities.iter().map(|e| e.freq).collect();
        f.sort_unstable();
        let idx = ((quantile * f.len() as f64).ceil() as usize).clamp(1, f.len()) - 1;
        f[idx]
    }

    /// Every word a rendering of this graph can produce.
    pub fn words(&self) -> Vec<String> {
        let mut words: Vec<String> = self.entities.iter().map(|e| e.name.clone()).collect();
        let texts = self
            .relations
            .iter()
            .flat_map(|r| r.templates.iter().map(String::as_str))
            .chain(SHORT_CONTEXTS)
            .chain(LONG_CONTEXTS);
        for t in texts {
            for w in t.split_whitespace().filter(|w| *w != "{s}") {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        words
    }
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool = Vec::new();
    for c1 in CONSONANTS {
        for v1 in VOWELS {
            for c2 in CONSONANTS {
                for v2 in VOWELS {
                    pool.push(format!("{c1}{v1}{c2}{v2}"));
                }
            }
        }
    }
    let reserved: BTreeSet<&str> = RELATIONS
        .iter()
        .flat_map(|(_, t)| t.iter().flat_map(|s| s.split_whitespace()))
        .chain(
            SHORT_CONTEXTS
                .iter()
                .chain(&LONG_CONTEXTS)
                .flat_map(|s| s.split_whitespace()),
        )
        .collect();
    pool.retain(|w| !reserved.contains(w.as_str()));
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

/// Generates a graph with Zipf-distributed entity frequencies. Out-degree
/// grows with the logarithm of frequency and tails are drawn in proportion
/// to frequency, so rare entities are also weakly connected.
pub fn build_kg(cfg: &DatagenConfig) -> SynthKg {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_entities;
    let names = entity_names(n, &mut rng);
    let entities: Vec<Entity> = names
        .into_iter()
        .enumerate()
        .map(|(rank, name)| Entity {
            name,
            freq: ((cfg.max_freq as f64) / ((rank + 1) as f64).powf(cfg.zipf_s))
                .round()
                .max(1.0) as u32,
        })
        .collect();
    let n_rel = cfg.n_relations.min(RELATIONS.len());
    let relations: Vec<Relation> = RELATIONS[..n_rel]
        .iter()
        .map(|(name, t)| Relation {
            name: name.to_string(),
            templates: t.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let weights =
        WeightedIndex::new(entities.iter().map(|e| e.freq)).expect("positive frequencies");
    let mut triples = Vec::new();
    for (h, e) in entities.iter().enumerate() {
        let deg = ((e.freq as f64).log2().floor() as i64 - 1).clamp(1, cfg.max_out_degree as i64)
            as usize;
        let rels = rand::seq::index::sample(&mut rng, n_rel, deg.min(n_rel));
        for r in rels {
            let tail = loop {
                let t = weights.sample(&mut rng);
                if t != h {
                    break t;
                }
            };
            triples.push(Triple {
                head: h,
                rel: r,
                tail,
            });
        }
    }
    SynthKg::from_parts(entities, relations, triples)
}

/// Language-modelling corpus: every triple under both templates, repeated
/// more often for frequent subjects, plus one context-padded copy.
pub fn pretrain_corpus(kg: &SynthKg, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    for t in &kg.triples {
        let reps = (((kg.entities[t.head].freq as f64).log2() / 2.0).ceil() as usize).clamp(1, 4);
        let obj = kg.name(t.tail).to_string();
        for tpl in 0..kg.relations[t.rel].templates.len() {
            for _ in 0..reps {
                out.push((kg.render(t.head, t.rel, tpl), obj.clone()));
            }
        }
        let ctx = if rng.gen_bool(0.5) {
            SHORT_CONTEXTS.choose(&mut rng)
        } else {
            LONG_CONTEXTS.choose(&mut rng)
        }
        .expect("nonempty");
        let tpl = rng.gen_range(0..kg.relations[t.rel].templates.len());
        out.push((format!("{ctx} {}", kg.render(t.head, t.rel, tpl)), obj));
    }
    out.shuffle(&mut rng);
    out
}
