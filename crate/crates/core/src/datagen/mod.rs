//! Synthetic knowledge graph and templated editing datasets.
//!
//! Records come in five groups: `recent` (subject/relation pairs the model
//! never saw), `popular` (frequent subjects, targets within two hops),
//! `long_tail` (rare, weakly connected or poorly predicted subjects),
//! `robust` (rephrases padded with short and long context) and `eval`
//! (held-out pairs used only for evaluation).

mod kg;

pub use kg::{
    build_kg, pretrain_corpus, Entity, Relation, SynthKg, Triple, LONG_CONTEXTS, RELATIONS,
    SHORT_CONTEXTS,
};

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::EditRecord;
use crate::lm::{EditableLm, TokenSeq, Vocab};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub max_freq: u32,
    pub zipf_s: f64,
    pub max_out_degree: usize,
    pub recent: usize,
    pub popular: usize,
    pub long_tail: usize,
    pub robust: usize,
    pub eval: usize,
    /// Entities at or below this frequency quantile count as rare.
    pub freq_quantile: f64,
    /// Entities above this quantile count as popular.
    pub popular_quantile: f64,
    pub degree_threshold: usize,
    /// Mean per-token log-probability below which a subject is poorly known.
    pub likelihood_threshold: f64,
    pub locality_per_record: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 128,
            n_relations: 16,
            max_freq: 500,
            zipf_s: 1.0,
            max_out_degree: 7,
            recent: 300,
            popular: 300,
            long_tail: 300,
            robust: 130,
            eval: 150,
            freq_quantile: 0.8,
            popular_quantile: 0.8,
            degree_threshold: 2,
            likelihood_threshold: -1.5,
            locality_per_record: 1,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let q = |x: f64| x > 0.0 && x < 1.0;
        if !q(self.freq_quantile) || !q(self.popular_quantile) {
            return Err(Error::Config("quantiles must lie in (0, 1)".into()));
        }
        if self.n_entities < 4 || self.n_relations == 0 || self.locality_per_record == 0 {
            return Err(Error::Config("graph too small".into()));
        }
        if [
            self.recent,
            self.popular,
            self.long_tail,
            self.robust,
            self.eval,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "every property needs at least one record".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Recent,
    Popular,
    LongTail,
    Robust,
    Eval,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Self::Recent,
        Self::Popular,
        Self::LongTail,
        Self::Robust,
        Self::Eval,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Recent => "recent",
            Self::Popular => "popular",
            Self::LongTail => "long_tail",
            Self::Robust => "robust",
            Self::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityPrompt {
    pub prompt: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub property: Property,
    pub prompt: String,
    pub target: String,
    pub rephrases: Vec<String>,
    pub locality_prompts: Vec<LocalityPrompt>,
    pub meta: RecordMeta,
    pub schema_version: u32,
}

impl DatasetRecord {
    pub fn to_edit_record(&self, vocab: &Vocab) -> Result<EditRecord> {
        Ok(EditRecord {
            id: self.id.clone(),
            edit: TokenSeq::encode(vocab, &self.prompt, &self.target)?,
            generality: self
                .rephrases
                .iter()
                .map(|p| TokenSeq::encode(vocab, p, &self.target))
                .collect::<Result<_>>()?,
            locality: self
                .locality_prompts
                .iter()
                .map(|l| TokenSeq::encode(vocab, &l.prompt, &l.target))
                .collect::<Result<_>>()?,
        })
    }
}

/// Vocabulary covering every word the graph and its renderings can use.
pub fn build_vocab(kg: &SynthKg) -> Vocab {
    Vocab::new(kg.words())
}

/// Mean over the subject's triples of the per-token log-probability of the
/// object under the first template. `NaN` for subjects without triples.
pub fn subject_likelihood(kg: &SynthKg, lm: &EditableLm, vocab: &Vocab, e: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in kg.triples.iter().filter(|t| t.head == e) {
        let seq = TokenSeq::encode(vocab, &kg.render(t.head, t.rel, 0), kg.name(t.tail))?;
        sum += lm.log_likelihood(&seq)? / seq.target.len() as f64;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Per-entity likelihood scores (see [`subject_likelihood`]).
pub fn likelihoods(kg: &SynthKg, lm: &EditableLm, vocab: &Vocab) -> Result<Vec<f64>> {
    (0..kg.entities.len())
        .map(|e| subject_likelihood(kg, lm, vocab, e))
        .collect()
}

/// The long-tail predicate: rare, and either weakly connected or poorly
/// predicted. Without likelihood scores only the degree branch applies.
pub fn is_long_tail(
    kg: &SynthKg,
    e: usize,
    freq_cut: u32,
    likelihood: Option<f64>,
    cfg: &DatagenConfig,
) -> bool {
    kg.entities[e].freq <= freq_cut
        && (kg.degree(e) <= cfg.degree_threshold
            || likelihood.is_some_and(|l| l < cfg.likelihood_threshold))
}

pub fn select_longtail(
    kg: &SynthKg,
    likelihood: Option<&[f64]>,
    cfg: &DatagenConfig,
) -> Result<BTreeSet<usize>> {
    let cut = kg.frequency_cut(cfg.freq_quantile);
    let set: BTreeSet<usize> = (0..kg.entities.len())
        .filter(|&e| is_long_tail(kg, e, cut, likelihood.map(|l| l[e]), cfg))
        .collect();
    if set.is_empty() {
        return Err(Error::Data(
            "long-tail selection is empty; raise degree_threshold, likelihood_threshold or freq_quantile".into(),
        ));
    }
    Ok(set)
}

struct Renderer<'a> {
    kg: &'a SynthKg,
    cfg: &'a DatagenConfig,
    rng: ChaCha8Rng,
    weights: WeightedIndex<u32>,
    used: HashSet<(usize, usize)>,
}

impl Renderer<'_> {
    fn weighted_object(&mut self, s: usize, r: usize) -> usize {
        let known = self.kg.object(s, r);
        loop {
            let o = self.weights.sample(&mut self.rng);
            if o != s && Some(o) != known {
                return o;
            }
        }
    }

    /// Next unused pair from `pool`, or a reused one when `reuse` is set.
    fn take(&mut self, pool: &[(usize, usize)], reuse: bool) -> Option<(usize, usize)> {
        if let Some(&p) = pool.iter().find(|p| !self.used.contains(p)) {
            self.used.insert(p);
            return Some(p);
        }
        if reuse {
            pool.choose(&mut self.rng).copied()
        } else {
            None
        }
    }

    fn record(
        &mut self,
        property: Property,
        index: usize,
        s: usize,
        r: usize,
        o: usize,
    ) -> DatasetRecord {
        let kg = self.kg;
        let tpl = self.rng.gen_range(0..2);
        let prompt = kg.render(s, r, tpl);
        let mut rephrases = vec![kg.render(s, r, 1 - tpl)];
        if property == Property::Robust {
            let short = SHORT_CONTEXTS.choose(&mut self.rng).expect("nonempty");
            let long = LONG_CONTEXTS.choose(&mut self.rng).expect("nonempty");
            rephrases.push(format!(
                "{short} {}",
                kg.render(s, r, self.rng.gen_range(0..2))
            ));
            rephrases.push(format!(
                "{long} {}",
                kg.render(s, r, self.rng.gen_range(0..2))
            ));
        }
        let mut locality_prompts = Vec::with_capacity(self.cfg.locality_per_record);
        while locality_prompts.len() < self.cfg.locality_per_record {
            let t = *kg.triples.choose(&mut self.rng).expect("graph has triples");
            if t.head == s {
                continue;
            }
            locality_prompts.push(LocalityPrompt {
                prompt: kg.render(t.head, t.rel, self.rng.gen_range(0..2)),
                target: kg.name(t.tail).to_string(),
            });
        }
        DatasetRecord {
            id: format!("{}-{index:05}", property.as_str()),
            property,
            prompt,
            target: kg.name(o).to_string(),
            rephrases,
            locality_prompts,
            meta: RecordMeta {
                subject: kg.name(s).to_string(),
                relation: kg.relations[r].name.clone(),
                object: kg.name(o).to_string(),
            },
            schema_version: SCHEMA_VERSION,
        }
    }
}

/// Renders all five record groups. Evaluation pairs are unique and never
/// reused by training records.
pub fn render_records(
    kg: &SynthKg,
    longtail: &BTreeSet<usize>,
    cfg: &DatagenConfig,
) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let n = kg.entities.len();
    let n_rel = kg.relations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    let mut fresh: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n_rel).map(move |r| (s, r)))
        .filter(|&(s, r)| kg.object(s, r).is_none())
        .collect();
    fresh.shuffle(&mut rng);
    let freq_top = kg.frequency_cut(cfg.popular_quantile);
    let mut popular: Vec<(usize, usize)> = (0..n)
        .filter(|&s| kg.entities[s].freq > freq_top)
        .flat_map(|s| (0..n_rel).map(move |r| (s, r)))
        .collect();
    popular.shuffle(&mut rng);
    let mut tail: Vec<(usize, usize)> = longtail
        .iter()
        .flat_map(|&s| (0..n_rel).map(move |r| (s, r)))
        .collect();
    tail.shuffle(&mut rng);
    if popular.is_empty() || tail.is_empty() {
        return Err(Error::Data(
            "no popular or long-tail subjects to render".into(),
        ));
    }
    let mut rd = Renderer {
        kg,
        cfg,
        rng,
        weights: WeightedIndex::new(kg.entities.iter().map(|e| e.freq))
            .expect("positive frequencies"),
        used: HashSet::new(),
    };
    let mut out = Vec::new();
    for i in 0..cfg.eval {
        let (s, r) = rd.take(&fresh, false).ok_or_else(|| {
            Error::Data(format!("only {i} unseen pairs available for evaluation"))
        })?;
        let o = rd.weighted_object(s, r);
        out.push(rd.record(Property::Eval, i, s, r, o));
    }
    for (prop, count) in [
        (Property::Recent, cfg.recent),
        (Property::Robust, cfg.robust),
    ] {
        for i in 0..count {
            let (s, r) = rd.take(&fresh, true).expect("pool is nonempty");
            let o = rd.weighted_object(s, r);
            out.push(rd.record(prop, i, s, r, o));
        }
    }
    for i in 0..cfg.popular {
        let (s, r) = rd.take(&popular, true).expect("pool is nonempty");
        let known = kg.object(s, r);
        let near: Vec<usize> = kg
            .within_two_hops(s)
            .into_iter()
            .filter(|&o| Some(o) != known)
            .collect();
        let o = match near.choose(&mut rd.rng) {
            Some(&o) => o,
            None => rd.weighted_object(s, r),
        };
        out.push(rd.record(Property::Popular, i, s, r, o));
    }
    for i in 0..cfg.long_tail {
        let (s, r) = rd.take(&tail, true).expect("pool is nonempty");
        let o = rd.weighted_object(s, r);
        out.push(rd.record(Property::LongTail, i, s, r, o));
    }
    Ok(out)
}

pub fn emit_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::ckpt::write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported schema version {}",
                r.id, r.schema_version
            )));
        }
        out.push(r);
    }
    Ok(out)
}

/// Histograms of entity frequency (power-of-two bins), total degree and
/// likelihood score (half-unit bins) as `metric,bin,count` rows.
pub fn write_stats_csv<W: Write>(
    mut w: W,
    kg: &SynthKg,
    likelihood: Option<&[f64]>,
) -> std::io::Result<()> {
    use std::collections::BTreeMap;
    writeln!(w, "metric,bin,count")?;
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    let mut deg: BTreeMap<usize, usize> = BTreeMap::new();
    for (e, ent) in kg.entities.iter().enumerate() {
        *freq.entry(ent.freq.ilog2()).or_default() += 1;
        *deg.entry(kg.degree(e)).or_default() += 1;
    }
    for (b, c) in freq {
        writeln!(w, "frequency,{}-{},{c}", 1u64 << b, (1u64 << (b + 1)) - 1)?;
    }
    for (d, c) in deg {
        writeln!(w, "degree,{d},{c}")?;
    }
    if let Some(l) = likelihood {
        let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
        for v in l.iter().filter(|v| v.is_finite()) {
            *bins.entry((v * 2.0).floor() as i64).or_default() += 1;
        }
        for (b, c) in bins {
            writeln!(w, "likelihood,{:.1},{c}", b as f64 / 2.0)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatagenConfig {
        DatagenConfig {
            n_entities: 48,
            recent: 10,
            popular: 10,
            long_tail: 10,
            robust: 5,
            eval: 20,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn template_substitution() {
        let kg = build_kg(&small());
        let cap = kg
            .relations
            .iter()
            .position(|r| r.name == "capital")
            .unwrap();
        let s = kg.render(3, cap, 0);
        assert_eq!(s, format!("the capital of {} is", kg.name(3)));
    }

    #[test]
    fn records_satisfy_invariants() {
        let cfg = small();
        let kg = build_kg(&cfg);
        let lt = select_longtail(&kg, None, &cfg).unwrap();
        let recs = render_records(&kg, &lt, &cfg).unwrap();
        assert_eq!(recs.len(), 55);
        let vocab = build_vocab(&kg);
        for r in &recs {
            assert!(r.rephrases.iter().all(|p| p != &r.prompt), "{r:?}");
            for l in &r.locality_prompts {
                assert!(!l.prompt.split_whitespace().any(|w| w == r.meta.subject));
            }
            r.to_edit_record(&vocab).unwrap();
        }
        let robust = recs
            .iter()
            .find(|r| r.property == Property::Robust)
            .unwrap();
        assert_eq!(robust.rephrases.len(), 3);
    }
}
