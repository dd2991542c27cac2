//! Reliability, generality and locality over a stream of edits.
//!
//! A sample counts as answered when the teacher-forced argmax equals the
//! target at every target position. A locality probe counts as unchanged
//! when the edited model's teacher-forced argmax equals the pre-edit
//! model's at every target position of the probe.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::editor::{EditLog, Editor};
use crate::lm::{EditableLm, TokenSeq};
use crate::{Error, Result};

/// One edit with its neighbours and out-of-scope probes, tokenized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub edit: TokenSeq,
    pub generality: Vec<TokenSeq>,
    pub locality: Vec<TokenSeq>,
}

/// Anything that yields teacher-forced argmax tokens at target positions.
pub trait Predictor {
    fn target_argmax(&self, seq: &TokenSeq) -> Result<Vec<usize>>;
}

impl Predictor for EditableLm {
    fn target_argmax(&self, seq: &TokenSeq) -> Result<Vec<usize>> {
        EditableLm::target_argmax(self, seq)
    }
}

pub fn exact_match<P: Predictor + ?Sized>(p: &P, seq: &TokenSeq) -> Result<bool> {
    Ok(p.target_argmax(seq)? == seq.target)
}

pub fn reliability<P: Predictor + ?Sized>(p: &P, records: &[EditRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("reliability needs at least one edit".into()));
    }
    let mut hits = 0usize;
    for r in records {
        hits += exact_match(p, &r.edit)? as usize;
    }
    Ok(hits as f64 / records.len() as f64)
}

pub fn generality<P: Predictor + ?Sized>(p: &P, records: &[EditRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("generality needs at least one edit".into()));
    }
    let mut sum = 0.0;
    for r in records {
        if r.generality.is_empty() {
            return Err(Error::Data(format!(
                "record `{}` has no generality samples",
                r.id
            )));
        }
        let mut hits = 0usize;
        for g in &r.generality {
            hits += exact_match(p, g)? as usize;
        }
        sum += hits as f64 / r.generality.len() as f64;
    }
    Ok(sum / records.len() as f64)
}

/// Pre-edit argmax tokens for every locality probe, per record.
pub type LocalityReference = Vec<Vec<Vec<usize>>>;

pub fn locality_reference<P: Predictor + ?Sized>(
    f: &P,
    records: &[EditRecord],
) -> Result<LocalityReference> {
    records
        .iter()
        .map(|r| r.locality.iter().map(|s| f.target_argmax(s)).collect())
        .collect()
}

/// Mean over records of the fraction of unchanged probes. `reference` must
/// cover at least `records`.
pub fn locality<P: Predictor + ?Sized>(
    ft: &P,
    records: &[EditRecord],
    reference: &[Vec<Vec<usize>>],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("locality needs at least one edit".into()));
    }
    if reference.len() < records.len() {
        return Err(Error::Data("missing pre-edit locality reference".into()));
    }
    let mut sum = 0.0;
    for (r, refs) in records.iter().zip(reference) {
        if r.locality.is_empty() {
            return Err(Error::Data(format!(
                "record `{}` has no locality probes",
                r.id
            )));
        }
        if refs.len() != r.locality.len() {
            return Err(Error::Data(format!(
                "reference for `{}` has the wrong probe count",
                r.id
            )));
        }
        let mut same = 0usize;
        for (probe, expected) in r.locality.iter().zip(refs) {
            same += (&ft.target_argmax(probe)? == expected) as usize;
        }
        sum += same as f64 / r.locality.len() as f64;
    }
    Ok(sum / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub editor: String,
    pub checkpoint: usize,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub avg: f64,
}

impl MetricRow {
    pub fn new(editor: &str, checkpoint: usize, rel: f64, gen: f64, loc: f64) -> Self {
        Self {
            editor: editor.to_string(),
            checkpoint,
            rel,
            gen,
            loc,
            avg: (rel + gen + loc) / 3.0,
        }
    }
}

/// Metrics of `ft` over `records`, against the pre-edit `reference`.
pub fn metrics<P: Predictor + ?Sized>(
    editor: &str,
    ft: &P,
    records: &[EditRecord],
    reference: &[Vec<Vec<usize>>],
) -> Result<MetricRow> {
    Ok(MetricRow::new(
        editor,
        records.len(),
        reliability(ft, records)?,
        generality(ft, records)?,
        locality(ft, records, reference)?,
    ))
}

pub struct SequenceResult {
    pub rows: Vec<MetricRow>,
    pub journal: Vec<EditLog>,
    /// The model after the last edit.
    pub edited: EditableLm,
}

/// Applies `records` in order with `editor`, starting from `lm`, and
/// reports metrics over all edits so far at each checkpoint.
pub fn evaluate_sequence(
    lm: &EditableLm,
    editor: &mut dyn Editor,
    records: &[EditRecord],
    checkpoints: &[usize],
) -> Result<SequenceResult> {
    if let Some(&c) = checkpoints.iter().find(|&&c| c == 0 || c > records.len()) {
        return Err(Error::Config(format!(
            "checkpoint {c} outside 1..={}",
            records.len()
        )));
    }
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let reference = locality_reference(lm, &records[..last])?;
    let mut model = lm.clone();
    let mut rows = Vec::new();
    let mut journal = Vec::with_capacity(last);
    for (t, record) in records[..last].iter().enumerate() {
        journal.push(editor.edit(&mut model, record, t + 1)?);
        if checkpoints.contains(&(t + 1)) {
            rows.push(metrics(editor.name(), &model, &records[..=t], &reference)?);
        }
    }
    Ok(SequenceResult {
        rows,
        journal,
        edited: model,
    })
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "editor,checkpoint,rel,gen,loc,avg")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.editor, r.checkpoint, r.rel, r.gen, r.loc, r.avg
        )?;
    }
    Ok(())
}
