use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dafnet::ckpt::{write_atomic, Container};
use dafnet::datagen::{
    build_kg, build_vocab, emit_dataset, likelihoods, load_dataset, pretrain_corpus,
    render_records, select_longtail, write_stats_csv, DatasetRecord, Property,
};
use dafnet::editor::{DafnetEditor, EditLog, Editor, FtEditor, NullEditor};
use dafnet::eval::{evaluate_sequence, write_metrics_csv, EditRecord, MetricRow};
use dafnet::lm::{pretrain, EditableLm, TokenSeq, Vocab};
use dafnet::net::{write_attn_csv, AttnRow, DafnetParams};
use dafnet::trainer::{IterLog, Trainer};

use crate::config::{EditorKind, RunConfig};

pub const DATASET: &str = "dataset.jsonl";
pub const STATS: &str = "stats.csv";
pub const LM: &str = "lm.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const DAFNET: &str = "dafnet.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const JOURNAL: &str = "journal.jsonl";
pub const ATTN: &str = "attn.csv";

/// A resolved config, its source text and the output directory.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub config_text: String,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn new(config: RunConfig, config_text: String, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            config_text,
            out: out.into(),
            quiet: false,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn provenance(&self, command: &str) -> serde_json::Value {
        json!({
            "command": command,
            "seed": self.config.seed(),
            "config": self.config_text,
            "resolved": self.config,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Files written by a command so far; removed again if the command fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.0.push(path);
        Ok(())
    }

    fn remove_all(&self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn guarded<T>(
    ctx: &Context,
    f: impl FnOnce(&mut Outputs) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let mut outputs = Outputs::default();
    let result = f(&mut outputs);
    if result.is_err() {
        outputs.remove_all();
    }
    result
}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        bail!(
            "missing input {}; run the upstream command first",
            path.display()
        );
    }
    Ok(())
}

fn check_lengths<'a>(
    seqs: impl IntoIterator<Item = &'a TokenSeq>,
    max_seq_len: usize,
) -> anyhow::Result<()> {
    let longest = seqs.into_iter().map(TokenSeq::len).max().unwrap_or(0);
    if longest > max_seq_len {
        bail!("sequences of {longest} tokens exceed lm.max_seq_len = {max_seq_len}");
    }
    Ok(())
}

/// Loads `lm.ckpt`. Which layers are editable is taken from the current
/// config, so it can change without pretraining again.
pub fn load_lm(ctx: &Context) -> anyhow::Result<(EditableLm, Vocab)> {
    let path = ctx.path(LM);
    require(&path)?;
    let (lm, vocab) = EditableLm::load(&path)?;
    let mut cfg = lm.config().clone();
    if cfg.edit_layer_count == ctx.config.lm.edit_layer_count {
        return Ok((lm, vocab));
    }
    cfg.edit_layer_count = ctx.config.lm.edit_layer_count;
    Ok((EditableLm::from_params(cfg, lm.params().clone())?, vocab))
}

pub fn load_records(ctx: &Context) -> anyhow::Result<Vec<DatasetRecord>> {
    let path = ctx.path(DATASET);
    require(&path)?;
    Ok(load_dataset(&path)?)
}

/// Encodes the records of the given groups, in file order.
pub fn edit_records(
    records: &[DatasetRecord],
    vocab: &Vocab,
    groups: &[Property],
) -> anyhow::Result<Vec<EditRecord>> {
    records
        .iter()
        .filter(|r| groups.contains(&r.property))
        .map(|r| Ok(r.to_edit_record(vocab)?))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DatagenSummary {
    pub records: usize,
    pub long_tail_subjects: usize,
    pub used_likelihood: bool,
}

/// Builds the graph and writes the dataset and its statistics. With `lm`,
/// the long-tail rule also looks at how well that model predicts each
/// subject's facts.
pub fn cmd_datagen(ctx: &Context, lm: Option<&Path>) -> anyhow::Result<DatagenSummary> {
    guarded(ctx, |out| {
        let cfg = &ctx.config.datagen;
        let kg = build_kg(cfg);
        let vocab = build_vocab(&kg);
        let scores = match lm {
            Some(path) => {
                require(path)?;
                let (model, lm_vocab) = EditableLm::load(path)?;
                if lm_vocab != vocab {
                    bail!("{} was trained on a different graph", path.display());
                }
                Some(likelihoods(&kg, &model, &vocab)?)
            }
            None => None,
        };
        let tail = select_longtail(&kg, scores.as_deref(), cfg)?;
        let records = render_records(&kg, &tail, cfg)?;
        let encoded = edit_records(&records, &vocab, &Property::ALL)?;
        check_lengths(
            encoded.iter().flat_map(|r| {
                std::iter::once(&r.edit)
                    .chain(&r.generality)
                    .chain(&r.locality)
            }),
            ctx.config.lm.max_seq_len,
        )?;
        let path = ctx.path(DATASET);
        emit_dataset(&records, &path)?;
        out.0.push(path);
        let mut stats = Vec::new();
        write_stats_csv(&mut stats, &kg, scores.as_deref())?;
        out.write(ctx.path(STATS), &stats)?;
        ctx.log(format!(
            "datagen: {} records, {} long-tail subjects, vocab {}",
            records.len(),
            tail.len(),
            vocab.len()
        ));
        Ok(DatagenSummary {
            records: records.len(),
            long_tail_subjects: tail.len(),
            used_likelihood: scores.is_some(),
        })
    })
}

/// Pretrains the language model on the graph's facts. Returns the loss per
/// step.
pub fn cmd_pretrain(ctx: &Context) -> anyhow::Result<Vec<f64>> {
    guarded(ctx, |out| {
        let kg = build_kg(&ctx.config.datagen);
        let vocab = build_vocab(&kg);
        let corpus = pretrain_corpus(&kg, ctx.config.seed())
            .iter()
            .map(|(p, t)| TokenSeq::encode(&vocab, p, t))
            .collect::<dafnet::Result<Vec<_>>>()?;
        check_lengths(&corpus, ctx.config.lm.max_seq_len)?;
        let lm_cfg = ctx.config.lm.to_config(vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed());
        let mut lm = EditableLm::new(lm_cfg, &mut rng)?;
        ctx.log(format!(
            "pretrain: {} sequences, vocab {}",
            corpus.len(),
            vocab.len()
        ));
        let losses = pretrain(&mut lm, &corpus, &ctx.config.pretrain)?;
        let mut c = lm.to_container(&vocab);
        c.meta["provenance"] = ctx.provenance("pretrain");
        out.write(ctx.path(LM), &c.to_bytes()?)?;
        let mut log = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            log.push_str(&format!("{},{l:.6}\n", i + 1));
        }
        out.write(ctx.path(PRETRAIN_LOG), log.as_bytes())?;
        ctx.log(format!(
            "pretrain: final loss {:.4}",
            losses.last().copied().unwrap_or(f64::NAN)
        ));
        Ok(losses)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iters: usize,
    pub best_iter: Option<usize>,
    pub t_now: usize,
    pub log: Vec<IterLog>,
}

fn read_train_log(path: &Path, upto: usize) -> anyhow::Result<Vec<IterLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let l: IterLog = serde_json::from_str(&line?)?;
        if l.iter <= upto {
            out.push(l);
        }
    }
    Ok(out)
}

fn latest_checkpoint(dir: &Path) -> anyhow::Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Trains the editor network. Intermediate checkpoints go to
/// `checkpoints/` and are kept on failure so a run can be resumed; the
/// selected network is written to `dafnet.ckpt`.
pub fn cmd_train(ctx: &Context, resume: bool) -> anyhow::Result<TrainSummary> {
    guarded(ctx, |out| {
        let (lm, vocab) = load_lm(ctx)?;
        let records = edit_records(&load_records(ctx)?, &vocab, &ctx.config.train.splits)?;
        let ckpt_dir = ctx.path(CHECKPOINTS);
        let mut trainer = match latest_checkpoint(&ckpt_dir)? {
            Some(path) if resume => {
                ctx.log(format!("train: resuming from {}", path.display()));
                Trainer::resume(&lm, &records, &path)?
            }
            _ => {
                if ckpt_dir.exists() {
                    fs::remove_dir_all(&ckpt_dir)?;
                }
                let mut shapes: Vec<(usize, usize)> = lm
                    .editable_matrices()
                    .iter()
                    .map(|m| (m.d_in, m.d_out))
                    .collect();
                shapes.dedup();
                let net = DafnetParams::new(ctx.config.dafnet.clone(), &shapes)?;
                Trainer::new(&lm, &records, net, ctx.config.train.config.clone())?
            }
        };
        let mut log = read_train_log(&ctx.path(TRAIN_LOG), trainer.state.iter)?;
        ctx.log(format!(
            "train: {} records, {} network scalars",
            records.len(),
            trainer.net.store().num_scalars()
        ));
        let quiet = ctx.quiet;
        trainer.run(Some(&ckpt_dir), |l| {
            if !quiet && (l.iter % 25 == 0 || l.iter == 1) {
                eprintln!(
                    "iter {:5}  T {:3}  rel {:.4}  gen {:.4}  loc {:.4}  ema {:.4}",
                    l.iter, l.t, l.l_rel, l.l_gen, l.l_loc, l.l_ema
                );
            }
            log.push(l.clone());
        })?;
        let mut text = String::new();
        for l in &log {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        out.write(ctx.path(TRAIN_LOG), text.as_bytes())?;
        let best = trainer.best().map(|s| s.iter);
        let mut c = trainer.best_net().to_container();
        c.meta["selected_iter"] = json!(best);
        c.meta["provenance"] = ctx.provenance("train");
        out.write(ctx.path(DAFNET), &c.to_bytes()?)?;
        ctx.log(format!(
            "train: done after {} iterations, selected {best:?}",
            trainer.state.iter
        ));
        Ok(TrainSummary {
            iters: trainer.state.iter,
            best_iter: best,
            t_now: trainer.state.t_now,
            log,
        })
    })
}

pub fn attn_rows(journal: &[EditLog]) -> Vec<AttnRow> {
    let mut rows = Vec::new();
    for log in journal {
        for (m, (&bar, betas)) in log.beta_bar.iter().zip(&log.betas).enumerate() {
            rows.push(AttnRow {
                edit: log.index,
                layer: 0,
                matrix: m,
                value: bar,
            });
            rows.extend(betas.iter().enumerate().map(|(k, &value)| AttnRow {
                edit: log.index,
                layer: k + 1,
                matrix: m,
                value,
            }));
        }
    }
    rows
}

#[derive(Serialize, Deserialize)]
struct MetricsReport {
    editor: String,
    edits: usize,
    rows: Vec<MetricRow>,
    provenance: serde_json::Value,
}

/// Applies the first `edits` evaluation records in sequence and reports
/// metrics at each checkpoint, with the edit journal and fusion weights.
pub fn cmd_eval(ctx: &Context) -> anyhow::Result<Vec<MetricRow>> {
    guarded(ctx, |out| {
        let (lm, vocab) = load_lm(ctx)?;
        let records = edit_records(&load_records(ctx)?, &vocab, &[Property::Eval])?;
        let (edits, checkpoints) = ctx.config.eval_plan()?;
        if edits > records.len() {
            bail!(
                "asked for {edits} edits, the dataset has {} evaluation records",
                records.len()
            );
        }
        let kind = ctx.config.eval.editor;
        let mut editor: Box<dyn Editor> = match kind {
            EditorKind::Dafnet => {
                let path = ctx.path(DAFNET);
                require(&path)?;
                let net = DafnetParams::from_container(&Container::load_kind(&path, "dafnet")?)?;
                Box::new(DafnetEditor::new(net, &lm))
            }
            EditorKind::Ft => Box::new(FtEditor {
                steps: ctx.config.eval.ft_steps,
                lr: ctx.config.eval.ft_lr,
            }),
            EditorKind::Null => Box::new(NullEditor),
        };
        let res = evaluate_sequence(&lm, editor.as_mut(), &records[..edits], &checkpoints)?;
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &res.rows)?;
        out.write(ctx.path(METRICS), &csv)?;
        let report = MetricsReport {
            editor: kind.as_str().into(),
            edits,
            rows: res.rows.clone(),
            provenance: ctx.provenance("eval"),
        };
        out.write(
            ctx.path(METRICS_JSON),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        let mut journal = String::new();
        for l in &res.journal {
            journal.push_str(&serde_json::to_string(l)?);
            journal.push('\n');
        }
        out.write(ctx.path(JOURNAL), journal.as_bytes())?;
        let mut attn = Vec::new();
        write_attn_csv(&mut attn, &attn_rows(&res.journal))?;
        out.write(ctx.path(ATTN), &attn)?;
        for r in &res.rows {
            ctx.log(format!(
                "eval {}: {} edits  rel {:.3}  gen {:.3}  loc {:.3}  avg {:.3}",
                r.editor, r.checkpoint, r.rel, r.gen, r.loc, r.avg
            ));
        }
        Ok(res.rows)
    })
}

/// Rewrites `attn.csv` from an existing `journal.jsonl`.
pub fn cmd_export_attn(ctx: &Context) -> anyhow::Result<usize> {
    guarded(ctx, |out| {
        let path = ctx.path(JOURNAL);
        require(&path)?;
        let mut journal = Vec::new();
        for line in BufReader::new(fs::File::open(&path)?).lines() {
            journal.push(serde_json::from_str::<EditLog>(&line?)?);
        }
        let rows = attn_rows(&journal);
        let mut attn = Vec::new();
        write_attn_csv(&mut attn, &rows)?;
        out.write(ctx.path(ATTN), &attn)?;
        Ok(rows.len())
    })
}
