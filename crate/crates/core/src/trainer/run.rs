use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    curriculum_update, sample_batch, train_iteration, CurriculumState, TrainConfig, TrainRecord,
};
use crate::ckpt::Container;
use crate::eval::EditRecord;
use crate::lm::EditableLm;
use crate::net::DafnetParams;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};
use crate::{Error, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub l_rel: f64,
    pub l_gen: f64,
    pub l_loc: f64,
    pub l_total: f64,
    pub l_ema: f64,
    pub t_now: usize,
}

/// Network weights recorded at a checkpoint.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iter: usize,
    pub l_ema: f64,
    pub t_now: usize,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    train: TrainConfig,
    curriculum: CurriculumState,
    reached_t_max: Option<usize>,
    adam: AdamConfig,
    adam_steps: u64,
}

pub struct Trainer<'a> {
    lm: &'a EditableLm,
    records: Vec<TrainRecord>,
    pub cfg: TrainConfig,
    pub net: DafnetParams,
    opt: Adam,
    pub state: CurriculumState,
    reached_t_max: Option<usize>,
    pub snapshots: Vec<Snapshot>,
}

impl<'a> Trainer<'a> {
    /// `lm` must carry no overlays; it is the frozen pre-edit model.
    pub fn new(
        lm: &'a EditableLm,
        records: &[EditRecord],
        net: DafnetParams,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if lm.overlays().iter().any(Option::is_some) {
            return Err(Error::State("training needs the unedited model".into()));
        }
        if records.is_empty() {
            return Err(Error::Data("no training records".into()));
        }
        let records = records
            .iter()
            .map(|r| TrainRecord::prepare(lm, r))
            .collect::<Result<Vec<_>>>()?;
        let l_ini = cfg
            .l_ini
            .unwrap_or((lm.config().vocab_size as f64).ln() + 1.0);
        let opt = Adam::new(AdamConfig::with_lr(cfg.lr), net.store());
        let reached_t_max = (cfg.t_max == 1).then_some(0);
        Ok(Self {
            lm,
            records,
            cfg,
            net,
            opt,
            state: CurriculumState::new(l_ini),
            reached_t_max,
            snapshots: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        let i = self.state.iter;
        i >= self.cfg.i_max
            || self
                .reached_t_max
                .is_some_and(|r| i - r >= self.cfg.extra_iters)
    }

    pub fn step(&mut self) -> Result<IterLog> {
        let iter = self.state.iter + 1;
        let (t, idx) = sample_batch(self.cfg.seed, iter, self.state.t_now, self.records.len())?;
        let batch: Vec<&TrainRecord> = idx.iter().map(|&i| &self.records[i]).collect();
        let parts = train_iteration(
            self.lm,
            &mut self.net,
            &mut self.opt,
            &batch,
            self.state.t_now,
            &self.cfg,
        )?;
        let total = parts.total();
        if !total.is_finite() {
            return Err(Error::Data(format!("non-finite loss at iteration {iter}")));
        }
        self.state = curriculum_update(&self.state, total, &self.cfg);
        if self.reached_t_max.is_none() && self.state.t_now == self.cfg.t_max {
            self.reached_t_max = Some(self.state.iter);
        }
        Ok(IterLog {
            iter,
            t,
            l_rel: parts.rel,
            l_gen: parts.gen,
            l_loc: parts.loc,
            l_total: total,
            l_ema: self.state.l_ema,
            t_now: self.state.t_now,
        })
    }

    /// Trains until done, snapshotting every `checkpoint_every` iterations
    /// (and writing checkpoint files when `dir` is given).
    pub fn run(&mut self, dir: Option<&Path>, mut on_iter: impl FnMut(&IterLog)) -> Result<()> {
        while !self.is_done() {
            let log = self.step()?;
            on_iter(&log);
            if self.state.iter % self.cfg.checkpoint_every == 0 || self.is_done() {
                self.snapshot();
                if let Some(d) = dir {
                    fs::create_dir_all(d)?;
                    self.save(&checkpoint_path(d, self.state.iter))?;
                }
            }
        }
        Ok(())
    }

    fn snapshot(&mut self) {
        if self
            .snapshots
            .last()
            .is_some_and(|s| s.iter == self.state.iter)
        {
            return;
        }
        self.snapshots.push(Snapshot {
            iter: self.state.iter,
            l_ema: self.state.l_ema,
            t_now: self.state.t_now,
            store: self.net.store().clone(),
        });
    }

    /// The snapshot with the lowest EMA among those taken at `T_max`, or
    /// among all snapshots if none was.
    pub fn best(&self) -> Option<&Snapshot> {
        select_best(&self.snapshots, self.cfg.t_max)
    }

    /// The network holding the weights of [`Self::best`] (or the current
    /// weights when there is no snapshot).
    pub fn best_net(&self) -> DafnetParams {
        let mut net = self.net.clone();
        if let Some(s) = self.best() {
            *net.store_mut() = s.store.clone();
        }
        net
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.net.to_container();
        let (m, v) = self.opt.moments();
        for (((name, t), m), v) in self.net.store().iter().zip(m).zip(v) {
            c.push(
                format!("adam.m.{name}"),
                &Tensor::new(t.shape().to_vec(), m.clone()).expect("shape"),
            );
            c.push(
                format!("adam.v.{name}"),
                &Tensor::new(t.shape().to_vec(), v.clone()).expect("shape"),
            );
        }
        let meta = TrainMeta {
            train: self.cfg.clone(),
            curriculum: self.state.clone(),
            reached_t_max: self.reached_t_max,
            adam: self.opt.config,
            adam_steps: self.opt.steps_taken(),
        };
        c.meta["training"] = serde_json::to_value(meta).expect("serializable");
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    /// Continues a run from a checkpoint written by [`Self::save`]. Earlier
    /// checkpoint files in the same directory are reloaded as snapshots.
    pub fn resume(lm: &'a EditableLm, records: &[EditRecord], path: &Path) -> Result<Self> {
        let c = Container::load_kind(path, "dafnet")?;
        let meta: TrainMeta = serde_json::from_value(c.meta["training"].clone())?;
        let net = DafnetParams::from_container(&c)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in net.store().iter() {
            let get = |k: String| {
                c.get(&k)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{k}`")))
            };
            m.push(get(format!("adam.m.{name}"))?);
            v.push(get(format!("adam.v.{name}"))?);
        }
        let mut t = Self::new(lm, records, net, meta.train)?;
        t.opt = Adam::from_parts(meta.adam, m, v, meta.adam_steps);
        t.state = meta.curriculum;
        t.reached_t_max = meta.reached_t_max;
        if let Some(dir) = path.parent() {
            t.snapshots = load_snapshots(dir, t.state.iter)?;
        }
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("iter-{iter:06}.ckpt"))
}

fn load_snapshots(dir: &Path, upto: usize) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(iter) = name
            .strip_prefix("iter-")
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if iter > upto {
            continue;
        }
        let c = Container::load_kind(&path, "dafnet")?;
        let meta: TrainMeta = serde_json::from_value(c.meta["training"].clone())?;
        out.push(Snapshot {
            iter,
            l_ema: meta.curriculum.l_ema,
            t_now: meta.curriculum.t_now,
            store: DafnetParams::from_container(&c)?.store().clone(),
        });
    }
    out.sort_by_key(|s| s.iter);
    Ok(out)
}

pub fn select_best(snapshots: &[Snapshot], t_max: usize) -> Option<&Snapshot> {
    let pool: Vec<&Snapshot> = if snapshots.iter().any(|s| s.t_now == t_max) {
        snapshots.iter().filter(|s| s.t_now == t_max).collect()
    } else {
        snapshots.iter().collect()
    };
    pool.into_iter().min_by(|a, b| a.l_ema.total_cmp(&b.l_ema))
}
