//! Synthetic tasks: scene/attribute containment and context-vs-memory conflict.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{stream_rng, DataConfig, Stream, Task};
use crate::error::{Error, Result};
use crate::model::MultimodalSample;

/// Language-vocabulary layout shared by both tasks.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const CTX: usize = 1;
    pub const IS: usize = 2;
    pub const Q: usize = 3;
    pub const ANS: usize = 4;
    pub const NULL: usize = 5;
    pub const YES: usize = 6;
    pub const NO: usize = 7;
    /// First token id available for words.
    pub const WORDS: usize = 8;
}

pub const FORMAT_NAME: &str = "asymoe-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainmentSample {
    pub id: usize,
    /// Attribute ids, rendered one per visual token.
    pub scene: Vec<usize>,
    pub query: Vec<usize>,
    /// Whether every query attribute appears in the scene.
    pub label: bool,
}

impl ContainmentSample {
    pub fn oracle_label(&self) -> bool {
        let scene: HashSet<_> = self.scene.iter().collect();
        self.query.iter().all(|a| scene.contains(a))
    }

    pub fn to_multimodal(&self) -> MultimodalSample {
        let nv = self.scene.len();
        let mut language = vec![vocab::Q];
        language.extend(self.query.iter().map(|a| vocab::WORDS + a));
        language.push(vocab::ANS);
        let answer = nv + language.len() - 1;
        MultimodalSample {
            id: self.id,
            visual: self.scene.clone(),
            language,
            context: (0..nv).collect(),
            answers: vec![answer],
            labels: vec![if self.label { vocab::YES } else { vocab::NO }],
            candidates: vec![vocab::YES, vocab::NO],
            entailment: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictSample {
    pub id: usize,
    pub key: usize,
    /// Value asserted by the context statement; `None` for a null context.
    pub value_ctx: Option<usize>,
    /// Value of the key under the training mapping.
    pub global_value: usize,
    pub label: usize,
    /// Distractor visual tokens following the key's visual token.
    pub fillers: Vec<usize>,
}

impl ConflictSample {
    pub fn to_multimodal(&self, n_keys: usize, n_values: usize) -> MultimodalSample {
        let key_tok = vocab::WORDS + self.key;
        let value_tok = |v: usize| vocab::WORDS + n_keys + v;
        let mut visual = vec![self.key];
        visual.extend(&self.fillers);
        let nv = visual.len();
        let stated = self.value_ctx.map_or(vocab::NULL, value_tok);
        let language = vec![vocab::CTX, key_tok, vocab::IS, stated, vocab::Q, key_tok, vocab::ANS];
        MultimodalSample {
            id: self.id,
            visual,
            language,
            context: vec![nv + 1, nv + 2, nv + 3],
            answers: vec![nv + 6],
            labels: vec![value_tok(self.label)],
            candidates: (0..n_values).map(value_tok).collect(),
            entailment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub split: String,
    pub count: usize,
    pub n_attributes: usize,
    pub n_keys: usize,
    pub n_values: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Samples {
    Containment(Vec<ContainmentSample>),
    Conflict(Vec<ConflictSample>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Samples,
}

impl Dataset {
    pub fn containment(split: &str, cfg: &DataConfig, samples: Vec<ContainmentSample>) -> Self {
        Dataset {
            header: header(Task::Containment, split, samples.len(), cfg),
            samples: Samples::Containment(samples),
        }
    }

    pub fn conflict(split: &str, cfg: &DataConfig, samples: Vec<ConflictSample>) -> Self {
        Dataset {
            header: header(Task::Conflict, split, samples.len(), cfg),
            samples: Samples::Conflict(samples),
        }
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Containment(s) => s.len(),
            Samples::Conflict(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        self.header.task
    }

    pub fn to_multimodal(&self) -> Vec<MultimodalSample> {
        match &self.samples {
            Samples::Containment(s) => s.iter().map(ContainmentSample::to_multimodal).collect(),
            Samples::Conflict(s) => s
                .iter()
                .map(|x| x.to_multimodal(self.header.n_keys, self.header.n_values))
                .collect(),
        }
    }

    /// Language token of value `v` in this dataset's layout.
    pub fn value_token(&self, v: usize) -> usize {
        vocab::WORDS + self.header.n_keys + v
    }
}

fn header(task: Task, split: &str, count: usize, cfg: &DataConfig) -> DatasetHeader {
    DatasetHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        task,
        split: split.into(),
        count,
        n_attributes: cfg.n_attributes,
        n_keys: cfg.n_keys,
        n_values: cfg.n_values,
    }
}

fn containment_with_rng(
    rng: &mut ChaCha8Rng,
    n_samples: usize,
    n_attributes: usize,
    scene_size: usize,
    query_size: usize,
) -> Result<Vec<ContainmentSample>> {
    if scene_size == 0 || scene_size >= n_attributes {
        return Err(Error::InvalidArgument(format!(
            "scene_size {scene_size} must lie in 1..{n_attributes} (negatives need an absent attribute)"
        )));
    }
    if query_size == 0 || query_size > scene_size {
        return Err(Error::InvalidArgument(format!(
            "query_size {query_size} must lie in 1..={scene_size}"
        )));
    }
    let n_pos = n_samples.div_ceil(2);
    let mut labels: Vec<bool> = (0..n_samples).map(|i| i < n_pos).collect();
    labels.shuffle(rng);
    let all: Vec<usize> = (0..n_attributes).collect();
    let mut out = Vec::with_capacity(n_samples);
    for (id, label) in labels.into_iter().enumerate() {
        let scene: Vec<usize> = all.choose_multiple(rng, scene_size).copied().collect();
        let mut query: Vec<usize> = if label {
            scene.choose_multiple(rng, query_size).copied().collect()
        } else {
            let absent: Vec<usize> = all.iter().copied().filter(|a| !scene.contains(a)).collect();
            let mut q: Vec<usize> = scene.choose_multiple(rng, query_size - 1).copied().collect();
            q.push(*absent.choose(rng).expect("absent attribute exists"));
            q
        };
        query.shuffle(rng);
        let s = ContainmentSample { id, scene, query, label };
        if s.oracle_label() != label {
            return Err(Error::Contract(format!("containment sample {id} failed the inclusion recheck")));
        }
        out.push(s);
    }
    Ok(out)
}

/// Scenes of `scene_size` distinct attributes with queries of 2 attributes.
pub fn generate_containment(seed: u64, n_samples: usize, n_attributes: usize, scene_size: usize) -> Result<Vec<ContainmentSample>> {
    let mut rng = stream_rng(seed, Stream::Data);
    containment_with_rng(&mut rng, n_samples, n_attributes, scene_size, 2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictData {
    /// Global key → value mapping taught by the training set.
    pub mapping: Vec<usize>,
    pub train: Vec<ConflictSample>,
    pub consistent: Vec<ConflictSample>,
    pub conflict: Vec<ConflictSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConflictParams {
    pub n_keys: usize,
    pub n_values: usize,
    pub conflict_rate: f64,
    pub null_context_rate: f64,
    pub n_fillers: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl From<&DataConfig> for ConflictParams {
    fn from(c: &DataConfig) -> Self {
        ConflictParams {
            n_keys: c.n_keys,
            n_values: c.n_values,
            conflict_rate: c.conflict_rate,
            null_context_rate: c.null_context_rate,
            n_fillers: c.n_fillers,
            n_train: c.n_train,
            n_eval: c.n_eval,
        }
    }
}

fn other_value<R: Rng + ?Sized>(rng: &mut R, n_values: usize, avoid: usize) -> usize {
    let v = rng.random_range(0..n_values - 1);
    if v >= avoid {
        v + 1
    } else {
        v
    }
}

/// Training set with occasional in-context overrides and null contexts,
/// plus evidence-consistent and conflicting evaluation splits.
pub fn generate_conflict(seed: u64, p: &ConflictParams) -> Result<ConflictData> {
    if !(p.conflict_rate > 0.0 && p.conflict_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "conflict_rate {} must lie in (0,1)",
            p.conflict_rate
        )));
    }
    if !(p.null_context_rate >= 0.0 && p.null_context_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "null_context_rate {} must lie in [0,1)",
            p.null_context_rate
        )));
    }
    if p.n_values < 2 || p.n_keys == 0 {
        return Err(Error::InvalidArgument("need n_values ≥ 2 and n_keys ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let mapping: Vec<usize> = (0..p.n_keys).map(|_| rng.random_range(0..p.n_values)).collect();
    let fillers = |rng: &mut ChaCha8Rng| (0..p.n_fillers).map(|_| rng.random_range(0..p.n_keys)).collect();

    let mut train = Vec::with_capacity(p.n_train);
    for id in 0..p.n_train {
        let key = rng.random_range(0..p.n_keys);
        let global = mapping[key];
        let value_ctx = if rng.random::<f64>() < p.null_context_rate {
            None
        } else if rng.random::<f64>() < p.conflict_rate {
            Some(other_value(&mut rng, p.n_values, global))
        } else {
            Some(global)
        };
        train.push(ConflictSample {
            id,
            key,
            value_ctx,
            global_value: global,
            label: value_ctx.unwrap_or(global),
            fillers: fillers(&mut rng),
        });
    }
    let split = |conflicting: bool, rng: &mut ChaCha8Rng| -> Vec<ConflictSample> {
        (0..p.n_eval)
            .map(|id| {
                let key = rng.random_range(0..p.n_keys);
                let global = mapping[key];
                let v = if conflicting {
                    other_value(rng, p.n_values, global)
                } else {
                    global
                };
                ConflictSample {
                    id,
                    key,
                    value_ctx: Some(v),
                    global_value: global,
                    label: v,
                    fillers: fillers(rng),
                }
            })
            .collect()
    };
    let consistent = split(false, &mut rng);
    let conflict = split(true, &mut rng);
    let data = ConflictData {
        mapping,
        train,
        consistent,
        conflict,
    };
    verify_conflict(&data)?;
    Ok(data)
}

/// Rechecks every conflict-task label against the mapping.
pub fn verify_conflict(d: &ConflictData) -> Result<()> {
    let check = |s: &ConflictSample, ok: bool, what: &str| {
        if ok && s.global_value == d.mapping[s.key] && s.label == s.value_ctx.unwrap_or(s.global_value) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} sample {} failed the mapping recheck", s.id)))
        }
    };
    for s in &d.train {
        check(s, true, "train")?;
    }
    for s in &d.consistent {
        check(s, s.value_ctx == Some(s.global_value), "consistent")?;
    }
    for s in &d.conflict {
        check(s, s.value_ctx.is_some_and(|v| v != s.global_value), "conflict")?;
    }
    Ok(())
}

/// All splits of the configured task: `train`/`eval` for containment,
/// `train`/`consistent`/`conflict` for the conflict task.
pub fn build_datasets(seed: u64, cfg: &DataConfig) -> Result<Vec<Dataset>> {
    match cfg.task {
        Task::Containment => {
            let mut rng = stream_rng(seed, Stream::Data);
            let train = containment_with_rng(&mut rng, cfg.n_train, cfg.n_attributes, cfg.scene_size, cfg.query_size)?;
            let eval = containment_with_rng(&mut rng, cfg.n_eval, cfg.n_attributes, cfg.scene_size, cfg.query_size)?;
            Ok(vec![
                Dataset::containment("train", cfg, train),
                Dataset::containment("eval", cfg, eval),
            ])
        }
        Task::Conflict => {
            let d = generate_conflict(seed, &ConflictParams::from(cfg))?;
            Ok(vec![
                Dataset::conflict("train", cfg, d.train),
                Dataset::conflict("consistent", cfg, d.consistent),
                Dataset::conflict("conflict", cfg, d.conflict),
            ])
        }
    }
}

pub fn write_jsonl(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut header = d.header.clone();
    header.count = d.len();
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    match &d.samples {
        Samples::Containment(s) => write_lines(&mut w, s)?,
        Samples::Conflict(s) => write_lines(&mut w, s)?,
    }
    w.flush()?;
    Ok(())
}

fn write_lines<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file (missing header)".into(),
    })??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    fn parse_all<T: for<'de> Deserialize<'de>>(
        lines: impl Iterator<Item = std::io::Result<String>>,
        count: usize,
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "blank line".into(),
                });
            }
            let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            out.push(item);
        }
        if out.len() != count {
            return Err(Error::Parse {
                line: out.len() + 2,
                msg: format!("header announces {count} samples, file holds {}", out.len()),
            });
        }
        Ok(out)
    }
    let samples = match header.task {
        Task::Containment => Samples::Containment(parse_all(lines, header.count)?),
        Task::Conflict => Samples::Conflict(parse_all(lines, header.count)?),
    };
    Ok(Dataset { header, samples })
}
