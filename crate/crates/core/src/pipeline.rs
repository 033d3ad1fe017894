//! Run-directory pipeline: a flat key=value configuration, one function per
//! stage, and a manifest recording each artifact's hash together with the
//! hash of the configuration that produced it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentConfig, AugmentReport};
use crate::biencoder::EncoderParams;
use crate::corpus::{
    build_response_set, generate_synthetic, load_dataset, DialogueDataset, ResponseSet, Source, Split,
    Vocab,
};
use crate::error::{G2rError, Result};
use crate::mips::{HnswParams, IndexKind, MipsIndex};
use crate::rng::{derive_seed, sha256_hex};
use crate::serve::{build_response_index, chat_repl, Responder};
use crate::teacher::{train_teacher, MiMean, TeacherLM};
use crate::train::{hits_at, history_csv, train, Mode, ScoreKind, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Corpus,
    Teacher,
    Augment,
    Train,
    Index,
    Serve,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

/// Every configuration key with its default and owning stage.
pub const KEYS: &[(&str, &str, Stage)] = &[
    ("seed", "0", Stage::Corpus),
    ("corpus_path", "", Stage::Corpus),
    ("n_pairs", "5000", Stage::Corpus),
    ("vocab_size", "400", Stage::Corpus),
    ("n_topics", "10", Stage::Corpus),
    ("valid_frac", "0.1", Stage::Corpus),
    ("test_frac", "0.1", Stage::Corpus),
    ("max_turns", "3", Stage::Corpus),
    ("add_k", "0.1", Stage::Teacher),
    ("aug_constraints", "10:5,20:5", Stage::Augment),
    ("top_k", "20", Stage::Augment),
    ("max_len", "40", Stage::Augment),
    ("block_context_trigrams", "true", Stage::Augment),
    ("block_response_trigrams", "true", Stage::Augment),
    ("cache_scores", "true", Stage::Augment),
    ("score_kind", "ll", Stage::Augment),
    ("mi_mean", "log", Stage::Augment),
    ("train_data", "augmented", Stage::Train),
    ("dim", "16", Stage::Train),
    ("alpha", "0.9", Stage::Train),
    ("temperature", "1", Stage::Train),
    ("contexts_per_batch", "48", Stage::Train),
    ("responses_per_context", "10", Stage::Train),
    ("shared_negatives", "512", Stage::Train),
    ("learning_rate", "0.1", Stage::Train),
    ("grad_clip", "0.1", Stage::Train),
    ("lr_decay", "0.5", Stage::Train),
    ("lr_patience", "1", Stage::Train),
    ("epochs", "20", Stage::Train),
    ("steps_per_epoch", "0", Stage::Train),
    ("mode", "ce_plus_kd", Stage::Train),
    ("eval_k", "20", Stage::Train),
    ("eval_seed", "0", Stage::Train),
    ("record_timing", "true", Stage::Train),
    ("index_kind", "hnsw", Stage::Index),
    ("hnsw_m", "32", Stage::Index),
    ("ef_construction", "200", Stage::Index),
    ("ef_search", "256", Stage::Serve),
    ("window", "3", Stage::Serve),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| G2rError::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| G2rError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| G2rError::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(G2rError::invalid(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get_str(key);
        raw.parse()
            .map_err(|e| G2rError::invalid(format!("config {key} = {raw:?}: {e}")))
    }

    fn enum_value<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key);
        serde_json::from_value(serde_json::Value::String(raw.to_string()))
            .map_err(|_| G2rError::invalid(format!("config {key} = {raw:?} is not a recognised value")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).unwrap() + "\n"
    }

    /// Hash of the keys owned by `stage` and every stage before it.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut s = String::new();
        for (k, _, owner) in KEYS {
            if *owner <= stage {
                s.push_str(&format!("{k}={}\n", self.get_str(k)));
            }
        }
        sha256_hex(s.as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn augment_config(&self) -> Result<AugmentConfig> {
        Ok(AugmentConfig {
            samples_per_constraint: AugmentConfig::parse_constraints(self.get_str("aug_constraints"))?,
            top_k: self.get("top_k")?,
            max_len: self.get("max_len")?,
            block_context_trigrams: self.get("block_context_trigrams")?,
            block_response_trigrams: self.get("block_response_trigrams")?,
            seed: derive_seed(self.seed()?, 3),
            cache_scores: self.get("cache_scores")?,
            score_kind: self.enum_value::<ScoreKind>("score_kind")?,
            mi_mean: self.enum_value::<MiMean>("mi_mean")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            alpha: self.get("alpha")?,
            temperature: self.get("temperature")?,
            contexts_per_batch: self.get("contexts_per_batch")?,
            responses_per_context: self.get("responses_per_context")?,
            shared_negatives: self.get("shared_negatives")?,
            learning_rate: self.get("learning_rate")?,
            grad_clip: self.get("grad_clip")?,
            lr_decay: self.get("lr_decay")?,
            lr_patience: self.get("lr_patience")?,
            epochs: self.get("epochs")?,
            steps_per_epoch: self.get("steps_per_epoch")?,
            seed: derive_seed(self.seed()?, 4),
            mode: self.enum_value::<Mode>("mode")?,
            score_kind: self.enum_value::<ScoreKind>("score_kind")?,
            eval_k: self.get("eval_k")?,
            eval_seed: self.get("eval_seed")?,
            record_timing: self.get("record_timing")?,
        })
    }

    pub fn index_kind(&self) -> Result<IndexKind> {
        self.enum_value("index_kind")
    }

    pub fn hnsw_params(&self) -> Result<HnswParams> {
        Ok(HnswParams::new(
            self.get("hnsw_m")?,
            self.get("ef_construction")?,
            derive_seed(self.seed()?, 5),
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: Stage,
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

pub mod files {
    pub const TRAIN: &str = "train.jsonl";
    pub const VALID: &str = "valid.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const TEACHER: &str = "teacher.g2rt";
    pub const VOCAB: &str = "vocab.txt";
    pub const RESPONSES: &str = "r.jsonl";
    pub const AUG_DATA: &str = "dg.jsonl";
    pub const AUG_RESPONSES: &str = "rg.jsonl";
    pub const AUG_REPORT: &str = "augment_report.json";
    pub const PARAMS: &str = "params.g2rb";
    pub const HISTORY: &str = "history.csv";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const INDEX: &str = "index.g2ri";
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.json";
}

/// A directory of stage artifacts plus their manifest.
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
    pub force: bool,
}

impl RunDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| G2rError::io(&root, e))?;
        let mpath = root.join(files::MANIFEST);
        let manifest = if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| G2rError::io(&mpath, e))?;
            serde_json::from_str(&text).map_err(|e| G2rError::Parse {
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            Manifest::default()
        };
        Ok(RunDir {
            root,
            manifest,
            force: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn file_hash(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        let bytes = std::fs::read(&p).map_err(|e| G2rError::io(&p, e))?;
        Ok(sha256_hex(&bytes))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| G2rError::io(&p, e))
    }

    /// Records `name` as produced by `stage` under `cfg`.
    pub fn record(&mut self, name: &str, stage: Stage, cfg: &Config) -> Result<()> {
        let rec = ArtifactRecord {
            stage,
            sha256: self.file_hash(name)?,
            config_hash: cfg.stage_hash(stage),
        };
        self.manifest.artifacts.insert(name.to_string(), rec);
        self.save_manifest()?;
        self.write(files::CONFIG, cfg.to_json().as_bytes())
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).unwrap() + "\n";
        self.write(files::MANIFEST, text.as_bytes())
    }

    /// Checks that `name` exists, is unchanged since it was recorded, and
    /// was produced under the current configuration. With `force` only
    /// existence is required.
    pub fn check(&self, name: &str, cfg: &Config) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(G2rError::MissingArtifact(p.display().to_string()));
        }
        if self.force {
            return Ok(p);
        }
        let rec = self
            .manifest
            .artifacts
            .get(name)
            .ok_or_else(|| G2rError::MissingArtifact(format!("{name} is not in the manifest")))?;
        let found = self.file_hash(name)?;
        if found != rec.sha256 {
            return Err(G2rError::HashMismatch {
                artifact: name.to_string(),
                expected: rec.sha256.clone(),
                found,
            });
        }
        let want = cfg.stage_hash(rec.stage);
        if want != rec.config_hash {
            return Err(G2rError::HashMismatch {
                artifact: format!("{name} (config)"),
                expected: want,
                found: rec.config_hash.clone(),
            });
        }
        Ok(p)
    }
}

/// Writes the train/valid/test splits, generated or read from `corpus_path`.
pub fn stage_corpus(run: &mut RunDir, cfg: &Config) -> Result<[DialogueDataset; 3]> {
    let path = cfg.get_str("corpus_path");
    let mut all = if path.is_empty() {
        generate_synthetic(
            cfg.seed()?,
            cfg.get("n_pairs")?,
            cfg.get("vocab_size")?,
            cfg.get("n_topics")?,
        )?
    } else {
        load_dataset(path, Split::Train)?
    };
    all.set_max_turns(cfg.get("max_turns")?)?;
    let splits = all.split_three(cfg.get("valid_frac")?, cfg.get("test_frac")?)?;
    for (ds, name) in splits.iter().zip([files::TRAIN, files::VALID, files::TEST]) {
        ds.save(run.path(name))?;
        run.record(name, Stage::Corpus, cfg)?;
    }
    Ok(splits)
}

fn load_split(run: &RunDir, cfg: &Config, name: &str, split: Split) -> Result<DialogueDataset> {
    let mut ds = load_dataset(run.check(name, cfg)?, split)?;
    ds.set_max_turns(cfg.get("max_turns")?)?;
    Ok(ds)
}

pub fn stage_teacher(run: &mut RunDir, cfg: &Config) -> Result<TeacherLM> {
    let train_ds = load_split(run, cfg, files::TRAIN, Split::Train)?;
    let lm = train_teacher(&train_ds, cfg.get("add_k")?)?;
    lm.save(run.path(files::TEACHER))?;
    run.record(files::TEACHER, Stage::Teacher, cfg)?;
    lm.vocab().save(run.path(files::VOCAB))?;
    run.record(files::VOCAB, Stage::Teacher, cfg)?;
    Ok(lm)
}

pub fn stage_augment(run: &mut RunDir, cfg: &Config) -> Result<AugmentReport> {
    let train_ds = load_split(run, cfg, files::TRAIN, Split::Train)?;
    let lm = TeacherLM::load(run.check(files::TEACHER, cfg)?)?;
    let base = build_response_set(&train_ds);
    let (dg, rg, report) = augment_dataset(&lm, &train_ds, &base, &cfg.augment_config()?)?;
    base.save(run.path(files::RESPONSES))?;
    run.record(files::RESPONSES, Stage::Augment, cfg)?;
    dg.save(run.path(files::AUG_DATA))?;
    run.record(files::AUG_DATA, Stage::Augment, cfg)?;
    rg.save(run.path(files::AUG_RESPONSES))?;
    run.record(files::AUG_RESPONSES, Stage::Augment, cfg)?;
    run.write(
        files::AUG_REPORT,
        (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes(),
    )?;
    run.record(files::AUG_REPORT, Stage::Augment, cfg)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub best_valid_hits1: f64,
    pub best_epoch: usize,
    pub test_hits1: f64,
    pub test_hits5: f64,
    pub eval_k: usize,
}

/// The training pairs and response set selected by `train_data`.
pub fn training_inputs(run: &RunDir, cfg: &Config) -> Result<(DialogueDataset, ResponseSet)> {
    let mut dg = load_split(run, cfg, files::AUG_DATA, Split::Train)?;
    match cfg.get_str("train_data") {
        "augmented" => Ok((dg, ResponseSet::load(run.check(files::AUG_RESPONSES, cfg)?)?)),
        "original" => {
            dg.pairs.retain(|p| p.source == Source::Original);
            Ok((dg, ResponseSet::load(run.check(files::RESPONSES, cfg)?)?))
        }
        other => Err(G2rError::invalid(format!(
            "train_data = {other:?} must be augmented or original"
        ))),
    }
}

/// The response set the served index covers.
pub fn serving_set(run: &RunDir, cfg: &Config) -> Result<ResponseSet> {
    training_inputs(run, cfg).map(|(_, set)| set)
}

pub fn stage_train(run: &mut RunDir, cfg: &Config) -> Result<TrainReport> {
    let (data, set) = training_inputs(run, cfg)?;
    let valid = load_split(run, cfg, files::VALID, Split::Valid)?;
    let test = load_split(run, cfg, files::TEST, Split::Test)?;
    let vocab = Vocab::load(run.check(files::VOCAB, cfg)?)?;
    let tcfg = cfg.train_config()?;
    let init = EncoderParams::init(vocab.len(), cfg.get("dim")?, derive_seed(cfg.seed()?, 2))?;
    let out = train(init, &vocab, &data, &set, &valid, &tcfg)?;
    out.params.save(run.path(files::PARAMS))?;
    run.record(files::PARAMS, Stage::Train, cfg)?;
    run.write(files::HISTORY, history_csv(&out.history).as_bytes())?;
    run.record(files::HISTORY, Stage::Train, cfg)?;
    let report = TrainReport {
        steps: out.history.len(),
        best_valid_hits1: out.best_hits1,
        best_epoch: out.best_epoch,
        test_hits1: hits_at(&out.params, &vocab, &test, tcfg.eval_k, 1, tcfg.eval_seed)?,
        test_hits5: hits_at(&out.params, &vocab, &test, tcfg.eval_k, 5.min(tcfg.eval_k), tcfg.eval_seed)?,
        eval_k: tcfg.eval_k,
    };
    run.write(
        files::TRAIN_REPORT,
        (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes(),
    )?;
    run.record(files::TRAIN_REPORT, Stage::Train, cfg)?;
    Ok(report)
}

pub fn stage_index(run: &mut RunDir, cfg: &Config) -> Result<MipsIndex> {
    let set = serving_set(run, cfg)?;
    let vocab = Vocab::load(run.check(files::VOCAB, cfg)?)?;
    let params = EncoderParams::load(run.check(files::PARAMS, cfg)?)?;
    let index = build_response_index(&params, &vocab, &set, cfg.index_kind()?, cfg.hnsw_params()?)?;
    index.save(run.path(files::INDEX))?;
    run.record(files::INDEX, Stage::Index, cfg)?;
    Ok(index)
}

/// Loaded serving artifacts.
pub struct Served {
    pub params: EncoderParams,
    pub vocab: Vocab,
    pub set: ResponseSet,
    pub index: MipsIndex,
}

impl Served {
    pub fn load(run: &RunDir, cfg: &Config) -> Result<Self> {
        Ok(Served {
            set: serving_set(run, cfg)?,
            vocab: Vocab::load(run.check(files::VOCAB, cfg)?)?,
            params: EncoderParams::load(run.check(files::PARAMS, cfg)?)?,
            index: MipsIndex::load(run.check(files::INDEX, cfg)?)?,
        })
    }

    pub fn responder(&self, cfg: &Config, force: bool) -> Result<Responder<'_>> {
        Responder::new(
            &self.params,
            &self.vocab,
            &self.set,
            &self.index,
            cfg.get("ef_search")?,
            force,
        )
    }
}

/// Replays `script` through the chat loop and returns the transcript.
pub fn chat_transcript(run: &RunDir, cfg: &Config, script: &str, show_latency: bool) -> Result<String> {
    let served = Served::load(run, cfg)?;
    let responder = served.responder(cfg, run.force)?;
    let mut out = Vec::new();
    chat_repl(&responder, cfg.get("window")?, script.as_bytes(), &mut out, show_latency)?;
    Ok(String::from_utf8(out).expect("chat output is UTF-8"))
}

/// Runs every stage in order.
pub fn run_all(run: &mut RunDir, cfg: &Config) -> Result<TrainReport> {
    stage_corpus(run, cfg)?;
    stage_teacher(run, cfg)?;
    stage_augment(run, cfg)?;
    let report = stage_train(run, cfg)?;
    stage_index(run, cfg)?;
    Ok(report)
}
