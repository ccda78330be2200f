//! End-to-end run orchestration: one config, one output directory, staged
//! artifacts, every artifact stamped with the hash of the config that
//! produced it.
//!
//! ## Stages
//!
//! Each stage reads only files earlier stages wrote, so runs can be resumed
//! or re-entered at any point:
//!
//! 1. `gen_data`: corpus, vocabulary, and the five QA evaluation files.
//! 2. `train_model`: curriculum training, checkpoint, loss log.
//! 3. `eval_qa`: answer-quality metrics per evaluation mode.
//! 4. `localize`: flow attributions aggregated into per-head scores.
//! 5. `specialize`: top-k head sets picked from the score table.
//! 6. `ablate`: head-set knockouts vs. matched random knockouts.
//! 7. `fv`: head-output vectors extracted, swept, and patched in.
//! 8. `niah`: needle copy rate with and without the retrieval-head boost.
//! 9. `probe`: answer-source probe, shuffled control, source localization.
//! 10. `report`: the head map SVG and the localization HTML page.
//!
//! ## Lineage
//!
//! [`config_hash`] hashes the full [`RunConfig`]. JSON artifacts carry it in
//! an [`Artifact`] envelope, JSONL files in their header line. Loading with
//! a stale hash fails with [`Error::LineageMismatch`] instead of silently
//! mixing runs; loading a missing file names the stage that produces it.
//!
//! ## Seeds
//!
//! All randomness flows from `cfg.seed` through [`seed_stream`], which
//! derives an independent stream per purpose name. Stages never share a
//! stream, so adding draws to one stage cannot shift another.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas::{random_heads, HeadScoreTable, HeadSets};
use crate::attribution::{attribute, AttributionOptions, RelevanceTrace};
use crate::corpus::{
    build_conflict_example, build_niah_example, build_qa_example, build_value_swap_example,
    cloze_prompt, generate_corpus, needle_pool, read_jsonl, render_bio, score_answer,
    validate_corpus, write_jsonl, Attribute, BioRecord, Corpus, CorpusParams, JsonlHeader,
    QAExample, QaMode, Vocab, ALL_ATTRIBUTES, GENERATOR_VERSION, TOK_A, TOK_BOS, TOK_CTX, TOK_EOS,
};
use crate::error::{Error, Result};
use crate::interventions::{ablation_spec, boost_spec, FvBank};
use crate::model::{
    forward, generate, load_checkpoint, save_checkpoint, train, ForwardTrace, GenerateOptions,
    InterventionSpec, ModelConfig, TrainExample, TrainOptions, TrainSet, Weights,
};
use crate::provenance::{
    lens_features, localize_source, probe_auc, train_probe, Probe, ProbeDataset,
};
use crate::report::{
    functional_map_svg, head_scores_csv, localization_html, train_log_csv, LocalizationSample,
};

/// Bump on any breaking change to [`RunConfig`]'s shape or meaning.
pub const RUN_CONFIG_VERSION: u32 = 1;

/// Output directory override, read when no explicit path is given.
pub const ENV_OUT_DIR: &str = "HEADATLAS_OUT";

pub const FILE_CONFIG: &str = "config.json";
pub const FILE_CORPUS: &str = "corpus.jsonl";
pub const FILE_VOCAB: &str = "vocab.json";
pub const FILE_QA_CLOSED: &str = "qa_eval_closed.jsonl";
pub const FILE_QA_ORACLE: &str = "qa_eval_oracle.jsonl";
pub const FILE_QA_COUNTERFACTUAL: &str = "qa_eval_counterfactual.jsonl";
pub const FILE_QA_CONFLICT: &str = "qa_eval_conflict.jsonl";
pub const FILE_QA_NIAH: &str = "qa_eval_niah.jsonl";
pub const FILE_MODEL: &str = "model.ckpt";
pub const FILE_TRAIN_LOG: &str = "train_log.csv";
pub const FILE_TRAIN_SUMMARY: &str = "train.json";
pub const FILE_EVAL_QA: &str = "eval_qa.json";
pub const FILE_HEAD_SCORES_CSV: &str = "head_scores.csv";
pub const FILE_HEAD_SCORES: &str = "head_scores.json";
pub const FILE_HEAD_SETS: &str = "head_sets.json";
pub const FILE_ABLATION: &str = "ablation.json";
pub const FILE_FV: &str = "fv.json";
pub const FILE_NIAH: &str = "niah.json";
pub const FILE_PROBE: &str = "probe.json";
pub const FILE_LOC_SAMPLES: &str = "localization_samples.json";
pub const FILE_LOC_HTML: &str = "localization.html";
pub const FILE_MAP_SVG: &str = "functional_map.svg";

/// Model shape knobs exposed to the config file. The vocabulary size and the
/// initialization seed are derived by the pipeline, not configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
    pub use_rms_norm: bool,
    pub use_mlp: bool,
}

/// Optimizer knobs exposed to the config file; the data-order seed is
/// derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    /// Sampling weights for the (closed, counterfactual, lm, copy) streams.
    pub mode_weights: [f64; 4],
    /// Cosine-decay floor as a fraction of `lr`; 1.0 keeps lr constant.
    pub lr_min_fraction: f32,
    pub log_every: usize,
}

/// The one config that determines an entire run. Hashing it yields the
/// lineage stamp on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelSpec,
    pub corpus: CorpusParams,
    pub train: TrainSpec,
    /// Head-set sizes: strongest context-preferring, parameter-preferring,
    /// question-reading, and value-fetching heads.
    pub k_contextual: usize,
    pub k_parametric: usize,
    pub k_task: usize,
    pub k_retrieval: usize,
    /// Attribution prompts sampled per side when scoring heads.
    pub n_score_prompts: usize,
    /// Patch strengths swept on the dev slice; best one is kept.
    pub fv_alphas: Vec<f32>,
    pub boost_add: f32,
    pub boost_mult: f32,
    pub n_niah: usize,
    pub probe_dev_fraction: f64,
}

impl RunConfig {
    /// Full-size profile for interactive desk work.
    pub fn desk_default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            seed: 7,
            model: ModelSpec {
                n_layers: 8,
                n_heads: 8,
                model_dim: 128,
                mlp_dim: 256,
                max_seq_len: 160,
                norm_eps: 1e-5,
                use_rms_norm: true,
                use_mlp: true,
            },
            corpus: CorpusParams {
                n_entities: 512,
                eval_fraction: 0.25,
            },
            train: TrainSpec {
                steps: 5000,
                batch_size: 12,
                lr: 1e-3,
                warmup_steps: 50,
                grad_clip: 1.0,
                mode_weights: [1.0, 1.0, 0.7, 0.7],
                lr_min_fraction: 0.1,
                log_every: 25,
            },
            k_contextual: 16,
            k_parametric: 16,
            k_task: 8,
            k_retrieval: 8,
            n_score_prompts: 64,
            fv_alphas: vec![1.0, 2.0, 3.0],
            boost_add: 5.0,
            boost_mult: 1000.0,
            n_niah: 50,
            probe_dev_fraction: 0.25,
        }
    }

    /// Smaller profile sized for a single-core CI budget; same structure,
    /// fewer entities and a narrower model.
    pub fn compact() -> Self {
        let mut cfg = Self::desk_default();
        cfg.model.model_dim = 64;
        cfg.model.mlp_dim = 128;
        cfg.corpus.n_entities = 128;
        cfg.n_score_prompts = 40;
        cfg.n_niah = 40;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} unsupported; this build reads version {RUN_CONFIG_VERSION}",
                self.version
            )));
        }
        let n_total = self.model.n_layers * self.model.n_heads;
        for (label, k) in [
            ("k_contextual", self.k_contextual),
            ("k_parametric", self.k_parametric),
            ("k_task", self.k_task),
            ("k_retrieval", self.k_retrieval),
        ] {
            if k == 0 || k > n_total {
                return Err(Error::InvalidConfig(format!(
                    "{label} = {k} must be in 1..={n_total} (total heads)"
                )));
            }
        }
        if self.n_score_prompts == 0 {
            return Err(Error::InvalidConfig("n_score_prompts must be > 0".into()));
        }
        if self.fv_alphas.is_empty() {
            return Err(Error::InvalidConfig("fv_alphas must not be empty".into()));
        }
        if self.fv_alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidConfig(
                "fv_alphas must be positive and finite".into(),
            ));
        }
        if !self.boost_add.is_finite() || !self.boost_mult.is_finite() || self.boost_mult <= 0.0 {
            return Err(Error::InvalidConfig(
                "boost constants must be finite, multiplier positive".into(),
            ));
        }
        if self.n_niah == 0 {
            return Err(Error::InvalidConfig("n_niah must be > 0".into()));
        }
        if !(self.probe_dev_fraction > 0.0 && self.probe_dev_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "probe_dev_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the config's canonical JSON; the lineage stamp.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("RunConfig serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex(&hasher.finalize())
}

/// Independent deterministic seed for one named purpose under a run seed.
pub fn seed_stream(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest >= 8 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Output directory precedence: explicit flag, then `HEADATLAS_OUT`, then
/// `./out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    resolve_out_dir_from(flag, std::env::var_os(ENV_OUT_DIR))
}

fn resolve_out_dir_from(flag: Option<&Path>, env: Option<std::ffi::OsString>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env {
        if !e.is_empty() {
            return PathBuf::from(e);
        }
    }
    PathBuf::from("out")
}

/// Envelope every JSON artifact is stored in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub config_hash: String,
    pub data: T,
}

fn save_json<T: Serialize>(path: &Path, kind: &str, hash: &str, data: &T) -> Result<()> {
    let artifact = Artifact {
        kind: kind.to_string(),
        config_hash: hash.to_string(),
        data,
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
    hash: &str,
    producer: &'static str,
) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            producer,
        });
    }
    let text = std::fs::read_to_string(path)?;
    let artifact: Artifact<T> = serde_json::from_str(&text)?;
    if artifact.kind != kind {
        return Err(Error::LineageMismatch {
            path: path.display().to_string(),
            found: format!("kind {:?}", artifact.kind),
            expected: format!("kind {kind:?}"),
        });
    }
    if artifact.config_hash != hash {
        return Err(Error::LineageMismatch {
            path: path.display().to_string(),
            found: artifact.config_hash,
            expected: hash.to_string(),
        });
    }
    Ok(artifact.data)
}

/// Mean answer metrics for one evaluation mode, fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub n: usize,
    pub recall: f64,
    pub em: f64,
    /// Mean over examples that had a context.
    pub k_precision: Option<f64>,
}

impl ModeScore {
    fn from_examples(scored: &[crate::corpus::AnswerScore]) -> Self {
        let n = scored.len();
        if n == 0 {
            return Self {
                n: 0,
                recall: 0.0,
                em: 0.0,
                k_precision: None,
            };
        }
        let recall = scored.iter().map(|s| s.recall).sum::<f64>() / n as f64;
        let em = scored.iter().filter(|s| s.em).count() as f64 / n as f64;
        let with_ctx: Vec<f64> = scored.iter().filter_map(|s| s.k_precision).collect();
        let k_precision = if with_ctx.is_empty() {
            None
        } else {
            Some(with_ctx.iter().sum::<f64>() / with_ctx.len() as f64)
        };
        Self {
            n,
            recall,
            em,
            k_precision,
        }
    }

    /// Recall rescaled to 0..100 points, the unit drop thresholds use.
    pub fn recall_points(&self) -> f64 {
        self.recall * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub n_records: usize,
    pub n_train_records: usize,
    pub n_eval_records: usize,
    pub vocab_size: usize,
    /// Examples written per QA evaluation file.
    pub n_examples: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub n_closed: usize,
    pub n_counterfactual: usize,
    pub n_lm: usize,
    pub n_copy: usize,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEvalSummary {
    pub closed: ModeScore,
    pub oracle: ModeScore,
    pub counterfactual: ModeScore,
    pub conflict: ModeScore,
    pub niah: ModeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeSummary {
    pub n_open_traces: usize,
    pub n_closed_traces: usize,
    /// Worst relative flow-conservation gap seen across all attributions.
    pub max_audit_rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCondition {
    pub label: String,
    pub n: usize,
    pub recall_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub conditions: Vec<AblationCondition>,
    /// Open-book counterfactual recall lost to the contextual-set knockout.
    pub contextual_drop_points: f64,
    /// Same prompts, size-matched random knockout.
    pub random_open_drop_points: f64,
    /// Closed-book recall lost to the parametric-set knockout.
    pub parametric_drop_points: f64,
    pub random_closed_drop_points: f64,
    /// Absolute open-book counterfactual shift under the parametric knockout.
    pub parametric_open_shift_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFvSummary {
    pub alpha: f32,
    pub n: usize,
    pub n_source_prompts: usize,
    /// Fraction of counterfactual prompts answered with the stored value
    /// when patched, vs. unpatched.
    pub override_rate: f64,
    pub baseline_override_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvSummary {
    pub alpha: f32,
    pub n_eval: usize,
    /// Recall of the queried value on bare context prompts (no question).
    pub baseline_recall_points: f64,
    pub task_recall_points: f64,
    pub random_recall_points: f64,
    pub parametric: Option<ParametricFvSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahSummary {
    pub n: usize,
    pub baseline_recall_points: f64,
    pub boosted_recall_points: f64,
    pub boost_add: f32,
    pub boost_mult: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe: Probe,
    pub n_train_samples: usize,
    pub n_eval_samples: usize,
    pub auc: f64,
    pub shuffled_auc: f64,
    pub n_localized: usize,
    pub top1_weighted: f64,
    pub top1_uniform: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub gen_data: GenDataSummary,
    pub train: TrainSummary,
    pub eval_qa: QaEvalSummary,
    pub localize: LocalizeSummary,
    pub ablation: AblationSummary,
    pub fv: FvSummary,
    pub niah: NiahSummary,
    pub probe: ProbeSummary,
    pub report: ReportSummary,
}

/// A validated config bound to an output directory; all stages hang off it.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    vocab: Vocab,
}

impl Run {
    pub fn new(cfg: RunConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&cfg);
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            hash,
            vocab: Vocab::build(),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// The concrete model shape: config knobs plus the derived vocabulary
    /// size and initialization seed.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.cfg.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            model_dim: m.model_dim,
            mlp_dim: m.mlp_dim,
            vocab_size: self.vocab.size(),
            max_seq_len: m.max_seq_len,
            norm_eps: m.norm_eps,
            seed: seed_stream(self.cfg.seed, "model-init"),
            use_rms_norm: m.use_rms_norm,
            use_mlp: m.use_mlp,
        }
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed_stream(self.cfg.seed, name))
    }

    /// Fails fast when the directory holds artifacts from a different config.
    fn check_config_file(&self) -> Result<()> {
        let path = self.path(FILE_CONFIG);
        let stored: RunConfig = load_json(&path, "run-config", &self.hash, "gen-data")?;
        // The hash check above already proves equality; keep the parse so a
        // hand-edited file that still hashes right cannot slip through.
        if stored != self.cfg {
            return Err(Error::LineageMismatch {
                path: path.display().to_string(),
                found: "a different run config".into(),
                expected: "this run config".into(),
            });
        }
        Ok(())
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let path = self.path(FILE_CORPUS);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: "gen-data",
            });
        }
        let (header, records) = read_jsonl::<BioRecord>(&path, "corpus", Some(&self.hash))?;
        let corpus = Corpus {
            seed: header.seed,
            records,
        };
        validate_corpus(&corpus)?;
        Ok(corpus)
    }

    fn load_qa(&self, file: &str, kind: &str) -> Result<Vec<QAExample>> {
        let path = self.path(file);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: "gen-data",
            });
        }
        let (_, examples) = read_jsonl::<QAExample>(&path, kind, Some(&self.hash))?;
        Ok(examples)
    }

    fn load_weights(&self) -> Result<Weights> {
        let path = self.path(FILE_MODEL);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: "train",
            });
        }
        let weights = load_checkpoint(&path)?;
        let expected = self.model_config();
        if weights.config != expected {
            return Err(Error::LineageMismatch {
                path: path.display().to_string(),
                found: "a checkpoint with a different model config".into(),
                expected: "the model config this run derives".into(),
            });
        }
        Ok(weights)
    }

    fn load_head_sets(&self) -> Result<HeadSets> {
        load_json(
            &self.path(FILE_HEAD_SETS),
            "head-sets",
            &self.hash,
            "specialize-heads",
        )
    }

    fn jsonl_header(&self, kind: &str, seed: u64) -> JsonlHeader {
        JsonlHeader {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            config_hash: self.hash.clone(),
            kind: kind.to_string(),
        }
    }

    // ------------------------------------------------------------------
    // Stage 1: data generation
    // ------------------------------------------------------------------

    pub fn gen_data(&self) -> Result<GenDataSummary> {
        std::fs::create_dir_all(&self.out)?;
        let config_path = self.path(FILE_CONFIG);
        if config_path.exists() {
            // Same config: regenerating in place is fine. Different config:
            // refuse rather than orphan the directory's other artifacts.
            self.check_config_file()?;
        }
        save_json(&config_path, "run-config", &self.hash, &self.cfg)?;

        let corpus_seed = seed_stream(self.cfg.seed, "corpus");
        let corpus = generate_corpus(&self.cfg.corpus, corpus_seed)?;
        validate_corpus(&corpus)?;
        write_jsonl(
            &self.path(FILE_CORPUS),
            &self.jsonl_header("corpus", corpus_seed),
            &corpus.records,
        )?;
        save_json(&self.path(FILE_VOCAB), "vocab", &self.hash, &self.vocab)?;

        let train_records: Vec<&BioRecord> = corpus.train_records().collect();
        let eval_records: Vec<&BioRecord> = corpus.eval_records().collect();
        if eval_records.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least two eval entities; raise n_entities or eval_fraction".into(),
            ));
        }

        let mut n_examples = BTreeMap::new();

        // Closed-book evaluation must query facts the model trained on, so
        // it draws from the train split.
        let mut rng = self.stream("eval-closed");
        let mut pool = train_records.clone();
        pool.shuffle(&mut rng);
        let n_closed_entities = pool.len().min(eval_records.len());
        let mut closed = Vec::new();
        for record in &pool[..n_closed_entities] {
            for attr in ALL_ATTRIBUTES {
                closed.push(build_qa_example(record, attr, QaMode::Closed, None, &self.vocab)?);
            }
        }
        write_jsonl(
            &self.path(FILE_QA_CLOSED),
            &self.jsonl_header("qa-closed", seed_stream(self.cfg.seed, "eval-closed")),
            &closed,
        )?;
        n_examples.insert(FILE_QA_CLOSED.to_string(), closed.len());

        let mut oracle = Vec::new();
        for record in &eval_records {
            for attr in ALL_ATTRIBUTES {
                oracle.push(build_qa_example(record, attr, QaMode::Oracle, None, &self.vocab)?);
            }
        }
        write_jsonl(
            &self.path(FILE_QA_ORACLE),
            &self.jsonl_header("qa-oracle", 0),
            &oracle,
        )?;
        n_examples.insert(FILE_QA_ORACLE.to_string(), oracle.len());

        let mut rng = self.stream("eval-counterfactual");
        let mut cf = Vec::new();
        for record in &eval_records {
            for attr in ALL_ATTRIBUTES {
                let donor = pick_donor(record, attr, &eval_records, &mut rng)?;
                cf.push(build_qa_example(
                    record,
                    attr,
                    QaMode::Counterfactual,
                    Some(donor),
                    &self.vocab,
                )?);
            }
        }
        write_jsonl(
            &self.path(FILE_QA_COUNTERFACTUAL),
            &self.jsonl_header(
                "qa-counterfactual",
                seed_stream(self.cfg.seed, "eval-counterfactual"),
            ),
            &cf,
        )?;
        n_examples.insert(FILE_QA_COUNTERFACTUAL.to_string(), cf.len());

        let mut rng = self.stream("eval-conflict");
        let mut conflict = Vec::new();
        for record in &eval_records {
            for attr in ALL_ATTRIBUTES {
                let ctx = pick_donor(record, attr, &eval_records, &mut rng)?;
                conflict.push(build_conflict_example(record, ctx, attr, &self.vocab)?);
            }
        }
        write_jsonl(
            &self.path(FILE_QA_CONFLICT),
            &self.jsonl_header("qa-conflict", seed_stream(self.cfg.seed, "eval-conflict")),
            &conflict,
        )?;
        n_examples.insert(FILE_QA_CONFLICT.to_string(), conflict.len());

        let needles = needle_pool();
        let mut niah = Vec::new();
        for i in 0..self.cfg.n_niah {
            let record = eval_records[i % eval_records.len()];
            let attr = ALL_ATTRIBUTES[i % ALL_ATTRIBUTES.len()];
            let needle = &needles[i % needles.len()];
            let seed = seed_stream(self.cfg.seed, &format!("eval-niah-{i}"));
            niah.push(build_niah_example(record, attr, needle, seed, &self.vocab)?);
        }
        write_jsonl(
            &self.path(FILE_QA_NIAH),
            &self.jsonl_header("qa-niah", seed_stream(self.cfg.seed, "eval-niah-0")),
            &niah,
        )?;
        n_examples.insert(FILE_QA_NIAH.to_string(), niah.len());

        let max_len = closed
            .iter()
            .chain(&oracle)
            .chain(&cf)
            .chain(&conflict)
            .chain(&niah)
            .map(|e| e.prompt.len())
            .max()
            .unwrap_or(0);
        // Prompts must leave room for the generated answer.
        if max_len + 8 > self.cfg.model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "longest eval prompt is {max_len} tokens; max_seq_len {} leaves no room to answer",
                self.cfg.model.max_seq_len
            )));
        }

        Ok(GenDataSummary {
            n_records: corpus.records.len(),
            n_train_records: train_records.len(),
            n_eval_records: eval_records.len(),
            vocab_size: self.vocab.size(),
            n_examples,
        })
    }

    // ------------------------------------------------------------------
    // Stage 2: training
    // ------------------------------------------------------------------

    /// Builds the three training streams from the train split:
    /// closed QA (memorize facts), counterfactual open QA (copy from
    /// context over memory), and plain LM lines over biographies plus the
    /// needle strings so their tokens are producible later.
    ///
    /// Each fact gets several counterfactual variants with different
    /// donors: with a single fixed swap the model just memorizes the
    /// swapped answers, and copying never becomes the cheaper circuit.
    /// A slice of the variants swaps in a random word string instead of a
    /// donor value, which keeps the copy pathway content-agnostic rather
    /// than locked to each attribute's value type.
    fn build_train_set(&self, corpus: &Corpus) -> Result<TrainSet> {
        const DONOR_VARIANTS: usize = 5;
        const SCRAMBLE_VARIANTS: usize = 3;
        const COPY_PASSAGES: usize = 2048;
        let train_records: Vec<&BioRecord> = corpus.train_records().collect();
        if train_records.is_empty() {
            return Err(Error::Corpus("corpus has no train records".into()));
        }
        let content_ids: Vec<usize> =
            (0..self.vocab.size()).filter(|&t| self.vocab.is_content(t)).collect();
        let mut set = TrainSet::default();
        let mut rng = self.stream("train-counterfactual");
        for record in &train_records {
            for attr in ALL_ATTRIBUTES {
                let closed = build_qa_example(record, attr, QaMode::Closed, None, &self.vocab)?;
                set.closed.push(qa_to_train(&closed, &self.vocab)?);

                for _ in 0..DONOR_VARIANTS {
                    let donor = pick_donor(record, attr, &train_records, &mut rng)?;
                    let cf = build_qa_example(
                        record,
                        attr,
                        QaMode::Counterfactual,
                        Some(donor),
                        &self.vocab,
                    )?;
                    set.counterfactual.push(qa_to_train(&cf, &self.vocab)?);
                }
                for _ in 0..SCRAMBLE_VARIANTS {
                    let replacement = loop {
                        let n_words = rng.gen_range(1..=4);
                        let mut words = Vec::with_capacity(n_words);
                        for _ in 0..n_words {
                            let id = content_ids[rng.gen_range(0..content_ids.len())];
                            words.push(self.vocab.word(id)?);
                        }
                        let s = words.join(" ");
                        if s != record.attribute_value(attr) {
                            break s;
                        }
                    };
                    let cf =
                        build_value_swap_example(record, attr, &replacement, &self.vocab)?;
                    set.counterfactual.push(qa_to_train(&cf, &self.vocab)?);
                }
            }
            let bio = render_bio(record, &self.vocab)?;
            let mut tokens = vec![TOK_BOS];
            tokens.extend(bio.tokens);
            tokens.push(TOK_EOS);
            set.lm.push(TrainExample {
                tokens,
                loss_from: 1,
            });
        }
        for needle in needle_pool() {
            let ids = self.vocab.encode(&needle.join(" "))?;
            let mut tokens = vec![TOK_BOS];
            tokens.extend(ids.iter().copied());
            tokens.push(TOK_EOS);
            set.lm.push(TrainExample {
                tokens,
                loss_from: 1,
            });
            // Needle spelled twice, scored on the echo only: rehearses
            // copying the exact strings the boost must reproduce.
            let mut twice = vec![TOK_BOS];
            twice.extend(ids.iter().copied());
            twice.extend(ids.iter().copied());
            twice.push(TOK_EOS);
            set.copy.push(TrainExample {
                tokens: twice,
                loss_from: ids.len() + 2,
            });
        }
        // Random word runs repeated verbatim, scored on the echo only. The
        // pool is large enough that each passage is seen once or twice, so
        // the echo cannot be memorized: the only general solution is to
        // attend back to the first run and read the attended token out, which
        // is the head circuit the attention boost relies on.
        let mut copy_rng = self.stream("train-copy");
        for _ in 0..COPY_PASSAGES {
            let k = copy_rng.gen_range(4..=10);
            let mut words: Vec<usize> = Vec::with_capacity(k);
            while words.len() < k {
                let id = content_ids[copy_rng.gen_range(0..content_ids.len())];
                if !words.contains(&id) {
                    words.push(id);
                }
            }
            let mut tokens = Vec::with_capacity(2 * k + 2);
            tokens.push(TOK_BOS);
            tokens.extend(words.iter().copied());
            tokens.extend(words.iter().copied());
            tokens.push(TOK_EOS);
            set.copy.push(TrainExample {
                tokens,
                loss_from: k + 2,
            });
        }
        let max_len = [&set.closed, &set.counterfactual, &set.lm, &set.copy]
            .iter()
            .flat_map(|s| s.iter())
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0);
        if max_len > self.cfg.model.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: max_len,
                max: self.cfg.model.max_seq_len,
            });
        }
        Ok(set)
    }

    pub fn train_model(&self) -> Result<TrainSummary> {
        self.check_config_file()?;
        let corpus = self.load_corpus()?;
        let set = self.build_train_set(&corpus)?;
        let t = &self.cfg.train;
        let opts = TrainOptions {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            seed: seed_stream(self.cfg.seed, "train"),
            mode_weights: t.mode_weights,
            lr_min_fraction: t.lr_min_fraction,
            log_every: t.log_every,
        };
        let mut weights = Weights::init(&self.model_config())?;
        let log = train(&mut weights, &set, &opts)?;
        save_checkpoint(&self.path(FILE_MODEL), &weights)?;
        std::fs::write(self.path(FILE_TRAIN_LOG), train_log_csv(&log))?;
        let summary = TrainSummary {
            steps: opts.steps,
            first_loss: log.rows.first().map(|r| r.loss).unwrap_or(f64::NAN),
            final_loss: log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
            n_closed: set.closed.len(),
            n_counterfactual: set.counterfactual.len(),
            n_lm: set.lm.len(),
            n_copy: set.copy.len(),
            n_params: weights.n_params(),
        };
        save_json(
            &self.path(FILE_TRAIN_SUMMARY),
            "train-summary",
            &self.hash,
            &summary,
        )?;
        Ok(summary)
    }

    // ------------------------------------------------------------------
    // Stage 3: QA evaluation
    // ------------------------------------------------------------------

    fn score_examples(
        &self,
        weights: &Weights,
        examples: &[QAExample],
        spec: &InterventionSpec,
    ) -> Result<ModeScore> {
        let mut scored = Vec::with_capacity(examples.len());
        for ex in examples {
            scored.push(self.score_one(weights, ex, spec)?);
        }
        Ok(ModeScore::from_examples(&scored))
    }

    fn score_one(
        &self,
        weights: &Weights,
        ex: &QAExample,
        spec: &InterventionSpec,
    ) -> Result<crate::corpus::AnswerScore> {
        let opts = GenerateOptions {
            spec: spec.clone(),
            ..GenerateOptions::default()
        };
        let outcome = generate(weights, &ex.prompt, &opts)?;
        score_answer(
            &outcome.generated,
            ex.target_answer(),
            ex.context_tokens(),
            &self.vocab,
        )
    }

    pub fn eval_qa(&self) -> Result<QaEvalSummary> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let none = InterventionSpec::none();
        let summary = QaEvalSummary {
            closed: self.score_examples(
                &weights,
                &self.load_qa(FILE_QA_CLOSED, "qa-closed")?,
                &none,
            )?,
            oracle: self.score_examples(
                &weights,
                &self.load_qa(FILE_QA_ORACLE, "qa-oracle")?,
                &none,
            )?,
            counterfactual: self.score_examples(
                &weights,
                &self.load_qa(FILE_QA_COUNTERFACTUAL, "qa-counterfactual")?,
                &none,
            )?,
            conflict: self.score_examples(
                &weights,
                &self.load_qa(FILE_QA_CONFLICT, "qa-conflict")?,
                &none,
            )?,
            niah: self.score_examples(&weights, &self.load_qa(FILE_QA_NIAH, "qa-niah")?, &none)?,
        };
        save_json(&self.path(FILE_EVAL_QA), "eval-qa", &self.hash, &summary)?;
        Ok(summary)
    }

    // ------------------------------------------------------------------
    // Stage 4: head scoring via flow attribution
    // ------------------------------------------------------------------

    /// Attribution prompts and targets: open-book side uses counterfactual
    /// prompts with the in-context answer as target, closed-book side uses
    /// memorized-fact prompts with the stored answer as target. Question and
    /// value spans from the open side feed the span credit shares.
    pub fn localize(&self) -> Result<HeadScoreTable> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let c = &weights.config;

        let mut rng = self.stream("score-sample");
        let mut open_examples = self.load_qa(FILE_QA_COUNTERFACTUAL, "qa-counterfactual")?;
        open_examples.shuffle(&mut rng);
        open_examples.truncate(self.cfg.n_score_prompts);
        let mut closed_examples = self.load_qa(FILE_QA_CLOSED, "qa-closed")?;
        closed_examples.shuffle(&mut rng);
        closed_examples.truncate(self.cfg.n_score_prompts);
        if open_examples.is_empty() || closed_examples.is_empty() {
            return Err(Error::EmptyInput("localize needs scored prompts"));
        }

        let mut max_gap = 0.0f64;
        let mut open_traces = Vec::with_capacity(open_examples.len());
        let mut task_spans = Vec::new();
        let mut ret_spans = Vec::new();
        for ex in &open_examples {
            let target = first_token(&self.vocab, ex.target_answer())?;
            let trace = attribute(&weights, &ex.prompt, target, &AttributionOptions::default())?;
            max_gap = max_gap.max(trace.audit().rel_gap);
            task_spans.push(ex.j_task);
            ret_spans.push(ex.j_ret);
            open_traces.push(trace);
        }
        let mut closed_traces = Vec::with_capacity(closed_examples.len());
        for ex in &closed_examples {
            let target = first_token(&self.vocab, &ex.o_gold)?;
            let trace = attribute(&weights, &ex.prompt, target, &AttributionOptions::default())?;
            max_gap = max_gap.max(trace.audit().rel_gap);
            closed_traces.push(trace);
        }

        let task_pairs: Vec<(&RelevanceTrace, (usize, usize))> = open_traces
            .iter()
            .zip(&task_spans)
            .filter_map(|(t, s)| s.map(|span| (t, span)))
            .collect();
        let ret_pairs: Vec<(&RelevanceTrace, (usize, usize))> = open_traces
            .iter()
            .zip(&ret_spans)
            .filter_map(|(t, s)| s.map(|span| (t, span)))
            .collect();

        let table = HeadScoreTable::build(
            c.n_layers,
            c.n_heads,
            &open_traces,
            &closed_traces,
            &task_pairs,
            &ret_pairs,
        )?;
        std::fs::write(self.path(FILE_HEAD_SCORES_CSV), head_scores_csv(&table))?;
        save_json(
            &self.path(FILE_HEAD_SCORES),
            "head-scores",
            &self.hash,
            &table,
        )?;
        let summary = LocalizeSummary {
            n_open_traces: open_traces.len(),
            n_closed_traces: closed_traces.len(),
            max_audit_rel_gap: max_gap,
        };
        // The summary rides inside the table artifact's sibling; callers
        // mostly want the table, so return it and log the gap via the file.
        save_json(
            &self.path("localize.json"),
            "localize-summary",
            &self.hash,
            &summary,
        )?;
        Ok(table)
    }

    // ------------------------------------------------------------------
    // Stage 5: head-set selection
    // ------------------------------------------------------------------

    pub fn specialize(&self) -> Result<HeadSets> {
        self.check_config_file()?;
        let table: HeadScoreTable = load_json(
            &self.path(FILE_HEAD_SCORES),
            "head-scores",
            &self.hash,
            "localize-heads",
        )?;
        let sets = HeadSets::build(
            &table,
            self.cfg.k_contextual,
            self.cfg.k_parametric,
            self.cfg.k_task,
            self.cfg.k_retrieval,
        )?;
        save_json(&self.path(FILE_HEAD_SETS), "head-sets", &self.hash, &sets)?;
        Ok(sets)
    }

    // ------------------------------------------------------------------
    // Stage 6: knockouts
    // ------------------------------------------------------------------

    pub fn ablate(&self) -> Result<AblationSummary> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let c = &weights.config;
        let sets = self.load_head_sets()?;
        let closed = self.load_qa(FILE_QA_CLOSED, "qa-closed")?;
        let open_cf = self.load_qa(FILE_QA_COUNTERFACTUAL, "qa-counterfactual")?;

        let random_ctx = random_heads(
            c.n_layers,
            c.n_heads,
            sets.contextual.len(),
            &sets.contextual,
            seed_stream(self.cfg.seed, "random-contextual"),
        )?;
        let random_param = random_heads(
            c.n_layers,
            c.n_heads,
            sets.parametric.len(),
            &sets.parametric,
            seed_stream(self.cfg.seed, "random-parametric"),
        )?;

        let none = InterventionSpec::none();
        let runs: [(&str, &[QAExample], InterventionSpec); 7] = [
            ("closed/baseline", &closed, none.clone()),
            (
                "closed/ablate-parametric",
                &closed,
                ablation_spec(&sets.parametric),
            ),
            ("closed/ablate-random", &closed, ablation_spec(&random_param)),
            ("open-cf/baseline", &open_cf, none),
            (
                "open-cf/ablate-contextual",
                &open_cf,
                ablation_spec(&sets.contextual),
            ),
            (
                "open-cf/ablate-random",
                &open_cf,
                ablation_spec(&random_ctx),
            ),
            (
                "open-cf/ablate-parametric",
                &open_cf,
                ablation_spec(&sets.parametric),
            ),
        ];
        let mut conditions = Vec::new();
        for (label, examples, spec) in &runs {
            let score = self.score_examples(&weights, examples, spec)?;
            conditions.push(AblationCondition {
                label: label.to_string(),
                n: score.n,
                recall_points: score.recall_points(),
            });
        }
        let get = |label: &str| -> f64 {
            conditions
                .iter()
                .find(|c| c.label == label)
                .map(|c| c.recall_points)
                .expect("condition label present")
        };
        let summary = AblationSummary {
            contextual_drop_points: get("open-cf/baseline") - get("open-cf/ablate-contextual"),
            random_open_drop_points: get("open-cf/baseline") - get("open-cf/ablate-random"),
            parametric_drop_points: get("closed/baseline") - get("closed/ablate-parametric"),
            random_closed_drop_points: get("closed/baseline") - get("closed/ablate-random"),
            parametric_open_shift_points: (get("open-cf/baseline")
                - get("open-cf/ablate-parametric"))
            .abs(),
            conditions,
        };
        save_json(&self.path(FILE_ABLATION), "ablation", &self.hash, &summary)?;
        Ok(summary)
    }

    // ------------------------------------------------------------------
    // Stage 7: head-output vector extraction and patching
    // ------------------------------------------------------------------

    /// Bare context prompt: `[BOS] [CTX] <bio> [A:]`, no question. Patching
    /// a question-conditioned head vector should make the model answer as if
    /// the question had been asked.
    fn bare_prompt(&self, record: &BioRecord) -> Result<Vec<usize>> {
        let bio = render_bio(record, &self.vocab)?;
        let mut prompt = vec![TOK_BOS, TOK_CTX];
        prompt.extend(bio.tokens);
        prompt.push(TOK_A);
        Ok(prompt)
    }

    fn fv_recall(
        &self,
        weights: &Weights,
        records: &[&BioRecord],
        attr: Attribute,
        spec: &InterventionSpec,
    ) -> Result<f64> {
        let mut total = 0.0;
        for record in records {
            let prompt = self.bare_prompt(record)?;
            let opts = GenerateOptions {
                spec: spec.clone(),
                ..GenerateOptions::default()
            };
            let outcome = generate(weights, &prompt, &opts)?;
            let score = score_answer(
                &outcome.generated,
                record.attribute_value(attr),
                None,
                &self.vocab,
            )?;
            total += score.recall;
        }
        Ok(total / records.len().max(1) as f64)
    }

    pub fn fv(&self) -> Result<FvSummary> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let c = &weights.config;
        let sets = self.load_head_sets()?;
        let corpus = self.load_corpus()?;
        let train_records: Vec<&BioRecord> = corpus.train_records().collect();
        let eval_records: Vec<&BioRecord> = corpus.eval_records().collect();

        // Extraction prompts: open-book questioned prompts over train
        // entities; the vector is the mean head output at the answer cue.
        let n_extract = train_records.len().min(self.cfg.n_score_prompts.max(8));
        let mut task_banks: BTreeMap<Attribute, FvBank> = BTreeMap::new();
        let mut random_banks: BTreeMap<Attribute, FvBank> = BTreeMap::new();
        let random_set = random_heads(
            c.n_layers,
            c.n_heads,
            sets.task.len(),
            &sets.task,
            seed_stream(self.cfg.seed, "fv-random"),
        )?;
        for attr in ALL_ATTRIBUTES {
            let mut prompts = Vec::with_capacity(n_extract);
            for record in &train_records[..n_extract] {
                let ex = build_qa_example(record, attr, QaMode::Oracle, None, &self.vocab)?;
                prompts.push(ex.prompt);
            }
            let kind = format!("task/{}", attr_slug(attr));
            task_banks.insert(
                attr,
                FvBank::extract(&weights, &prompts, &sets.task, &kind, 1.0)?,
            );
            random_banks.insert(
                attr,
                FvBank::extract(&weights, &prompts, &random_set, &kind, 1.0)?,
            );
        }

        // Alpha sweep on a dev slice of eval entities; final numbers come
        // from the remaining slice so the chosen alpha is not fit to them.
        let n_dev = (eval_records.len() / 4).clamp(1, eval_records.len() - 1);
        let (dev, test) = eval_records.split_at(n_dev);
        let mut best_alpha = self.cfg.fv_alphas[0];
        let mut best_recall = f64::NEG_INFINITY;
        for &alpha in &self.cfg.fv_alphas {
            let mut sum = 0.0;
            for attr in ALL_ATTRIBUTES {
                let spec = task_banks[&attr].patch_spec(Some(alpha));
                sum += self.fv_recall(&weights, dev, attr, &spec)?;
            }
            if sum > best_recall {
                best_recall = sum;
                best_alpha = alpha;
            }
        }

        let mut baseline = 0.0;
        let mut task = 0.0;
        let mut random = 0.0;
        for attr in ALL_ATTRIBUTES {
            baseline += self.fv_recall(&weights, test, attr, &InterventionSpec::none())?;
            task += self.fv_recall(
                &weights,
                test,
                attr,
                &task_banks[&attr].patch_spec(Some(best_alpha)),
            )?;
            random += self.fv_recall(
                &weights,
                test,
                attr,
                &random_banks[&attr].patch_spec(Some(best_alpha)),
            )?;
        }
        let n_attr = ALL_ATTRIBUTES.len() as f64;
        for (attr, bank) in &task_banks {
            bank.save(&self.path(&format!("fv_task_{}.hatl", attr_slug(*attr))))?;
        }

        let parametric = self.parametric_fv(&weights, &sets, &train_records, best_alpha)?;

        let summary = FvSummary {
            alpha: best_alpha,
            n_eval: test.len() * ALL_ATTRIBUTES.len(),
            baseline_recall_points: baseline / n_attr * 100.0,
            task_recall_points: task / n_attr * 100.0,
            random_recall_points: random / n_attr * 100.0,
            parametric,
        };
        save_json(&self.path(FILE_FV), "fv", &self.hash, &summary)?;
        Ok(summary)
    }

    /// Stored-fact vectors: extracted from statement prompts over train
    /// entities the model actually recalls, then patched into open-book
    /// counterfactual prompts to pull the answer back toward memory.
    fn parametric_fv(
        &self,
        weights: &Weights,
        sets: &HeadSets,
        train_records: &[&BioRecord],
        alpha: f32,
    ) -> Result<Option<ParametricFvSummary>> {
        let mut prompts = Vec::new();
        let cap = self.cfg.n_score_prompts.max(8);
        'outer: for record in train_records {
            for attr in ALL_ATTRIBUTES {
                let ex = build_qa_example(record, attr, QaMode::Closed, None, &self.vocab)?;
                let score = self.score_one(weights, &ex, &InterventionSpec::none())?;
                if score.recall >= 0.7 {
                    prompts.push(cloze_prompt(record, attr, &self.vocab)?);
                }
                if prompts.len() >= cap {
                    break 'outer;
                }
            }
        }
        if prompts.is_empty() {
            return Ok(None);
        }
        let bank = FvBank::extract(weights, &prompts, &sets.parametric, "parametric", alpha)?;
        bank.save(&self.path("fv_param.hatl"))?;

        let cf = self.load_qa(FILE_QA_COUNTERFACTUAL, "qa-counterfactual")?;
        let spec = bank.patch_spec(Some(alpha));
        let mut n = 0usize;
        let mut patched_hits = 0usize;
        let mut baseline_hits = 0usize;
        for ex in &cf {
            let gold_first = first_token(&self.vocab, &ex.o_gold)?;
            let base = forward(weights, &ex.prompt, &InterventionSpec::none(), false)?;
            let patched = forward(weights, &ex.prompt, &spec, false)?;
            let last = ex.prompt.len() - 1;
            if argmax_row(&base, last) == gold_first {
                baseline_hits += 1;
            }
            if argmax_row(&patched, last) == gold_first {
                patched_hits += 1;
            }
            n += 1;
        }
        Ok(Some(ParametricFvSummary {
            alpha,
            n,
            n_source_prompts: prompts.len(),
            override_rate: patched_hits as f64 / n.max(1) as f64,
            baseline_override_rate: baseline_hits as f64 / n.max(1) as f64,
        }))
    }

    // ------------------------------------------------------------------
    // Stage 8: needle copying under the retrieval-head boost
    // ------------------------------------------------------------------

    pub fn niah(&self) -> Result<NiahSummary> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let sets = self.load_head_sets()?;
        let examples = self.load_qa(FILE_QA_NIAH, "qa-niah")?;
        let mut baseline = Vec::with_capacity(examples.len());
        let mut boosted = Vec::with_capacity(examples.len());
        for ex in &examples {
            let (ns, ne) = ex
                .needle_span
                .ok_or_else(|| Error::Corpus("niah example lost its needle span".into()))?;
            baseline.push(self.score_one(&weights, ex, &InterventionSpec::none())?);
            let spec = boost_spec(
                &sets.retrieval,
                (ns..ne).collect(),
                self.cfg.boost_add,
                self.cfg.boost_mult,
            );
            boosted.push(self.score_one(&weights, ex, &spec)?);
        }
        let summary = NiahSummary {
            n: examples.len(),
            baseline_recall_points: ModeScore::from_examples(&baseline).recall_points(),
            boosted_recall_points: ModeScore::from_examples(&boosted).recall_points(),
            boost_add: self.cfg.boost_add,
            boost_mult: self.cfg.boost_mult,
        };
        save_json(&self.path(FILE_NIAH), "niah", &self.hash, &summary)?;
        Ok(summary)
    }

    // ------------------------------------------------------------------
    // Stage 9: answer-source probe and localization
    // ------------------------------------------------------------------

    /// One probe sample per conflicted prompt whose behavior is readable:
    /// both candidate first tokens rank in the top ten and the model's
    /// greedy pick is one of them. Label 1 = answered from context. Features
    /// are the retrieval heads' lens scores toward the picked token.
    fn probe_samples(
        &self,
        weights: &Weights,
        ret_heads: &[(usize, usize)],
        records: &[&BioRecord],
        donors: &[&BioRecord],
        stream_name: &str,
    ) -> Result<(ProbeDataset, Vec<(QAExample, usize)>)> {
        let mut rng = self.stream(stream_name);
        let mut dataset = ProbeDataset::default();
        // Contextually answered counterfactual examples, kept for the
        // localization pass alongside the token the model produced.
        let mut contextual = Vec::new();
        for record in records {
            for attr in ALL_ATTRIBUTES {
                let donor = pick_donor(record, attr, donors, &mut rng)?;
                let examples = [
                    build_qa_example(record, attr, QaMode::Counterfactual, Some(donor), &self.vocab)?,
                    build_conflict_example(record, donor, attr, &self.vocab)?,
                ];
                for ex in examples {
                    let ctx_first = first_token(&self.vocab, ex.target_answer())?;
                    let param_first = first_token(&self.vocab, &ex.o_gold)?;
                    if ctx_first == param_first {
                        continue;
                    }
                    let trace = forward(weights, &ex.prompt, &InterventionSpec::none(), true)?;
                    let last = ex.prompt.len() - 1;
                    if logit_rank(&trace, last, ctx_first) >= 10
                        || logit_rank(&trace, last, param_first) >= 10
                    {
                        continue;
                    }
                    let picked = argmax_row(&trace, last);
                    let label = if picked == ctx_first {
                        1
                    } else if picked == param_first {
                        0
                    } else {
                        continue;
                    };
                    let features = lens_features(weights, &trace, ret_heads, last, picked)?;
                    dataset.push(features, label);
                    if label == 1 && ex.mode == QaMode::Counterfactual && ex.j_ret.is_some() {
                        contextual.push((ex, picked));
                    }
                }
            }
        }
        Ok((dataset, contextual))
    }

    pub fn probe(&self) -> Result<ProbeSummary> {
        self.check_config_file()?;
        let weights = self.load_weights()?;
        let sets = self.load_head_sets()?;
        let corpus = self.load_corpus()?;
        let train_records: Vec<&BioRecord> = corpus.train_records().collect();
        let eval_records: Vec<&BioRecord> = corpus.eval_records().collect();

        // Probe features come from train entities; all headline numbers
        // from eval entities the probe never saw.
        let (train_set, _) = self.probe_samples(
            &weights,
            &sets.retrieval,
            &train_records,
            &train_records,
            "probe-train",
        )?;
        let (eval_set, contextual) = self.probe_samples(
            &weights,
            &sets.retrieval,
            &eval_records,
            &eval_records,
            "probe-eval",
        )?;
        let n_pos = train_set.count(1);
        let n_neg = train_set.count(0);
        if n_pos < 20 || n_neg < 20 {
            return Err(Error::Probe(format!(
                "behavioral labels too one-sided to fit a probe: {n_pos} contextual vs {n_neg} parametric (need 20 of each)"
            )));
        }
        if eval_set.samples.is_empty() {
            return Err(Error::Probe("no readable eval prompts for the probe".into()));
        }

        let probe = train_probe(
            &train_set,
            sets.retrieval.clone(),
            self.cfg.probe_dev_fraction,
            seed_stream(self.cfg.seed, "probe-split"),
        )?;
        let auc = probe_auc(&probe, &eval_set.samples)?;

        // Chance control: shuffle the training labels, refit, score the
        // real eval labels. Information about the answer source must vanish.
        let mut shuffled = train_set.clone();
        let mut labels: Vec<u8> = shuffled.samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut self.stream("probe-shuffle"));
        for (sample, label) in shuffled.samples.iter_mut().zip(labels) {
            sample.label = label;
        }
        let shuffled_auc = match train_probe(
            &shuffled,
            sets.retrieval.clone(),
            self.cfg.probe_dev_fraction,
            seed_stream(self.cfg.seed, "probe-split"),
        ) {
            Ok(p) => probe_auc(&p, &eval_set.samples)?,
            // A degenerate shuffle (all one class in a split) carries no
            // signal either; score it as chance.
            Err(_) => 0.5,
        };

        // Localization: on contextually answered prompts, does the
        // probe-weighted aggregate of retrieval-head attention point at the
        // copied value tokens? Uniform row averaging is the baseline.
        let mut samples_out = Vec::new();
        let mut weighted_hits = 0usize;
        let mut uniform_hits = 0usize;
        for (ex, produced) in &contextual {
            let span = ex.context_span.expect("counterfactual has context");
            let expected = ex.j_ret.expect("filtered for j_ret");
            let trace = forward(&weights, &ex.prompt, &InterventionSpec::none(), true)?;
            let last = ex.prompt.len() - 1;
            let (predicted, map) = localize_source(
                &weights,
                &trace,
                &sets.retrieval,
                Some(&probe),
                last,
                *produced,
                span,
            )?;
            let (uniform, _) = localize_source(
                &weights,
                &trace,
                &sets.retrieval,
                None,
                last,
                *produced,
                span,
            )?;
            let correct = predicted >= expected.0 && predicted < expected.1;
            if correct {
                weighted_hits += 1;
            }
            if uniform >= expected.0 && uniform < expected.1 {
                uniform_hits += 1;
            }
            samples_out.push(LocalizationSample {
                words: decode_words(&self.vocab, &ex.prompt)?,
                votes: map,
                predicted,
                expected_span: expected,
                correct,
            });
        }
        let n_localized = samples_out.len();
        save_json(
            &self.path(FILE_LOC_SAMPLES),
            "localization-samples",
            &self.hash,
            &samples_out,
        )?;

        let summary = ProbeSummary {
            probe,
            n_train_samples: train_set.samples.len(),
            n_eval_samples: eval_set.samples.len(),
            auc,
            shuffled_auc,
            n_localized,
            top1_weighted: weighted_hits as f64 / n_localized.max(1) as f64,
            top1_uniform: uniform_hits as f64 / n_localized.max(1) as f64,
        };
        save_json(&self.path(FILE_PROBE), "probe", &self.hash, &summary)?;
        Ok(summary)
    }

    // ------------------------------------------------------------------
    // Stage 10: rendered reports
    // ------------------------------------------------------------------

    pub fn report(&self) -> Result<ReportSummary> {
        self.check_config_file()?;
        let table: HeadScoreTable = load_json(
            &self.path(FILE_HEAD_SCORES),
            "head-scores",
            &self.hash,
            "localize-heads",
        )?;
        let sets = self.load_head_sets()?;
        std::fs::write(
            self.path(FILE_MAP_SVG),
            functional_map_svg(&table, Some(&sets)),
        )?;
        let mut files = vec![FILE_MAP_SVG.to_string()];

        let samples: Vec<LocalizationSample> = load_json(
            &self.path(FILE_LOC_SAMPLES),
            "localization-samples",
            &self.hash,
            "probe",
        )?;
        std::fs::write(self.path(FILE_LOC_HTML), localization_html(&samples)?)?;
        files.push(FILE_LOC_HTML.to_string());
        Ok(ReportSummary { files })
    }

    /// All stages in dependency order.
    pub fn run_all(&self) -> Result<RunSummary> {
        let gen_data = self.gen_data()?;
        let train = self.train_model()?;
        let eval_qa = self.eval_qa()?;
        self.localize()?;
        self.specialize()?;
        let ablation = self.ablate()?;
        let fv = self.fv()?;
        let niah = self.niah()?;
        let probe = self.probe()?;
        let report = self.report()?;
        let localize: LocalizeSummary = load_json(
            &self.path("localize.json"),
            "localize-summary",
            &self.hash,
            "localize-heads",
        )?;
        Ok(RunSummary {
            gen_data,
            train,
            eval_qa,
            localize,
            ablation,
            fv,
            niah,
            probe,
            report,
        })
    }
}

/// QA example turned into a training line: prompt, then the target answer,
/// then EOS, with loss only on the answer and the EOS.
fn qa_to_train(ex: &QAExample, vocab: &Vocab) -> Result<TrainExample> {
    let mut tokens = ex.prompt.clone();
    let loss_from = tokens.len();
    tokens.extend(vocab.encode(ex.target_answer())?);
    tokens.push(TOK_EOS);
    Ok(TrainExample { tokens, loss_from })
}

/// Uniformly picks a donor record whose value for `attr` differs from the
/// query's; the corpus guarantees one exists.
fn pick_donor<'a>(
    record: &BioRecord,
    attr: Attribute,
    pool: &[&'a BioRecord],
    rng: &mut ChaCha8Rng,
) -> Result<&'a BioRecord> {
    let gold = record.attribute_value(attr);
    for _ in 0..64 {
        let candidate = pool[rng.gen_range(0..pool.len())];
        if candidate.entity_id != record.entity_id && candidate.attribute_value(attr) != gold {
            return Ok(candidate);
        }
    }
    pool.iter()
        .find(|c| c.entity_id != record.entity_id && c.attribute_value(attr) != gold)
        .copied()
        .ok_or_else(|| {
            Error::Corpus(format!(
                "no donor with a different {attr:?} value; corpus too small or degenerate"
            ))
        })
}

fn first_token(vocab: &Vocab, text: &str) -> Result<usize> {
    let tokens = vocab.encode(text)?;
    tokens
        .first()
        .copied()
        .ok_or(Error::EmptyInput("first_token on empty answer"))
}

fn argmax_row(trace: &ForwardTrace, position: usize) -> usize {
    let width = trace.logits.len() / trace.seq_len();
    let row = &trace.logits[position * width..position * width + width];
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// 0 = highest logit. Ties count as outranking.
fn logit_rank(trace: &ForwardTrace, position: usize, token: usize) -> usize {
    let width = trace.logits.len() / trace.seq_len();
    let row = &trace.logits[position * width..position * width + width];
    let own = row[token];
    row.iter().filter(|&&x| x > own).count()
}

fn decode_words(vocab: &Vocab, tokens: &[usize]) -> Result<Vec<String>> {
    tokens
        .iter()
        .map(|&t| vocab.word(t).map(|w| w.to_string()))
        .collect()
}

fn attr_slug(attr: Attribute) -> &'static str {
    match attr {
        Attribute::BirthDate => "birth-date",
        Attribute::BirthPlace => "birth-place",
        Attribute::Institution => "institution",
        Attribute::Occupation => "occupation",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk_default();
        cfg.model = ModelSpec {
            n_layers: 2,
            n_heads: 2,
            model_dim: 32,
            mlp_dim: 64,
            max_seq_len: 128,
            norm_eps: 1e-5,
            use_rms_norm: true,
            use_mlp: true,
        };
        cfg.corpus.n_entities = 24;
        cfg.train = TrainSpec {
            steps: 30,
            batch_size: 4,
            lr: 1e-3,
            warmup_steps: 5,
            grad_clip: 1.0,
            mode_weights: [1.0, 1.0, 0.5, 0.5],
            lr_min_fraction: 1.0,
            log_every: 10,
        };
        cfg.k_contextual = 2;
        cfg.k_parametric = 2;
        cfg.k_task = 1;
        cfg.k_retrieval = 1;
        cfg.n_score_prompts = 4;
        cfg.fv_alphas = vec![1.0, 2.0];
        cfg.n_niah = 4;
        cfg
    }

    #[test]
    fn seed_streams_are_stable_and_name_sensitive() {
        assert_eq!(seed_stream(7, "corpus"), seed_stream(7, "corpus"));
        assert_ne!(seed_stream(7, "corpus"), seed_stream(7, "train"));
        assert_ne!(seed_stream(7, "corpus"), seed_stream(8, "corpus"));
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let base = RunConfig::desk_default();
        let h0 = config_hash(&base);
        assert_eq!(h0, config_hash(&base.clone()));
        let mut cfg = base.clone();
        cfg.seed += 1;
        assert_ne!(h0, config_hash(&cfg));
        let mut cfg = base.clone();
        cfg.boost_mult = 999.0;
        assert_ne!(h0, config_hash(&cfg));
        let mut cfg = base;
        cfg.model.n_heads = 4;
        assert_ne!(h0, config_hash(&cfg));
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let mut value = serde_json::to_value(RunConfig::desk_default()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_value(value);
        assert!(parsed.is_err());
    }

    #[test]
    fn config_validation_catches_bad_knobs() {
        let mut cfg = RunConfig::desk_default();
        cfg.k_contextual = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.k_parametric = cfg.model.n_layers * cfg.model.n_heads + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.fv_alphas = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.version = RUN_CONFIG_VERSION + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.probe_dev_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_dir_precedence_is_flag_env_default() {
        let flag = PathBuf::from("/tmp/flagged");
        assert_eq!(
            resolve_out_dir_from(Some(&flag), Some("ignored".into())),
            flag
        );
        assert_eq!(
            resolve_out_dir_from(None, Some("/tmp/from-env".into())),
            PathBuf::from("/tmp/from-env")
        );
        assert_eq!(resolve_out_dir_from(None, Some("".into())), PathBuf::from("out"));
        assert_eq!(resolve_out_dir_from(None, None), PathBuf::from("out"));
    }

    #[test]
    fn artifacts_carry_and_enforce_lineage() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("thing.json");
        save_json(&path, "thing", "hash-a", &vec![1, 2, 3]).unwrap();
        let back: Vec<i32> = load_json(&path, "thing", "hash-a", "gen-data").unwrap();
        assert_eq!(back, vec![1, 2, 3]);

        let err = load_json::<Vec<i32>>(&path, "thing", "hash-b", "gen-data").unwrap_err();
        assert!(matches!(err, Error::LineageMismatch { .. }), "{err}");
        let err = load_json::<Vec<i32>>(&path, "other", "hash-a", "gen-data").unwrap_err();
        assert!(matches!(err, Error::LineageMismatch { .. }), "{err}");

        let missing = dir.path().join("absent.json");
        let err = load_json::<Vec<i32>>(&missing, "thing", "hash-a", "gen-data").unwrap_err();
        assert!(err.to_string().contains("gen-data"), "{err}");
    }

    #[test]
    fn gen_data_writes_refuses_and_reloads() {
        let dir = TempDir::new().unwrap();
        let run = Run::new(tiny_cfg(), dir.path()).unwrap();
        let summary = run.gen_data().unwrap();
        assert_eq!(summary.n_records, 24);
        assert!(summary.n_eval_records >= 2);
        for file in [
            FILE_CONFIG,
            FILE_CORPUS,
            FILE_VOCAB,
            FILE_QA_CLOSED,
            FILE_QA_ORACLE,
            FILE_QA_COUNTERFACTUAL,
            FILE_QA_CONFLICT,
            FILE_QA_NIAH,
        ] {
            assert!(run.path(file).exists(), "missing {file}");
        }
        // Re-running with the same config is fine.
        run.gen_data().unwrap();
        let corpus = run.load_corpus().unwrap();
        assert_eq!(corpus.records.len(), 24);

        // A different config in the same directory is refused.
        let mut other = tiny_cfg();
        other.seed += 1;
        let other_run = Run::new(other, dir.path()).unwrap();
        let err = other_run.gen_data().unwrap_err();
        assert!(matches!(err, Error::LineageMismatch { .. }), "{err}");
        // And its stages cannot consume the stale artifacts either.
        let err = other_run.train_model().unwrap_err();
        assert!(matches!(err, Error::LineageMismatch { .. }), "{err}");
    }

    #[test]
    fn stages_name_their_missing_prerequisites() {
        let dir = TempDir::new().unwrap();
        let run = Run::new(tiny_cfg(), dir.path()).unwrap();
        run.gen_data().unwrap();
        let err = run.eval_qa().unwrap_err();
        assert!(err.to_string().contains("run `headatlas train` first"), "{err}");
        let err = run.specialize().unwrap_err();
        assert!(
            err.to_string().contains("run `headatlas localize-heads` first"),
            "{err}"
        );
    }

    // One crank of the whole machine on a deliberately undertrained model:
    // exercises wiring, file formats, and determinism, not quality gates.
    #[test]
    fn tiny_run_reaches_every_stage() {
        let dir = TempDir::new().unwrap();
        let run = Run::new(tiny_cfg(), dir.path()).unwrap();
        run.gen_data().unwrap();
        let train = run.train_model().unwrap();
        assert!(train.final_loss.is_finite());
        let eval = run.eval_qa().unwrap();
        assert!(eval.oracle.recall >= 0.0 && eval.oracle.recall <= 1.0);
        let table = run.localize().unwrap();
        assert_eq!(table.n_total(), 4);
        let sets = run.specialize().unwrap();
        assert_eq!(sets.contextual.len(), 2);
        let ablation = run.ablate().unwrap();
        assert_eq!(ablation.conditions.len(), 7);
        let fv = run.fv().unwrap();
        assert!(fv.task_recall_points.is_finite());
        let niah = run.niah().unwrap();
        assert_eq!(niah.n, 4);
        // A 30-step model may answer everything one way; the probe then
        // legitimately refuses to fit. Both outcomes exercise the stage.
        match run.probe() {
            Ok(p) => assert!(p.auc.is_finite()),
            Err(Error::Probe(_)) => {}
            Err(other) => panic!("unexpected probe failure: {other}"),
        }
        if run.path(FILE_LOC_SAMPLES).exists() {
            run.report().unwrap();
            assert!(run.path(FILE_LOC_HTML).exists());
        }
        assert!(run.path(FILE_HEAD_SCORES_CSV).exists());

        // The checkpoint reloads into the exact same bytes.
        let w1 = run.load_weights().unwrap();
        let again = run.load_weights().unwrap();
        assert_eq!(w1.flat(), again.flat());
    }

    #[test]
    fn train_examples_put_loss_on_the_answer_only() {
        let vocab = Vocab::build();
        let cfg = tiny_cfg();
        let corpus = generate_corpus(&cfg.corpus, 1).unwrap();
        let record = corpus.records.first().unwrap();
        let ex = build_qa_example(record, Attribute::Occupation, QaMode::Closed, None, &vocab)
            .unwrap();
        let t = qa_to_train(&ex, &vocab).unwrap();
        assert_eq!(t.loss_from, ex.prompt.len());
        assert_eq!(t.tokens.last(), Some(&TOK_EOS));
        let answer = vocab.encode(&ex.o_gold).unwrap();
        assert_eq!(&t.tokens[t.loss_from..t.tokens.len() - 1], &answer[..]);
    }

    #[test]
    fn donor_picking_respects_value_inequality() {
        let vocab = Vocab::build();
        let _ = &vocab;
        let cfg = tiny_cfg();
        let corpus = generate_corpus(&cfg.corpus, 3).unwrap();
        let records: Vec<&BioRecord> = corpus.records.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for record in &records {
            for attr in ALL_ATTRIBUTES {
                let donor = pick_donor(record, attr, &records, &mut rng).unwrap();
                assert_ne!(donor.entity_id, record.entity_id);
                assert_ne!(donor.attribute_value(attr), record.attribute_value(attr));
            }
        }
    }
}
