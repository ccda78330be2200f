//! Acceptance gate: each headline capability asserted at its stated
//! tolerance, one verdict line per criterion (run with `-- --nocapture` to
//! see them as they print; test names mirror the criteria).
//!
//! Criteria 4 through 8 share one trained pipeline run on the compact
//! profile. The fixture builds it once per test process, so the wall-clock
//! budgets that include "training" pay for training exactly once, the same
//! way a user reusing a checkpoint would.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use headatlas_core::attribution::{attribute, AttributionOptions};
use headatlas_core::corpus::{read_jsonl, QAExample, Vocab};
use headatlas_core::interventions::ablation_logit_drop;
use headatlas_core::model::{forward, load_checkpoint, InterventionSpec, ModelConfig, Weights};
use headatlas_core::numerics::spearman;
use headatlas_core::pipeline::{
    AblationSummary, FvSummary, ModelSpec, NiahSummary, ProbeSummary, QaEvalSummary, Run,
    RunConfig, TrainSpec, FILE_MODEL, FILE_QA_COUNTERFACTUAL,
};

fn verdict(id: &str, ok: bool, detail: String) {
    let flag = if ok { "PASS" } else { "FAIL" };
    println!("[acceptance] {id}: {flag} ({detail})");
    assert!(ok, "{id}: {detail}");
}

// ---------------------------------------------------------------------
// Criterion 1: relevance flow is conserved on arbitrary models/prompts.
// ---------------------------------------------------------------------

#[test]
fn criterion_01_conservation_audit_on_random_prompts() {
    let t0 = Instant::now();
    let vocab_size = 50usize;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(20240817);
    for model_seed in 0..4u64 {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 16,
            mlp_dim: 32,
            vocab_size,
            max_seq_len: 32,
            norm_eps: 1e-5,
            seed: 1000 + model_seed,
            use_rms_norm: true,
            use_mlp: true,
        };
        let weights = Weights::init(&config).unwrap();
        for _ in 0..25 {
            let len = rng.gen_range(1..=12);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
            let target = rng.gen_range(0..vocab_size);
            let trace =
                attribute(&weights, &tokens, target, &AttributionOptions::default()).unwrap();
            worst = worst.max(trace.audit().rel_gap);
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        "criterion 01 conservation audit",
        worst < 1e-3 && elapsed < Duration::from_secs(10),
        format!("worst rel gap {worst:.2e} over 100 prompts in {elapsed:.2?}, need < 1e-3 in < 10s"),
    );
}

// ---------------------------------------------------------------------
// Criterion 2: on a purely linear model the attribution equals the
// closed-form input-times-readout product.
// ---------------------------------------------------------------------

#[test]
fn criterion_02_linear_model_matches_closed_form() {
    let t0 = Instant::now();
    let config = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        model_dim: 16,
        mlp_dim: 16,
        vocab_size: 30,
        max_seq_len: 16,
        norm_eps: 1e-5,
        seed: 5,
        use_rms_norm: false,
        use_mlp: false,
    };
    let mut weights = Weights::init(&config).unwrap();
    // Silence the one attention head so the network is a pure embedding
    // readout; the value path is the only way tokens could mix.
    let wv_spec = weights.spec("layer0.attn.wv").unwrap();
    let range = wv_spec.offset..wv_spec.offset + wv_spec.len();
    weights.flat_mut()[range].fill(0.0);

    let d = config.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(1..=8usize);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let target = rng.gen_range(0..30usize);
        let trace = attribute(&weights, &tokens, target, &AttributionOptions::default()).unwrap();

        // Closed form, from the raw weight arrays: the target logit is
        // (tok_emb + pos_emb) . unembed_row at the last position, and no
        // other position can contribute anything.
        let last = len - 1;
        let mut oracle = 0.0f64;
        for c in 0..d {
            let emb = weights.tok_emb()[tokens[last] * d + c] + weights.pos_emb()[last * d + c];
            oracle += emb as f64 * weights.unembed()[target * d + c] as f64;
        }
        let scale = oracle.abs().max(1.0);
        worst = worst.max((trace.input_heatmap[last] - oracle).abs() / scale);
        for j in 0..last {
            worst = worst.max(trace.input_heatmap[j].abs() / scale);
        }
        worst = worst.max((trace.seed - oracle).abs() / scale);
    }
    let elapsed = t0.elapsed();
    verdict(
        "criterion 02 linear closed form",
        worst < 1e-5 && elapsed < Duration::from_secs(1),
        format!("worst deviation {worst:.2e} over 20 cases in {elapsed:.2?}, need < 1e-5 in < 1s"),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: per-head relevance ranks heads the way single-head
// ablation damage does.
// ---------------------------------------------------------------------

#[test]
fn criterion_03_head_relevance_tracks_ablation_damage() {
    let t0 = Instant::now();
    let mut cfg = RunConfig::desk_default();
    cfg.seed = 11;
    cfg.model = ModelSpec {
        n_layers: 2,
        n_heads: 8,
        model_dim: 64,
        mlp_dim: 128,
        max_seq_len: 160,
        norm_eps: 1e-5,
        use_rms_norm: true,
        use_mlp: true,
    };
    cfg.corpus.n_entities = 64;
    cfg.train = TrainSpec {
        steps: 1100,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 50,
        grad_clip: 1.0,
        mode_weights: [1.0, 1.0, 0.7, 0.7],
        lr_min_fraction: 1.0,
        log_every: 100,
    };
    cfg.k_contextual = 4;
    cfg.k_parametric = 4;
    cfg.k_task = 2;
    cfg.k_retrieval = 2;
    cfg.n_score_prompts = 8;
    let dir = tempfile::TempDir::new().unwrap();
    let run = Run::new(cfg, dir.path()).unwrap();
    run.gen_data().unwrap();
    run.train_model().unwrap();
    let weights = load_checkpoint(&run.path(FILE_MODEL)).unwrap();
    let (_, examples): (_, Vec<QAExample>) = read_jsonl(
        &run.path(FILE_QA_COUNTERFACTUAL),
        "qa-counterfactual",
        Some(&run.hash),
    )
    .unwrap();
    let vocab = Vocab::build();

    let n_heads_total = 16usize;
    let mut relevance = vec![0.0f64; n_heads_total];
    let mut damage = vec![0.0f64; n_heads_total];
    let n_prompts = 24.min(examples.len());
    assert!(n_prompts >= 20, "need at least 20 prompts, got {n_prompts}");
    for ex in &examples[..n_prompts] {
        let target = vocab.encode(ex.target_answer()).unwrap()[0];
        let trace = attribute(&weights, &ex.prompt, target, &AttributionOptions::default()).unwrap();
        for l in 0..2 {
            for h in 0..8 {
                relevance[l * 8 + h] += trace.head_rel(l, h);
                damage[l * 8 + h] +=
                    ablation_logit_drop(&weights, &ex.prompt, target, (l, h)).unwrap();
            }
        }
    }
    let rho = spearman(&relevance, &damage).unwrap();
    let elapsed = t0.elapsed();
    verdict(
        "criterion 03 relevance vs ablation spearman",
        rho >= 0.6 && elapsed < Duration::from_secs(120),
        format!("spearman {rho:.3} over {n_prompts} prompts x 16 heads in {elapsed:.2?}, need >= 0.6 in < 2min"),
    );
}

// ---------------------------------------------------------------------
// Shared trained pipeline for criteria 4-8.
// ---------------------------------------------------------------------

struct Fixture {
    _dir: tempfile::TempDir,
    eval: QaEvalSummary,
    ablation: AblationSummary,
    fv: FvSummary,
    niah: NiahSummary,
    probe: ProbeSummary,
    /// gen-data + train + localize + specialize + ablate; what criterion 4
    /// pays for when nothing is cached.
    time_through_ablation: Duration,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::TempDir::new().unwrap();
        let run = Run::new(RunConfig::compact(), dir.path()).unwrap();
        let t0 = Instant::now();
        run.gen_data().unwrap();
        run.train_model().unwrap();
        run.localize().unwrap();
        run.specialize().unwrap();
        let ablation = run.ablate().unwrap();
        let time_through_ablation = t0.elapsed();
        let eval = run.eval_qa().unwrap();
        let fv = run.fv().unwrap();
        let niah = run.niah().unwrap();
        let probe = run.probe().unwrap();
        run.report().unwrap();
        Fixture {
            _dir: dir,
            eval,
            ablation,
            fv,
            niah,
            probe,
            time_through_ablation,
        }
    })
}

#[test]
fn criterion_04_contextual_knockout_breaks_open_book_recall() {
    let f = fixture();
    let drop = f.ablation.contextual_drop_points;
    let random = f.ablation.random_open_drop_points;
    let within_budget = f.time_through_ablation < Duration::from_secs(600);
    verdict(
        "criterion 04 contextual-head knockout",
        drop >= 30.0 && random <= 5.0 && within_budget,
        format!(
            "open-book counterfactual drop {drop:.1} pts (need >= 30), random {random:.1} pts (need <= 5), \
             train-through-ablate {:.1?} (need < 10min); baseline {:.1} pts",
            f.time_through_ablation,
            f.eval.counterfactual.recall_points(),
        ),
    );
}

#[test]
fn criterion_05_parametric_knockout_breaks_closed_book_recall() {
    let f = fixture();
    let drop = f.ablation.parametric_drop_points;
    let random = f.ablation.random_closed_drop_points;
    let open_shift = f.ablation.parametric_open_shift_points;
    verdict(
        "criterion 05 parametric-head knockout",
        drop >= 30.0 && random <= 10.0 && open_shift < 5.0,
        format!(
            "closed-book drop {drop:.1} pts (need >= 30), random {random:.1} pts (need <= 10), \
             open-book shift {open_shift:.1} pts (need < 5); closed baseline {:.1} pts",
            f.eval.closed.recall_points(),
        ),
    );
}

#[test]
fn criterion_06_task_vector_patching_recovers_the_answer() {
    let f = fixture();
    let task = f.fv.task_recall_points;
    let random = f.fv.random_recall_points;
    verdict(
        "criterion 06 task-vector patching",
        task >= 60.0 && random <= 20.0,
        format!(
            "patched recall {task:.1} pts (need >= 60), random-head vectors {random:.1} pts (need <= 20), \
             unpatched baseline {:.1} pts, alpha {}",
            f.fv.baseline_recall_points, f.fv.alpha,
        ),
    );
}

#[test]
fn criterion_07_retrieval_boost_turns_needle_copying_on() {
    let f = fixture();
    let boosted = f.niah.boosted_recall_points;
    let baseline = f.niah.baseline_recall_points;
    verdict(
        "criterion 07 retrieval-head boost",
        boosted >= 80.0 && baseline <= 10.0 && f.niah.boost_add == 5.0 && f.niah.boost_mult == 1000.0,
        format!(
            "needle recall boosted {boosted:.1} pts (need >= 80) vs unboosted {baseline:.1} pts (need <= 10), \
             boost +{} x{}, n={}",
            f.niah.boost_add, f.niah.boost_mult, f.niah.n,
        ),
    );
}

#[test]
fn criterion_08_probe_reads_answer_source_and_localizes_it() {
    let f = fixture();
    let p = &f.probe;
    let shuffled_ok = (p.shuffled_auc - 0.5).abs() <= 0.1;
    verdict(
        "criterion 08 answer-source probe",
        p.auc >= 0.85 && p.top1_weighted >= 0.70 && shuffled_ok && p.top1_weighted > p.top1_uniform,
        format!(
            "auc {:.3} (need >= 0.85), top-1 localization {:.2} (need >= 0.70), shuffled auc {:.3} \
             (need 0.5 +/- 0.1), uniform top-1 {:.2} (must be below weighted); train n={}, eval n={}",
            p.auc, p.top1_weighted, p.shuffled_auc, p.top1_uniform, p.n_train_samples, p.n_eval_samples,
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 9: the whole pipeline is bit-reproducible.
// ---------------------------------------------------------------------

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
    out
}

#[test]
fn criterion_09_runs_are_byte_reproducible() {
    let mut cfg = RunConfig::desk_default();
    cfg.seed = 21;
    cfg.model = ModelSpec {
        n_layers: 2,
        n_heads: 4,
        model_dim: 48,
        mlp_dim: 96,
        max_seq_len: 160,
        norm_eps: 1e-5,
        use_rms_norm: true,
        use_mlp: true,
    };
    cfg.corpus.n_entities = 48;
    cfg.train = TrainSpec {
        steps: 200,
        batch_size: 6,
        lr: 1e-3,
        warmup_steps: 20,
        grad_clip: 1.0,
        mode_weights: [1.0, 1.0, 0.7, 0.7],
        lr_min_fraction: 1.0,
        log_every: 50,
    };
    cfg.k_contextual = 4;
    cfg.k_parametric = 4;
    cfg.k_task = 2;
    cfg.k_retrieval = 2;
    cfg.n_score_prompts = 6;
    cfg.n_niah = 4;
    cfg.fv_alphas = vec![1.0, 2.0];

    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::TempDir::new().unwrap();
        let run = Run::new(cfg.clone(), dir.path()).unwrap();
        run.gen_data().unwrap();
        run.train_model().unwrap();
        run.eval_qa().unwrap();
        run.localize().unwrap();
        run.specialize().unwrap();
        run.ablate().unwrap();
        run.fv().unwrap();
        run.niah().unwrap();
        // A 200-step model may give the probe one-sided behavior; what
        // matters here is that both runs take the same path and that every
        // artifact that does exist is byte-identical.
        let probe_ok = run.probe().is_ok();
        if probe_ok {
            run.report().unwrap();
        }
        dirs.push((dir, probe_ok));
    }
    let (dir_a, ok_a) = &dirs[0];
    let (dir_b, ok_b) = &dirs[1];
    assert_eq!(ok_a, ok_b, "probe succeeded in one run but not the other");
    let files_a = dir_files(dir_a.path());
    let files_b = dir_files(dir_b.path());
    let names_a: Vec<&String> = files_a.keys().collect();
    let names_b: Vec<&String> = files_b.keys().collect();
    assert_eq!(names_a, names_b, "runs produced different artifact sets");
    let mut n_compared = 0usize;
    let mut mismatched = Vec::new();
    for (name, bytes) in &files_a {
        n_compared += 1;
        if files_b[name] != *bytes {
            mismatched.push(name.clone());
        }
    }
    for name in ["model.ckpt", "head_scores.csv", "eval_qa.json", "train_log.csv"] {
        assert!(files_a.contains_key(name), "expected artifact {name} missing");
    }
    verdict(
        "criterion 09 byte reproducibility",
        mismatched.is_empty(),
        format!("{n_compared} artifacts compared byte-for-byte, mismatched: {mismatched:?}"),
    );
}

// ---------------------------------------------------------------------
// Criterion 10: summing per-head projected outputs reproduces the fused
// attention block output.
// ---------------------------------------------------------------------

#[test]
fn criterion_10_per_head_decomposition_matches_fused_output() {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        model_dim: 32,
        mlp_dim: 64,
        vocab_size: 40,
        max_seq_len: 32,
        norm_eps: 1e-5,
        seed: 31,
        use_rms_norm: true,
        use_mlp: true,
    };
    let weights = Weights::init(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let tokens: Vec<usize> = (0..24).map(|_| rng.gen_range(0..40)).collect();
    let trace = forward(&weights, &tokens, &InterventionSpec::none(), true).unwrap();
    let (s, d, dh) = (tokens.len(), config.model_dim, config.head_dim());
    let mut worst = 0.0f64;
    for (l, layer) in trace.layers.iter().enumerate() {
        for i in 0..s {
            let mut decomposed = vec![0.0f64; d];
            for h in 0..config.n_heads {
                let w = weights.wo_head(l, h);
                let z = &layer.z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh];
                for o in 0..d {
                    let mut acc = 0.0f64;
                    for (k, &zk) in z.iter().enumerate() {
                        acc += w[o * dh + k] as f64 * zk as f64;
                    }
                    decomposed[o] += acc;
                }
            }
            for o in 0..d {
                worst = worst.max((decomposed[o] - layer.attn_block_out[i * d + o] as f64).abs());
            }
        }
    }
    verdict(
        "criterion 10 per-head decomposition",
        worst < 1e-5,
        format!("max |decomposed - fused| = {worst:.2e} over {s} positions x 2 layers, need < 1e-5"),
    );
}
