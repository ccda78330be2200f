//! Python bindings: the workbench's main types and operations, exposed with
//! a deliberately thin JSON seam.
//!
//! Structured inputs (model configs, intervention specs, run configs) enter
//! as JSON strings and stage summaries leave the same way, so the Python
//! side needs nothing beyond `json.loads` and the schemas stay defined in
//! exactly one place, the core crate.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use headatlas_core::attribution::{attribute, AttributionOptions, RelevanceTrace};
use headatlas_core::corpus;
use headatlas_core::interventions;
use headatlas_core::model::{
    self, generate, load_checkpoint, save_checkpoint, GenerateOptions, InterventionSpec,
    ModelConfig, Weights,
};
use headatlas_core::pipeline;

fn err(e: headatlas_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn jerr(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("json error: {e}"))
}

fn parse_spec(spec_json: Option<&str>) -> PyResult<InterventionSpec> {
    match spec_json {
        Some(text) => serde_json::from_str(text).map_err(jerr),
        None => Ok(InterventionSpec::none()),
    }
}

/// Closed word-level vocabulary shared by every model in the workbench.
#[pyclass]
struct Vocab {
    inner: corpus::Vocab,
}

#[pymethods]
impl Vocab {
    #[new]
    fn new() -> Self {
        Self {
            inner: corpus::Vocab::build(),
        }
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        self.inner.encode(text).map_err(err)
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }
}

/// One flow attribution: per-head credit, per-token credit, and the
/// conservation audit for the run that produced it.
#[pyclass]
struct Attribution {
    trace: RelevanceTrace,
}

#[pymethods]
impl Attribution {
    #[getter]
    fn n_layers(&self) -> usize {
        self.trace.n_layers
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.trace.n_heads
    }

    #[getter]
    fn seed(&self) -> f64 {
        self.trace.seed
    }

    /// Relative gap between the seeded relevance and everything the ledger
    /// and input heatmap recovered; small means the flow is conserved.
    #[getter]
    fn audit_rel_gap(&self) -> f64 {
        self.trace.audit().rel_gap
    }

    fn input_heatmap(&self) -> Vec<f64> {
        self.trace.input_heatmap.clone()
    }

    /// Positive per-head credit, flattened `layer * n_heads + head`.
    fn head_relevance(&self) -> Vec<f64> {
        self.trace.head_relevance.clone()
    }

    fn normalized_head_relevance(&self) -> Vec<f64> {
        self.trace.normalized_head_relevance()
    }

    /// Per-position credit one head moved, length = sequence length.
    fn rho(&self, layer: usize, head: usize) -> PyResult<Vec<f64>> {
        if layer >= self.trace.n_layers || head >= self.trace.n_heads {
            return Err(PyValueError::new_err(format!(
                "head ({layer},{head}) out of range for {}x{}",
                self.trace.n_layers, self.trace.n_heads
            )));
        }
        Ok(self.trace.rho(layer, head).to_vec())
    }

    /// Where absorbed relevance went: `(sink name, amount)` pairs.
    fn ledger(&self) -> Vec<(String, f64)> {
        self.trace
            .ledger
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// A model plus its weights; all operations the workbench performs on one.
#[pyclass]
struct Model {
    weights: Weights,
}

#[pymethods]
impl Model {
    /// Fresh random weights from a model config JSON.
    #[staticmethod]
    fn init(config_json: &str) -> PyResult<Self> {
        let config: ModelConfig = serde_json::from_str(config_json).map_err(jerr)?;
        Ok(Self {
            weights: Weights::init(&config).map_err(err)?,
        })
    }

    /// Default model config for a given vocabulary size, as JSON.
    #[staticmethod]
    fn desk_config(vocab_size: usize) -> PyResult<String> {
        serde_json::to_string_pretty(&ModelConfig::desk_default(vocab_size)).map_err(jerr)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            weights: load_checkpoint(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path.as_ref(), &self.weights).map_err(err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.weights.n_params()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.weights.config).map_err(jerr)
    }

    /// Logits at the last position, optionally under an intervention spec.
    #[pyo3(signature = (tokens, spec_json=None))]
    fn last_logits(&self, tokens: Vec<usize>, spec_json: Option<&str>) -> PyResult<Vec<f32>> {
        let spec = parse_spec(spec_json)?;
        let trace = model::forward(&self.weights, &tokens, &spec, false).map_err(err)?;
        let width = trace.logits.len() / trace.seq_len();
        let last = (trace.seq_len() - 1) * width;
        Ok(trace.logits[last..last + width].to_vec())
    }

    /// Greedy continuation; stops at EOS or `max_new_tokens`.
    #[pyo3(signature = (tokens, max_new_tokens=20, spec_json=None))]
    fn generate(
        &self,
        tokens: Vec<usize>,
        max_new_tokens: usize,
        spec_json: Option<&str>,
    ) -> PyResult<Vec<usize>> {
        let opts = GenerateOptions {
            max_new_tokens,
            spec: parse_spec(spec_json)?,
            ..GenerateOptions::default()
        };
        Ok(generate(&self.weights, &tokens, &opts).map_err(err)?.generated)
    }

    /// Flow attribution of `target`'s logit at the last position back onto
    /// heads and input tokens.
    #[pyo3(signature = (tokens, target, spec_json=None))]
    fn attribute(
        &self,
        tokens: Vec<usize>,
        target: usize,
        spec_json: Option<&str>,
    ) -> PyResult<Attribution> {
        let opts = AttributionOptions {
            spec: parse_spec(spec_json)?,
            ..AttributionOptions::default()
        };
        let trace = attribute(&self.weights, &tokens, target, &opts).map_err(err)?;
        Ok(Attribution { trace })
    }
}

/// A run directory bound to a config; every pipeline stage as a method.
/// Stage summaries return as JSON strings.
#[pyclass]
struct Run {
    run: pipeline::Run,
}

fn summary_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(jerr)
}

#[pymethods]
impl Run {
    #[new]
    #[pyo3(signature = (out, config_json=None, seed=None))]
    fn new(out: &str, config_json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: pipeline::RunConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(jerr)?,
            None => pipeline::RunConfig::desk_default(),
        };
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        Ok(Self {
            run: pipeline::Run::new(cfg, out.as_ref()).map_err(err)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.run.hash.clone()
    }

    #[getter]
    fn out(&self) -> String {
        self.run.out.display().to_string()
    }

    fn gen_data(&self) -> PyResult<String> {
        summary_json(&self.run.gen_data().map_err(err)?)
    }

    fn train(&self) -> PyResult<String> {
        summary_json(&self.run.train_model().map_err(err)?)
    }

    fn eval_qa(&self) -> PyResult<String> {
        summary_json(&self.run.eval_qa().map_err(err)?)
    }

    fn localize_heads(&self) -> PyResult<String> {
        summary_json(&self.run.localize().map_err(err)?)
    }

    fn specialize_heads(&self) -> PyResult<String> {
        summary_json(&self.run.specialize().map_err(err)?)
    }

    fn ablate(&self) -> PyResult<String> {
        summary_json(&self.run.ablate().map_err(err)?)
    }

    fn fv(&self) -> PyResult<String> {
        summary_json(&self.run.fv().map_err(err)?)
    }

    fn niah(&self) -> PyResult<String> {
        summary_json(&self.run.niah().map_err(err)?)
    }

    fn probe(&self) -> PyResult<String> {
        summary_json(&self.run.probe().map_err(err)?)
    }

    fn report(&self) -> PyResult<String> {
        summary_json(&self.run.report().map_err(err)?)
    }

    fn run_all(&self) -> PyResult<String> {
        summary_json(&self.run.run_all().map_err(err)?)
    }
}

/// Default run config as JSON; `compact=True` for the CI-sized profile.
#[pyfunction]
#[pyo3(signature = (compact=false))]
fn default_config(compact: bool) -> PyResult<String> {
    let cfg = if compact {
        pipeline::RunConfig::compact()
    } else {
        pipeline::RunConfig::desk_default()
    };
    serde_json::to_string_pretty(&cfg).map_err(jerr)
}

/// Intervention spec JSON that zeroes the given `(layer, head)` pairs.
#[pyfunction]
fn ablation_spec(heads: Vec<(usize, usize)>) -> PyResult<String> {
    serde_json::to_string_pretty(&interventions::ablation_spec(&heads)).map_err(jerr)
}

/// Intervention spec JSON that boosts the given heads' attention onto
/// `needle_positions` (score + add, then * mult).
#[pyfunction]
fn boost_spec(
    heads: Vec<(usize, usize)>,
    needle_positions: Vec<usize>,
    add: f32,
    mult: f32,
) -> PyResult<String> {
    serde_json::to_string_pretty(&interventions::boost_spec(&heads, needle_positions, add, mult))
        .map_err(jerr)
}

#[pymodule]
fn headatlas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocab>()?;
    m.add_class::<Model>()?;
    m.add_class::<Attribution>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_spec, m)?)?;
    m.add_function(wrap_pyfunction!(boost_spec, m)?)?;
    Ok(())
}
