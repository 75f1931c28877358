//! Python bindings: a `Session` object bundling a run configuration with
//! its built pipeline, plus small helpers. Built as the `tiny_engram`
//! extension module.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use engram_core::eval::{binding_score, compare_matched_seed, make_dataset};
use engram_core::registry::registry_digest;
use engram_core::train::{load_adapter, run_training, save_adapter};
use engram_core::util::component_seed;
use engram_core::{EngramError, Pipeline, RunConfig, Topology};

fn py_err(e: EngramError) -> PyErr {
    match e {
        EngramError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_topology(name: &str) -> PyResult<Topology> {
    match name {
        "single_stream" => Ok(Topology::SingleStream),
        "tri_stream_layout" => Ok(Topology::TriStreamLayout),
        "projected_stream" => Ok(Topology::ProjectedStream),
        other => Err(PyValueError::new_err(format!(
            "unknown topology {other:?}; expected single_stream, tri_stream_layout, \
             or projected_stream"
        ))),
    }
}

fn topology_name(t: Topology) -> &'static str {
    match t {
        Topology::SingleStream => "single_stream",
        Topology::TriStreamLayout => "tri_stream_layout",
        Topology::ProjectedStream => "projected_stream",
    }
}

/// One run: the configuration and the frozen pipeline built from it.
///
/// The adapter (concept tables and scales) is the only mutable state;
/// `train` and `load_adapter` replace it in place.
#[pyclass(module = "tiny_engram")]
pub struct Session {
    cfg: RunConfig,
    pipeline: Pipeline,
    steps_done: usize,
}

impl Session {
    fn build(cfg: RunConfig) -> PyResult<Self> {
        let pipeline = cfg.build_pipeline().map_err(py_err)?;
        Ok(Self {
            cfg,
            pipeline,
            steps_done: 0,
        })
    }
}

#[pymethods]
impl Session {
    /// Desk-scale defaults for a topology name.
    #[staticmethod]
    fn from_desk(topology: &str) -> PyResult<Self> {
        Self::build(RunConfig::desk_default(parse_topology(topology)?))
    }

    /// Load a TOML run configuration.
    #[staticmethod]
    fn from_config(path: PathBuf) -> PyResult<Self> {
        Self::build(RunConfig::load(&path).map_err(py_err)?)
    }

    #[getter]
    fn trigger(&self) -> String {
        self.cfg.trigger.clone()
    }

    #[getter]
    fn topology(&self) -> &'static str {
        topology_name(self.cfg.topology)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    #[getter]
    fn n_pairs(&self) -> usize {
        self.cfg.n_pairs
    }

    #[getter]
    fn num_streams(&self) -> usize {
        self.pipeline.num_streams()
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// SHA-256 digest over every frozen backbone weight.
    fn frozen_digest(&self) -> String {
        self.pipeline.backbone().frozen_digest()
    }

    fn save_config(&self, path: PathBuf) -> PyResult<()> {
        self.cfg.save(&path).map_err(py_err)
    }

    /// Per-stream registry description: keys, spans, decoded text, digest.
    fn registry<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let out = PyList::empty(py);
        for (idx, mem) in self.pipeline.memory.streams.iter().enumerate() {
            let reg = &mem.registry;
            let tok = self.pipeline.tokenizer(idx);
            let entries = PyList::empty(py);
            for key in reg.entries() {
                let words: Vec<&str> = key
                    .span()
                    .iter()
                    .map(|&id| tok.decode_id(id).unwrap_or("<unk>"))
                    .collect();
                let e = PyDict::new(py);
                e.set_item("ids", key.span().to_vec())?;
                e.set_item("n", key.len())?;
                e.set_item("text", words.join(" "))?;
                entries.append(e)?;
            }
            let d = PyDict::new(py);
            d.set_item("stream_id", reg.stream_id())?;
            d.set_item("entry_count", reg.entry_count())?;
            d.set_item("digest", registry_digest(reg))?;
            d.set_item("entries", entries)?;
            out.append(d)?;
        }
        Ok(out)
    }

    /// Matches of one prompt, keyed by stream id, as (key, start, len).
    fn match_spans<'py>(
        &self,
        py: Python<'py>,
        prompt: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sets = self.pipeline.match_all(&[prompt.to_string()]);
        let out = PyDict::new(py);
        for (mem, set) in self.pipeline.memory.streams.iter().zip(&sets) {
            let spans: Vec<(usize, usize, usize)> =
                set.iter().map(|m| (m.key, m.start, m.len)).collect();
            out.set_item(mem.stream_id(), spans)?;
        }
        Ok(out)
    }

    /// Deterministic latents for a prompt batch, shape (len(prompts), d_z).
    #[pyo3(signature = (prompts, seed = 0, use_memory = true))]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        prompts: Vec<String>,
        seed: u64,
        use_memory: bool,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let z = self
            .pipeline
            .sample(&prompts, seed, use_memory)
            .map_err(py_err)?;
        Ok(z.into_pyarray(py))
    }

    /// The seeded synthetic training pairs for this run's concept.
    fn dataset(&self) -> PyResult<Vec<(String, Vec<f64>)>> {
        make_dataset(
            &self.cfg.concept,
            self.cfg.n_pairs,
            component_seed(self.cfg.train.seed, "dataset"),
        )
        .map_err(py_err)
    }

    /// Run the configured adapter optimization; returns per-step records.
    #[pyo3(signature = (steps = None))]
    fn train<'py>(&mut self, py: Python<'py>, steps: Option<usize>) -> PyResult<Bound<'py, PyList>> {
        let data = self.dataset()?;
        let mut tcfg = self.cfg.train.clone();
        if let Some(s) = steps {
            tcfg.steps = s;
        }
        let records = run_training(&mut self.pipeline, &data, &tcfg).map_err(py_err)?;
        self.steps_done += records.len();
        let out = PyList::empty(py);
        for r in &records {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("loss", r.loss)?;
            d.set_item("grad_norm", r.grad_norm)?;
            d.set_item("embed_norm", r.embed_norm)?;
            d.set_item("scale_norm", r.scale_norm)?;
            out.append(d)?;
        }
        Ok(out)
    }

    fn save_adapter(&self, path: PathBuf) -> PyResult<()> {
        save_adapter(&self.pipeline.memory, &self.cfg.train, self.steps_done, &path)
            .map(|_| ())
            .map_err(py_err)
    }

    fn load_adapter(&mut self, path: PathBuf) -> PyResult<()> {
        let ckpt = load_adapter(&path).map_err(py_err)?;
        ckpt.apply(&mut self.pipeline.memory).map_err(py_err)
    }

    /// Matched-seed base-vs-memory comparison.
    #[pyo3(signature = (prompts, seeds = vec![0]))]
    fn compare<'py>(
        &self,
        py: Python<'py>,
        prompts: Vec<String>,
        seeds: Vec<u64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let report = compare_matched_seed(&self.pipeline, &prompts, &seeds).map_err(py_err)?;
        let records = PyList::empty(py);
        for r in &report.records {
            let d = PyDict::new(py);
            d.set_item("prompt", &r.prompt)?;
            d.set_item("seed", r.seed)?;
            d.set_item("has_trigger", r.has_trigger)?;
            d.set_item("bitwise_equal", r.bitwise_equal)?;
            d.set_item("distance", r.distance)?;
            d.set_item("base", r.base.clone())?;
            d.set_item("engram", r.engram.clone())?;
            records.append(d)?;
        }
        let s = &report.summary;
        let summary = PyDict::new(py);
        summary.set_item("num_records", s.num_records)?;
        summary.set_item("num_trigger", s.num_trigger)?;
        summary.set_item("num_control", s.num_control)?;
        summary.set_item("controls_all_bitwise", s.controls_all_bitwise)?;
        summary.set_item("max_control_distance", s.max_control_distance)?;
        summary.set_item("mean_trigger_distance", s.mean_trigger_distance)?;
        let out = PyDict::new(py);
        out.set_item("records", records)?;
        out.set_item("summary", summary)?;
        out.set_item("boundary_holds", report.boundary_holds())?;
        Ok(out)
    }

    /// (trigger_score, control_score) on held-out prompts.
    #[pyo3(signature = (n_eval = 32, seed = 424242))]
    fn binding_score(&self, n_eval: usize, seed: u64) -> PyResult<(f64, f64)> {
        binding_score(&self.pipeline, &self.cfg.concept, n_eval, seed).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(topology={:?}, trigger={:?}, latent_dim={}, steps_done={})",
            topology_name(self.cfg.topology),
            self.cfg.trigger,
            self.cfg.latent_dim,
            self.steps_done
        )
    }
}

/// Stable sub-seed derivation, identical to the library's internal one.
#[pyfunction]
#[pyo3(name = "component_seed")]
fn component_seed_py(seed: u64, label: &str) -> u64 {
    component_seed(seed, label)
}

#[pymodule]
fn tiny_engram(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(component_seed_py, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
