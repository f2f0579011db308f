//! Python module `etbert`: tokenizer, capture ingest, models, metrics and
//! the randomness tests.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use etbert_core::capture::ingest_capture;
use etbert_core::flow::{assemble_flows, generate_bursts};
use etbert_core::metrics::{confusion, macro_report};
use etbert_core::model::{Encoder, ModelConfig};
use etbert_core::randomness::{run_tests, BitSequence, SuiteParams, TEST_NAMES};
use etbert_core::token::{build_single_sequence, decode_tokens, encode_bytes, TokenId};
use etbert_core::train::{load_checkpoint, save_checkpoint};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Bi-gram token ids of a byte string.
#[pyfunction]
fn tokenize(data: &[u8]) -> PyResult<Vec<u32>> {
    Ok(encode_bytes(data).map_err(value_err)?.into_iter().map(|t| t.0).collect())
}

#[pyfunction]
fn detokenize<'py>(py: Python<'py>, ids: Vec<u32>) -> PyResult<Bound<'py, PyBytes>> {
    let ids: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
    Ok(PyBytes::new(py, &decode_tokens(&ids).map_err(value_err)?))
}

/// Clean packets of a capture as dicts, plus per-reason skip counts.
#[pyfunction]
fn ingest<'py>(py: Python<'py>, path: &str) -> PyResult<(Vec<Bound<'py, PyDict>>, Bound<'py, PyDict>)> {
    let (packets, skips) = ingest_capture(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let mut out = Vec::with_capacity(packets.len());
    for p in &packets {
        let d = PyDict::new(py);
        let t = &p.five_tuple;
        d.set_item("src", t.src_addr.to_string())?;
        d.set_item("sport", t.src_port)?;
        d.set_item("dst", t.dst_addr.to_string())?;
        d.set_item("dport", t.dst_port)?;
        d.set_item("protocol", t.protocol.to_string())?;
        d.set_item("timestamp", p.timestamp.as_secs_f64())?;
        d.set_item("datagram", PyBytes::new(py, &p.datagram))?;
        out.push(d);
    }
    let counts = PyDict::new(py);
    if let serde_json::Value::Object(m) = serde_json::to_value(&skips).map_err(value_err)? {
        for (k, v) in m {
            counts.set_item(k, v.as_u64().unwrap_or(0))?;
        }
    }
    Ok((out, counts))
}

/// Number of BURSTs in each flow of a capture.
#[pyfunction]
fn burst_counts(path: &str) -> PyResult<Vec<usize>> {
    let (packets, _) = ingest_capture(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(assemble_flows(packets).iter().map(|f| generate_bursts(f).len()).collect())
}

/// Macro precision, recall, F1 and accuracy from label lists.
#[pyfunction]
fn macro_metrics<'py>(
    py: Python<'py>,
    truths: Vec<usize>,
    predictions: Vec<usize>,
    classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = macro_report(&confusion(&truths, &predictions, classes).map_err(value_err)?).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("macro_pr", r.macro_pr)?;
    d.set_item("macro_rc", r.macro_rc)?;
    d.set_item("macro_f1", r.macro_f1)?;
    d.set_item("f1", r.per_class.iter().map(|c| c.f1).collect::<Vec<_>>())?;
    Ok(d)
}

/// p-value of each selected test (all by default) on the bits of `data`.
#[pyfunction]
#[pyo3(signature = (data, tests=None))]
fn randomness<'py>(py: Python<'py>, data: &[u8], tests: Option<Vec<String>>) -> PyResult<Bound<'py, PyDict>> {
    let seq = BitSequence::from_bytes(data).map_err(value_err)?;
    let names = tests.unwrap_or_else(|| TEST_NAMES.iter().map(|s| s.to_string()).collect());
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let d = PyDict::new(py);
    for (name, r) in run_tests(&seq, &names, SuiteParams::default()).map_err(value_err)? {
        d.set_item(name, r.ok().map(|t| t.p_value))?;
    }
    Ok(d)
}

/// Transformer encoder, optionally with a classification head.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: Encoder<f32>,
    labels: Vec<String>,
}

#[pymethods]
impl PyEncoder {
    /// Fresh encoder from the `desk` or `paper` preset.
    #[new]
    #[pyo3(signature = (preset="desk", seed=0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = match preset {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(PyEncoder {
            inner: Encoder::new(cfg.with_seed(seed)).map_err(value_err)?,
            labels: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(value_err)?;
        Ok(PyEncoder {
            inner: ck.model,
            labels: ck.labels,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.inner, &self.labels, None).map_err(value_err)
    }

    /// Model configuration as a JSON string.
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(value_err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params().iter().map(|p| p.value.len()).sum()
    }

    /// `[CLS]` pooled vector of one byte string.
    #[pyo3(signature = (data, max_len=128))]
    fn embed(&self, data: &[u8], max_len: usize) -> PyResult<Vec<f32>> {
        let seq = build_single_sequence(&encode_bytes(data).map_err(value_err)?, max_len).map_err(value_err)?;
        Ok(self.inner.forward(&seq).map_err(value_err)?.cls_pooled.to_vec())
    }

    /// Class probabilities for one byte string (needs a classification head).
    #[pyo3(signature = (data, max_len=128))]
    fn classify(&self, data: &[u8], max_len: usize) -> PyResult<Vec<f32>> {
        let seq = build_single_sequence(&encode_bytes(data).map_err(value_err)?, max_len).map_err(value_err)?;
        Ok(self.inner.classify(&[seq]).map_err(value_err)?.to_vec())
    }
}

#[pymodule]
fn etbert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(burst_counts, m)?)?;
    m.add_function(wrap_pyfunction!(macro_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(randomness, m)?)?;
    m.add_class::<PyEncoder>()?;
    Ok(())
}
