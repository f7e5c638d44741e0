//! Python bindings: networks, datasets, fusion, pruning, training and experiments.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use ntfuse::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use ntfuse::datasets::{load_csv, load_idx, BlobsConfig, Split};
use ntfuse::experiments::{run_experiment as run_spec, ExperimentSpec};
use ntfuse::fusion::{self, EnsembleBundle, FusionMethod, FusionPlan, HeadSource};
use ntfuse::network::{convnet_specs, mlp_specs, Mode};
use ntfuse::pruning::{hidden_widths, magnitude_prune, KeepPolicy};
use ntfuse::rng::RngStream;
use ntfuse::tensor::Tensor;
use ntfuse::training::{self, TrainConfig};

create_exception!(pyntfuse, NtfuseError, PyException);

fn err(e: ntfuse::Error) -> PyErr {
    NtfuseError::new_err(e.to_string())
}

fn split_of(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(NtfuseError::new_err(format!("split must be 'train' or 'test', got {other:?}"))),
    }
}

/// A feed-forward network of linear, convolution, batch-norm, pooling and ReLU layers.
#[pyclass(module = "pyntfuse", from_py_object)]
#[derive(Clone)]
pub struct Network {
    inner: ntfuse::network::Network,
}

#[pymethods]
impl Network {
    /// Fully connected network with ReLU between layers.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, classes, seed=0))]
    fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let specs = mlp_specs(input_dim, &hidden, classes);
        let inner = ntfuse::network::Network::init(&[input_dim], &specs, &mut RngStream::new(seed, "py/init"))
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// 3x3 conv + batch norm + ReLU (+ 2x2 pool) blocks followed by linear layers.
    #[staticmethod]
    #[pyo3(signature = (input_shape, channels, fc, classes, seed=0))]
    fn convnet(input_shape: (usize, usize, usize), channels: Vec<usize>, fc: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let (c, h, w) = input_shape;
        let specs = convnet_specs([c, h, w], &channels, &fc, classes).map_err(err)?;
        let inner = ntfuse::network::Network::init(&[c, h, w], &specs, &mut RngStream::new(seed, "py/init"))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path, &CheckpointMeta::default()).map_err(err)
    }

    #[getter]
    fn arch_id(&self) -> String {
        self.inner.arch_id().to_string()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn hidden_widths(&self) -> Vec<usize> {
        hidden_widths(&self.inner)
    }

    /// Eval-mode logits for a list of flattened samples.
    fn forward(&self, inputs: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let per: usize = self.inner.input_shape().iter().product();
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(self.inner.input_shape());
        if let Some(bad) = inputs.iter().find(|r| r.len() != per) {
            return Err(NtfuseError::new_err(format!("sample of length {} for input size {per}", bad.len())));
        }
        let x = Tensor::new(shape, inputs.concat()).map_err(err)?;
        let out = self.inner.forward(&x, Mode::Eval).map_err(err)?;
        Ok(out.data().chunks(self.inner.num_classes()).map(<[f32]>::to_vec).collect())
    }

    /// `(accuracy, mean_loss)` on a dataset.
    fn evaluate(&self, data: &Dataset) -> PyResult<(f32, f32)> {
        let r = training::evaluate(&self.inner, &data.inner).map_err(err)?;
        Ok((r.accuracy, r.mean_loss))
    }

    fn __repr__(&self) -> String {
        format!("Network(arch_id={}, hidden_widths={:?})", self.inner.arch_id(), hidden_widths(&self.inner))
    }
}

/// Labelled samples with a train/test tag.
#[pyclass(module = "pyntfuse", skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: ntfuse::datasets::Dataset,
}

#[pymethods]
impl Dataset {
    /// Gaussian clusters around seeded random centers.
    #[staticmethod]
    #[pyo3(signature = (n, classes, dim, spread, seed=0, clusters_per_class=1, split="train"))]
    fn blobs(n: usize, classes: usize, dim: usize, spread: f32, seed: u64, clusters_per_class: usize, split: &str) -> PyResult<Self> {
        let cfg = BlobsConfig { classes, dim, spread, clusters_per_class, seed };
        Ok(Self { inner: cfg.generate(n, split_of(split)?).map_err(err)? })
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_idx(images, labels).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, split="train"))]
    fn load_csv(path: PathBuf, split: &str) -> PyResult<Self> {
        Ok(Self { inner: load_csv(path, split_of(split)?).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }
}

fn method_of(name: &str) -> PyResult<FusionMethod> {
    FusionMethod::from_cli_name(name)
        .ok_or_else(|| NtfuseError::new_err(format!("unknown method {name:?}; use nt, nt-iter, nt-rec, avg or align")))
}

fn bundle(members: &[Network]) -> PyResult<EnsembleBundle> {
    EnsembleBundle::from_members(members.iter().map(|m| m.inner.clone()).collect()).map_err(err)
}

/// Fuses members with `method` (nt, nt-iter, nt-rec, avg, align).
#[pyfunction]
#[pyo3(signature = (members, method="nt", sparsity=None))]
fn fuse(members: Vec<Network>, method: &str, sparsity: Option<f32>) -> PyResult<Network> {
    let plan = FusionPlan {
        sparsity,
        ..FusionPlan::new(method_of(method)?, TrainConfig::new(0, 0.01, 0.0, 1, 0))
    };
    Ok(Network { inner: fusion::fuse(&bundle(&members)?, &plan).map_err(err)? })
}

/// Concatenation of all members: its output is the mean of theirs.
#[pyfunction]
fn concat(members: Vec<Network>) -> PyResult<Network> {
    Ok(Network { inner: fusion::concat_fuse(&bundle(&members)?).map_err(err)? })
}

/// Magnitude pruning by sparsity or by explicit per-layer keep counts.
#[pyfunction]
#[pyo3(signature = (net, sparsity=None, keep_counts=None))]
fn prune(net: &Network, sparsity: Option<f32>, keep_counts: Option<Vec<usize>>) -> PyResult<Network> {
    let policy = match (sparsity, keep_counts) {
        (Some(s), None) => KeepPolicy::Sparsity(s),
        (None, Some(c)) => KeepPolicy::KeepCounts(c),
        _ => return Err(NtfuseError::new_err("give exactly one of sparsity or keep_counts")),
    };
    Ok(Network { inner: magnitude_prune(&net.inner, &policy).map_err(err)? })
}

/// Replaces a fraction `p` of the recipient's units by the donor's strongest.
#[pyfunction]
#[pyo3(signature = (recipient, donor, p, head="recipient"))]
fn transplant(recipient: &Network, donor: &Network, p: f32, head: &str) -> PyResult<Network> {
    let head = match head {
        "recipient" => HeadSource::Recipient,
        "donor" => HeadSource::Donor,
        other => return Err(NtfuseError::new_err(format!("head must be 'recipient' or 'donor', got {other:?}"))),
    };
    Ok(Network { inner: fusion::transplant_fraction(&recipient.inner, &donor.inner, p, head).map_err(err)? })
}

/// SGD with momentum. Returns the trained network and per-epoch test accuracy.
#[pyfunction]
#[pyo3(signature = (net, train, test, epochs, lr=0.01, momentum=0.9, batch_size=64, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    lr: f32,
    momentum: f32,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Network, Vec<f32>)> {
    let cfg = TrainConfig::new(epochs, lr, momentum, batch_size, seed);
    let start = net.inner.clone();
    let (inner, history) =
        py.detach(|| training::train(start, &train.inner, &test.inner, &cfg)).map_err(err)?;
    Ok((Network { inner }, history.records.iter().map(|r| r.test_accuracy).collect()))
}

/// Runs an experiment spec given as JSON text; returns the report as CSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec_json: &str) -> PyResult<String> {
    let spec = ExperimentSpec::from_json(spec_json).map_err(err)?;
    let out = py.detach(|| run_spec(&spec)).map_err(err)?;
    ntfuse::report::to_csv(&out.rows()).map_err(err)
}

#[pymodule]
fn pyntfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NtfuseError", m.py().get_type::<NtfuseError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(concat, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(transplant, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
