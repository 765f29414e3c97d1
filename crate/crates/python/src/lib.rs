//! Python bindings for the `wicksell` crate.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use wicksell::gp_limit;
use wicksell::isotonic;
use wicksell::lan;
use wicksell::{CdfModel, GpSpec, ObservationModel, RngStream, SampleSet, Sampler};

fn err(e: wicksell::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_model(spec: &str) -> PyResult<CdfModel> {
    spec.parse::<CdfModel>().map_err(err)
}

fn sample(values: Vec<f64>) -> PyResult<SampleSet> {
    SampleSet::from_values(values).map_err(err)
}

/// Distribution of squared sphere radii, from a spec such as `uniform01`,
/// `gamma:2:0.5` or `flat:default`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    obs: ObservationModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        Ok(PyModel { obs: ObservationModel::new(parse_model(spec)?).map_err(err)? })
    }

    #[getter]
    fn spec(&self) -> String {
        self.obs.model().spec()
    }

    fn cdf(&self, u: f64) -> f64 {
        self.obs.model().cdf(u)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.obs.model().quantile(p)
    }

    #[getter]
    fn m0(&self) -> f64 {
        self.obs.m0()
    }

    /// Density of the observed squared circle radius.
    fn g(&self, z: f64) -> PyResult<f64> {
        self.obs.g(z).map_err(err)
    }

    fn obs_cdf(&self, z: f64) -> PyResult<f64> {
        self.obs.obs_cdf(z).map_err(err)
    }

    fn v(&self, x: f64) -> PyResult<f64> {
        self.obs.v_exact(x).map_err(err)
    }

    fn u(&self, x: f64) -> PyResult<f64> {
        self.obs.u_exact(x).map_err(err)
    }

    /// `n` observed squared radii drawn from stream `(seed, stream)`.
    #[pyo3(signature = (n, seed, stream = 0))]
    fn simulate(&self, n: usize, seed: u64, stream: u64) -> PyResult<Vec<f64>> {
        let sampler = Sampler::new(self.obs.model()).map_err(err)?;
        Ok(sampler.dataset(n, RngStream::new(seed, stream)).map_err(err)?.values().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Model('{}')", self.obs.model().spec())
    }
}

/// Isotonic inverse estimator built from observed squared radii.
#[pyclass(name = "IsotonicEstimate", frozen)]
struct PyIsotonic {
    sample: SampleSet,
    maj: wicksell::ConcaveMajorant,
}

#[pymethods]
impl PyIsotonic {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        let sample = sample(values)?;
        let maj = isotonic::lcm(&sample).map_err(err)?;
        Ok(PyIsotonic { sample, maj })
    }

    fn f_hat(&self, x: f64) -> PyResult<f64> {
        self.maj.f_hat(x).map_err(err)
    }

    fn v_hat(&self, x: f64) -> f64 {
        isotonic::v_hat(&self.maj, x)
    }

    /// Plug-in estimate; `None` where it is undefined.
    fn f_naive(&self, x: f64) -> Option<f64> {
        isotonic::f_naive(&self.sample, x).ok()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.maj.knots().to_vec()
    }

    #[getter]
    fn slopes(&self) -> Vec<f64> {
        self.maj.slopes().to_vec()
    }

    fn __len__(&self) -> usize {
        self.sample.len()
    }
}

/// Gaussian-process limit at a point where the model is flat.
#[pyclass(name = "GpLimit", frozen)]
struct PyGpLimit {
    spec: GpSpec,
}

#[pymethods]
impl PyGpLimit {
    #[new]
    fn new(model: &str, x: f64) -> PyResult<Self> {
        let obs = ObservationModel::new(parse_model(model)?).map_err(err)?;
        Ok(PyGpLimit { spec: GpSpec::new(obs, x).map_err(err)? })
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.spec.grid().to_vec()
    }

    #[getter]
    fn flat_interval(&self) -> (f64, f64) {
        self.spec.flat_interval()
    }

    fn kernel(&self, s: f64, t: f64) -> PyResult<f64> {
        self.spec.anchored_kernel(s, t).map_err(err)
    }

    #[pyo3(signature = (seed, stream = 0))]
    fn path(&self, seed: u64, stream: u64) -> Vec<f64> {
        self.spec.path(RngStream::new(seed, stream))
    }

    /// Draws of `L_x`, one per simulated path.
    fn l_x(&self, py: Python<'_>, paths: usize, seed: u64) -> PyResult<Vec<f64>> {
        py.detach(|| gp_limit::l_x_distribution(&self.spec, paths, seed)).map(|s| s.values).map_err(err)
    }
}

/// Perturbed model along the local path at sample size `n`.
#[pyclass(name = "Perturbation", frozen)]
struct PyPerturbation {
    spec: lan::PerturbationSpec,
}

#[pymethods]
impl PyPerturbation {
    #[new]
    #[pyo3(signature = (model, x, h, n, gamma0 = None, gammax = None, eta = None))]
    fn new(
        model: &str,
        x: f64,
        h: (f64, f64),
        n: f64,
        gamma0: Option<f64>,
        gammax: Option<f64>,
        eta: Option<f64>,
    ) -> PyResult<Self> {
        let m = parse_model(model)?;
        let declared = m.declared_smoothness(x);
        let pick = |v: Option<f64>, d: Option<f64>| {
            v.or(d).ok_or_else(|| PyValueError::new_err("model declares no smoothness; pass gamma0 and gammax"))
        };
        let g0 = pick(gamma0, declared.as_ref().map(|s| s.gamma0))?;
        let gx = pick(gammax, declared.as_ref().map(|s| s.gammax))?;
        let obs = ObservationModel::new(m).map_err(err)?;
        let spec = lan::PerturbationSpec::new(obs, x, h, n, g0, gx, eta).map_err(err)?;
        spec.check_monotone_default().map_err(err)?;
        Ok(PyPerturbation { spec })
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.spec.eta()
    }

    fn cdf(&self, u: f64) -> f64 {
        self.spec.perturbed_cdf(u)
    }

    fn g(&self, z: f64) -> PyResult<f64> {
        self.spec.perturbed_g(z).map_err(err)
    }

    fn loglik(&self, values: Vec<f64>) -> PyResult<f64> {
        self.spec.loglik_sum(&sample(values)?).map_err(err)
    }

    fn delta(&self, values: Vec<f64>) -> PyResult<(f64, f64)> {
        self.spec.delta_n(&sample(values)?).map_err(err)
    }

    fn hadamard_value(&self) -> f64 {
        self.spec.hadamard_value()
    }
}

#[pyfunction]
fn zeta_n(x: f64, delta: f64, eta: f64) -> PyResult<f64> {
    lan::zeta_n(x, delta, eta).map_err(err)
}

#[pyfunction]
fn j_matrix(model: &str, x: f64, gamma0: f64, gammax: f64) -> PyResult<[[f64; 2]; 2]> {
    let obs = ObservationModel::new(parse_model(model)?).map_err(err)?;
    lan::j_matrix(&obs, x, gamma0, gammax).map_err(err)
}

#[pyfunction]
fn efficient_variance(model: &str, x: f64, gamma0: f64, gammax: f64) -> PyResult<f64> {
    let obs = ObservationModel::new(parse_model(model)?).map_err(err)?;
    lan::efficient_variance(&obs, x, gamma0, gammax).map_err(err)
}

#[pyfunction]
fn ks_fit_normal(values: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let f = gp_limit::ks_fit_normal(&values).map_err(err)?;
    Ok((f.mean, f.sd, f.ks, f.p_value))
}

#[pymodule]
fn wicksell_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyIsotonic>()?;
    m.add_class::<PyGpLimit>()?;
    m.add_class::<PyPerturbation>()?;
    m.add_function(wrap_pyfunction!(zeta_n, m)?)?;
    m.add_function(wrap_pyfunction!(j_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(efficient_variance, m)?)?;
    m.add_function(wrap_pyfunction!(ks_fit_normal, m)?)?;
    Ok(())
}
