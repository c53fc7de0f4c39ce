//! Python module `dimnerf_py`: datasets, training, rendering and the
//! standalone image/geometry operations.

use std::path::PathBuf;

use pyo3::prelude::*;

use dimnerf::dataset::{synth_dataset, Dataset, Split, SynthConfig};
use dimnerf::geometry::{se3_exp, ScrewMotion};
use dimnerf::raster::RgbImage;
use dimnerf::trainer::{render_novel, TrainConfig, TrainState, TrainingData};

pyo3::create_exception!(dimnerf_py, DimnerfError, pyo3::exceptions::PyException);

fn err(e: dimnerf::Error) -> PyErr {
    DimnerfError::new_err(e.to_string())
}

/// RGB image with values in [0, 1], stored row-major.
#[pyclass(name = "Image", module = "dimnerf_py")]
struct PyImage {
    inner: RgbImage,
}

#[pymethods]
impl PyImage {
    /// `data` holds `width * height * 3` floats, row-major, RGB interleaved.
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        if data.len() != width * height * 3 {
            return Err(DimnerfError::new_err(format!("expected {} values, got {}", width * height * 3, data.len())));
        }
        let px = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { inner: RgbImage::new(width, height, px) })
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RgbImage::load_png(&path).map_err(err)? })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<(f64, f64, f64)> {
        if row >= self.inner.height || col >= self.inner.width {
            return Err(pyo3::exceptions::PyIndexError::new_err("pixel out of range"));
        }
        let p = self.inner.get(row, col);
        Ok((p[0], p[1], p[2]))
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.data.iter().flatten().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width, self.inner.height)
    }
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    dimnerf::metrics::psnr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    dimnerf::metrics::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (image, gamma, equalize = true))]
fn scale_up(image: &PyImage, gamma: f64, equalize: bool) -> PyResult<PyImage> {
    if gamma <= 0.0 {
        return Err(DimnerfError::new_err("gamma must be positive"));
    }
    Ok(PyImage { inner: dimnerf::degrade::scale_up(&image.inner, gamma, equalize) })
}

#[pyfunction]
#[pyo3(signature = (image, target_mean = 0.4))]
fn auto_gamma(image: &PyImage, target_mean: f64) -> f64 {
    dimnerf::degrade::auto_gamma(&image.inner, target_mean)
}

/// Flat list of 0/1 values, one per pixel.
#[pyfunction]
#[pyo3(signature = (image, radius = 30.0, threshold = 48.0))]
fn ctp_mask(image: &PyImage, radius: f64, threshold: f64) -> PyResult<Vec<u8>> {
    if !(0.0..=255.0).contains(&threshold) || radius < 0.0 {
        return Err(DimnerfError::new_err("need radius >= 0 and threshold in [0, 255]"));
    }
    Ok(dimnerf::ctp::ctp_mask(&image.inner, radius, threshold).values)
}

#[pyfunction]
fn consistency_loss(colors: Vec<[f64; 3]>) -> f64 {
    dimnerf::snd::consistency_loss(&colors)
}

/// Rigid transform of a screw `(r, v)` as a row-major 3×4 matrix.
#[pyfunction]
fn se3_exp_matrix(screw: [f64; 6]) -> [f64; 12] {
    se3_exp(&ScrewMotion::from_slice(&screw)).to_rows()
}

/// Writes a synthetic degraded scene; returns the number of views.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, views = None, config_toml = None))]
fn synth(out_dir: PathBuf, seed: u64, views: Option<usize>, config_toml: Option<&str>) -> PyResult<usize> {
    let mut cfg: SynthConfig = match config_toml {
        Some(t) => toml::from_str(t).map_err(|e| DimnerfError::new_err(e.to_string()))?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = views {
        cfg.views = v;
    }
    let ds = synth_dataset(&cfg).map_err(err)?;
    ds.save(&out_dir).map_err(err)?;
    Ok(ds.views.len())
}

#[pyclass(name = "Dataset", module = "dimnerf_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load(&dir).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.views.len()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.views.iter().map(|v| v.name.clone()).collect()
    }

    /// Indices of the `"train"` or `"eval"` views.
    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.indices(parse_split(split)?))
    }

    fn image(&self, view: usize) -> PyResult<PyImage> {
        Ok(PyImage { inner: self.view(view)?.image.clone() })
    }

    fn clean(&self, view: usize) -> PyResult<Option<PyImage>> {
        Ok(self.view(view)?.clean.clone().map(|inner| PyImage { inner }))
    }
}

impl PyDataset {
    fn view(&self, i: usize) -> PyResult<&dimnerf::dataset::View> {
        self.inner.views.get(i).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err("view out of range"))
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        _ => Err(DimnerfError::new_err(format!("unknown split `{s}`"))),
    }
}

/// Training state bound to the training split of a dataset.
#[pyclass(name = "Trainer", module = "dimnerf_py")]
struct PyTrainer {
    state: TrainState,
    data: TrainingData,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (dataset, config_toml = None, seed = None))]
    fn new(dataset: &PyDataset, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config_toml {
            Some(t) => TrainConfig::from_toml(t).map_err(err)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let data = TrainingData::from_dataset(&dataset.inner, &cfg).map_err(err)?;
        let state = TrainState::new(cfg, data.views()).map_err(err)?;
        Ok(Self { state, data })
    }

    /// Restores a checkpoint and pairs it with `dataset`.
    #[staticmethod]
    fn load(path: PathBuf, dataset: &PyDataset) -> PyResult<Self> {
        let state = TrainState::load(&path).map_err(err)?;
        let data = TrainingData::from_dataset(&dataset.inner, &state.config).map_err(err)?;
        Ok(Self { state, data })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iteration
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.state.config.to_toml()
    }

    /// Runs `n` steps; returns `(iteration, l_construction, l_consistency, lr)` per step.
    #[pyo3(signature = (n = 1))]
    fn step(&mut self, py: Python<'_>, n: usize) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.state.iteration >= self.state.config.iterations {
                break;
            }
            let log = py.detach(|| self.state.step(&self.data)).map_err(err)?;
            out.push((log.iteration, log.reconstruction, log.consistency, log.lr));
        }
        Ok(out)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(err)
    }

    /// Renders the pose of dataset view `view` with the scene field.
    fn render(&self, py: Python<'_>, dataset: &PyDataset, view: usize) -> PyResult<PyImage> {
        let cam = dataset.view(view)?.camera;
        let inner = py.detach(|| render_novel(&self.state, &cam)).map_err(err)?;
        Ok(PyImage { inner })
    }
}

#[pymodule]
fn dimnerf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(scale_up, m)?)?;
    m.add_function(wrap_pyfunction!(auto_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(ctp_mask, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(se3_exp_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add("DimnerfError", m.py().get_type::<DimnerfError>())?;
    Ok(())
}
