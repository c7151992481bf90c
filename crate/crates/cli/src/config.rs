//! Run configuration: model path, master subspace, selection, weights,
//! horizon, and grids. Pair indices are 1-based (pair 1 = slowest mode).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use ssm_control::elqr::LQWeights;
use ssm_control::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub metric: String,
    pub threshold: f64,
    pub m_hat: usize,
    #[serde(default)]
    pub forced_pairs: Vec<usize>,
}

/// Q / M weight shorthand: diag(q_d I_n, q_v I_n), or a dense matrix in
/// sparse-triplet form, inline or from a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateWeightSpec {
    Scales {
        displacement_scale: f64,
        velocity_scale: f64,
    },
    Inline {
        matrix: TripletMatrix,
    },
    File {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletMatrix {
    pub rows: usize,
    pub cols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl TripletMatrix {
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows, self.cols));
        for &(i, j, v) in &self.triplets {
            m[(i, j)] += v;
        }
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputWeightSpec {
    Scalar { scalar: f64 },
    Diagonal { diagonal: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsConfig {
    #[serde(rename = "Q")]
    pub q: StateWeightSpec,
    #[serde(rename = "R")]
    pub r: InputWeightSpec,
    #[serde(rename = "M")]
    pub m: StateWeightSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t0: f64,
    pub t1: f64,
    #[serde(default)]
    pub boundaries: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridsConfig {
    pub design_step: f64,
    pub output_step: f64,
}

/// Initial condition: reduced coordinates (one [re, im] per master pair)
/// or a full-state vector file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCondition {
    Reduced { reduced: Vec<(f64, f64)> },
    StateFile { state_file: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub master_pairs: Vec<usize>,
    pub ssm_order: u32,
    #[serde(default = "default_res_tol")]
    pub resonance_tol: f64,
    pub selection: SelectionConfig,
    pub weights: WeightsConfig,
    pub epsilon: f64,
    pub horizon: HorizonConfig,
    pub grids: GridsConfig,
    pub initial: InitialCondition,
    #[serde(default)]
    pub seed: u64,
    /// Optional hard limit on the RMS prediction error; exceeding it makes
    /// `control` exit with the invariant-failure code.
    #[serde(default)]
    pub max_rms_prediction_error: Option<f64>,
}

fn default_res_tol() -> f64 {
    0.05
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ssm_order < 1 {
            return Err(Error::Invalid("ssm_order must be >= 1".into()));
        }
        if self.master_pairs.is_empty() || self.master_pairs.contains(&0) {
            return Err(Error::Invalid(
                "master_pairs must be nonempty 1-based indices".into(),
            ));
        }
        if self.horizon.t1 <= self.horizon.t0 {
            return Err(Error::Invalid("horizon must satisfy t1 > t0".into()));
        }
        let mut prev = self.horizon.t0;
        for &b in &self.horizon.boundaries {
            if b <= prev || b >= self.horizon.t1 {
                return Err(Error::Invalid(format!(
                    "boundary {b} outside the open horizon or out of order"
                )));
            }
            prev = b;
        }
        if self.grids.design_step <= 0.0 || self.grids.output_step <= 0.0 {
            return Err(Error::Invalid("grid steps must be positive".into()));
        }
        if !(self.selection.threshold > 0.0 && self.selection.threshold <= 1.0) {
            return Err(Error::Invalid("selection threshold must be in (0, 1]".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Invalid("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Resolve a path relative to the config file location.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

fn state_weight(spec: &StateWeightSpec, n: usize, base: &Path) -> Result<Array2<f64>> {
    match spec {
        StateWeightSpec::Scales {
            displacement_scale,
            velocity_scale,
        } => {
            let mut m = Array2::zeros((2 * n, 2 * n));
            for i in 0..n {
                m[(i, i)] = *displacement_scale;
                m[(n + i, n + i)] = *velocity_scale;
            }
            Ok(m)
        }
        StateWeightSpec::Inline { matrix } => {
            let m = matrix.to_dense();
            if m.nrows() != 2 * n || m.ncols() != 2 * n {
                return Err(Error::Invalid(format!(
                    "weight matrix must be {0}x{0}, got {1}x{2}",
                    2 * n,
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(m)
        }
        StateWeightSpec::File { file } => {
            let path = if file.is_absolute() {
                file.clone()
            } else {
                base.join(file)
            };
            let text = std::fs::read_to_string(&path)?;
            let tm: TripletMatrix = serde_json::from_str(&text).map_err(|e| Error::Schema {
                field: path.display().to_string(),
                message: e.to_string(),
            })?;
            let m = tm.to_dense();
            if m.nrows() != 2 * n || m.ncols() != 2 * n {
                return Err(Error::Invalid(format!(
                    "weight matrix in {} must be {1}x{1}",
                    path.display(),
                    2 * n
                )));
            }
            Ok(m)
        }
    }
}

pub fn build_weights(cfg: &WeightsConfig, n: usize, q_inputs: usize, base: &Path) -> Result<LQWeights> {
    let q = state_weight(&cfg.q, n, base)?;
    let m = state_weight(&cfg.m, n, base)?;
    let r = match &cfg.r {
        InputWeightSpec::Scalar { scalar } => Array2::eye(q_inputs) * *scalar,
        InputWeightSpec::Diagonal { diagonal } => {
            if diagonal.len() != q_inputs {
                return Err(Error::Invalid(format!(
                    "R diagonal length {} != input count {q_inputs}",
                    diagonal.len()
                )));
            }
            Array2::from_diag(&ndarray::Array1::from_vec(diagonal.clone()))
        }
    };
    LQWeights::new(q, r, m)
}
