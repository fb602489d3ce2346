//! Run configuration: a sectioned TOML file naming the dataset, the bases,
//! the LHS operator, the term library, and the sampler settings. Parsing and
//! semantic validation happen here; the result is a fully resolved run.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::basis::{
    make_bspline, BasisError, BasisEvaluations, DerivSpec, OperatorSpec, SpatialBasis,
    TemporalBasis,
};
use crate::gridtensor::{AxisSpec, GridTensorFile, GridTensorError};
use crate::library::{parse_library, CovariateField, FeatureLibrary, LibraryError};
use crate::sampler::ModelConfig;
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Toml(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("dataset error: {0}")]
    Dataset(#[from] GridTensorError),
    #[error("library error: {0}")]
    Library(#[from] LibraryError),
    #[error("basis error: {0}")]
    Basis(#[from] BasisError),
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub basis: BasisSection,
    #[serde(default)]
    pub operator: OperatorSection,
    pub library: LibrarySection,
    pub sampler: SamplerSection,
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
    #[serde(default)]
    pub components: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub p: Option<usize>,
    pub px: Option<usize>,
    pub py: Option<usize>,
    pub q: usize,
    pub spatial_degree: Option<usize>,
    pub temporal_degree: Option<usize>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    /// Temporal derivative order on the LHS; defaults to 1.
    pub j: Option<usize>,
    /// Operator terms; empty means the identity.
    #[serde(default)]
    pub terms: Vec<OperatorTermEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorTermEntry {
    pub coeff: f64,
    #[serde(default)]
    pub dx: usize,
    #[serde(default)]
    pub dy: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySection {
    pub terms: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub minibatch: usize,
    pub kappa: Vec<f64>,
    pub seed: u64,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub prior_a: Option<f64>,
    pub prior_b: Option<f64>,
    pub nu_v: Option<f64>,
    pub a_v: Option<f64>,
    pub inclusion_threshold: Option<f64>,
    pub beta_rss: Option<f64>,
    pub subsample: Option<usize>,
    pub g: Option<f64>,
    pub init_smooth: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub thin_a: usize,
}

/// A fully resolved run: data loaded, bases built, library parsed, and the
/// sampler configuration assembled.
pub struct ResolvedRun {
    pub dataset: GridTensorFile,
    pub components: Vec<String>,
    pub covariates: CovariateField,
    pub covariate_names: Vec<String>,
    pub library: FeatureLibrary,
    pub operator: OperatorSpec,
    pub j_order: usize,
    pub spatial: SpatialBasis,
    pub temporal: TemporalBasis,
    pub evaluations: BasisEvaluations,
    pub model: ModelConfig,
    pub out_dir: PathBuf,
    pub config_text: String,
    pub dataset_path: PathBuf,
}

fn default_component_names(n: usize) -> Vec<String> {
    match n {
        1 => vec!["u".into()],
        2 => vec!["u".into(), "v".into()],
        _ => (1..=n).map(|i| format!("u{i}")).collect(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Ok((Self::parse(&text)?, text))
    }

    /// Validate everything and load the referenced files. Paths are resolved
    /// relative to `base_dir` (normally the config file's directory).
    pub fn resolve(self, base_dir: &Path, config_text: String) -> Result<ResolvedRun, ConfigError> {
        let dataset_path = base_dir.join(&self.data.dataset);
        if !dataset_path.exists() {
            return Err(field_err(
                "data.dataset",
                format!("file not found: {}", dataset_path.display()),
            ));
        }
        let dataset = GridTensorFile::read(&dataset_path)?;
        let n_components = dataset.n_components();
        let (s_count, t_count, _) = dataset.tensor.dims();

        let components = if self.data.components.is_empty() {
            default_component_names(n_components)
        } else {
            if self.data.components.len() != n_components {
                return Err(field_err(
                    "data.components",
                    format!(
                        "{} names for a dataset with {} components",
                        self.data.components.len(),
                        n_components
                    ),
                ));
            }
            self.data.components.clone()
        };

        // Covariates: one single-component grid file each, on the same grid.
        let mut covariate_names = Vec::new();
        let mut cov_values: Vec<Vec<f64>> = Vec::new();
        for entry in &self.data.covariates {
            let path = base_dir.join(&entry.path);
            if !path.exists() {
                return Err(field_err(
                    "data.covariates",
                    format!("file not found: {}", path.display()),
                ));
            }
            let file = GridTensorFile::read(&path)?;
            if file.n_components() != 1 {
                return Err(field_err(
                    "data.covariates",
                    format!("covariate `{}` must have exactly one component", entry.name),
                ));
            }
            if file.tensor.dims().0 != s_count || file.tensor.dims().1 != t_count {
                return Err(field_err(
                    "data.covariates",
                    format!("covariate `{}` grid does not match the dataset", entry.name),
                ));
            }
            if file.mask.iter().any(|m| !*m) {
                return Err(field_err(
                    "data.covariates",
                    format!("covariate `{}` must be complete (no missing entries)", entry.name),
                ));
            }
            covariate_names.push(entry.name.clone());
            cov_values.push(file.tensor.values().to_vec());
        }
        let covariates = if cov_values.is_empty() {
            CovariateField::empty(s_count, t_count)
        } else {
            let k = cov_values.len();
            let mut flat = Vec::with_capacity(s_count * t_count * k);
            for vals in &cov_values {
                flat.extend_from_slice(vals);
            }
            CovariateField::new(
                Tensor3::new(s_count, t_count, k, flat)
                    .map_err(|e| field_err("data.covariates", e.to_string()))?,
            )?
        };

        let library = parse_library(&self.library.terms, &components, &covariate_names)?;

        // Operator and J.
        let j_order = self.operator.j.unwrap_or(1);
        if j_order == 0 {
            return Err(field_err("operator.j", "temporal order must be at least 1"));
        }
        let operator = if self.operator.terms.is_empty() {
            OperatorSpec::identity()
        } else {
            OperatorSpec {
                terms: self
                    .operator
                    .terms
                    .iter()
                    .map(|t| (t.coeff, DerivSpec::new(t.dx, t.dy, 0)))
                    .collect(),
            }
        };
        if !dataset.axis.is_2d() {
            for (_, d) in &operator.terms {
                if d.dy > 0 {
                    return Err(field_err("operator.terms", "dy > 0 on a 1D dataset"));
                }
            }
        }

        // Degrees: at least cubic, and spline order (degree + 1) above the
        // highest requested derivative.
        let lib_max = library.max_orders();
        let op_max_x =
            operator.terms.iter().map(|(_, d)| d.dx).max().unwrap_or(0).max(lib_max.dx);
        let op_max_y =
            operator.terms.iter().map(|(_, d)| d.dy).max().unwrap_or(0).max(lib_max.dy);
        let spatial_degree = self.basis.spatial_degree.unwrap_or(3.max(op_max_x.max(op_max_y)));
        let temporal_degree = self.basis.temporal_degree.unwrap_or(3.max(j_order.max(lib_max.dt)));
        if op_max_x > spatial_degree || op_max_y > spatial_degree {
            return Err(field_err(
                "basis.spatial_degree",
                format!(
                    "degree {spatial_degree} cannot support derivative orders up to ({op_max_x}, {op_max_y})"
                ),
            ));
        }
        if j_order.max(lib_max.dt) > temporal_degree {
            return Err(field_err(
                "basis.temporal_degree",
                format!("degree {temporal_degree} cannot support temporal order {}", j_order.max(lib_max.dt)),
            ));
        }

        // Bases over the dataset grid.
        let spatial = match &dataset.axis {
            AxisSpec::OneD { xs } => {
                if lib_max.dy > 0 {
                    return Err(field_err("library.terms", "y-derivatives on a 1D dataset"));
                }
                let p = self.basis.p.ok_or_else(|| field_err("basis.p", "required for 1D data"))?;
                let bx = make_bspline((xs[0], xs[xs.len() - 1]), p, spatial_degree)?;
                SpatialBasis::new_1d(bx, xs.clone())?
            }
            AxisSpec::TwoD { xs, ys } => {
                let (px, py) = match (self.basis.px, self.basis.py, self.basis.p) {
                    (Some(px), Some(py), _) => (px, py),
                    (None, None, Some(p)) => {
                        let root = (p as f64).sqrt().round() as usize;
                        if root * root != p {
                            return Err(field_err(
                                "basis.p",
                                format!("{p} is not a perfect square; give px and py explicitly"),
                            ));
                        }
                        (root, root)
                    }
                    _ => {
                        return Err(field_err(
                            "basis",
                            "2D data needs px and py (or a square p)",
                        ))
                    }
                };
                let bx = make_bspline((xs[0], xs[xs.len() - 1]), px, spatial_degree)?;
                let by = make_bspline((ys[0], ys[ys.len() - 1]), py, spatial_degree)?;
                SpatialBasis::new_2d(bx, by, xs.clone(), ys.clone())?
            }
        };
        let bt = make_bspline(
            (dataset.times[0], dataset.times[dataset.times.len() - 1]),
            self.basis.q,
            temporal_degree,
        )?;
        let temporal = TemporalBasis::new(bt, dataset.times.clone())?;
        let evaluations = BasisEvaluations::build(
            &spatial,
            &temporal,
            n_components,
            &library.required_spatial(),
            &library.required_temporal(),
            &operator,
            j_order,
        )?;

        let model = ModelConfig {
            g: self.sampler.g,
            prior_a: self.sampler.prior_a.unwrap_or(1.0),
            prior_b: self.sampler.prior_b.unwrap_or(1.0),
            lambda1: self.sampler.lambda1.unwrap_or(0.01),
            lambda2: self.sampler.lambda2.unwrap_or(0.01),
            kappa: self.sampler.kappa.clone(),
            minibatch: self.sampler.minibatch,
            iterations: self.sampler.iterations,
            burn_in: self.sampler.burn_in,
            beta_rss: self.sampler.beta_rss,
            subsample: self.sampler.subsample,
            nu_v: self.sampler.nu_v.unwrap_or(2.0),
            a_v: self.sampler.a_v.unwrap_or(1e5),
            seed: self.sampler.seed,
            inclusion_threshold: self.sampler.inclusion_threshold.unwrap_or(0.5),
            thin_a: self.output.thin_a,
            init_smooth: self.sampler.init_smooth.unwrap_or(1.0),
        };
        model
            .validate(n_components)
            .map_err(|e| field_err("sampler", e.to_string()))?;

        Ok(ResolvedRun {
            dataset,
            components,
            covariates,
            covariate_names,
            library,
            operator,
            j_order,
            spatial,
            temporal,
            evaluations,
            model,
            out_dir: base_dir.join(&self.output.dir),
            config_text,
            dataset_path,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_burgers, BurgersSpec};

    fn write_burgers_dataset(dir: &Path) -> PathBuf {
        let spec = BurgersSpec { t_end: 1.0, n_times: 11, nx: 64, ..Default::default() };
        let out = simulate_burgers(&spec).unwrap();
        let file = GridTensorFile::complete(
            AxisSpec::OneD { xs: out.xs.clone() },
            out.times.clone(),
            out.tensor.clone(),
        )
        .unwrap();
        let path = dir.join("burgers.gt");
        file.write(&path).unwrap();
        path
    }

    const BASE: &str = r#"
[data]
dataset = "burgers.gt"

[basis]
p = 12
q = 6

[library]
terms = ["u", "u*u_x", "u_xx"]

[sampler]
iterations = 10
burn_in = 5
minibatch = 20
kappa = [1e-4]
seed = 7

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_resolves_minimal_config() {
        let dir = tempfile::tempdir().unwrap();
        write_burgers_dataset(dir.path());
        let cfg = RunConfig::parse(BASE).unwrap();
        let run = cfg.resolve(dir.path(), BASE.to_string()).unwrap();
        assert_eq!(run.components, vec!["u".to_string()]);
        assert_eq!(run.library.len(), 3);
        // Third x-derivative absent: default degree is max(3, 2+1) = 3.
        assert_eq!(run.spatial.bx().degree(), 3);
        assert!(run.operator.is_identity());
        assert_eq!(run.model.iterations, 10);
    }

    #[test]
    fn missing_dataset_is_a_field_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse(BASE).unwrap();
        let err = match cfg.resolve(dir.path(), BASE.into()) {
            Ok(_) => panic!("resolve should fail"),
            Err(e) => e,
        };
        match err {
            ConfigError::Field { field, .. } => assert_eq!(field, "data.dataset"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn library_parse_errors_propagate() {
        let dir = tempfile::tempdir().unwrap();
        write_burgers_dataset(dir.path());
        let text = BASE.replace("\"u_xx\"", "\"w_xx\"");
        let cfg = RunConfig::parse(&text).unwrap();
        match cfg.resolve(dir.path(), text.clone()) {
            Err(ConfigError::Library(LibraryError::Parse { .. })) => {}
            Err(other) => panic!("unexpected error {other:?}"),
            Ok(_) => panic!("resolve should fail"),
        }
    }

    #[test]
    fn default_degree_tracks_highest_derivative() {
        let dir = tempfile::tempdir().unwrap();
        write_burgers_dataset(dir.path());
        // Third derivative: cubic still suffices (order 4 > 3).
        let text = BASE.replace("\"u_xx\"", "\"u_xxx\"");
        let cfg = RunConfig::parse(&text).unwrap();
        let run = cfg.resolve(dir.path(), text).unwrap();
        assert_eq!(run.spatial.bx().degree(), 3);
        // Fourth derivative pushes the degree up.
        let text = BASE.replace("\"u_xx\"", "\"u_xxxx\"");
        let cfg = RunConfig::parse(&text).unwrap();
        let run = cfg.resolve(dir.path(), text).unwrap();
        assert_eq!(run.spatial.bx().degree(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = BASE.replace("[output]", "unknown_key = 1\n[output]");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Toml(_))));
    }

    #[test]
    fn bad_sampler_settings_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_burgers_dataset(dir.path());
        let text = BASE.replace("burn_in = 5", "burn_in = 10");
        let cfg = RunConfig::parse(&text).unwrap();
        assert!(cfg.resolve(dir.path(), text).is_err());
    }
}
