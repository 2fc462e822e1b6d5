//! Experiment configuration: a TOML document with one table per block.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tomocvae_core::autodiff::AdamConfig;
use tomocvae_core::baselines::{LearnedConfig, MlemConfig, GM3_COMPONENTS};
use tomocvae_core::cvae::ModelConfig;
use tomocvae_core::engine::TrainConfig;
use tomocvae_core::metrics::HpdVariant;
use tomocvae_core::toyval::{MixtureSpec, ToyConfig};
use tomocvae_core::{OperatorGeometry, RadonTransform};

/// A configuration that failed to parse or validate. Maps to exit status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ValidationError {}

fn invalid(msg: impl Into<String>) -> ValidationError {
    ValidationError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub height: usize,
    pub width: usize,
    pub angles: usize,
    /// Detector bins; omitted means the smallest odd count covering the diagonal.
    pub bins: Option<usize>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { height: 16, width: 16, angles: 30, bins: None }
    }
}

impl GeometryConfig {
    pub fn geometry(&self) -> OperatorGeometry {
        match self.bins {
            Some(b) => OperatorGeometry::new(self.height, self.width, self.angles, b),
            None => OperatorGeometry::covering(self.height, self.width, self.angles),
        }
    }

    pub fn operator(&self) -> anyhow::Result<RadonTransform> {
        Ok(RadonTransform::new(self.geometry())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumourSpec {
    /// Index of the test phantom to modify.
    pub phantom: usize,
    /// `[row, col]` of the disk centre.
    pub center: [usize; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Count levels of the training stream, cycled tuple by tuple.
    pub train_peaks: Vec<f64>,
    /// Count levels at which test data are generated.
    pub test_peaks: Vec<f64>,
    /// Tuples per minibatch `M`.
    pub batch_size: usize,
    /// Divide training tuples and test data by their peak.
    pub normalize: bool,
    /// Seed of the training stream.
    pub seed: u64,
    /// Number of synthetic test phantoms; ignored when `phantom_files` is set.
    pub test_phantoms: usize,
    pub test_seed: u64,
    /// Grid files used as test phantoms instead of synthetic ones.
    pub phantom_files: Vec<PathBuf>,
    pub tumours: Vec<TumourSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_peaks: vec![1e2],
            test_peaks: vec![1e2],
            batch_size: 10,
            normalize: true,
            seed: 0,
            test_phantoms: 20,
            test_seed: 1,
            phantom_files: Vec::new(),
            tumours: Vec::new(),
        }
    }
}

impl DataConfig {
    pub fn test_count(&self) -> usize {
        if self.phantom_files.is_empty() {
            self.test_phantoms
        } else {
            self.phantom_files.len()
        }
    }

    /// Normalization scale applied to data at count level `peak`.
    pub fn scale(&self, peak: f64) -> f64 {
        if self.normalize {
            peak
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Posterior draws `S` per observation.
    pub samples: usize,
    pub seed: u64,
    /// Also store every draw, not only the summary.
    pub keep_samples: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { samples: 64, seed: 7, keep_samples: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvBlock {
    /// Regularization weight per test count level, in `data.test_peaks` order.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub tau: Option<f64>,
    pub sigma: Option<f64>,
}

impl Default for TvBlock {
    fn default() -> Self {
        TvBlock { alpha: vec![2.0], iterations: 500, tau: None, sigma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mlem,
    Tv,
    Lgd,
    Gm3,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mlem => "mlem",
            Method::Tv => "tv",
            Method::Lgd => "lgd",
            Method::Gm3 => "gm3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    pub methods: Vec<Method>,
    pub mlem: MlemConfig,
    pub tv: TvBlock,
    pub lgd: LearnedConfig,
    pub gm3: LearnedConfig,
    pub gm3_components: usize,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        BaselinesConfig {
            methods: vec![Method::Mlem, Method::Tv],
            mlem: MlemConfig::default(),
            tv: TvBlock::default(),
            lgd: LearnedConfig::default(),
            gm3: LearnedConfig::default(),
            gm3_components: GM3_COMPONENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Image rows at which credible bands are extracted; empty means the middle row.
    pub hpd_rows: Vec<usize>,
    pub hpd_level: f64,
    pub hpd_variant: HpdVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { hpd_rows: Vec::new(), hpd_level: 0.95, hpd_variant: HpdVariant::Full }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBlock {
    pub components: usize,
    pub radius: f64,
    pub variance: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Draws from the model and from the mixture.
    pub samples: usize,
    pub bins: usize,
    pub model: ToyConfig,
}

impl Default for ToyBlock {
    fn default() -> Self {
        ToyBlock {
            components: 7,
            radius: 5.0,
            variance: 0.25,
            epochs: 1000,
            seed: 0,
            samples: 100_000,
            bins: 50,
            model: ToyConfig {
                adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
                final_lr: Some(1e-5),
                ..ToyConfig::default()
            },
        }
    }
}

impl ToyBlock {
    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec::ring(self.components, self.radius, self.variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub baselines: BaselinesConfig,
    pub eval: EvalConfig,
    pub toy: ToyBlock,
    pub output: OutputConfig,
}

fn check(block: &str, r: tomocvae_core::Result<()>) -> Result<(), ValidationError> {
    r.map_err(|e| invalid(format!("[{block}] {e}")))
}

fn positive(block: &str, name: &str, v: f64) -> Result<(), ValidationError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("[{block}] {name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// Checks every block; nothing runs on a configuration that fails here.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let g = &self.geometry;
        check("geometry", g.geometry().validate())?;
        let d = &self.data;
        if d.train_peaks.is_empty() || d.test_peaks.is_empty() {
            return Err(invalid("[data] train_peaks and test_peaks must not be empty"));
        }
        for p in d.train_peaks.iter().chain(&d.test_peaks) {
            positive("data", "peak", *p)?;
        }
        if d.batch_size == 0 {
            return Err(invalid("[data] batch_size must be at least 1"));
        }
        if d.test_count() == 0 {
            return Err(invalid("[data] need at least one test phantom"));
        }
        for t in &d.tumours {
            if t.phantom >= d.test_count() {
                return Err(invalid(format!("[data] tumour phantom {} out of range", t.phantom)));
            }
            positive("data", "tumour radius", t.radius)?;
        }
        check("model", self.model.validate())?;
        check("train", self.train.validate())?;
        if self.sample.samples == 0 {
            return Err(invalid("[sample] samples must be at least 1"));
        }
        let b = &self.baselines;
        check("baselines.mlem", b.mlem.validate())?;
        if b.tv.alpha.len() != d.test_peaks.len() {
            return Err(invalid(format!(
                "[baselines.tv] alpha has {} entries for {} test peaks",
                b.tv.alpha.len(),
                d.test_peaks.len()
            )));
        }
        if b.tv.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(invalid("[baselines.tv] alpha must be nonnegative"));
        }
        if b.tv.iterations == 0 {
            return Err(invalid("[baselines.tv] iterations must be at least 1"));
        }
        for (name, s) in [("tau", b.tv.tau), ("sigma", b.tv.sigma)] {
            if let Some(s) = s {
                positive("baselines.tv", name, s)?;
            }
        }
        check("baselines.lgd", b.lgd.validate())?;
        check("baselines.gm3", b.gm3.validate())?;
        if b.gm3_components == 0 {
            return Err(invalid("[baselines] gm3_components must be at least 1"));
        }
        let e = &self.eval;
        if !(e.hpd_level > 0.0 && e.hpd_level < 1.0) {
            return Err(invalid("[eval] hpd_level must lie in (0, 1)"));
        }
        if let Some(r) = e.hpd_rows.iter().find(|r| **r >= g.height) {
            return Err(invalid(format!("[eval] hpd row {r} outside a {}-row image", g.height)));
        }
        let t = &self.toy;
        if t.components == 0 || t.samples == 0 {
            return Err(invalid("[toy] components and samples must be positive"));
        }
        positive("toy", "radius", t.radius)?;
        positive("toy", "variance", t.variance)?;
        check("toy", t.mixture().validate())?;
        check("toy.model", t.model.validate())?;
        if t.bins < tomocvae_core::toyval::MIN_HISTOGRAM_BINS {
            return Err(invalid(format!(
                "[toy] bins must be at least {}",
                tomocvae_core::toyval::MIN_HISTOGRAM_BINS
            )));
        }
        let seeds = [
            d.seed,
            d.test_seed,
            self.train.seed,
            self.sample.seed,
            b.lgd.seed,
            b.gm3.seed,
            t.seed,
        ];
        if seeds.iter().any(|s| *s > i64::MAX as u64) {
            return Err(invalid("seeds must fit in a signed 64-bit integer"));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(invalid("[output] dir must not be empty"));
        }
        Ok(())
    }

    pub fn hpd_rows(&self) -> Vec<usize> {
        if self.eval.hpd_rows.is_empty() {
            vec![self.geometry.height / 2]
        } else {
            self.eval.hpd_rows.clone()
        }
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ValidationError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self::from_toml(&text, overrides)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// Applies `dotted.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<(), ValidationError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override `{item}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override `{item}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
