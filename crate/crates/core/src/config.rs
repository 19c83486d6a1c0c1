//! Experiment configuration: one JSON document describing a desk-scale
//! reproduction of the inversion workflow.
//!
//! Every section has defaults, unknown keys are rejected, and the whole
//! document is validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{Architecture, GridGeometry};
use crate::geophysics::{BurdenConfig, PsfConfig, RockPhysicsParams};
use crate::inversion::{DreamConfig, FlowConfig, InferenceNetConfig, LatentOptConfig, PivotalConfig};
use crate::metrics::{LandscapeConfig, SwdConfig};
use crate::survey::PlacementPolicy;

/// Generator used for inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorChoice {
    /// The analytic channel-belt model with default parameters.
    Procedural { latent_dim: usize },
    /// A randomly initialized residual generator.
    Neural {
        architecture: ArchitectureChoice,
        init_seed: u64,
    },
    /// Any generator stored in a weights file.
    Weights { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchitectureChoice {
    Preset(ArchitecturePreset),
    Custom(Architecture),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitecturePreset {
    Desk,
    Paper,
}

impl ArchitectureChoice {
    pub fn resolve(&self) -> Architecture {
        match self {
            ArchitectureChoice::Preset(ArchitecturePreset::Desk) => Architecture::desk(),
            ArchitectureChoice::Preset(ArchitecturePreset::Paper) => Architecture::paper(),
            ArchitectureChoice::Custom(a) => a.clone(),
        }
    }
}

/// Hidden ground truth: `cases` samples of the procedural generator at
/// prior draws keyed by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub cases: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            cases: 3,
            latent_dim: 16,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WellConfig {
    pub policy: PlacementPolicy,
    /// Well counts to invert with; each uses the first wells of the layout.
    pub counts: Vec<usize>,
    /// Standard deviation of Gaussian noise added to the logs (0 = exact).
    pub noise_sigma: f64,
}

impl Default for WellConfig {
    fn default() -> Self {
        WellConfig {
            policy: PlacementPolicy::default(),
            counts: vec![4, 8, 20],
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeismicSection {
    /// When on, every well-only run is repeated with the seismic term.
    pub enabled: bool,
    pub psf: PsfConfig,
    pub burden: BurdenConfig,
    pub rock: RockPhysicsParams,
}

impl Default for SeismicSection {
    fn default() -> Self {
        SeismicSection {
            enabled: false,
            psf: PsfConfig::default(),
            burden: BurdenConfig::default(),
            rock: RockPhysicsParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    LatentOpt,
    InferenceNet,
    Variational,
    DreamZs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LatentOpt => "latent-opt",
            Method::InferenceNet => "inference-net",
            Method::Variational => "variational",
            Method::DreamZs => "dream-zs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::Config(format!(
                "unknown method {s:?}; expected latent-opt, inference-net, variational or dream-zs"
            ))
        })
    }
}

/// Per-method settings; only the section of the selected method is used.
/// Sample counts and loss terms are set by the workflow.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub method: Method,
    pub latent_opt: LatentOptConfig,
    pub inference_net: InferenceNetConfig,
    pub variational: FlowConfig,
    pub dream: DreamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GridGeometry,
    pub generator: GeneratorChoice,
    pub truth: TruthConfig,
    pub wells: WellConfig,
    pub seismic: SeismicSection,
    pub inversion: InversionSection,
    pub tune: PivotalConfig,
    /// Posterior samples per run (restarts, draws or thinned chain states).
    pub n_samples: usize,
    pub landscape: LandscapeConfig,
    pub swd: SwdConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: GridGeometry::desk(),
            generator: GeneratorChoice::Procedural { latent_dim: 16 },
            truth: TruthConfig::default(),
            wells: WellConfig::default(),
            seismic: SeismicSection::default(),
            inversion: InversionSection::default(),
            tune: PivotalConfig::default(),
            n_samples: 300,
            landscape: LandscapeConfig::default(),
            swd: SwdConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Errors carry the line of the
    /// offending key when it can be located.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(locate(text, &msg)),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section; messages start with the dotted key path.
    pub fn validate(&self) -> Result<()> {
        let g = self.geometry;
        if g.nx == 0 || g.ny == 0 || g.nz == 0 || !(g.dx > 0.0 && g.dy > 0.0 && g.dz > 0.0) {
            return Err(Error::Config("geometry: extents and cell sizes must be positive".into()));
        }
        match &self.generator {
            GeneratorChoice::Procedural { latent_dim } if *latent_dim == 0 => {
                return Err(Error::Config("generator.latent_dim: must be >= 1".into()));
            }
            GeneratorChoice::Neural { architecture, .. } if architecture.resolve().geometry != g => {
                return Err(Error::Config(
                    "generator.architecture: output geometry does not match geometry".into(),
                ));
            }
            _ => {}
        }
        if self.truth.cases == 0 {
            return Err(Error::Config("truth.cases: need at least one test case".into()));
        }
        self.wells.policy.validate().map_err(at("wells.policy"))?;
        let available = self.wells.policy.legacy_wells + self.wells.policy.extra_wells;
        if self.wells.counts.is_empty() {
            return Err(Error::Config("wells.counts: need at least one well count".into()));
        }
        for &n in &self.wells.counts {
            if n == 0 || n > available {
                return Err(Error::Config(format!(
                    "wells.counts: {n} wells requested, layout places {available}"
                )));
            }
        }
        if !(self.wells.noise_sigma >= 0.0) {
            return Err(Error::Config("wells.noise_sigma: must be >= 0".into()));
        }
        self.seismic.psf.validate().map_err(at("seismic.psf"))?;
        self.seismic.rock.validate().map_err(at("seismic.rock"))?;
        self.seismic.burden.cells(g.dz).map_err(at("seismic.burden"))?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples: must be >= 1".into()));
        }
        let d = self.latent_dim_hint();
        let inv = &self.inversion;
        match inv.method {
            Method::LatentOpt => inv.latent_opt.validate().map_err(at("inversion.latent_opt"))?,
            Method::InferenceNet => inv.inference_net.validate().map_err(at("inversion.inference_net"))?,
            Method::Variational => inv.variational.validate().map_err(at("inversion.variational"))?,
            Method::DreamZs => inv.dream.validate(d.unwrap_or(1)).map_err(at("inversion.dream"))?,
        }
        self.tune.validate().map_err(at("tune"))?;
        if self.landscape.resolution == 0 || !(self.landscape.range >= 0.0) {
            return Err(Error::Config("landscape: need resolution >= 1 and range >= 0".into()));
        }
        Ok(())
    }

    /// Latent dimension when it is known without loading a weights file.
    pub fn latent_dim_hint(&self) -> Option<usize> {
        match &self.generator {
            GeneratorChoice::Procedural { latent_dim } => Some(*latent_dim),
            GeneratorChoice::Neural { architecture, .. } => Some(architecture.resolve().latent_dim),
            GeneratorChoice::Weights { .. } => None,
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory so
    /// the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Maps a section validation error to a config error prefixed by `key`.
fn at(key: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("{key}: {}", strip(&e)))
}

fn strip(e: &Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Appends `(line N)` for the last key of the dotted path at the start of
/// `msg` when that key appears in `text`.
fn locate(text: &str, msg: &str) -> String {
    let Some(path) = msg.split(':').next() else {
        return msg.to_string();
    };
    let mut line_from = 0usize;
    let mut found = None;
    // Walk the path so nested keys resolve below their parent.
    for key in path.split('.') {
        let needle = format!("\"{key}\"");
        match text.lines().enumerate().skip(line_from).find(|(_, l)| l.contains(&needle)) {
            Some((i, _)) => {
                found = Some(i + 1);
                line_from = i;
            }
            None => break,
        }
    }
    match found {
        Some(line) => format!("line {line}: {msg}"),
        None => msg.to_string(),
    }
}
