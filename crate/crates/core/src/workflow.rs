//! Staged desk-scale experiment.
//!
//! Stages read the artifacts of earlier stages from the output directory,
//! so they can run one at a time from the command line or all at once via
//! [`run_pipeline`]. Every stage writes a manifest (config hash, seed,
//! version, produced files with checksums) that carries the full effective
//! configuration; wall-clock timings go to a separate file so the manifest
//! and all artifacts stay byte-identical across repeated runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, GeneratorChoice, Method};
use crate::error::{Error, Result};
use crate::generator::{
    load_weights, sample_prior, save_weights, AnyGenerator, Generator, GeneratorWeights, LatentVector, ModelGrid,
    NeuralGenerator, ProceduralGenerator,
};
use crate::geophysics::SeismicModel;
use crate::inversion::{
    dream_zs, fingerprint_hex, gelman_rubin, latent_optimize, pivotal_tune, train_inference_network,
    variational_infer, well_mae, DataLoss, InversionResult, Observations, SampleResult, SampleStatus,
    SeismicObservation, TuningMode,
};
use crate::io::{export_vtk, format_sig, GridFile};
use crate::metrics::{
    classical_mds, ensemble_stats, error_csv, error_landscape, error_report, pca_directions, swd_multiscale,
    DistanceMatrix, ErrorRow, Summary,
};
use crate::rng;
use crate::survey::{place_wells, WellDataset, WellLayout};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenTruth,
    PlaceWells,
    ForwardSeismic,
    SamplePrior,
    Invert,
    Tune,
    Metrics,
    Landscape,
    ExportVtk,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenTruth => "gen-truth",
            Stage::PlaceWells => "place-wells",
            Stage::ForwardSeismic => "forward-seismic",
            Stage::SamplePrior => "sample-prior",
            Stage::Invert => "invert",
            Stage::Tune => "tune",
            Stage::Metrics => "metrics",
            Stage::Landscape => "landscape",
            Stage::ExportVtk => "export-vtk",
        }
    }
}

/// A stage failure, naming the stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Written to `manifests/<stage>.json` after every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: Stage,
    pub seconds: f64,
    pub threads: usize,
}

/// One inversion setting: a test case, a well count and whether the
/// seismic term is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub case: usize,
    pub wells: usize,
    pub seismic: bool,
}

impl Run {
    pub fn tag(&self) -> String {
        let data = if self.seismic { "seismic" } else { "wells" };
        format!("case{}_w{}_{}", self.case, self.wells, data)
    }
}

/// All runs of an experiment, case-major.
pub fn runs(cfg: &ExperimentConfig) -> Vec<Run> {
    let variants: &[bool] = if cfg.seismic.enabled { &[false, true] } else { &[false] };
    let mut out = Vec::new();
    for case in 0..cfg.truth.cases {
        for &wells in &cfg.wells.counts {
            for &seismic in variants {
                out.push(Run { case, wells, seismic });
            }
        }
    }
    out
}

/// Collects produced files for the manifest.
struct Outputs<'a> {
    root: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Outputs { root, files: Vec::new() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        crate::io::write_text(self.path(rel), text)?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(rel, &s)
    }

    fn grid(&mut self, rel: &str, grid: &GridFile) -> Result<()> {
        grid.save(self.path(rel))?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }

    fn weights(&mut self, rel: &str, w: &GeneratorWeights) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_weights(w, &p)?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

/// Builds the inversion generator described by the config.
pub fn build_generator(cfg: &ExperimentConfig) -> Result<AnyGenerator> {
    let gen = match &cfg.generator {
        GeneratorChoice::Procedural { latent_dim } => {
            AnyGenerator::Procedural(ProceduralGenerator::new(cfg.geometry, *latent_dim)?)
        }
        GeneratorChoice::Neural {
            architecture,
            init_seed,
        } => AnyGenerator::Neural(NeuralGenerator::random(architecture.resolve(), *init_seed)?),
        GeneratorChoice::Weights { path } => AnyGenerator::from_weights(load_weights(path)?)?,
    };
    if gen.geometry() != cfg.geometry {
        return Err(Error::Config("generator: output geometry does not match geometry".into()));
    }
    Ok(gen)
}

fn truth_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive(cfg.truth.seed, "truth", 0)
}

fn truth_path(case: usize) -> String {
    format!("truth/case{case}.grid")
}

pub fn load_truth(out: &Path, case: usize) -> Result<ModelGrid> {
    GridFile::load(out.join(truth_path(case)))?.to_model()
}

/// Well data of one run: the first `run.wells` wells of the case's log set.
pub fn load_wells(cfg: &ExperimentConfig, out: &Path, run: &Run) -> Result<WellDataset> {
    let all = WellDataset::load_csv(cfg.geometry, out.join(format!("wells/case{}.csv", run.case)))?;
    if run.wells > all.len() {
        return Err(Error::invalid(format!("case {} has {} wells, {} requested", run.case, all.len(), run.wells)));
    }
    Ok(WellDataset {
        geometry: all.geometry,
        wells: all.wells[..run.wells].to_vec(),
    })
}

/// Frozen seismic operator and observed cube of one case.
fn load_seismic(cfg: &ExperimentConfig, out: &Path, case: usize) -> Result<SeismicObservation> {
    #[derive(Deserialize)]
    struct Operator {
        v_avg: f64,
    }
    let op: Operator = read_json(&out.join(format!("seismic/case{case}.json")))?;
    let s = &cfg.seismic;
    let model = SeismicModel::new(cfg.geometry, s.rock, s.burden, s.psf, op.v_avg)?;
    let cube = GridFile::load(out.join(format!("seismic/case{case}.grid")))?.to_seismic()?;
    if cube.geometry != model.cube_geometry() {
        return Err(Error::Format(format!(
            "seismic cube of case {case} does not match the configured operator"
        )));
    }
    Ok(SeismicObservation { model, cube })
}

pub fn load_observations(cfg: &ExperimentConfig, out: &Path, run: &Run) -> Result<Observations> {
    Ok(Observations {
        wells: load_wells(cfg, out, run)?,
        seismic: if run.seismic { Some(load_seismic(cfg, out, run.case)?) } else { None },
    })
}

/// Runs one stage. `inputs` is only used by `export-vtk`: grid files to
/// convert (all truth and seismic grids when empty).
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, inputs: &[PathBuf]) -> Result<Manifest, StageError> {
    let wrap = |error| StageError { stage, error };
    cfg.validate().map_err(wrap)?;
    let root = cfg.output_dir.as_path();
    let clock = Instant::now();
    let mut o = Outputs::new(root);
    match stage {
        Stage::GenTruth => gen_truth(cfg, &mut o),
        Stage::PlaceWells => wells_stage(cfg, &mut o),
        Stage::ForwardSeismic => seismic_stage(cfg, &mut o),
        Stage::SamplePrior => prior_stage(cfg, &mut o),
        Stage::Invert => invert_stage(cfg, &mut o),
        Stage::Tune => tune_stage(cfg, &mut o),
        Stage::Metrics => metrics_stage(cfg, &mut o),
        Stage::Landscape => landscape_stage(cfg, &mut o),
        Stage::ExportVtk => vtk_stage(cfg, &mut o, inputs),
    }
    .map_err(wrap)?;
    let manifest = write_manifest(cfg, stage, &o).map_err(wrap)?;
    let timing = Timing {
        stage,
        seconds: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    let text = serde_json::to_string_pretty(&timing).map_err(|e| wrap(e.into()))?;
    crate::io::write_text(root.join(format!("timings/{}.json", stage.name())), &text).map_err(wrap)?;
    log::info!("{} finished in {:.1} s", stage.name(), timing.seconds);
    Ok(manifest)
}

/// The full pipeline: truth, wells, seismic (when enabled), prior samples,
/// inversion, tuning and metrics.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<Manifest>, StageError> {
    let mut stages = vec![Stage::GenTruth, Stage::PlaceWells];
    if cfg.seismic.enabled {
        stages.push(Stage::ForwardSeismic);
    }
    stages.extend([Stage::SamplePrior, Stage::Invert, Stage::Tune, Stage::Metrics]);
    stages.into_iter().map(|s| run_stage(cfg, s, &[])).collect()
}

fn write_manifest(cfg: &ExperimentConfig, stage: Stage, o: &Outputs) -> Result<Manifest> {
    let mut files = Vec::with_capacity(o.files.len());
    for rel in &o.files {
        let (bytes, sha256) = sha256_file(&o.root.join(rel))?;
        files.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes,
            sha256,
        });
    }
    let mut config = cfg.clone();
    config.output_dir = PathBuf::new();
    let manifest = Manifest {
        stage,
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    crate::io::write_text(o.root.join(format!("manifests/{}.json", stage.name())), &text)?;
    Ok(manifest)
}

fn gen_truth(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = ProceduralGenerator::new(cfg.geometry, cfg.truth.latent_dim)?;
    let latents = sample_prior(cfg.truth.cases, cfg.truth.latent_dim, truth_seed(cfg))?;
    for (case, z) in latents.iter().enumerate() {
        let grid = gen.generate(z, None)?;
        o.grid(&truth_path(case), &GridFile::from_model(&grid))?;
    }
    let raw: Vec<&Vec<f64>> = latents.iter().map(|z| &z.0).collect();
    o.json("truth/latents.json", &raw)
}

fn wells_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let truths = (0..cfg.truth.cases)
        .map(|c| load_truth(o.root, c))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<Vec<f64>> = truths.iter().map(ModelGrid::vertical_mean_coarse).collect();
    let layout = place_wells(&cfg.geometry, &maps, &cfg.wells.policy, rng::derive(cfg.seed, "wells", 0))?;
    o.json("wells/layout.json", &layout)?;
    let total = cfg.wells.policy.legacy_wells + cfg.wells.policy.extra_wells;
    for (case, truth) in truths.iter().enumerate() {
        let mut data = crate::survey::extract_well_data(truth, &layout.locations(case, total)?)?;
        if cfg.wells.noise_sigma > 0.0 {
            data = data.with_noise(cfg.wells.noise_sigma, rng::derive(cfg.seed, "wells/noise", case as u64));
        }
        o.text(&format!("wells/case{case}.csv"), &data.to_csv())?;
    }
    Ok(())
}

fn seismic_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let s = &cfg.seismic;
    for case in 0..cfg.truth.cases {
        let truth = load_truth(o.root, case)?;
        let model = SeismicModel::for_grid(&truth, s.rock, s.burden, s.psf)?;
        let cube = model.forward(&truth)?;
        o.grid(&format!("seismic/case{case}.grid"), &GridFile::from_seismic(&cube))?;
        o.json(
            &format!("seismic/case{case}.json"),
            &serde_json::json!({ "v_avg": model.v_avg() }),
        )?;
    }
    Ok(())
}

fn prior_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive(cfg.seed, "prior", 0)
}

fn prior_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = build_generator(cfg)?;
    let latents = sample_prior(cfg.n_samples, gen.latent_dim(), prior_seed(cfg))?;
    let raw: Vec<&Vec<f64>> = latents.iter().map(|z| &z.0).collect();
    o.json("prior/latents.json", &raw)?;
    if latents.len() >= 2 {
        let grids = generate_all(&gen, &latents)?;
        let st = ensemble_stats(&grids)?;
        let file = GridFile::new(
            cfg.geometry,
            vec![
                ("coarse_mean".into(), st.coarse_mean),
                ("coarse_std".into(), st.coarse_std),
                ("time_mean".into(), st.time_mean),
                ("time_std".into(), st.time_std),
            ],
        )?;
        o.grid("prior/ensemble.grid", &file)?;
    }
    Ok(())
}

fn generate_all<G: Generator>(gen: &G, latents: &[LatentVector]) -> Result<Vec<ModelGrid>> {
    use rayon::prelude::*;
    latents.par_iter().map(|z| gen.generate(z, None)).collect()
}

fn run_seed(cfg: &ExperimentConfig, tag: &str, run: &Run) -> u64 {
    rng::derive(cfg.seed, &format!("{tag}/{}", run.tag()), 0)
}

fn invert_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = build_generator(cfg)?;
    for run in runs(cfg) {
        let obs = load_observations(cfg, o.root, &run)?;
        let seed = run_seed(cfg, "invert", &run);
        log::info!("inverting {} with {}", run.tag(), cfg.inversion.method.name());
        let result = invert(cfg, &gen, &obs, &run, seed, o)?;
        o.json(&format!("invert/{}.json", run.tag()), &result)?;
    }
    Ok(())
}

/// Runs the configured inversion method for one run.
fn invert(
    cfg: &ExperimentConfig,
    gen: &AnyGenerator,
    obs: &Observations,
    run: &Run,
    seed: u64,
    o: &mut Outputs,
) -> Result<InversionResult> {
    let inv = &cfg.inversion;
    match inv.method {
        Method::LatentOpt => {
            let mut c = inv.latent_opt.clone();
            c.n_restarts = cfg.n_samples;
            c.loss.seismic = run.seismic;
            latent_optimize(gen, obs, &c, seed)
        }
        Method::InferenceNet => {
            let mut c = inv.inference_net.clone();
            c.n_samples = cfg.n_samples;
            c.loss.seismic = run.seismic;
            Ok(train_inference_network(gen, obs, &c, seed)?.result)
        }
        Method::Variational => {
            let mut c = inv.variational.clone();
            c.n_samples = cfg.n_samples;
            c.likelihood.seismic = run.seismic;
            let out = variational_infer(gen, obs, &c, seed)?;
            o.json(&format!("invert/{}_elbo.json", run.tag()), &out.elbo_history)?;
            Ok(out.result)
        }
        Method::DreamZs => {
            let (result, diag) = dream_inversion(cfg, gen, obs, run, seed)?;
            o.json(&format!("invert/{}_dream.json", run.tag()), &diag)?;
            Ok(result)
        }
    }
}

#[derive(Serialize)]
struct DreamDiagnostics {
    r_hat: Vec<f64>,
    acceptance_rate: f64,
    resets: usize,
}

/// DREAM_(ZS) on the Gaussian posterior of the variational likelihood; the
/// pooled post-burn-in states are thinned evenly to `n_samples`.
fn dream_inversion(
    cfg: &ExperimentConfig,
    gen: &AnyGenerator,
    obs: &Observations,
    run: &Run,
    seed: u64,
) -> Result<(InversionResult, DreamDiagnostics)> {
    let clock = Instant::now();
    let lik = &cfg.inversion.variational.likelihood;
    let loss = DataLoss::new(
        obs,
        &crate::inversion::DataLossConfig {
            wells: true,
            seismic: run.seismic,
            ..Default::default()
        },
    )?;
    let n_well = obs.wells.n_obs() as f64;
    let n_seis = obs.seismic.as_ref().map_or(0.0, |s| s.cube.amplitudes.numel() as f64);
    let (sw, ss) = (lik.well_sigma, lik.seismic_sigma);
    let log_post = |z: &[f64]| {
        let prior = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
        match loss.raw_terms(gen, &LatentVector(z.to_vec()), None) {
            Ok((w, s)) => prior - n_well * w / (2.0 * sw * sw) - n_seis * s / (2.0 * ss * ss),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let ens = dream_zs(log_post, gen.latent_dim(), &cfg.inversion.dream, seed)?;
    let pooled = ens.pooled();
    if pooled.is_empty() {
        return Err(Error::numerical("dream-zs", "no post-burn-in states recorded"));
    }
    let n = cfg.n_samples;
    let samples = (0..n)
        .map(|k| {
            let z = pooled[k * pooled.len() / n].clone();
            let err = well_mae(gen, &obs.wells, &LatentVector(z.clone()), None)?;
            Ok(SampleResult {
                latent: z,
                labels: None,
                history: Vec::new(),
                inversion_error: err,
                status: SampleStatus::Converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r_hat = gelman_rubin(&ens).unwrap_or_else(|e| {
        log::warn!("R-hat unavailable: {e}");
        Vec::new()
    });
    let diag = DreamDiagnostics {
        r_hat,
        acceptance_rate: ens.acceptance_rate,
        resets: ens.resets,
    };
    let result = InversionResult {
        method: "dream-zs".into(),
        seed,
        samples,
        weights_fingerprint: fingerprint_hex(gen.params().fingerprint()),
        wall_clock_s: clock.elapsed().as_secs_f64(),
    };
    Ok((result, diag))
}

fn load_inversion(out: &Path, run: &Run) -> Result<InversionResult> {
    let p = out.join(format!("invert/{}.json", run.tag()));
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    InversionResult::from_json(&text)
}

fn tune_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = build_generator(cfg)?;
    for run in runs(cfg) {
        let obs = load_observations(cfg, o.root, &run)?;
        let inv = load_inversion(o.root, &run)?;
        let pivots: Vec<_> = inv.latents().into_iter().zip(inv.labels()?).collect();
        let mut c = cfg.tune.clone();
        c.loss.seismic = run.seismic;
        log::info!("tuning {} around {} pivots", run.tag(), pivots.len());
        let out = pivotal_tune(&gen, &pivots, &obs, &c, run_seed(cfg, "tune", &run))?;
        o.json(&format!("tune/{}.json", run.tag()), &out.result)?;
        let spec = gen.to_weights().spec;
        for (k, params) in out.weights.into_iter().enumerate() {
            let w = GeneratorWeights {
                spec: spec.clone(),
                params,
            };
            o.weights(&format!("tune/{}_g{k}.fgw", run.tag()), &w)?;
        }
    }
    Ok(())
}

/// Grids of one result. Tuned results use their own weights: one shared
/// set, or one set per sample.
fn result_grids(cfg: &ExperimentConfig, gen: &AnyGenerator, out: &Path, run: &Run, tuned: bool) -> Result<Vec<ModelGrid>> {
    let dir = if tuned { "tune" } else { "invert" };
    let p = out.join(format!("{dir}/{}.json", run.tag()));
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let result = InversionResult::from_json(&text)?;
    let labels = result.labels()?;
    let latents = result.latents();
    if !tuned {
        return latents.iter().zip(&labels).map(|(z, l)| gen.generate(z, l.as_ref())).collect();
    }
    let shared = cfg.tune.mode == TuningMode::Shared;
    let load = |k: usize| -> Result<AnyGenerator> {
        AnyGenerator::from_weights(load_weights(out.join(format!("tune/{}_g{k}.fgw", run.tag())))?)
    };
    let shared_gen = if shared { Some(load(0)?) } else { None };
    latents
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(k, (z, l))| match &shared_gen {
            Some(g) => g.generate(z, l.as_ref()),
            None => load(k)?.generate(z, l.as_ref()),
        })
        .collect()
}

#[derive(Serialize)]
struct RunSummary {
    case: usize,
    wells: usize,
    seismic: bool,
    method: String,
    inversion: Summary,
    generalization_coarse: Summary,
    generalization_time: Summary,
    /// Fractions of samples with inversion error within 1% and 10%.
    inversion_pass_rates: (f64, f64),
    /// Multi-scale SWD to prior samples, when those exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    swd_to_prior: Option<f64>,
}

fn metrics_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = build_generator(cfg)?;
    let prior_path = o.root.join("prior/latents.json");
    let prior = if prior_path.exists() {
        let raw: Vec<Vec<f64>> = read_json(&prior_path)?;
        let latents: Vec<LatentVector> = raw.into_iter().map(LatentVector).collect();
        Some(generate_all(&gen, &latents)?)
    } else {
        log::info!("no prior samples found; skipping SWD");
        None
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for run in runs(cfg) {
        let wells = load_wells(cfg, o.root, &run)?;
        let truth = load_truth(o.root, run.case)?;
        let tuned_exists = o.root.join(format!("tune/{}.json", run.tag())).exists();
        for tuned in [false, true] {
            if tuned && !tuned_exists {
                continue;
            }
            let method = if tuned { "pivotal-tuning" } else { cfg.inversion.method.name() };
            let grids = result_grids(cfg, &gen, o.root, &run, tuned)?;
            let report = error_report(&grids, &wells, &truth)?;
            let swd_to_prior = match &prior {
                Some(p) => Some(swd_multiscale(&grids, p, &cfg.swd, rng::derive(cfg.seed, "metrics/swd", 0))?.distance),
                None => None,
            };
            let inv: Vec<f64> = report.samples.iter().map(|s| s.inversion).collect();
            let gc: Vec<f64> = report.samples.iter().map(|s| s.generalization_coarse).collect();
            let gt: Vec<f64> = report.samples.iter().map(|s| s.generalization_time).collect();
            summaries.push(RunSummary {
                case: run.case,
                wells: run.wells,
                seismic: run.seismic,
                method: method.into(),
                inversion: Summary::of(&inv),
                generalization_coarse: Summary::of(&gc),
                generalization_time: Summary::of(&gt),
                inversion_pass_rates: report.inversion_pass_rates(),
                swd_to_prior,
            });
            rows.extend(ErrorRow::from_report(run.case, run.wells, run.seismic, method, &report));
            if !tuned {
                let latents: Vec<Vec<f64>> = load_inversion(o.root, &run)?.latents().into_iter().map(|z| z.0).collect();
                if latents.len() >= 3 {
                    o.text(&format!("metrics/{}_mds.csv", run.tag()), &mds_csv(&latents)?)?;
                }
            }
        }
    }
    o.text("metrics/errors.csv", &error_csv(&rows))?;
    o.json("metrics/summary.json", &summaries)
}

/// Two-dimensional classical MDS of latent vectors as `sample,x,y`.
fn mds_csv(latents: &[Vec<f64>]) -> Result<String> {
    let d = DistanceMatrix::euclidean(latents)?;
    let coords = classical_mds(&d, 2)?;
    let mut s = String::from("sample,x,y\n");
    for (i, c) in coords.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", format_sig(c[0], 9), format_sig(c[1], 9)));
    }
    Ok(s)
}

fn landscape_stage(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let gen = build_generator(cfg)?;
    let d = gen.latent_dim();
    for run in runs(cfg) {
        let wells = load_wells(cfg, o.root, &run)?;
        let latents = load_inversion(o.root, &run)?.latents();
        let n = latents.len() as f64;
        let center = LatentVector((0..d).map(|j| latents.iter().map(|z| z.0[j]).sum::<f64>() / n).collect());
        let directions = pca_directions(&latents).unwrap_or_else(|e| {
            log::warn!("{}: {e}; using the first two latent axes", run.tag());
            let axis = |k: usize| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect();
            [axis(0), axis(1.min(d - 1))]
        });
        let grid = error_landscape(&gen, &wells, &center, None, directions, &cfg.landscape)?;
        o.text(&format!("landscape/{}.csv", run.tag()), &grid.to_csv())?;
    }
    Ok(())
}

fn vtk_stage(cfg: &ExperimentConfig, o: &mut Outputs, inputs: &[PathBuf]) -> Result<()> {
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        let mut found = Vec::new();
        for dir in ["truth", "seismic"] {
            let Ok(entries) = std::fs::read_dir(o.root.join(dir)) else {
                continue;
            };
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "grid"))
                .collect();
            files.sort();
            found.extend(files);
        }
        found
    } else {
        inputs.to_vec()
    };
    if inputs.is_empty() {
        return Err(Error::invalid("export-vtk found no grid files"));
    }
    let _ = cfg;
    for input in &inputs {
        let grid = GridFile::load(input)?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "grid".into());
        let parent = input
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rel = if parent.is_empty() {
            format!("vtk/{stem}.vtk")
        } else {
            format!("vtk/{parent}_{stem}.vtk")
        };
        export_vtk(&grid, o.path(&rel))?;
        o.files.push(PathBuf::from(rel));
    }
    Ok(())
}

/// Reads back the layout written by `place-wells`.
pub fn load_layout(out: &Path) -> Result<WellLayout> {
    read_json(&out.join("wells/layout.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GridGeometry;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.geometry = GridGeometry {
            nx: 16,
            ny: 16,
            nz: 4,
            dx: 400.0,
            dy: 400.0,
            dz: 2.0,
        };
        cfg.generator = GeneratorChoice::Procedural { latent_dim: 8 };
        cfg.truth.cases = 2;
        cfg.truth.latent_dim = 8;
        cfg.wells.counts = vec![2, 4];
        cfg.wells.policy.legacy_wells = 2;
        cfg.wells.policy.extra_wells = 2;
        cfg.n_samples = 3;
        cfg.inversion.latent_opt.iterations = 20;
        cfg.tune.steps = 5;
        cfg.swd.patches_per_sample = 8;
        cfg.swd.projections = 16;
        cfg.swd.repetitions = 1;
        cfg.swd.levels = 2;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn runs_cover_cases_counts_and_variants() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(runs(&cfg).len(), 9);
        cfg.seismic.enabled = true;
        let r = runs(&cfg);
        assert_eq!(r.len(), 18);
        assert_eq!(r[1].tag(), "case0_w4_seismic");
    }

    #[test]
    fn pipeline_writes_manifests_and_error_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let manifests = run_pipeline(&cfg).unwrap();
        assert_eq!(manifests.len(), 6);
        let csv = std::fs::read_to_string(dir.path().join("metrics/errors.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), crate::metrics::ERROR_CSV_HEADER);
        // 2 cases × 2 well counts × 2 methods × 3 samples
        assert_eq!(lines.count(), 24);
        for m in &manifests {
            for f in &m.files {
                let (bytes, sha) = sha256_file(&dir.path().join(&f.path)).unwrap();
                assert_eq!((bytes, sha.as_str()), (f.bytes, f.sha256.as_str()));
            }
        }
    }

    #[test]
    fn repeated_stages_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run_stage(&small(a.path()), Stage::GenTruth, &[]).unwrap();
        let mb = run_stage(&small(b.path()), Stage::GenTruth, &[]).unwrap();
        assert_eq!(ma, mb);
        let read = |d: &Path| std::fs::read(d.join("manifests/gen-truth.json")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn missing_prerequisites_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(&small(dir.path()), Stage::Invert, &[]).unwrap_err();
        assert_eq!(err.stage, Stage::Invert);
        assert!(err.to_string().starts_with("stage invert:"));
    }
}
