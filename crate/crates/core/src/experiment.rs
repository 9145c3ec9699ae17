//! Experiment configuration and the staged pipeline
//! `sample-data → train → posterior → generate → calibrate → amplify → closure`.
//!
//! Every stage reads its inputs from the output directory and writes its
//! results there, so a failed pipeline resumes at the first incomplete stage.
//!
//! ```text
//! <out>/config.json, manifest.json, summary.json
//! <out>/reference/grid_<n>.json
//! <out>/runs/run_<r>/train.csv, cfm.{bin,json}, cfm_loss.csv
//! <out>/runs/run_<r>/<setting>/ensemble.{bin,json}, history.csv,
//!                              generated_preview.csv, freq_<n>.csv
//! <out>/calibration/<setting>/coverage_<n>.csv, deviation.csv
//! <out>/amplification/<setting>/run_<r>.csv
//! <out>/closure/<setting>.csv
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::amplification::{self, AmplificationReport, ClosureRow, PowerLawFit};
use crate::binning::{self, BinEnsembleStats, Deviation, LatentMode, QuantileGrid};
use crate::cfm::{self, CfmConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::flow::SolverConfig;
use crate::mcmc::{self, FlowNll, McmcConfig, Reduction};
use crate::net::{Mlp, NetConfig, ParamVector};
use crate::posterior::{PosteriorEnsemble, Provenance};
use crate::ring::{polar_unchecked, sample_ring, RingSpec, SampleSet};
use crate::rng::derive_seed;
use crate::vib::{self, VarPosterior, VibConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub ring: RingSpec,
    pub n_train: usize,
    pub runs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ring: RingSpec::default(),
            n_train: 10_000,
            runs: 5,
        }
    }
}

/// NLL used by the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodConfig {
    pub solver: SolverConfig,
    pub reduction: Reduction,
    /// `None` evaluates the full training set every step.
    pub batch_size: Option<usize>,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::rk4(10),
            reduction: Reduction::Sum,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSetting {
    pub chain: McmcConfig,
    pub likelihood: LikelihoodConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VibSetting {
    pub train: VibConfig,
    pub members: usize,
}

impl Default for VibSetting {
    fn default() -> Self {
        Self {
            train: VibConfig {
                epochs: 20_000,
                ..VibConfig::default()
            },
            members: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodConfig {
    Vib(VibSetting),
    Adammcmc(McmcSetting),
}

impl MethodConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodConfig::Vib(_) => "vib",
            MethodConfig::Adammcmc(_) => "adammcmc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub name: String,
    pub method: MethodConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSizePolicy {
    /// `points_per_bin · n_Q` points per member for each grid.
    PerBin { points_per_bin: usize },
    /// The same number of points per member for every grid.
    Fixed { set_size: usize },
}

impl SetSizePolicy {
    pub fn set_size(&self, n_per_dim: usize) -> usize {
        match *self {
            SetSizePolicy::PerBin { points_per_bin } => points_per_bin * n_per_dim * n_per_dim,
            SetSizePolicy::Fixed { set_size } => set_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub set_size: SetSizePolicy,
    pub latents: LatentMode,
    pub solver: SolverConfig,
    /// Points of the first member written to `generated_preview.csv`.
    pub preview_points: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            set_size: SetSizePolicy::Fixed { set_size: 100_000 },
            latents: LatentMode::Shared,
            solver: SolverConfig::rk4(20),
            preview_points: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub cfm: CfmConfig,
    pub settings: Vec<Setting>,
    /// Quantiles per dimension; each grid has `n²` bins.
    pub grids: Vec<usize>,
    pub generation: GenerationConfig,
    pub reference_size: usize,
    pub nominal_points: usize,
    pub fit_window: usize,
    pub closure_repeats: usize,
    pub root_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            net: NetConfig::default(),
            cfm: CfmConfig::default(),
            settings: vec![
                Setting {
                    name: "adammcmc".into(),
                    method: MethodConfig::Adammcmc(McmcSetting::default()),
                },
                Setting {
                    name: "vib".into(),
                    method: MethodConfig::Vib(VibSetting::default()),
                },
            ],
            grids: vec![2, 5, 10, 32, 100],
            generation: GenerationConfig::default(),
            reference_size: 10_000_000,
            nominal_points: 50,
            fit_window: 8,
            closure_repeats: 5,
            root_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.ring.validate()?;
        self.net.validate()?;
        if self.net.input_dim != 2 {
            return Err(Error::config("the ring experiment needs input_dim = 2"));
        }
        self.cfm.validate()?;
        if self.data.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.data.n_train < self.cfm.batch_size {
            return Err(Error::config("n_train must be at least the CFM batch size"));
        }
        if !self.grids.is_empty() && self.data.runs < 2 {
            return Err(Error::config("coverage needs at least two runs"));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.settings {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::config(format!(
                    "setting name `{}` must be nonempty and use only [A-Za-z0-9_.-]",
                    s.name
                )));
            }
            if !names.insert(&s.name) {
                return Err(Error::config(format!("duplicate setting name `{}`", s.name)));
            }
            match &s.method {
                MethodConfig::Vib(v) => {
                    v.train.validate()?;
                    if v.members < 2 {
                        return Err(Error::config("vib settings need at least two members"));
                    }
                    if self.data.n_train < v.train.batch_size {
                        return Err(Error::config("n_train must be at least the VIB batch size"));
                    }
                }
                MethodConfig::Adammcmc(m) => {
                    m.chain.validate()?;
                    m.likelihood.solver.validate()?;
                    if m.chain.n_samples < 2 {
                        return Err(Error::config("adammcmc settings need n_samples ≥ 2"));
                    }
                    if let Some(b) = m.likelihood.batch_size {
                        if b == 0 || b > self.data.n_train {
                            return Err(Error::config("likelihood batch_size must lie in 1..=n_train"));
                        }
                    }
                }
            }
        }
        if let Some(&n) = self.grids.iter().find(|&&n| n == 0) {
            return Err(Error::config(format!("invalid grid size {n}")));
        }
        let mut sorted = self.grids.clone();
        sorted.dedup();
        if sorted.len() != self.grids.len() {
            return Err(Error::config("grid sizes must be distinct"));
        }
        if let Some(&n) = self.grids.iter().max() {
            if self.reference_size < binning::MIN_REFERENCE_PER_EDGE * n {
                return Err(Error::config("reference_size too small for the finest grid"));
            }
            if self.generation.set_size.set_size(n) == 0 || self.generation.set_size.set_size(1) == 0 {
                return Err(Error::config("generated set size must be positive"));
            }
        }
        self.generation.solver.validate()?;
        if self.nominal_points < 2 {
            return Err(Error::config("nominal_points must be at least 2"));
        }
        if self.fit_window < 2 {
            return Err(Error::config("fit_window must be at least 2"));
        }
        if self.closure_repeats == 0 {
            return Err(Error::config("closure_repeats must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        checkpoint::hex_digest(text.as_bytes())
    }

    fn needs_pretraining(&self) -> bool {
        self.settings
            .iter()
            .any(|s| matches!(s.method, MethodConfig::Adammcmc(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SampleData,
    Train,
    Posterior,
    Generate,
    Calibrate,
    Amplify,
    Closure,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::SampleData,
        Stage::Train,
        Stage::Posterior,
        Stage::Generate,
        Stage::Calibrate,
        Stage::Amplify,
        Stage::Closure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SampleData => "sample-data",
            Stage::Train => "train",
            Stage::Posterior => "posterior",
            Stage::Generate => "generate",
            Stage::Calibrate => "calibrate",
            Stage::Amplify => "amplify",
            Stage::Closure => "closure",
        }
    }

    fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::SampleData => &[],
            Stage::Train => &[Stage::SampleData],
            Stage::Posterior => &[Stage::Train],
            Stage::Generate => &[Stage::Posterior],
            Stage::Calibrate => &[Stage::Generate],
            Stage::Amplify => &[Stage::Generate],
            Stage::Closure => &[Stage::Amplify],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub completed: Vec<Stage>,
    /// Settings whose posterior ensembles are on disk.
    #[serde(default)]
    pub posteriors_done: Vec<String>,
    pub config: ExperimentConfig,
}

/// Paths of the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn grid(&self, n: usize) -> PathBuf {
        self.root.join("reference").join(format!("grid_{n}.json"))
    }

    pub fn run(&self, r: usize) -> PathBuf {
        self.root.join("runs").join(format!("run_{r}"))
    }

    pub fn train_data(&self, r: usize) -> PathBuf {
        self.run(r).join("train.csv")
    }

    pub fn cfm(&self, r: usize) -> PathBuf {
        self.run(r).join("cfm")
    }

    pub fn cfm_loss(&self, r: usize) -> PathBuf {
        self.run(r).join("cfm_loss.csv")
    }

    pub fn setting(&self, r: usize, name: &str) -> PathBuf {
        self.run(r).join(name)
    }

    pub fn ensemble(&self, r: usize, name: &str) -> PathBuf {
        self.setting(r, name).join("ensemble")
    }

    pub fn posterior_history(&self, r: usize, name: &str) -> PathBuf {
        self.setting(r, name).join("history.csv")
    }

    pub fn variational(&self, r: usize, name: &str) -> PathBuf {
        self.setting(r, name).join("variational")
    }

    pub fn preview(&self, r: usize, name: &str) -> PathBuf {
        self.setting(r, name).join("generated_preview.csv")
    }

    pub fn frequencies(&self, r: usize, name: &str, n: usize) -> PathBuf {
        self.setting(r, name).join(format!("freq_{n}.csv"))
    }

    pub fn coverage(&self, name: &str, n: usize) -> PathBuf {
        self.root
            .join("calibration")
            .join(name)
            .join(format!("coverage_{n}.csv"))
    }

    pub fn deviation(&self, name: &str) -> PathBuf {
        self.root.join("calibration").join(name).join("deviation.csv")
    }

    pub fn amplification(&self, name: &str, r: usize) -> PathBuf {
        self.root.join("amplification").join(name).join(format!("run_{r}.csv"))
    }

    pub fn closure(&self, name: &str) -> PathBuf {
        self.root.join("closure").join(format!("{name}.csv"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Child seeds of the experiment.
struct Seeds(u64);

impl Seeds {
    fn data(&self, r: usize) -> u64 {
        derive_seed(self.0, "data", r as u64)
    }
    fn init(&self, r: usize) -> u64 {
        derive_seed(self.0, "init", r as u64)
    }
    fn cfm(&self, r: usize) -> u64 {
        derive_seed(self.0, "cfm", r as u64)
    }
    fn reference(&self) -> u64 {
        derive_seed(self.0, "reference", 0)
    }
    fn posterior(&self, setting: &str, r: usize) -> u64 {
        derive_seed(self.0, &format!("posterior/{setting}"), r as u64)
    }
    fn draw(&self, setting: &str, r: usize) -> u64 {
        derive_seed(self.0, &format!("draw/{setting}"), r as u64)
    }
    fn generation(&self, setting: &str, r: usize) -> u64 {
        derive_seed(self.0, &format!("generate/{setting}"), r as u64)
    }
    fn closure(&self, setting: &str, n: usize, r: usize) -> u64 {
        derive_seed(self.0, &format!("closure/{setting}/{n}"), r as u64)
    }
}

/// An experiment bound to its output directory.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    manifest: Manifest,
    mlp: Mlp,
    seeds: Seeds,
}

impl Experiment {
    /// Opens `out_dir` for `cfg`. An existing manifest must carry the same
    /// configuration hash unless `force` is set, which discards its progress.
    pub fn open(cfg: ExperimentConfig, out_dir: &Path, force: bool) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(out_dir);
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let hash = cfg.hash();
        let fresh = Manifest {
            config_hash: hash.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            completed: Vec::new(),
            posteriors_done: Vec::new(),
            config: cfg.clone(),
        };
        let manifest = match fs::read_to_string(layout.manifest()) {
            Ok(text) if !force => {
                let old: Manifest =
                    serde_json::from_str(&text).map_err(|e| Error::format(layout.manifest(), e.to_string()))?;
                if old.config_hash != hash {
                    return Err(Error::config(format!(
                        "{} holds a run with a different configuration (use --force to replace it)",
                        out_dir.display()
                    )));
                }
                old
            }
            Ok(_) => fresh,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => fresh,
            Err(e) => return Err(Error::io(layout.manifest(), e)),
        };
        let mlp = Mlp::new(&cfg.net)?;
        let seeds = Seeds(cfg.root_seed);
        let exp = Self {
            cfg,
            layout,
            manifest,
            mlp,
            seeds,
        };
        write_json(&exp.layout.config(), &exp.cfg)?;
        exp.save_manifest()?;
        Ok(exp)
    }

    /// Configuration hash recorded in `out_dir`, if any.
    pub fn peek_hash(out_dir: &Path) -> Option<String> {
        let text = fs::read_to_string(Layout::new(out_dir).manifest()).ok()?;
        serde_json::from_str::<Manifest>(&text).ok().map(|m| m.config_hash)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.manifest.completed.contains(&stage)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.layout.manifest(), &self.manifest)
    }

    /// Runs one stage. A completed stage is refused unless `force` is set.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<()> {
        if self.is_complete(stage) && !force {
            return Err(Error::AlreadyComplete(self.layout.root.clone()));
        }
        for pre in stage.prerequisites() {
            if !self.is_complete(*pre) {
                return Err(Error::config(format!(
                    "stage `{stage}` needs `{pre}` to be complete first"
                )));
            }
        }
        log::info!("stage {stage}");
        match stage {
            Stage::SampleData => self.sample_data()?,
            Stage::Train => self.train()?,
            Stage::Posterior => {
                if force {
                    self.manifest.posteriors_done.clear();
                }
                self.posterior(None)?
            }
            Stage::Generate => self.generate()?,
            Stage::Calibrate => self.calibrate()?,
            Stage::Amplify => self.amplify()?,
            Stage::Closure => self.closure()?,
        }
        self.manifest.completed.retain(|s| *s != stage);
        self.manifest.completed.push(stage);
        self.manifest.completed.sort();
        self.save_manifest()?;
        if matches!(stage, Stage::Calibrate | Stage::Amplify | Stage::Closure) {
            self.write_summary()?;
        }
        Ok(())
    }

    /// Runs every incomplete stage in order. Refuses a directory whose run is
    /// already complete unless `force` is set, in which case every stage is
    /// rerun.
    pub fn run_pipeline(&mut self, force: bool) -> Result<RunArtifacts> {
        let all_done = Stage::ALL.iter().all(|s| self.is_complete(*s));
        if all_done && !force {
            return Err(Error::AlreadyComplete(self.layout.root.clone()));
        }
        if force {
            self.manifest.completed.clear();
            self.manifest.posteriors_done.clear();
            self.save_manifest()?;
        }
        for stage in Stage::ALL {
            if !self.is_complete(stage) {
                self.run_stage(stage, false)?;
            }
        }
        self.write_summary()?;
        RunArtifacts::collect(&self.layout.root)
    }

    fn sample_data(&mut self) -> Result<()> {
        let ring = &self.cfg.data.ring;
        for r in 0..self.cfg.data.runs {
            let path = self.layout.train_data(r);
            ensure_parent(&path)?;
            sample_ring(ring, self.cfg.data.n_train, self.seeds.data(r)).write_csv(&path)?;
        }
        if !self.cfg.grids.is_empty() {
            let reference = sample_ring(ring, self.cfg.reference_size, self.seeds.reference());
            let mut radii: Vec<f64> = reference.points.iter().map(|&p| polar_unchecked(p).0).collect();
            drop(reference);
            for &n in &self.cfg.grids {
                let grid = QuantileGrid::from_radii(&mut radii, n)?;
                write_json(&self.layout.grid(n), &grid)?;
            }
        }
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        if !self.cfg.needs_pretraining() {
            return Ok(());
        }
        for r in 0..self.cfg.data.runs {
            let data = SampleSet::read_csv(&self.layout.train_data(r))?;
            let cfg = CfmConfig {
                seed: self.seeds.cfm(r),
                ..self.cfg.cfm.clone()
            };
            let init = self.mlp.init_params(self.seeds.init(r));
            let run = cfm::train_cfm(&self.mlp, &data, &cfg, init)?;
            run.history.write_csv(&self.layout.cfm_loss(r))?;
            let meta = serde_json::json!({
                "architecture": self.cfg.net,
                "architecture_hash": checkpoint::architecture_hash(&self.cfg.net),
                "cfm": cfg,
            });
            checkpoint::save(&self.layout.cfm(r), &Checkpoint::new(meta).with("theta", &run.theta))?;
            log::info!(
                "run {r}: CFM trained, last-epoch loss {:.4}",
                run.history
                    .epoch_means(cfg.batches_per_epoch)
                    .last()
                    .copied()
                    .unwrap_or(f64::NAN)
            );
        }
        Ok(())
    }

    fn load_cfm(&self, r: usize) -> Result<ParamVector> {
        let stem = self.layout.cfm(r);
        let ckpt = checkpoint::load(&stem)?;
        let theta = ckpt.require("theta", &stem.with_extension("bin"))?;
        if theta.len() != self.mlp.n_params() {
            return Err(Error::Shape {
                expected: self.mlp.n_params(),
                got: theta.len(),
            });
        }
        Ok(theta.to_vec().into())
    }

    /// Samples the posterior for the settings whose method tag matches
    /// `method` (all settings for `None`). The stage is marked complete once
    /// every setting is done.
    pub fn run_posterior(&mut self, method: Option<&str>, force: bool) -> Result<()> {
        if !self.is_complete(Stage::Train) {
            return Err(Error::config("stage `posterior` needs `train` to be complete first"));
        }
        if let Some(m) = method {
            if !self.cfg.settings.iter().any(|s| s.method.tag() == m) {
                return Err(Error::config(format!("no setting uses method `{m}`")));
            }
        }
        let selected = |s: &Setting| method.is_none_or(|m| s.method.tag() == m);
        let pending = self
            .cfg
            .settings
            .iter()
            .filter(|s| selected(s))
            .any(|s| !self.manifest.posteriors_done.contains(&s.name));
        if !pending && !force {
            return Err(Error::AlreadyComplete(self.layout.root.clone()));
        }
        if force {
            let names: Vec<String> = self
                .cfg
                .settings
                .iter()
                .filter(|s| selected(s))
                .map(|s| s.name.clone())
                .collect();
            self.manifest.posteriors_done.retain(|n| !names.contains(n));
            // Downstream results are stale once an ensemble is replaced.
            self.manifest.completed.retain(|s| *s <= Stage::Train);
        }
        self.posterior(method)?;
        let all = self
            .cfg
            .settings
            .iter()
            .all(|s| self.manifest.posteriors_done.contains(&s.name));
        if all && !self.is_complete(Stage::Posterior) {
            self.manifest.completed.push(Stage::Posterior);
            self.manifest.completed.sort();
        }
        self.save_manifest()
    }

    fn posterior(&mut self, method: Option<&str>) -> Result<()> {
        for setting in self.cfg.settings.clone() {
            if method.is_some_and(|m| setting.method.tag() != m)
                || self.manifest.posteriors_done.contains(&setting.name)
            {
                continue;
            }
            for r in 0..self.cfg.data.runs {
                let data = SampleSet::read_csv(&self.layout.train_data(r))?;
                let seed = self.seeds.posterior(&setting.name, r);
                let dir = self.layout.setting(r, &setting.name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let ensemble = match &setting.method {
                    MethodConfig::Adammcmc(m) => {
                        let chain = McmcConfig {
                            seed,
                            ..m.chain.clone()
                        };
                        let mut target = FlowNll::new(
                            &self.mlp,
                            &data.points,
                            m.likelihood.solver.clone(),
                            m.likelihood.reduction,
                            m.likelihood.batch_size,
                        )?;
                        let run = mcmc::run_chain(&mut target, self.load_cfm(r)?, &chain)?;
                        run.history
                            .write_csv(&self.layout.posterior_history(r, &setting.name))?;
                        log::info!("run {r} {}: acceptance {:.3}", setting.name, run.history.rate());
                        run.ensemble
                    }
                    MethodConfig::Vib(v) => {
                        let cfg = VibConfig {
                            seed,
                            ..v.train.clone()
                        };
                        let init = VarPosterior::new(self.mlp.init_params(self.seeds.init(r)), cfg.init_std)?;
                        let run = vib::train_vib(&self.mlp, &data, &cfg, init)?;
                        run.history
                            .write_csv(&self.layout.posterior_history(r, &setting.name))?;
                        let meta = serde_json::json!({
                            "architecture": self.cfg.net,
                            "architecture_hash": checkpoint::architecture_hash(&self.cfg.net),
                            "vib": cfg,
                            "stopped_at": run.history.stopped_at,
                        });
                        checkpoint::save(
                            &self.layout.variational(r, &setting.name),
                            &Checkpoint::new(meta)
                                .with("mean", &run.posterior.mean)
                                .with("rho", &run.posterior.rho),
                        )?;
                        vib::draw_ensemble(&run.posterior, v.members, cfg.k, self.seeds.draw(&setting.name, r))?
                    }
                };
                self.save_ensemble(r, &setting.name, &ensemble)?;
            }
            self.manifest.posteriors_done.push(setting.name.clone());
            self.save_manifest()?;
        }
        Ok(())
    }

    fn save_ensemble(&self, r: usize, name: &str, ensemble: &PosteriorEnsemble) -> Result<()> {
        let meta = serde_json::json!({
            "architecture": self.cfg.net,
            "architecture_hash": checkpoint::architecture_hash(&self.cfg.net),
            "provenance": ensemble.provenance,
            "members": ensemble.len(),
        });
        let ckpt = ensemble
            .members
            .iter()
            .enumerate()
            .fold(Checkpoint::new(meta), |c, (i, m)| c.with(format!("member_{i}"), m));
        checkpoint::save(&self.layout.ensemble(r, name), &ckpt)
    }

    pub fn load_ensemble(&self, r: usize, name: &str) -> Result<PosteriorEnsemble> {
        let stem = self.layout.ensemble(r, name);
        let ckpt = checkpoint::load(&stem)?;
        let provenance: Provenance = serde_json::from_value(ckpt.meta["provenance"].clone())
            .map_err(|e| Error::format(stem.with_extension("json"), e.to_string()))?;
        let members = ckpt.arrays.into_iter().map(|(_, v)| ParamVector::from(v)).collect();
        PosteriorEnsemble::new(members, provenance)
    }

    pub fn load_grid(&self, n: usize) -> Result<QuantileGrid> {
        QuantileGrid::read_json(&self.layout.grid(n))
    }

    fn generate(&mut self) -> Result<()> {
        let grids: Vec<QuantileGrid> = self
            .cfg
            .grids
            .iter()
            .map(|&n| self.load_grid(n))
            .collect::<Result<_>>()?;
        let policy = self.cfg.generation.set_size;
        let max_size = self
            .cfg
            .grids
            .iter()
            .map(|&n| policy.set_size(n))
            .max()
            .unwrap_or(0)
            .max(self.cfg.generation.preview_points.min(policy.set_size(1)));
        if max_size == 0 {
            return Ok(());
        }
        for setting in &self.cfg.settings {
            for r in 0..self.cfg.data.runs {
                let ensemble = self.load_ensemble(r, &setting.name)?;
                let sets = binning::generate_member_sets(
                    &self.mlp,
                    &ensemble,
                    max_size,
                    self.seeds.generation(&setting.name, r),
                    &self.cfg.generation.solver,
                    self.cfg.generation.latents,
                )?;
                let preview = self.cfg.generation.preview_points.min(max_size);
                if preview > 0 {
                    SampleSet::new(sets[0][..preview].to_vec(), 0).write_csv(&self.layout.preview(r, &setting.name))?;
                }
                for (grid, &n) in grids.iter().zip(&self.cfg.grids) {
                    let size = policy.set_size(n);
                    let views: Vec<&[[f64; 2]]> = sets.iter().map(|s| &s[..size]).collect();
                    let stats = BinEnsembleStats::from_sets(grid, &views)?;
                    stats.write_member_csv(&self.layout.frequencies(r, &setting.name, n))?;
                }
                log::info!("run {r} {}: generated {} × {max_size} points", setting.name, sets.len());
            }
        }
        Ok(())
    }

    pub fn load_stats(&self, r: usize, name: &str, n: usize) -> Result<BinEnsembleStats> {
        let size = self.cfg.generation.set_size.set_size(n);
        BinEnsembleStats::read_member_csv(&self.layout.frequencies(r, name, n), size)
    }

    fn calibrate(&mut self) -> Result<()> {
        let nominal = binning::nominal_grid(self.cfg.nominal_points);
        for setting in &self.cfg.settings {
            let mut rows = Vec::new();
            for &n in &self.cfg.grids {
                let grid = self.load_grid(n)?;
                let runs: Vec<BinEnsembleStats> = (0..self.cfg.data.runs)
                    .map(|r| self.load_stats(r, &setting.name, n))
                    .collect::<Result<_>>()?;
                let curve = binning::coverage(&runs, &grid, &nominal)?;
                let path = self.layout.coverage(&setting.name, n);
                ensure_parent(&path)?;
                curve.write_csv(&path)?;
                rows.push((n * n, binning::deviation(&curve)));
            }
            if !rows.is_empty() {
                write_deviation_csv(&self.layout.deviation(&setting.name), &rows)?;
            }
        }
        Ok(())
    }

    fn amplify(&mut self) -> Result<()> {
        for setting in &self.cfg.settings {
            for r in 0..self.cfg.data.runs {
                let stats: Vec<BinEnsembleStats> = self
                    .cfg
                    .grids
                    .iter()
                    .map(|&n| self.load_stats(r, &setting.name, n))
                    .collect::<Result<_>>()?;
                let refs: Vec<&BinEnsembleStats> = stats.iter().collect();
                let reports = amplification::amplification_curve(&refs, self.cfg.data.n_train)?;
                let path = self.layout.amplification(&setting.name, r);
                ensure_parent(&path)?;
                amplification::write_amplification_csv(&reports, &path)?;
            }
        }
        Ok(())
    }

    fn closure(&mut self) -> Result<()> {
        for setting in &self.cfg.settings {
            let reports: Vec<Vec<AmplificationRow>> = (0..self.cfg.data.runs)
                .map(|r| read_amplification_csv(&self.layout.amplification(&setting.name, r)))
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for (g, &n) in self.cfg.grids.iter().enumerate() {
                let grid = self.load_grid(n)?;
                let mut results = Vec::new();
                for (r, report) in reports.iter().enumerate() {
                    let stats = self.load_stats(r, &setting.name, n)?;
                    match amplification::closure_check(
                        &stats,
                        report[g].n_hat,
                        &grid,
                        &self.cfg.data.ring,
                        self.seeds.closure(&setting.name, n, r),
                        self.cfg.closure_repeats,
                    ) {
                        Ok(res) => results.push(res),
                        Err(Error::Degenerate(why)) => {
                            log::warn!("run {r} {} n_Q={}: skipped in closure: {why}", setting.name, n * n);
                        }
                        Err(e) => return Err(e),
                    }
                }
                if !results.is_empty() {
                    rows.push(amplification::closure_row(&results)?);
                }
            }
            let path = self.layout.closure(&setting.name);
            ensure_parent(&path)?;
            amplification::write_closure_csv(&rows, &path)?;
        }
        Ok(())
    }

    /// Rebuilds `summary.json` from the CSV files present on disk.
    pub fn write_summary(&self) -> Result<Summary> {
        let summary = Summary::from_csv(&self.cfg, &self.layout)?;
        write_json(&self.layout.summary(), &summary)?;
        Ok(summary)
    }
}

fn write_deviation_csv(path: &Path, rows: &[(usize, Deviation)]) -> Result<()> {
    use std::io::Write;
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "n_q,md,mad,mad_r,mad_phi").map_err(io)?;
    for (n_q, d) in rows {
        writeln!(
            w,
            "{n_q},{:.16e},{:.16e},{:.16e},{:.16e}",
            d.md, d.mad, d.mad_r, d.mad_phi
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a CSV with a fixed header into rows of numbers.
fn read_table(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        Some(h) => return Err(Error::format(path, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(Error::format(path, "empty file")),
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: Option<Vec<f64>> = l.split(',').map(|f| f.trim().parse().ok()).collect();
            row.filter(|r| r.len() == width)
                .ok_or_else(|| Error::format(path, format!("bad row {}", i + 2)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationRow {
    pub n_q: usize,
    pub n_hat: f64,
    pub amplification: f64,
    pub mean_per_bin: f64,
}

impl From<&AmplificationReport> for AmplificationRow {
    fn from(r: &AmplificationReport) -> Self {
        Self {
            n_q: r.n_q,
            n_hat: r.n_hat,
            amplification: r.amplification,
            mean_per_bin: r.mean_per_bin,
        }
    }
}

pub fn read_amplification_csv(path: &Path) -> Result<Vec<AmplificationRow>> {
    Ok(read_table(path, "n_q,n_hat,amplification,mean_per_bin")?
        .into_iter()
        .map(|r| AmplificationRow {
            n_q: r[0] as usize,
            n_hat: r[1],
            amplification: r[2],
            mean_per_bin: r[3],
        })
        .collect())
}

pub fn read_deviation_csv(path: &Path) -> Result<Vec<(usize, Deviation)>> {
    Ok(read_table(path, "n_q,md,mad,mad_r,mad_phi")?
        .into_iter()
        .map(|r| {
            (
                r[0] as usize,
                Deviation {
                    md: r[1],
                    mad: r[2],
                    mad_r: r[3],
                    mad_phi: r[4],
                },
            )
        })
        .collect())
}

pub fn read_closure_csv(path: &Path) -> Result<Vec<ClosureRow>> {
    Ok(read_table(path, "n_q,js_mean_pred,js_equivalent,js_equivalent_std")?
        .into_iter()
        .map(|r| ClosureRow {
            n_q: r[0] as usize,
            js_mean_pred: r[1],
            js_equivalent: r[2],
            js_equivalent_std: r[3],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub n_q: usize,
    #[serde(flatten)]
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub window: usize,
    /// Fit to the run-averaged amplification.
    pub mean_curve: PowerLawFit,
    pub a_prime_mean: f64,
    pub a_prime_std: f64,
    pub b_mean: f64,
    pub b_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationSummary {
    pub n_q: Vec<usize>,
    pub amplification_mean: Vec<f64>,
    pub amplification_std: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub name: String,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Vec<CalibrationEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplification: Option<AmplificationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closure: Option<Vec<ClosureRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub settings: Vec<SettingSummary>,
    /// Artifacts that were expected but not found.
    pub gaps: Vec<String>,
}

fn fit_window(rows: &[AmplificationRow], window: usize) -> Option<PowerLawFit> {
    let start = rows.len().saturating_sub(window);
    let pts: Vec<(f64, f64)> = rows[start..].iter().map(|r| (r.n_q as f64, r.amplification)).collect();
    amplification::fit_powerlaw(&pts).ok()
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

impl Summary {
    /// Everything in the summary is derived from the emitted CSV tables.
    pub fn from_csv(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let mut gaps = Vec::new();
        let mut settings = Vec::new();
        for setting in &cfg.settings {
            let calibration = if cfg.grids.is_empty() {
                None
            } else {
                let path = layout.deviation(&setting.name);
                match read_deviation_csv(&path) {
                    Ok(rows) => Some(
                        rows.into_iter()
                            .map(|(n_q, deviation)| CalibrationEntry { n_q, deviation })
                            .collect(),
                    ),
                    Err(_) => {
                        gaps.push(relative(&layout.root, &path));
                        None
                    }
                }
            };

            let mut per_run = Vec::new();
            for r in 0..cfg.data.runs {
                let path = layout.amplification(&setting.name, r);
                match read_amplification_csv(&path) {
                    Ok(rows) => per_run.push(rows),
                    Err(_) => gaps.push(relative(&layout.root, &path)),
                }
            }
            let amplification = if per_run.is_empty() || cfg.grids.is_empty() {
                None
            } else {
                let n_q: Vec<usize> = per_run[0].iter().map(|r| r.n_q).collect();
                let (mut mean, mut std) = (Vec::new(), Vec::new());
                for i in 0..n_q.len() {
                    let vals: Vec<f64> = per_run.iter().map(|rows| rows[i].amplification).collect();
                    let (m, s) = amplification::mean_and_std(&vals);
                    mean.push(m);
                    std.push(s);
                }
                let window = cfg.fit_window.min(n_q.len());
                let mean_rows: Vec<AmplificationRow> = n_q
                    .iter()
                    .zip(&mean)
                    .map(|(&n_q, &a)| AmplificationRow {
                        n_q,
                        n_hat: a * cfg.data.n_train as f64,
                        amplification: a,
                        mean_per_bin: a * cfg.data.n_train as f64 / n_q as f64,
                    })
                    .collect();
                let fit = fit_window(&mean_rows, window).map(|mean_curve| {
                    let fits: Vec<PowerLawFit> = per_run.iter().filter_map(|rows| fit_window(rows, window)).collect();
                    let a: Vec<f64> = fits.iter().map(|f| f.a_prime).collect();
                    let b: Vec<f64> = fits.iter().map(|f| f.b).collect();
                    let (a_prime_mean, a_prime_std) = amplification::mean_and_std(&a);
                    let (b_mean, b_std) = amplification::mean_and_std(&b);
                    FitSummary {
                        window,
                        mean_curve,
                        a_prime_mean,
                        a_prime_std,
                        b_mean,
                        b_std,
                    }
                });
                Some(AmplificationSummary {
                    n_q,
                    amplification_mean: mean,
                    amplification_std: std,
                    fit,
                })
            };

            let closure = if cfg.grids.is_empty() {
                None
            } else {
                let path = layout.closure(&setting.name);
                match read_closure_csv(&path) {
                    Ok(rows) => Some(rows),
                    Err(_) => {
                        gaps.push(relative(&layout.root, &path));
                        None
                    }
                }
            };
            settings.push(SettingSummary {
                name: setting.name.clone(),
                method: setting.method.tag().into(),
                calibration,
                amplification,
                closure,
            });
        }
        Ok(Self {
            config_hash: cfg.hash(),
            settings,
            gaps,
        })
    }
}

/// Files present in an output directory after a run, relative and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
}

impl RunArtifacts {
    pub fn collect(root: &Path) -> Result<Self> {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
            for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.is_dir() {
                    walk(&path, root, out)?;
                } else {
                    out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
                }
            }
            Ok(())
        }
        let mut files = Vec::new();
        walk(root, root, &mut files)?;
        files.sort();
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }
}

/// Convenience wrapper: open `out_dir` and run every stage.
pub fn run_pipeline(cfg: ExperimentConfig, out_dir: &Path, force: bool) -> Result<RunArtifacts> {
    Experiment::open(cfg, out_dir, force)?.run_pipeline(force)
}

/// Per-stage file listing keyed by stage, for reporting.
pub fn stage_names() -> BTreeMap<&'static str, Stage> {
    Stage::ALL.into_iter().map(|s| (s.name(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_settings() {
        let cfg = ExperimentConfig::default();
        let MethodConfig::Adammcmc(m) = &cfg.settings[0].method else {
            panic!("first default setting is the chain");
        };
        assert_eq!(m.chain.sigma, 0.1);
        assert_eq!(m.chain.sigma_delta, 50.0);
        assert_eq!(m.chain.lambda, 1.0);
        assert_eq!(m.chain.thin_gap, 100);
        assert_eq!(m.chain.n_samples, 10);
        assert_eq!(cfg.data.n_train, 10_000);
        assert_eq!(cfg.data.runs, 5);
        assert_eq!(cfg.cfm.epochs, 2500);
        cfg.validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.root_seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"grids": [2], "gridz": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"runs": 1}}"#).is_err());
        let dup = r#"{"settings": [
            {"name": "a", "method": {"vib": {}}},
            {"name": "a", "method": {"adammcmc": {}}}
        ]}"#;
        assert!(ExperimentConfig::from_json(dup).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"grids": [3, 4], "root_seed": 9}"#).unwrap();
        assert_eq!(cfg.grids, vec![3, 4]);
        assert_eq!(cfg.root_seed, 9);
        assert_eq!(cfg.reference_size, ExperimentConfig::default().reference_size);
    }

    #[test]
    fn set_size_policies() {
        assert_eq!(SetSizePolicy::PerBin { points_per_bin: 10 }.set_size(5), 250);
        assert_eq!(SetSizePolicy::Fixed { set_size: 7 }.set_size(100), 7);
    }

    #[test]
    fn stage_names_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!("fit".parse::<Stage>().is_err());
        assert!(Stage::SampleData.prerequisites().is_empty());
        assert_eq!(Stage::Train.prerequisites(), &[Stage::SampleData]);
    }
}
