//! Toy-scale experiments on the 2D ring: the three-arm early-stop comparison
//! and the guidance-window ablation, with reproducible on-disk records.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::flow::{
    sample, train_velocity, GuidanceSpace, MixtureModel, Mlp, SamplerConfig, TrainConfig,
    TrainReport, VelocityModel,
};
use crate::guidance::{GuidanceSpec, MmdScale, Schedule, ScheduleMode};
use crate::kernel::KernelConfig;
use crate::metrics::{mmd_to_target, unsafe_rate, w2_squared, EvalReport};
use crate::points::PointSet;
use crate::rng::streams;

/// Ring of isotropic Gaussian clusters, one of which supplies the negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingConfig {
    pub num_clusters: usize,
    pub ring_radius: f64,
    pub cluster_std: f64,
    pub negative_cluster_index: usize,
    pub n_negatives: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            ring_radius: 4.0,
            cluster_std: 0.4,
            negative_cluster_index: 0,
            n_negatives: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Exact velocity of the ring mixture.
    #[default]
    Analytic,
    /// A network trained on the ring before sampling.
    Trained(TrainConfig),
    /// A saved network.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub target_excludes_negative: bool,
    /// Radius of the unsafe ball around the negative cluster center;
    /// `None` means three cluster standard deviations.
    pub unsafe_radius: Option<f64>,
    /// Kernel precision of the MMD-to-target metric.
    pub mmd_gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 2048,
            target_excludes_negative: true,
            unsafe_radius: None,
            mmd_gamma: 1.0,
        }
    }
}

fn default_guidance() -> GuidanceSpec {
    GuidanceSpec::mmd(
        KernelConfig::default(),
        Schedule::new(0.002, 1.0, 0.0, ScheduleMode::EqualStrength),
    )
    .with_scale(MmdScale::KernelSum)
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig {
        guidance_space: GuidanceSpace::X0,
        ..SamplerConfig::default()
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: RingConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Sampler settings; its `guidance` and `seed` are set per arm and seed.
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    /// Guidance used by guided arms; arms replace the window.
    #[serde(default = "default_guidance")]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: RingConfig::default(),
            model: ModelConfig::default(),
            sampler: default_sampler(),
            guidance: default_guidance(),
            eval: EvalConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_clusters == 0 || d.negative_cluster_index >= d.num_clusters {
            return Err(config(format!(
                "negative cluster index {} must be below the cluster count {}",
                d.negative_cluster_index, d.num_clusters
            )));
        }
        if !(d.ring_radius >= 0.0) || !(d.cluster_std > 0.0) {
            return Err(config("ring radius must be non-negative and cluster std positive"));
        }
        if d.n_negatives < 2 {
            return Err(config("at least 2 negatives are needed"));
        }
        if self.eval.n_eval < 2 {
            return Err(config("n_eval must be at least 2"));
        }
        if self.eval.target_excludes_negative && d.num_clusters < 2 {
            return Err(config("excluding the negative cluster leaves no target"));
        }
        if let Some(r) = self.eval.unsafe_radius {
            if !(r > 0.0) {
                return Err(config("unsafe radius must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(config("at least one seed is required"));
        }
        self.sampler.validate()?;
        self.guidance.validate()?;
        if let ModelConfig::Trained(t) = &self.model {
            t.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn ring(&self) -> Result<MixtureModel> {
        MixtureModel::ring(self.data.num_clusters, self.data.ring_radius, self.data.cluster_std)
    }

    pub fn unsafe_center(&self) -> Result<Vec<f64>> {
        Ok(self.ring()?.means.point(self.data.negative_cluster_index).to_vec())
    }

    pub fn unsafe_radius(&self) -> f64 {
        self.eval.unsafe_radius.unwrap_or(3.0 * self.data.cluster_std)
    }
}

/// `n_eval` points from the whole ring.
pub fn generate_ring(cfg: &ExperimentConfig, seed: u64) -> Result<PointSet> {
    Ok(cfg.ring()?.sample(cfg.eval.n_eval, seed, streams::TARGET))
}

/// `n_negatives` points from the negative cluster only.
pub fn generate_negatives(cfg: &ExperimentConfig, seed: u64) -> Result<PointSet> {
    cfg.ring()?.sample_component(
        cfg.data.negative_cluster_index,
        cfg.data.n_negatives,
        seed,
        streams::NEGATIVES,
    )
}

/// Evaluation target: the ring, optionally without the negative cluster.
pub fn generate_target(cfg: &ExperimentConfig, seed: u64) -> Result<PointSet> {
    if cfg.eval.target_excludes_negative {
        let m = cfg.ring()?.without_component(cfg.data.negative_cluster_index)?;
        Ok(m.sample(cfg.eval.n_eval, seed, streams::TARGET))
    } else {
        generate_ring(cfg, seed)
    }
}

/// Resolves the configured model, training it if needed.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(VelocityModel, Option<TrainReport>)> {
    match &cfg.model {
        ModelConfig::Analytic => Ok((VelocityModel::AnalyticMixture(cfg.ring()?), None)),
        ModelConfig::Trained(t) => {
            let (net, report) = train_velocity(&cfg.ring()?, t)?;
            Ok((VelocityModel::TrainedMlp(net), Some(report)))
        }
        ModelConfig::Checkpoint { path } => Ok((VelocityModel::TrainedMlp(Mlp::load(path)?), None)),
    }
}

pub fn evaluate(cfg: &ExperimentConfig, points: &PointSet, target: &PointSet, seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        w2_squared: w2_squared(points, target)?,
        unsafe_rate: unsafe_rate(points, &cfg.unsafe_center()?, cfg.unsafe_radius())?,
        mmd_to_target: mmd_to_target(points, target, &KernelConfig::with_gamma(cfg.eval.mmd_gamma))?,
        n_points: points.len(),
        seed,
    })
}

/// One arm: a name and an optional guidance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub schedule: Option<Schedule>,
}

impl Arm {
    pub fn unguided() -> Self {
        Self {
            name: "unguided".into(),
            schedule: None,
        }
    }

    pub fn window(name: &str, base: &Schedule, t_start: f64, t_end: f64) -> Self {
        let mut s = *base;
        s.window = [t_start, t_end];
        Self {
            name: name.into(),
            schedule: Some(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// Strength inside the window and its integral over time.
    pub lambda: f64,
    pub budget: f64,
    pub per_seed: Vec<EvalReport>,
    pub median_w2: f64,
    pub median_unsafe_rate: f64,
    pub median_mmd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub model_s: f64,
    pub sampling_s: f64,
    pub evaluation_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmResult>,
    pub checks: Vec<Check>,
    pub train: Option<TrainReport>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl RunRecord {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every arm on every seed with an already-built model.
pub fn run_arms(
    cfg: &ExperimentConfig,
    model: &VelocityModel,
    arms: &[Arm],
    timings: &mut Timings,
) -> Result<Vec<ArmResult>> {
    let mut results: Vec<ArmResult> = Vec::with_capacity(arms.len());
    for arm in arms {
        let (lambda, budget) = match &arm.schedule {
            Some(s) => {
                s.validate()?;
                let l = s.window_lambda()?;
                (l, l * s.window_length())
            }
            None => (0.0, 0.0),
        };
        results.push(ArmResult {
            arm: arm.clone(),
            lambda,
            budget,
            per_seed: Vec::with_capacity(cfg.seeds.len()),
            median_w2: f64::NAN,
            median_unsafe_rate: f64::NAN,
            median_mmd: f64::NAN,
        });
    }
    for &seed in &cfg.seeds {
        let negatives = generate_negatives(cfg, seed)?;
        let target = generate_target(cfg, seed)?;
        for (arm, res) in arms.iter().zip(results.iter_mut()) {
            let sampler = SamplerConfig {
                seed,
                guidance: arm.schedule.map(|s| GuidanceSpec {
                    schedule: s,
                    ..cfg.guidance.clone()
                }),
                ..cfg.sampler.clone()
            };
            let t0 = Instant::now();
            let out = sample(model, &sampler, &negatives, cfg.eval.n_eval)?;
            timings.sampling_s += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            res.per_seed.push(evaluate(cfg, &out.points, &target, seed)?);
            timings.evaluation_s += t1.elapsed().as_secs_f64();
        }
    }
    for r in &mut results {
        let col = |f: fn(&EvalReport) -> f64| median(&r.per_seed.iter().map(f).collect::<Vec<_>>());
        r.median_w2 = col(|e| e.w2_squared);
        r.median_unsafe_rate = col(|e| e.unsafe_rate);
        r.median_mmd = col(|e| e.mmd_to_target);
    }
    Ok(results)
}

/// Arm names of the early-stop comparison.
pub const UNGUIDED: &str = "unguided";
pub const FULL: &str = "full";
pub const EARLY: &str = "early";

pub fn fig2_arms(base: &Schedule) -> Vec<Arm> {
    vec![
        Arm::unguided(),
        Arm::window(FULL, base, 1.0, 0.0),
        Arm::window(EARLY, base, 1.0, 0.5),
    ]
}

/// Ordering checks of the early-stop comparison on medians.
pub fn fig2_checks(arms: &[ArmResult]) -> Vec<Check> {
    let get = |n: &str| arms.iter().find(|a| a.arm.name == n);
    let (Some(u), Some(f), Some(e)) = (get(UNGUIDED), get(FULL), get(EARLY)) else {
        return vec![Check {
            name: "arms present".into(),
            passed: false,
            detail: "missing unguided, full or early arm".into(),
        }];
    };
    vec![
        Check {
            name: "w2 early < full".into(),
            passed: e.median_w2 < f.median_w2,
            detail: format!("early {:.4} vs full {:.4}", e.median_w2, f.median_w2),
        },
        Check {
            name: "unsafe full < unguided".into(),
            passed: f.median_unsafe_rate < u.median_unsafe_rate,
            detail: format!("full {:.4} vs unguided {:.4}", f.median_unsafe_rate, u.median_unsafe_rate),
        },
        Check {
            name: "unsafe early < unguided".into(),
            passed: e.median_unsafe_rate < u.median_unsafe_rate,
            detail: format!("early {:.4} vs unguided {:.4}", e.median_unsafe_rate, u.median_unsafe_rate),
        },
    ]
}

/// Unguided, full-window and early-stop arms over all seeds.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let (model, train) = build_model(cfg)?;
    timings.model_s = t0.elapsed().as_secs_f64();
    run_fig2_with(cfg, &model, train, timings)
}

/// [`run_fig2`] with a model built by the caller.
pub fn run_fig2_with(
    cfg: &ExperimentConfig,
    model: &VelocityModel,
    train: Option<TrainReport>,
    mut timings: Timings,
) -> Result<RunRecord> {
    cfg.validate()?;
    let arms = run_arms(cfg, model, &fig2_arms(&cfg.guidance.schedule), &mut timings)?;
    Ok(RunRecord {
        kind: "fig2".into(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        checks: fig2_checks(&arms),
        arms,
        train,
        timings,
    })
}

/// Consecutive windows of length 0.2 from the start of sampling to the end.
pub fn shifted_windows() -> Vec<[f64; 2]> {
    vec![[1.0, 0.8], [0.8, 0.6], [0.6, 0.4], [0.4, 0.2], [0.2, 0.0]]
}

/// Windows that all open at `t = 1` and close progressively later.
pub fn extended_windows() -> Vec<[f64; 2]> {
    vec![[1.0, 0.8], [1.0, 0.6], [1.0, 0.4], [1.0, 0.2], [1.0, 0.0]]
}

/// Runs one arm per window under `mode`, plus an unguided reference arm.
///
/// The check compares the window that opens earliest against every later
/// one: its median unsafe rate must not exceed theirs.
pub fn run_window_ablation(
    cfg: &ExperimentConfig,
    windows: &[[f64; 2]],
    mode: ScheduleMode,
) -> Result<RunRecord> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(config("window ablation needs at least one window"));
    }
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let (model, train) = build_model(cfg)?;
    timings.model_s = t0.elapsed().as_secs_f64();
    let mut base = cfg.guidance.schedule;
    base.mode = mode;
    let mut arms = vec![Arm::unguided()];
    for w in windows {
        arms.push(Arm::window(&format!("[{:.2},{:.2}]", w[0], w[1]), &base, w[0], w[1]));
    }
    let results = run_arms(cfg, &model, &arms, &mut timings)?;
    let checks = ablation_checks(&results[1..]);
    Ok(RunRecord {
        kind: "ablate-windows".into(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        arms: results,
        checks,
        train,
        timings,
    })
}

/// Earliest-opening window versus every window that opens later.
pub fn ablation_checks(windows: &[ArmResult]) -> Vec<Check> {
    let start = |a: &ArmResult| a.arm.schedule.map_or(f64::NEG_INFINITY, |s| s.t_start());
    let Some(first) = windows.iter().max_by(|a, b| start(a).total_cmp(&start(b))) else {
        return Vec::new();
    };
    windows
        .iter()
        .filter(|w| start(w) < start(first))
        .map(|w| Check {
            name: format!("unsafe {} <= {}", first.arm.name, w.arm.name),
            passed: first.median_unsafe_rate <= w.median_unsafe_rate,
            detail: format!("{:.4} vs {:.4}", first.median_unsafe_rate, w.median_unsafe_rate),
        })
        .collect()
}

const CSV_HEADER: &str = "config_hash,kind,arm,seed,lambda,budget,w2_squared,unsafe_rate,mmd_to_target,n_points";

fn csv_rows(rec: &RunRecord) -> Vec<(String, String)> {
    let mut rows = Vec::new();
    for a in &rec.arms {
        for e in &a.per_seed {
            let key = format!("{},{},{},{}", rec.config_hash, rec.kind, a.arm.name, e.seed);
            let line = format!(
                "{key},{:e},{:e},{:e},{:e},{:e},{}",
                a.lambda, a.budget, e.w2_squared, e.unsafe_rate, e.mmd_to_target, e.n_points
            );
            rows.push((key, line));
        }
    }
    rows
}

/// Writes `<kind>-<hash>.json` and appends per-seed rows to `<kind>.csv`.
///
/// Rows already present for the same (hash, arm, seed) are left alone, so
/// a rerun does not change the file. A CSV holding rows of a different
/// configuration is refused.
pub fn write_record(rec: &RunRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{}-{}.json", rec.kind, rec.config_hash));
    let csv_path = dir.join(format!("{}.csv", rec.kind));
    let mut existing = BTreeSet::new();
    let fresh = !csv_path.exists();
    if !fresh {
        let text = fs::read_to_string(&csv_path)?;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let hash = line.split(',').next().unwrap_or_default();
            if hash != rec.config_hash {
                return Err(config(format!(
                    "{} holds results of configuration {hash}, refusing to append {}",
                    csv_path.display(),
                    rec.config_hash
                )));
            }
            existing.insert(line.splitn(5, ',').take(4).collect::<Vec<_>>().join(","));
        }
    }
    fs::write(&json_path, serde_json::to_string_pretty(rec)?)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    for (key, line) in csv_rows(rec) {
        if !existing.contains(&key) {
            writeln!(f, "{line}")?;
        }
    }
    Ok((json_path, csv_path))
}

/// Loads every run record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        match serde_json::from_str::<RunRecord>(&text) {
            Ok(r) => out.push(r),
            // Other JSON files (certificate reports, configs) may share the directory.
            Err(_) => continue,
        }
    }
    Ok(out)
}

/// Plain-text table of a record's medians and checks.
pub fn summarize(rec: &RunRecord) -> String {
    let mut s = format!("{} {}\n", rec.kind, rec.config_hash);
    s.push_str(&format!(
        "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "arm", "lambda", "budget", "W2", "unsafe", "MMD"
    ));
    for a in &rec.arms {
        s.push_str(&format!(
            "{:<14} {:>10.5} {:>10.6} {:>10.4} {:>10.4} {:>10.5}\n",
            a.arm.name, a.lambda, a.budget, a.median_w2, a.median_unsafe_rate, a.median_mmd
        ));
    }
    for c in &rec.checks {
        s.push_str(&format!(
            "{} {}: {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    s
}

/// Fails with the offending numbers when any check of the record failed.
pub fn ensure_passed(rec: &RunRecord) -> Result<()> {
    let failed: Vec<String> = rec
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            data: RingConfig {
                n_negatives: 64,
                ..RingConfig::default()
            },
            sampler: SamplerConfig {
                steps: 10,
                ..default_sampler()
            },
            eval: EvalConfig {
                n_eval: 48,
                ..EvalConfig::default()
            },
            seeds: vec![0, 1],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_jitter_ring_has_eight_support_points() {
        let mut cfg = tiny();
        cfg.data.cluster_std = 1e-300;
        let pts = generate_ring(&cfg, 3).unwrap();
        let distinct: BTreeSet<(i64, i64)> = pts
            .iter()
            .map(|p| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64))
            .collect();
        assert_eq!(distinct.len(), 8);
        for p in pts.iter() {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_sit_on_cluster_zero() {
        let cfg = tiny();
        let n = generate_negatives(&cfg, 0).unwrap();
        assert_eq!(n.len(), 64);
        for p in n.iter() {
            assert!(((p[0] - 4.0).powi(2) + p[1] * p[1]).sqrt() < 6.0 * 0.4);
        }
        assert_eq!(n, generate_negatives(&cfg, 0).unwrap());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = tiny();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seeds.push(9);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.data.negative_cluster_index = 8;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.eval.n_eval = 1;
        assert!(c.validate().is_err());
        let json = r#"{"seeds": [3]}"#;
        let c: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.data, RingConfig::default());
        assert_eq!(c.seeds, vec![3]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn records_are_rewritten_identically_and_guard_the_hash() {
        let cfg = tiny();
        let rec = run_fig2(&cfg).unwrap();
        assert_eq!(rec.arms.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let (_, csv) = write_record(&rec, dir.path()).unwrap();
        let first = fs::read(&csv).unwrap();
        let again = run_fig2(&cfg).unwrap();
        write_record(&again, dir.path()).unwrap();
        assert_eq!(first, fs::read(&csv).unwrap());
        let mut other = tiny();
        other.seeds = vec![5];
        let rec2 = run_fig2(&other).unwrap();
        assert!(write_record(&rec2, dir.path()).is_err());
        assert_eq!(load_records(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn ablation_budget_is_conserved() {
        let mut cfg = tiny();
        cfg.seeds = vec![0];
        let rec = run_window_ablation(&cfg, &[[1.0, 0.8], [1.0, 0.4]], ScheduleMode::EqualBudget).unwrap();
        let b: Vec<f64> = rec.arms[1..].iter().map(|a| a.budget).collect();
        assert!(((b[0] - b[1]) / b[0]).abs() < 1e-6);
        assert_eq!(rec.checks.len(), 0);
        let one = run_window_ablation(&cfg, &[[1.0, 0.8]], ScheduleMode::EqualBudget).unwrap();
        assert_eq!(one.arms.len(), 2);
    }
}
