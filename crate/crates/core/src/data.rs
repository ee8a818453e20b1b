//! Synthetic source data and parametric distribution shifts.
//!
//! Source data are Gaussian class clusters with unit covariance whose means
//! form a regular simplex with pairwise distance [`CLASS_SEPARATION`]. Shift
//! families are split into disjoint dev and test sets so hyperparameters are
//! never selected on the shifts they are evaluated on.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const CLASS_SEPARATION: f64 = 4.0;
pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];
pub const CLEAN: &str = "clean";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainTag {
    pub shift: String,
    pub severity: u8,
}

impl DomainTag {
    pub fn clean() -> Self {
        Self {
            shift: CLEAN.to_string(),
            severity: 0,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.shift, self.severity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub tag: DomainTag,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize, tag: DomainTag, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset rows",
                expected: labels.len(),
                got: features.nrows(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Malformed(format!("label {bad} out of range for {classes} classes")));
        }
        if (tag.severity == 0) != (tag.shift == CLEAN) || tag.severity > 5 {
            return Err(Error::Malformed(format!("inconsistent domain tag {tag}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            tag,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `range` as a new dataset with the same tag.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Dataset> {
        Dataset::new(
            self.features.slice(ndarray::s![range.clone(), ..]).to_owned(),
            self.labels[range].to_vec(),
            self.classes,
            self.tag.clone(),
            self.seed,
        )
    }

    /// Writes `label,f0,f1,...` rows and a JSON sidecar next to `path`.
    pub fn write_csv(&self, path: impl AsRef<Path>, schedule: Option<&ShiftParams>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for (row, &y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec = vec![y.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let sidecar = DatasetSidecar {
            shift: self.tag.shift.clone(),
            severity: self.tag.severity,
            seed: self.seed,
            classes: self.classes,
            schedule: schedule.copied(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let sidecar: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut r = csv::Reader::from_path(path)?;
        let dim = r.headers()?.len().saturating_sub(1);
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Malformed(format!("{s}: {e}")));
            labels.push(rec[0].parse::<usize>().map_err(|e| Error::Malformed(e.to_string()))?);
            for field in rec.iter().skip(1) {
                values.push(parse(field)?);
            }
        }
        let features = Array2::from_shape_vec((labels.len(), dim), values)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        Dataset::new(
            features,
            labels,
            sidecar.classes,
            DomainTag {
                shift: sidecar.shift,
                severity: sidecar.severity,
            },
            sidecar.seed,
        )
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetSidecar {
    shift: String,
    severity: u8,
    seed: u64,
    classes: usize,
    #[serde(default)]
    schedule: Option<ShiftParams>,
}

/// Class means: vertices of a regular simplex centred at the origin, written
/// in an orthonormal basis of the sum-zero hyperplane (Helmert basis) so only
/// `classes - 1` coordinates are needed.
pub fn class_means(classes: usize, dim: usize) -> Result<Array2<f64>> {
    if classes < 2 || dim < 2 || dim + 1 < classes {
        return Err(Error::config(format!(
            "need classes >= 2, dim >= 2 and dim >= classes - 1 (got {classes} classes, dim {dim})"
        )));
    }
    let scale = CLASS_SEPARATION / std::f64::consts::SQRT_2;
    let mut means = Array2::zeros((classes, dim));
    for c in 0..classes {
        for j in 1..classes {
            // h_j = (1, ..., 1, -j, 0, ...) / sqrt(j (j + 1)), j ones
            let norm = ((j * (j + 1)) as f64).sqrt();
            let hj = |i: usize| -> f64 {
                if i < j {
                    1.0 / norm
                } else if i == j {
                    -(j as f64) / norm
                } else {
                    0.0
                }
            };
            // h_j sums to zero, so projecting e_c or the centred e_c - 1/K agree
            means[(c, j - 1)] = scale * hj(c);
        }
    }
    Ok(means)
}

/// Clean source data, samples interleaved by class (`label = i mod K`).
pub fn generate_source(classes: usize, dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    let means = class_means(classes, dim)?;
    let mut rng = seed::rng(seed, "source");
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Array2::zeros((n, dim));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[(i, j)] = means[(y, j)] + z;
        }
    }
    Dataset::new(features, labels, classes, DomainTag::clean(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    GaussianNoise,
    FeatureScale,
    Rotation,
    FeatureDropout,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::GaussianNoise,
        ShiftKind::FeatureScale,
        ShiftKind::Rotation,
        ShiftKind::FeatureDropout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::FeatureScale => "feature_scale",
            ShiftKind::Rotation => "rotation",
            ShiftKind::FeatureDropout => "feature_dropout",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Test,
}

/// Concrete parameters of one shift at one severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftParams {
    /// `x + sigma * N(0, I)`.
    GaussianNoise { sigma: f64 },
    /// `x_j * exp(+-log_scale) + offset`, sign alternating with `j`.
    FeatureScale { log_scale: f64, offset: f64 },
    /// Rotation by `angle_deg` in the plane of features 0 and 1.
    Rotation { angle_deg: f64 },
    /// Each feature of each sample zeroed with probability `rate`.
    FeatureDropout { rate: f64 },
}

impl ShiftParams {
    pub fn kind(&self) -> ShiftKind {
        match self {
            ShiftParams::GaussianNoise { .. } => ShiftKind::GaussianNoise,
            ShiftParams::FeatureScale { .. } => ShiftKind::FeatureScale,
            ShiftParams::Rotation { .. } => ShiftKind::Rotation,
            ShiftParams::FeatureDropout { .. } => ShiftKind::FeatureDropout,
        }
    }

    /// Scalar magnitude used for monotonicity checks.
    pub fn magnitude(&self) -> f64 {
        match *self {
            ShiftParams::GaussianNoise { sigma } => sigma,
            ShiftParams::FeatureScale { log_scale, offset } => log_scale.abs() + offset.abs(),
            ShiftParams::Rotation { angle_deg } => angle_deg.abs(),
            ShiftParams::FeatureDropout { rate } => rate,
        }
    }

    fn apply<R: Rng + ?Sized>(&self, features: &mut Array2<f64>, rng: &mut R) -> Result<()> {
        match *self {
            ShiftParams::GaussianNoise { sigma } => {
                if !(sigma >= 0.0) {
                    return Err(Error::config("noise sigma must be non-negative"));
                }
                features.mapv_inplace(|x| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + sigma * z
                });
            }
            ShiftParams::FeatureScale { log_scale, offset } => {
                for mut row in features.rows_mut() {
                    for (j, x) in row.iter_mut().enumerate() {
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        *x = *x * (sign * log_scale).exp() + offset;
                    }
                }
            }
            ShiftParams::Rotation { angle_deg } => {
                if features.ncols() < 2 {
                    return Err(Error::config("rotation needs at least two features"));
                }
                let (s, c) = angle_deg.to_radians().sin_cos();
                for mut row in features.rows_mut() {
                    let (a, b) = (row[0], row[1]);
                    row[0] = c * a - s * b;
                    row[1] = s * a + c * b;
                }
            }
            ShiftParams::FeatureDropout { rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::config("dropout rate must lie in [0, 1]"));
                }
                features.mapv_inplace(|x| if rng.random::<f64>() < rate { 0.0 } else { x });
            }
        }
        Ok(())
    }
}

/// One shift family: its split and five severity levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub split: Split,
    pub levels: [ShiftParams; 5],
}

impl ShiftSpec {
    pub fn params(&self, severity: u8) -> Result<ShiftParams> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("severity must lie in 1..=5, got {severity}")));
        }
        Ok(self.levels[severity as usize - 1])
    }

    /// The pinned schedule for `kind`.
    pub fn canonical(kind: ShiftKind) -> ShiftSpec {
        schedules().iter().find(|s| s.kind == kind).expect("every kind has a schedule").clone()
    }
}

#[derive(Debug, Deserialize)]
struct ScheduleFile {
    version: u32,
    gaussian_noise: NoiseSchedule,
    feature_scale: ScaleSchedule,
    rotation: RotationSchedule,
    feature_dropout: DropoutSchedule,
}

#[derive(Debug, Deserialize)]
struct NoiseSchedule {
    split: Split,
    sigma: [f64; 5],
}

#[derive(Debug, Deserialize)]
struct ScaleSchedule {
    split: Split,
    log_scale: [f64; 5],
    offset: [f64; 5],
}

#[derive(Debug, Deserialize)]
struct RotationSchedule {
    split: Split,
    angle_deg: [f64; 5],
}

#[derive(Debug, Deserialize)]
struct DropoutSchedule {
    split: Split,
    rate: [f64; 5],
}

pub const SCHEDULE_JSON: &str = include_str!("../data/shift_schedules.json");

pub fn schedules() -> &'static [ShiftSpec] {
    static SPECS: OnceLock<Vec<ShiftSpec>> = OnceLock::new();
    SPECS.get_or_init(|| {
        let file: ScheduleFile = serde_json::from_str(SCHEDULE_JSON).expect("shipped schedule file parses");
        assert_eq!(file.version, 1, "unknown schedule file version");
        vec![
            ShiftSpec {
                kind: ShiftKind::GaussianNoise,
                split: file.gaussian_noise.split,
                levels: file.gaussian_noise.sigma.map(|sigma| ShiftParams::GaussianNoise { sigma }),
            },
            ShiftSpec {
                kind: ShiftKind::FeatureScale,
                split: file.feature_scale.split,
                levels: std::array::from_fn(|i| ShiftParams::FeatureScale {
                    log_scale: file.feature_scale.log_scale[i],
                    offset: file.feature_scale.offset[i],
                }),
            },
            ShiftSpec {
                kind: ShiftKind::Rotation,
                split: file.rotation.split,
                levels: file.rotation.angle_deg.map(|angle_deg| ShiftParams::Rotation { angle_deg }),
            },
            ShiftSpec {
                kind: ShiftKind::FeatureDropout,
                split: file.feature_dropout.split,
                levels: file.feature_dropout.rate.map(|rate| ShiftParams::FeatureDropout { rate }),
            },
        ]
    })
}

/// Applies explicit shift parameters to clean data.
pub fn apply_shift_params(ds: &Dataset, params: &ShiftParams, severity: u8, seed: u64) -> Result<Dataset> {
    if ds.tag.severity != 0 {
        return Err(Error::AlreadyShifted {
            shift: ds.tag.shift.clone(),
            severity: ds.tag.severity,
        });
    }
    if !(1..=5).contains(&severity) {
        return Err(Error::config(format!("severity must lie in 1..=5, got {severity}")));
    }
    let mut features = ds.features.clone();
    let mut rng = seed::rng(seed, "shift");
    params.apply(&mut features, &mut rng)?;
    Dataset::new(
        features,
        ds.labels.clone(),
        ds.classes,
        DomainTag {
            shift: params.kind().name().to_string(),
            severity,
        },
        seed,
    )
}

pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec, severity: u8, seed: u64) -> Result<Dataset> {
    apply_shift_params(ds, &spec.params(severity)?, severity, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub target_per_class: usize,
    pub seed: u64,
}

impl SuiteConfig {
    pub fn canonical(seed: u64) -> Self {
        Self {
            classes: 4,
            dim: 8,
            train_per_class: 500,
            val_per_class: 250,
            target_per_class: 500,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub dev: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

impl BenchmarkSuite {
    pub fn split(&self, split: Split) -> &[Dataset] {
        match split {
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn shift_kinds(split: Split) -> Vec<ShiftKind> {
    schedules().iter().filter(|s| s.split == split).map(|s| s.kind).collect()
}

/// Clean source train/val plus every shift family of each split at all five
/// severities. Within a family all severities shift the same clean sample
/// with the same noise stream, so severities differ only in magnitude.
pub fn benchmark_suite(cfg: &SuiteConfig) -> Result<BenchmarkSuite> {
    let source_train = generate_source(cfg.classes, cfg.dim, cfg.train_per_class, seed::derive(cfg.seed, "source/train"))?;
    let source_val = generate_source(cfg.classes, cfg.dim, cfg.val_per_class, seed::derive(cfg.seed, "source/val"))?;
    let build = |split: Split| -> Result<Vec<Dataset>> {
        let mut out = Vec::new();
        for spec in schedules().iter().filter(|s| s.split == split) {
            let clean = generate_source(
                cfg.classes,
                cfg.dim,
                cfg.target_per_class,
                seed::derive(cfg.seed, &format!("target/{}", spec.kind)),
            )?;
            let shift_seed = seed::derive(cfg.seed, &format!("shift/{}", spec.kind));
            for sev in SEVERITIES {
                out.push(apply_shift(&clean, spec, sev, shift_seed)?);
            }
        }
        Ok(out)
    };
    Ok(BenchmarkSuite {
        source_train,
        source_val,
        dev: build(Split::Dev)?,
        test: build(Split::Test)?,
    })
}

/// A random permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn simplex_means_are_equidistant() {
        for (k, d) in [(2, 2), (3, 2), (4, 8), (10, 9)] {
            let m = class_means(k, d).unwrap();
            for a in 0..k {
                for b in (a + 1)..k {
                    let dist = (&m.row(a) - &m.row(b)).mapv(|v| v * v).sum().sqrt();
                    assert_abs_diff_eq!(dist, CLASS_SEPARATION, epsilon = 1e-12);
                }
            }
        }
        assert!(class_means(5, 3).is_err());
        assert!(class_means(1, 3).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_source(3, 4, 10, 42).unwrap();
        let b = generate_source(3, 4, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_source(3, 4, 10, 43).unwrap());
    }

    #[test]
    fn one_shot_per_class() {
        let ds = generate_source(5, 6, 1, 0).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_magnitude_shifts_are_identity() {
        let ds = generate_source(3, 4, 20, 1).unwrap();
        for params in [
            ShiftParams::GaussianNoise { sigma: 0.0 },
            ShiftParams::FeatureScale { log_scale: 0.0, offset: 0.0 },
            ShiftParams::Rotation { angle_deg: 0.0 },
            ShiftParams::FeatureDropout { rate: 0.0 },
        ] {
            let shifted = apply_shift_params(&ds, &params, 1, 9).unwrap();
            let same = shifted.features.iter().zip(ds.features.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{params:?} altered features");
        }
    }

    #[test]
    fn noise_variance_matches_schedule() {
        // statistical oracle: unit-variance input plus independent N(0, sigma^2)
        let n = 10_000;
        let mut rng = seed::rng(3, "oracle");
        let features = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng));
        let ds = Dataset::new(features, vec![0; n], 1, DomainTag::clean(), 0).unwrap();
        let spec = ShiftSpec::canonical(ShiftKind::GaussianNoise);
        let ShiftParams::GaussianNoise { sigma } = spec.params(5).unwrap() else { unreachable!() };
        let shifted = apply_shift(&ds, &spec, 5, 17).unwrap();
        for col in shifted.features.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            let expected = 1.0 + sigma * sigma;
            assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
        }
    }

    #[test]
    fn shifts_keep_labels_and_refuse_stacking() {
        let ds = generate_source(4, 8, 25, 5).unwrap();
        for spec in schedules() {
            let shifted = apply_shift(&ds, spec, 3, 11).unwrap();
            assert_eq!(shifted.labels, ds.labels);
            assert_eq!(shifted.len(), ds.len());
            assert_eq!(shifted.tag.severity, 3);
            assert!(matches!(apply_shift(&shifted, spec, 1, 11), Err(Error::AlreadyShifted { .. })));
        }
        assert!(apply_shift(&ds, &schedules()[0], 0, 1).is_err());
        assert!(apply_shift(&ds, &schedules()[0], 6, 1).is_err());
    }

    #[test]
    fn schedules_are_monotone_and_splits_disjoint() {
        for spec in schedules() {
            let mags: Vec<f64> = spec.levels.iter().map(ShiftParams::magnitude).collect();
            assert!(mags.windows(2).all(|w| w[0] < w[1]), "{:?} not monotone", spec.kind);
        }
        let dev = shift_kinds(Split::Dev);
        let test = shift_kinds(Split::Test);
        assert!(dev.iter().all(|k| !test.contains(k)));
        assert_eq!(dev, vec![ShiftKind::Rotation, ShiftKind::FeatureDropout]);
        assert_eq!(test, vec![ShiftKind::GaussianNoise, ShiftKind::FeatureScale]);
    }

    #[test]
    fn suite_is_reproducible_and_valid() {
        let cfg = SuiteConfig {
            train_per_class: 10,
            val_per_class: 5,
            target_per_class: 5,
            ..SuiteConfig::canonical(77)
        };
        let a = benchmark_suite(&cfg).unwrap();
        let b = benchmark_suite(&cfg).unwrap();
        assert_eq!(a.source_train, b.source_train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        assert_eq!(a.dev.len(), 10);
        assert_eq!(a.test.len(), 10);
        for ds in a.dev.iter().chain(&a.test) {
            assert!(ds.labels.iter().all(|&y| y < cfg.classes));
            assert!((1..=5).contains(&ds.tag.severity));
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("selflearn-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ds = apply_shift(&generate_source(3, 4, 6, 2).unwrap(), &ShiftSpec::canonical(ShiftKind::Rotation), 2, 4).unwrap();
        let path = dir.join("rot.csv");
        ds.write_csv(&path, Some(&ShiftSpec::canonical(ShiftKind::Rotation).params(2).unwrap())).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back, ds);
        std::fs::remove_dir_all(dir).ok();
    }
}
