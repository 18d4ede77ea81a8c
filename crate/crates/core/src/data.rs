//! Volume datasets: synthetic phantom generation, intensity normalization,
//! treatment-stratified fold assignment and the on-disk format.
//!
//! A dataset directory holds `manifest.json` (one record per subject) and
//! one `VOL1` file per subject: the magic bytes, four little-endian `u32`
//! extents `(C, D, H, W)`, then `C*D*H*W` little-endian `f64` values in
//! channel-major row-major order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{TreatmentCode, TREATMENT_COUNT};
use crate::error::{Error, Result};
use crate::model::SURVIVAL_RANGE;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Channel index of the tumor mask in five-channel volumes.
pub const MASK_CHANNEL: usize = 4;
/// Peak intensity of each pseudo-modality blob.
pub const MODALITY_AMPLITUDES: [f64; 4] = [0.6, 1.0, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub subject_id: String,
    /// `[C, D, H, W]`.
    pub volume: Tensor,
    pub treatment: TreatmentCode,
    pub survival_days: f64,
}

impl VolumeSample {
    pub fn channels(&self) -> usize {
        self.volume.shape()[0]
    }

    pub fn has_mask(&self) -> bool {
        self.channels() > MASK_CHANNEL
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.volume.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "subject {}: volume must be [C, D, H, W], got {shape:?}",
                self.subject_id
            )));
        }
        let (lo, hi) = SURVIVAL_RANGE;
        if !(lo..=hi).contains(&self.survival_days) {
            return Err(Error::Validation(format!(
                "subject {}: survival {} outside [{lo}, {hi}]",
                self.subject_id, self.survival_days
            )));
        }
        if self.has_mask() {
            let vol: usize = shape[1..].iter().product();
            let mask = &self.volume.data()[MASK_CHANNEL * vol..(MASK_CHANNEL + 1) * vol];
            if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!(
                    "subject {}: mask channel is not binary",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub extent: usize,
    /// Probabilities of GTR, STR, NA.
    pub treatment_probs: [f64; TREATMENT_COUNT],
    /// Std of the additive outcome noise, in days.
    pub noise_std: f64,
    pub seed: u64,
    /// Append the binary tumor mask as a fifth channel.
    pub with_mask: bool,
    /// Std of the voxel noise added to every modality.
    pub background_noise: f64,
    pub base_days: f64,
    /// Days lost per 0.001 of tumor volume fraction.
    pub slope: f64,
    pub gtr_effect: f64,
    pub str_effect: f64,
    /// Volume fraction over which the resection benefit decays by `1/e`.
    pub effect_decay: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 236,
            extent: 16,
            treatment_probs: [0.504, 0.042, 0.454],
            noise_std: 30.0,
            seed: 0,
            with_mask: true,
            background_noise: 0.05,
            base_days: 450.0,
            slope: 0.9,
            gtr_effect: 300.0,
            str_effect: 150.0,
            effect_decay: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 3 {
            return Err(Error::Config(format!(
                "n_subjects must be at least 3, got {}",
                self.n_subjects
            )));
        }
        if self.extent < 8 {
            return Err(Error::Config(format!(
                "extent must be at least 8, got {}",
                self.extent
            )));
        }
        let sum: f64 = self.treatment_probs.iter().sum();
        if self.treatment_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "treatment_probs {:?} must be probabilities summing to 1",
                self.treatment_probs
            )));
        }
        if !(self.noise_std >= 0.0 && self.background_noise >= 0.0 && self.effect_decay > 0.0) {
            return Err(Error::Config(
                "noise_std and background_noise must be >= 0, effect_decay > 0".into(),
            ));
        }
        Ok(())
    }

    /// Resection benefit in days for a tumor of volume fraction `nu`.
    pub fn effect(&self, t: TreatmentCode, nu: f64) -> f64 {
        let decay = (-nu / self.effect_decay).exp();
        match t {
            TreatmentCode::GTR => self.gtr_effect * decay,
            TreatmentCode::STR => self.str_effect * decay,
            TreatmentCode::NA => 0.0,
        }
    }

    /// Noise-free, unclamped survival under treatment `t`.
    pub fn expected_days(&self, t: TreatmentCode, nu: f64) -> f64 {
        self.base_days - self.slope * nu * 1000.0 + self.effect(t, nu)
    }

    /// Subjects per treatment by largest-remainder rounding of
    /// `n_subjects * treatment_probs`; ties go to the lower label index.
    pub fn treatment_counts(&self) -> [usize; TREATMENT_COUNT] {
        let n = self.n_subjects as f64;
        let mut counts = [0usize; TREATMENT_COUNT];
        let mut rema = [(0.0, 0usize); TREATMENT_COUNT];
        for i in 0..TREATMENT_COUNT {
            let exact = n * self.treatment_probs[i];
            counts[i] = exact.floor() as usize;
            rema[i] = (exact - exact.floor(), i);
        }
        let mut left = self.n_subjects - counts.iter().sum::<usize>();
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in rema.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// What the generator knows about a subject that the model must infer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Mask voxels over total voxels.
    pub volume_fraction: f64,
    /// Noise-free survival under GTR, STR, NA.
    pub expected_days: [f64; TREATMENT_COUNT],
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders one phantom: Gaussian tumor blob per modality plus voxel noise,
/// and the mask where the blob exceeds half its peak.
fn render_phantom(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Tensor, f64) {
    let e = cfg.extent;
    let e_f = e as f64;
    let radius = rng.random_range(2.0..=e_f / 3.0);
    let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(radius..=e_f - 1.0 - radius));
    let vol = e * e * e;
    let blob: Vec<f64> = (0..vol)
        .map(|i| {
            let p = [(i / (e * e)) as f64, ((i / e) % e) as f64, (i % e) as f64];
            let d2: f64 = p.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / (2.0 * radius * radius)).exp()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.background_noise).expect("finite noise std");
    let channels = if cfg.with_mask { 5 } else { 4 };
    let mut data = Vec::with_capacity(channels * vol);
    for amp in MODALITY_AMPLITUDES {
        data.extend(blob.iter().map(|b| amp * b + noise.sample(rng)));
    }
    let mask: Vec<f64> = blob.iter().map(|&b| if b > 0.5 { 1.0 } else { 0.0 }).collect();
    let nu = mask.iter().sum::<f64>() / vol as f64;
    if cfg.with_mask {
        data.extend(mask);
    }
    let t = Tensor::new(vec![channels, e, e, e], data).expect("consistent phantom shape");
    (t, nu)
}

/// Generates phantoms with their ground truth. Subject `i` draws from its
/// own RNG stream, so the result does not depend on generation order.
pub fn generate_with_truth(cfg: &SyntheticConfig) -> Result<Vec<(VolumeSample, GroundTruth)>> {
    cfg.validate()?;
    let counts = cfg.treatment_counts();
    let mut treatments: Vec<TreatmentCode> = TreatmentCode::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&t, c)| std::iter::repeat_n(t, c))
        .collect();
    treatments.shuffle(&mut subject_rng(cfg.seed, u64::MAX));

    let width = cfg.n_subjects.to_string().len().max(3);
    let outcome_noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
    let (lo, hi) = SURVIVAL_RANGE;
    treatments
        .into_iter()
        .enumerate()
        .map(|(i, treatment)| {
            let mut rng = subject_rng(cfg.seed, i as u64);
            let (volume, nu) = render_phantom(cfg, &mut rng);
            let expected_days = TreatmentCode::ALL.map(|t| cfg.expected_days(t, nu));
            let eta = outcome_noise.sample(&mut rng);
            let survival_days = (expected_days[treatment.index()] + eta).clamp(lo, hi);
            Ok((
                VolumeSample {
                    subject_id: format!("sub-{i:0width$}"),
                    volume,
                    treatment,
                    survival_days,
                },
                GroundTruth {
                    volume_fraction: nu,
                    expected_days,
                },
            ))
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<VolumeSample>> {
    Ok(generate_with_truth(cfg)?.into_iter().map(|(s, _)| s).collect())
}

/// Z-scores every non-mask channel over the volume (population std).
pub fn normalize(sample: &VolumeSample) -> Result<VolumeSample> {
    let shape = sample.volume.shape().to_vec();
    let vol: usize = shape[1..].iter().product();
    let mut out = sample.clone();
    for (c, plane) in out.volume.data_mut().chunks_exact_mut(vol).enumerate() {
        if c == MASK_CHANNEL {
            continue;
        }
        let mean = plane.iter().sum::<f64>() / vol as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(Error::Validation(format!(
                "subject {}: channel {c} has zero variance",
                sample.subject_id
            )));
        }
        for v in plane.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}

/// Subject-level fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// `(subject_id, fold)` in the order the samples were given.
    pub assignments: Vec<(String, usize)>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments
            .iter()
            .find(|(s, _)| s == subject_id)
            .map(|&(_, f)| f)
    }

    /// Sample indices held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i].1 == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i].1 != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles each treatment group with `seed`, then deals subjects to folds
/// round-robin, group after group with one shared cursor. Per label, fold
/// counts differ by at most one.
pub fn stratified_kfold(samples: &[VolumeSample], k: usize, seed: u64) -> Result<FoldSplit> {
    let n = samples.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "k = {k} folds is invalid for {n} subjects"
        )));
    }
    let mut seen = HashSet::with_capacity(n);
    for s in samples {
        if !seen.insert(s.subject_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate subject_id {}",
                s.subject_id
            )));
        }
    }
    let mut folds = vec![0usize; n];
    let mut cursor = 0;
    for t in TreatmentCode::ALL {
        let mut group: Vec<usize> = (0..n).filter(|&i| samples[i].treatment == t).collect();
        group.shuffle(&mut subject_rng(seed, t.index() as u64));
        for i in group {
            folds[i] = cursor;
            cursor = (cursor + 1) % k;
        }
    }
    Ok(FoldSplit {
        k,
        assignments: samples
            .iter()
            .zip(folds)
            .map(|(s, f)| (s.subject_id.clone(), f))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub treatment: TreatmentCode,
    pub survival_days: f64,
    pub file: String,
    pub channels: usize,
    pub extent: usize,
}

pub fn write_volume(path: &Path, volume: &Tensor) -> Result<()> {
    let shape = volume.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "volume files hold [C, D, H, W], got {shape:?}"
        )));
    }
    let mut bytes = Vec::with_capacity(4 + 16 + 8 * volume.len());
    bytes.extend_from_slice(VOLUME_MAGIC);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(path, 0, "missing VOL1 magic"));
    }
    if bytes.len() < 20 {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::format(path, 4, format!("zero extent in header {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, 4, "header extents overflow"))?;
    let body = &bytes[20..];
    if body.len() != count * 8 {
        return Err(Error::format(
            path,
            (20 + body.len().min(count * 8)) as u64,
            format!(
                "header {dims:?} needs {} value bytes, file has {}",
                count * 8,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(dims, data)
}

/// Writes `manifest.json` and one volume file per subject into `dir`.
pub fn write_dataset(samples: &[VolumeSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    let mut seen = HashSet::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        if !seen.insert(s.subject_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate subject_id {}",
                s.subject_id
            )));
        }
        let file = format!("{}.vol", s.subject_id);
        write_volume(&dir.join(&file), &s.volume)?;
        records.push(ManifestRecord {
            subject_id: s.subject_id.clone(),
            treatment: s.treatment,
            survival_days: s.survival_days,
            file,
            channels: s.volume.shape()[0],
            extent: s.volume.shape()[1],
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&records).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VolumeSample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<ManifestRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.subject_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate subject_id {} in manifest",
                r.subject_id
            )));
        }
        let vpath: PathBuf = dir.join(&r.file);
        if !vpath.is_file() {
            return Err(Error::Validation(format!(
                "subject {}: volume file {} is missing",
                r.subject_id,
                vpath.display()
            )));
        }
        let volume = read_volume(&vpath)?;
        let s = volume.shape();
        if s[0] != r.channels || s[1..].iter().any(|&d| d != r.extent) {
            return Err(Error::format(
                &vpath,
                4,
                format!(
                    "subject {}: header {s:?} disagrees with manifest ({} channels, extent {})",
                    r.subject_id, r.channels, r.extent
                ),
            ));
        }
        let sample = VolumeSample {
            subject_id: r.subject_id,
            volume,
            treatment: r.treatment,
            survival_days: r.survival_days,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Stacks sample volumes into `[N, C, D, H, W]`.
pub fn batch_volumes(samples: &[&VolumeSample]) -> Result<Tensor> {
    let vols: Vec<&Tensor> = samples.iter().map(|s| &s.volume).collect();
    Tensor::stack(&vols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: n,
            ..Default::default()
        }
    }

    #[test]
    fn effect_constants() {
        let c = SyntheticConfig::default();
        for nu in [0.0, 0.01, 0.05, 0.2, 0.5] {
            assert_eq!(c.effect(TreatmentCode::NA, nu), 0.0);
            assert!(c.effect(TreatmentCode::GTR, nu) > c.effect(TreatmentCode::STR, nu));
            assert!(c.effect(TreatmentCode::STR, nu) > 0.0);
        }
        assert!((c.effect(TreatmentCode::GTR, 1e-12) - 300.0).abs() < 1e-6);
    }

    #[test]
    fn cohort_counts_match_reference_proportions() {
        assert_eq!(cfg(236).treatment_counts(), [119, 10, 107]);
        let samples = generate_synthetic(&cfg(236)).unwrap();
        let mut counts = [0; 3];
        for s in &samples {
            counts[s.treatment.index()] += 1;
        }
        assert_eq!(counts, [119, 10, 107]);
        assert_eq!(cfg(300).treatment_counts().iter().sum::<usize>(), 300);
        assert_eq!(cfg(3).treatment_counts().iter().sum::<usize>(), 3);
    }

    #[test]
    fn generator_rejects_bad_config() {
        let small = SyntheticConfig {
            extent: 6,
            ..cfg(10)
        };
        assert!(matches!(generate_synthetic(&small), Err(Error::Config(_))));
        assert!(generate_synthetic(&cfg(2)).is_err());
        let probs = SyntheticConfig {
            treatment_probs: [0.5, 0.5, 0.5],
            ..cfg(10)
        };
        assert!(generate_synthetic(&probs).is_err());
    }

    #[test]
    fn generated_samples_are_valid_and_deterministic() {
        let a = generate_with_truth(&cfg(12)).unwrap();
        let b = generate_with_truth(&cfg(12)).unwrap();
        assert_eq!(a, b);
        for (s, truth) in &a {
            s.validate().unwrap();
            assert_eq!(s.volume.shape(), &[5, 16, 16, 16]);
            let vol = 16 * 16 * 16;
            let mask_frac = s.volume.data()[4 * vol..].iter().sum::<f64>() / vol as f64;
            assert_eq!(mask_frac, truth.volume_fraction);
            let [g, st, na] = truth.expected_days;
            assert!(g > st && st > na);
        }
    }

    #[test]
    fn normalize_examples() {
        let s = VolumeSample {
            subject_id: "a".into(),
            volume: Tensor::new(vec![1, 2, 1, 1], vec![0.0, 2.0]).unwrap(),
            treatment: TreatmentCode::NA,
            survival_days: 10.0,
        };
        let n = normalize(&s).unwrap();
        assert_eq!(n.volume.data(), &[-1.0, 1.0]);
        let again = normalize(&n).unwrap();
        for (a, b) in again.volume.data().iter().zip(n.volume.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = VolumeSample {
            volume: Tensor::full(&[2, 2, 1, 1], 5.0),
            ..s.clone()
        };
        let err = normalize(&flat).unwrap_err().to_string();
        assert!(err.contains("channel 0"), "{err}");
    }

    #[test]
    fn normalize_leaves_mask_alone() {
        let s = &generate_synthetic(&cfg(3)).unwrap()[0];
        let n = normalize(s).unwrap();
        let vol = 16 * 16 * 16;
        assert_eq!(&n.volume.data()[4 * vol..], &s.volume.data()[4 * vol..]);
        let ch0 = &n.volume.data()[..vol];
        let mean = ch0.iter().sum::<f64>() / vol as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn kfold_reference_cohort() {
        let samples = generate_synthetic(&cfg(236)).unwrap();
        let split = stratified_kfold(&samples, 5, 0).unwrap();
        for fold in 0..5 {
            let mut counts = [0; 3];
            for i in split.test_indices(fold) {
                counts[samples[i].treatment.index()] += 1;
            }
            assert_eq!(counts[1], 2);
            assert!((23..=24).contains(&counts[0]), "{counts:?}");
            assert!((21..=22).contains(&counts[2]), "{counts:?}");
        }
        assert_eq!(split, stratified_kfold(&samples, 5, 0).unwrap());
        assert_ne!(split, stratified_kfold(&samples, 5, 1).unwrap());
    }

    #[test]
    fn kfold_leave_one_out_and_errors() {
        let samples = generate_synthetic(&cfg(7)).unwrap();
        let split = stratified_kfold(&samples, 7, 3).unwrap();
        assert_eq!(split.fold_sizes(), vec![1; 7]);
        assert!(stratified_kfold(&samples, 1, 0).is_err());
        assert!(stratified_kfold(&samples, 8, 0).is_err());
        let mut dup = samples.clone();
        dup[1].subject_id = dup[0].subject_id.clone();
        assert!(matches!(stratified_kfold(&dup, 2, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn truncated_volume_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        write_volume(&p, &Tensor::full(&[1, 2, 2, 2], 1.5)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        fs::write(&p, b"VOX1abcd").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dataset_round_trip_and_missing_volume() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&cfg(4)).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);

        fs::remove_file(dir.path().join(format!("{}.vol", samples[2].subject_id))).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&samples[2].subject_id), "{err}");
    }

    #[test]
    fn out_of_range_survival_rejected() {
        let mut s = generate_synthetic(&cfg(3)).unwrap();
        s[0].survival_days = 2000.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_dataset(&s, dir.path()), Err(Error::Validation(_))));
    }
}
