//! Trial sets: the binary trial file, motor-imagery window extraction,
//! leave-one-subject-out splitting and a synthetic generator.
//!
//! # Trial file
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "MITR"
//! header       6 × u32  version, N, C, T, K, sample_rate
//! labels       N × u8
//! subjects     N × u8
//! samples      N·C·T × f32   trial-major, then channel, then time
//! checksum     u64      Σ header words + Σ bytes of labels..samples, mod 2^64
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const TRIAL_MAGIC: &[u8; 4] = b"MITR";
pub const TRIAL_VERSION: u32 = 1;

/// Fraction of each fold's training pool held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    /// `[N×C×T]`
    pub trials: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub sample_rate: u32,
    pub classes: usize,
}

impl TrialSet {
    pub fn new(
        trials: Tensor,
        labels: Vec<usize>,
        subjects: Vec<usize>,
        sample_rate: u32,
        classes: usize,
    ) -> Result<Self> {
        if trials.rank() != 3 {
            return Err(Error::Data(format!(
                "trials must be N×C×T, got {:?}",
                trials.shape()
            )));
        }
        let n = trials.shape()[0];
        if labels.len() != n || subjects.len() != n {
            return Err(Error::Data(format!(
                "{n} trials but {} labels and {} subject ids",
                labels.len(),
                subjects.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if present.len() != classes {
            return Err(Error::Data(format!(
                "only {} of {classes} classes are present",
                present.len()
            )));
        }
        Ok(Self {
            trials,
            labels,
            subjects,
            sample_rate,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.trials.shape()[1]
    }

    pub fn samples(&self) -> usize {
        self.trials.shape()[2]
    }

    /// Distinct subject ids in ascending order.
    pub fn subject_ids(&self) -> Vec<usize> {
        self.subjects
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Per-subject counts of each class.
    pub fn label_histogram(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut hist: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&s, &l) in self.subjects.iter().zip(&self.labels) {
            hist.entry(s).or_insert_with(|| vec![0; self.classes])[l] += 1;
        }
        hist
    }

    /// Stacks the selected trials into `[B×C×T]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, t) = (self.channels(), self.samples());
        let mut data = Vec::with_capacity(indices.len() * c * t);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Bounds(format!(
                    "trial index {i} out of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.trials.data()[i * c * t..(i + 1) * c * t]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, t], data)?, labels))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, c, t) = (self.len(), self.channels(), self.samples());
        for (what, v) in [("labels", &self.labels), ("subject ids", &self.subjects)] {
            if v.iter().any(|&x| x > u8::MAX as usize) {
                return Err(Error::Data(format!("{what} must fit in one byte")));
            }
        }
        let header = [
            TRIAL_VERSION,
            to_u32(n)?,
            to_u32(c)?,
            to_u32(t)?,
            to_u32(self.classes)?,
            self.sample_rate,
        ];
        let mut out = Vec::with_capacity(4 + 24 + 2 * n + 4 * n * c * t + 8);
        out.extend_from_slice(TRIAL_MAGIC);
        for w in header {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let payload_start = out.len();
        out.extend(self.labels.iter().map(|&l| l as u8));
        out.extend(self.subjects.iter().map(|&s| s as u8));
        for &v in self.trials.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let sum = trial_checksum(&header, &out[payload_start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TRIAL_MAGIC {
            return Err(Error::format(0, "bad magic, expected MITR"));
        }
        let mut header = [0u32; 6];
        for w in &mut header {
            *w = r.u32()?;
        }
        let [version, n, c, t, k, rate] = header;
        if version != TRIAL_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported trial file version {version}"),
            ));
        }
        let (n, c, t, k) = (n as usize, c as usize, t as usize, k as usize);
        let payload_start = r.pos;
        let labels_at = r.pos;
        let labels: Vec<usize> = r.take(n)?.iter().map(|&b| b as usize).collect();
        let subjects: Vec<usize> = r.take(n)?.iter().map(|&b| b as usize).collect();
        let values = n
            .checked_mul(c)
            .and_then(|x| x.checked_mul(t))
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
        let raw = r.take(values)?;
        let payload_end = r.pos;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after checksum"));
        }
        let computed = trial_checksum(&header, &bytes[payload_start..payload_end]);
        if stored != computed {
            return Err(Error::format(
                payload_end,
                format!("checksum mismatch: stored {stored:#x}, computed {computed:#x}"),
            ));
        }
        if n == 0 {
            return Err(Error::Data("trial file holds no trials".into()));
        }
        if c == 0 || t == 0 {
            return Err(Error::format(8, "trials must have channels and samples"));
        }
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            return Err(Error::format(
                labels_at + i,
                format!("label {} outside [0, {k})", labels[i]),
            ));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                payload_start + 2 * n + 4 * i,
                "non-finite sample",
            ));
        }
        TrialSet::new(Tensor::new(&[n, c, t], data)?, labels, subjects, rate, k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Reads and fully validates a trial file.
pub fn load_trialset(path: impl AsRef<Path>) -> Result<TrialSet> {
    TrialSet::from_bytes(&std::fs::read(path)?)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in 32 bits")))
}

fn trial_checksum(header: &[u32], payload: &[u8]) -> u64 {
    let mut sum = 0u64;
    for &w in header {
        sum = sum.wrapping_add(w as u64);
    }
    for &b in payload {
        sum = sum.wrapping_add(b as u64);
    }
    sum
}

/// Little-endian cursor that reports the offset of truncation.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.bytes.len(),
                    format!("truncated: needed {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Contiguous `seconds`-long slice of `trial[C×T_full]` starting at the cue.
pub fn extract_mi_window(
    trial: &Tensor,
    cue_sample: usize,
    rate: u32,
    seconds: f64,
) -> Result<Tensor> {
    if trial.rank() != 2 {
        return Err(Error::dim("extract_mi_window", trial.shape(), &[2]));
    }
    let (c, full) = (trial.shape()[0], trial.shape()[1]);
    let len = (seconds * rate as f64).round();
    if !(len >= 1.0) {
        return Err(Error::Bounds(format!(
            "window of {seconds} s at {rate} Hz is empty"
        )));
    }
    let len = len as usize;
    if cue_sample + len > full {
        return Err(Error::Bounds(format!(
            "window [{cue_sample}, {}) exceeds recording of {full} samples",
            cue_sample + len
        )));
    }
    let mut data = Vec::with_capacity(c * len);
    for ch in 0..c {
        data.extend_from_slice(&trial.row(ch)[cue_sample..cue_sample + len]);
    }
    Tensor::new(&[c, len], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub test_subject: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// One fold per distinct subject id.
pub fn loso_splits(ts: &TrialSet, seed: u64) -> Result<SplitPlan> {
    loso_splits_for(ts, &ts.subject_ids(), seed)
}

/// One fold per listed subject. Each fold's training pool is every other
/// subject's trials; a class-stratified, seeded 20 % of that pool becomes
/// the validation set.
pub fn loso_splits_for(ts: &TrialSet, subjects: &[usize], seed: u64) -> Result<SplitPlan> {
    if subjects.len() < 2 {
        return Err(Error::Data(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let mut folds = Vec::with_capacity(subjects.len());
    for (fold_idx, &held_out) in subjects.iter().enumerate() {
        let test: Vec<usize> = (0..ts.len())
            .filter(|&i| ts.subjects[i] == held_out)
            .collect();
        if test.is_empty() {
            return Err(Error::Data(format!("subject {held_out} has no trials")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ts.classes];
        for i in (0..ts.len()).filter(|&i| ts.subjects[i] != held_out) {
            by_class[ts.labels[i]].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fold_idx as u64 + 1);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for mut group in by_class {
            group.shuffle(&mut rng);
            let n_val = (group.len() as f64 * VALIDATION_FRACTION).round() as usize;
            val.extend_from_slice(&group[..n_val]);
            train.extend_from_slice(&group[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        folds.push(Fold {
            test_subject: held_out,
            train,
            val,
            test,
        });
    }
    Ok(SplitPlan { folds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: u32,
    /// One oscillation frequency per class, Hz.
    pub class_freqs: Vec<f64>,
    /// Standard deviation of the per-subject multiplicative gain around 1.
    pub subject_gain_jitter: f64,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 9,
            trials_per_class: 72,
            channels: 22,
            samples: 750,
            sample_rate: 250,
            class_freqs: vec![8.0, 12.0, 18.0, 26.0],
            subject_gain_jitter: 0.2,
            noise_std: 2.0,
            rng_seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.class_freqs.len();
        if k < 2 {
            return Err(Error::Config("need at least two class frequencies".into()));
        }
        if self.n_subjects == 0
            || self.trials_per_class == 0
            || self.channels == 0
            || self.samples == 0
        {
            return Err(Error::Config(
                "synthetic set dimensions must be positive".into(),
            ));
        }
        if self.n_subjects > 256 || k > 256 {
            return Err(Error::Config(
                "subject ids and labels must fit in one byte".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, &f) in self.class_freqs.iter().enumerate() {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Config(format!(
                    "class frequency {f} Hz outside (0, {nyquist})"
                )));
            }
            if self.class_freqs[..i].contains(&f) {
                return Err(Error::Config(format!("class frequency {f} Hz repeated")));
            }
        }
        if self.noise_std < 0.0 || self.subject_gain_jitter < 0.0 {
            return Err(Error::Config(
                "noise and jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Electrodes carrying the class-`k` oscillation: a contiguous block
    /// starting at `k·C/K`.
    pub fn active_channels(&self, class: usize) -> std::ops::Range<usize> {
        let k = self.class_freqs.len();
        let width = self.channels.div_ceil(2 * k).max(1);
        let start = class * self.channels / k;
        start..(start + width).min(self.channels)
    }

    /// Multiplicative signal gain of every subject, `max(0.1, 1 + jitter·N(0,1))`.
    pub fn subject_gains(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.n_subjects)
            .map(|_| (1.0 + self.subject_gain_jitter * normal.sample(&mut rng)).max(0.1))
            .collect()
    }
}

/// Balanced synthetic set: a trial of class `k` is the subject's gain times
/// a random-phase sinusoid at `class_freqs[k]` on that class's electrodes,
/// plus white noise everywhere. Samples are rounded to `f32` so the set
/// survives the trial file unchanged.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TrialSet> {
    cfg.validate()?;
    let k = cfg.class_freqs.len();
    let (c, t) = (cfg.channels, cfg.samples);
    let n = cfg.n_subjects * k * cfg.trials_per_class;
    let gains = cfg.subject_gains();
    let noise =
        Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    for (s, &gain) in gains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(s as u64 + 1);
        for class in 0..k {
            let active = cfg.active_channels(class);
            let omega = 2.0 * PI * cfg.class_freqs[class] / cfg.sample_rate as f64;
            for _ in 0..cfg.trials_per_class {
                let phase = rng.random_range(0.0..2.0 * PI);
                for ch in 0..c {
                    let on = active.contains(&ch);
                    for i in 0..t {
                        let mut v = if cfg.noise_std > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        if on {
                            v += gain * (omega * i as f64 + phase).sin();
                        }
                        data.push(v as f32 as f64);
                    }
                }
                labels.push(class);
                subjects.push(s);
            }
        }
    }
    TrialSet::new(
        Tensor::new(&[n, c, t], data)?,
        labels,
        subjects,
        cfg.sample_rate,
        k,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_subjects: 3,
            trials_per_class: 4,
            channels: 6,
            samples: 100,
            sample_rate: 100,
            class_freqs: vec![5.0, 20.0, 33.0],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_is_identical() {
        let ts = synth_generate(&small_cfg()).unwrap();
        let back = TrialSet::from_bytes(&ts.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ts);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mitr");
        ts.save(&path).unwrap();
        assert_eq!(load_trialset(&path).unwrap(), ts);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let ts = synth_generate(&small_cfg()).unwrap();
        let bytes = ts.to_bytes().unwrap();
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            assert!(matches!(
                TrialSet::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TrialSet::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[200] ^= 0x10;
        assert!(matches!(
            TrialSet::from_bytes(&bad),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let ts = synth_generate(&small_cfg()).unwrap();
        let mut bytes = ts.to_bytes().unwrap();
        let at = 4 + 24 + 5;
        bytes[at] = 7;
        // repair the checksum so the label check is what fires
        let len = bytes.len();
        let sum =
            u64::from_le_bytes(bytes[len - 8..].try_into().unwrap()) + 7 - ts.labels[5] as u64;
        bytes[len - 8..].copy_from_slice(&sum.to_le_bytes());
        match TrialSet::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_data_error() {
        let header = [TRIAL_VERSION, 0, 2, 3, 2, 250];
        let mut bytes = TRIAL_MAGIC.to_vec();
        for w in header {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend_from_slice(&trial_checksum(&header, &[]).to_le_bytes());
        assert!(matches!(TrialSet::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn mi_window_examples() {
        let rate = 250;
        let trial = Tensor::new(&[2, 1000], (0..2000).map(f64::from).collect()).unwrap();
        let w = extract_mi_window(&trial, 125, rate, 3.0).unwrap();
        assert_eq!(w.shape(), &[2, 750]);
        assert_eq!(w.row(1)[0], 1125.0);
        let whole = extract_mi_window(&trial, 0, rate, 4.0).unwrap();
        assert_eq!(whole, trial);
        assert!(matches!(
            extract_mi_window(&trial, 300, rate, 3.0),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn loso_fold_counts() {
        let cfg = SynthConfig {
            n_subjects: 9,
            trials_per_class: 2,
            channels: 2,
            samples: 8,
            sample_rate: 100,
            class_freqs: vec![5.0, 10.0, 20.0, 30.0],
            ..SynthConfig::default()
        };
        let ts = synth_generate(&cfg).unwrap();
        let plan = loso_splits(&ts, 1).unwrap();
        assert_eq!(plan.folds.len(), 9);
        for fold in &plan.folds {
            let pool: BTreeSet<usize> = fold
                .train
                .iter()
                .chain(&fold.val)
                .map(|&i| ts.subjects[i])
                .collect();
            assert_eq!(pool.len(), 8);
            assert!(!pool.contains(&fold.test_subject));
        }

        let two = SynthConfig {
            n_subjects: 2,
            trials_per_class: 5,
            class_freqs: vec![5.0, 10.0],
            ..cfg
        };
        let ts = synth_generate(&two).unwrap();
        let plan = loso_splits(&ts, 3).unwrap();
        for fold in &plan.folds {
            assert_eq!(
                (fold.train.len(), fold.val.len(), fold.test.len()),
                (8, 2, 10)
            );
        }
        assert!(loso_splits_for(&ts, &[0, 1, 5], 3).is_err());
        assert!(loso_splits_for(&ts, &[0], 3).is_err());
    }

    fn dominant_bin(x: &[f64]) -> usize {
        let n = x.len();
        (1..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let a = 2.0 * PI * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                (k, re * re + im * im)
            })
            .fold(
                (0, -1.0),
                |best, (k, p)| if p > best.1 { (k, p) } else { best },
            )
            .0
    }

    #[test]
    fn noiseless_classes_have_distinct_dominant_frequencies() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            class_freqs: vec![7.0, 23.0],
            ..small_cfg()
        };
        let ts = synth_generate(&cfg).unwrap();
        let t = ts.samples();
        let mut seen = BTreeMap::new();
        for i in 0..ts.len() {
            let ch = cfg.active_channels(ts.labels[i]).start;
            let row =
                &ts.trials.data()[(i * ts.channels() + ch) * t..(i * ts.channels() + ch + 1) * t];
            let bin = dominant_bin(row);
            // 100 samples at 100 Hz: bin k is k Hz
            assert_eq!(bin as f64, cfg.class_freqs[ts.labels[i]]);
            seen.insert(ts.labels[i], bin);
        }
        assert_ne!(seen[&0], seen[&1]);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = small_cfg();
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_eq!(cfg.subject_gains(), cfg.subject_gains());
        for counts in a.label_histogram().values() {
            assert!(counts.iter().all(|&n| n == cfg.trials_per_class));
        }
    }

    #[test]
    fn competition_scale_trial_count() {
        let cfg = SynthConfig::default();
        assert_eq!(
            cfg.n_subjects * cfg.trials_per_class * cfg.class_freqs.len(),
            2592
        );
        let tiny = SynthConfig {
            channels: 1,
            samples: 4,
            sample_rate: 100,
            class_freqs: vec![5.0, 10.0, 15.0, 20.0],
            ..cfg
        };
        assert_eq!(synth_generate(&tiny).unwrap().len(), 2592);
    }

    #[test]
    fn invalid_synth_configs() {
        let mut cfg = small_cfg();
        cfg.class_freqs = vec![5.0, 5.0];
        assert!(cfg.validate().is_err());
        cfg.class_freqs = vec![5.0, 50.0];
        assert!(cfg.validate().is_err());
    }

    fn random_set(seed: u64, subjects: usize, classes: usize, per: usize) -> TrialSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = Vec::new();
        let mut subj = Vec::new();
        for s in 0..subjects {
            let count = per + rng.random_range(0..per + 1);
            for i in 0..count {
                labels.push(if i < classes {
                    i
                } else {
                    rng.random_range(0..classes)
                });
                subj.push(s * 3 + 1);
            }
        }
        let n = labels.len();
        TrialSet::new(Tensor::zeros(&[n, 1, 2]), labels, subj, 100, classes).unwrap()
    }

    proptest! {
        #[test]
        fn split_plans_partition_and_stratify(
            seed in any::<u64>(),
            subjects in 2usize..6,
            classes in 2usize..5,
            per in 4usize..20,
        ) {
            let ts = random_set(seed, subjects, classes, per);
            let plan = loso_splits(&ts, seed).unwrap();
            prop_assert_eq!(plan.folds.len(), subjects);
            for fold in &plan.folds {
                let train: BTreeSet<_> = fold.train.iter().copied().collect();
                let val: BTreeSet<_> = fold.val.iter().copied().collect();
                let test: BTreeSet<_> = fold.test.iter().copied().collect();
                prop_assert!(train.is_disjoint(&val));
                prop_assert!(train.is_disjoint(&test) && val.is_disjoint(&test));
                prop_assert_eq!(train.len() + val.len() + test.len(), ts.len());
                prop_assert!(test.iter().all(|&i| ts.subjects[i] == fold.test_subject));
                prop_assert!(train.iter().chain(&val).all(|&i| ts.subjects[i] != fold.test_subject));
                for k in 0..classes {
                    let pool = train.iter().chain(&val).filter(|&&i| ts.labels[i] == k).count();
                    let nv = val.iter().filter(|&&i| ts.labels[i] == k).count();
                    prop_assert!((nv as f64 - 0.2 * pool as f64).abs() <= 1.0);
                }
            }
        }
    }
}
