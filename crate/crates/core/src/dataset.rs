//! Labeled synthetic spectra: generation, noise, splitting and persistence.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_bits, field_from_label, CodecConfig, Frame, PhaseLabel};
use crate::error::{read_file, write_file, Error, Result};
use crate::nn::minmax_scale;
use crate::physics::{simulate_spectrum, AtomParams, Spectrum, TransmissionModel};
use crate::rng::{stream, Purpose};

pub const MAGIC: &[u8; 5] = b"RYDS1";

/// Above this many message bits, an unset `active_bits` falls back to 3.
const MAX_DEFAULT_ACTIVE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub codec: CodecConfig,
    pub atom: AtomParams,
    pub model: TransmissionModel,
    pub n_samples_per_class: usize,
    /// Samples per spectrum.
    pub n: usize,
    /// Sample period, seconds.
    pub dt: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Leading message bits that vary between classes; the rest stay 0.
    pub active_bits: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            atom: AtomParams::default(),
            model: TransmissionModel::default(),
            n_samples_per_class: 150,
            n: 1000,
            dt: 1e-6,
            noise_sigma: 0.05,
            seed: 0,
            active_bits: None,
        }
    }
}

impl DatasetSpec {
    pub fn active_bits(&self) -> usize {
        let all = self.codec.bits_per_frame();
        match self.active_bits {
            Some(k) => k,
            None if all > MAX_DEFAULT_ACTIVE => 3,
            None => all,
        }
    }

    pub fn n_classes(&self) -> usize {
        1 << self.active_bits()
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.atom.validate()?;
        self.model.validate()?;
        if self.n_samples_per_class == 0 || self.n == 0 {
            return Err(Error::Config("sample counts must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        let k = self.active_bits();
        if k == 0 || k > self.codec.bits_per_frame() || k > 24 {
            return Err(Error::Config(format!(
                "active_bits {k} outside 1..={}",
                self.codec.bits_per_frame().min(24)
            )));
        }
        Ok(())
    }

    /// Label of class `c`.
    pub fn label_of(&self, class: usize) -> Result<PhaseLabel> {
        let frame = Frame::from_class(class, self.active_bits(), self.codec.bits_per_frame());
        encode_bits(&frame, &self.codec)
    }

    /// Noiseless, unscaled transmission for one label.
    pub fn clean_spectrum(&self, label: &PhaseLabel) -> Result<Spectrum> {
        let field = field_from_label(label, &self.codec)?;
        simulate_spectrum(&field, &self.atom, &self.model, self.n, self.dt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: PhaseLabel,
    /// Min-max scaled samples.
    pub samples: Vec<f32>,
}

impl Record {
    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub n_records: usize,
    pub n_bins: usize,
    pub n: usize,
    /// Free-form provenance tag, e.g. a run id.
    #[serde(default)]
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<Record>,
    pub tag: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Inputs and targets for the selected records, widened to f64.
    pub fn arrays(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        idx.iter()
            .map(|&i| {
                let r = &self.records[i];
                (r.samples_f64(), r.label.as_targets())
            })
            .unzip()
    }

    pub fn class_of(&self, i: usize) -> Result<usize> {
        self.records[i].label.frame().class(self.spec.active_bits())
    }
}

/// Adds i.i.d. Gaussian noise to every sample. `sigma == 0` returns a copy.
pub fn add_white_noise<R: Rng + ?Sized>(s: &Spectrum, sigma: f64, rng: &mut R) -> Result<Spectrum> {
    let mut out = s.clone();
    add_noise_in_place(&mut out.samples, sigma, rng)?;
    Ok(out)
}

pub fn add_noise_in_place<R: Rng + ?Sized>(x: &mut [f64], sigma: f64, rng: &mut R) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParams(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
    x.iter_mut().for_each(|v| *v += normal.sample(rng));
    Ok(())
}

/// Scale, add noise, scale again. The result is what the network and the
/// baseline fit both consume.
pub fn noisy_scaled<R: Rng + ?Sized>(clean: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut x = minmax_scale(clean);
    add_noise_in_place(&mut x, sigma, rng)?;
    Ok(minmax_scale(&x))
}

/// Builds `n_samples_per_class` noisy records for every class, ordered by
/// class. Record `i` draws its noise from its own stream, so the output does
/// not depend on thread count.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let labels: Vec<PhaseLabel> = (0..spec.n_classes())
        .map(|c| spec.label_of(c))
        .collect::<Result<_>>()?;
    let clean: Vec<Vec<f64>> = labels
        .par_iter()
        .map(|l| spec.clean_spectrum(l).map(|s| s.samples))
        .collect::<Result<_>>()?;
    let per = spec.n_samples_per_class;
    let records = (0..labels.len() * per)
        .into_par_iter()
        .map(|i| {
            let class = i / per;
            let mut rng = stream(spec.seed, Purpose::Noise, i as u64);
            let x = noisy_scaled(&clean[class], spec.noise_sigma, &mut rng)?;
            Ok(Record {
                label: labels[class].clone(),
                samples: x.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        records,
        tag: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub fold_count: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            fold_count: 4,
        }
    }
}

/// Record indices of the test set and of each cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl Split {
    /// Training indices when fold `k` is held out for validation.
    pub fn train_for(&self, k: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }
}

/// Shuffles, carves off the test set, and deals the remainder into folds
/// whose sizes differ by at most one.
pub fn split(n_records: usize, plan: &SplitPlan, seed: u64) -> Result<Split> {
    if plan.fold_count == 0 || !(0.0..1.0).contains(&plan.test_fraction) {
        return Err(Error::Config(format!("invalid split plan {plan:?}")));
    }
    let need = 5 * plan.fold_count;
    if n_records < need {
        return Err(Error::TooFewRecords {
            need,
            got: n_records,
        });
    }
    let mut idx: Vec<usize> = (0..n_records).collect();
    idx.shuffle(&mut stream(seed, Purpose::Split, 0));
    let n_test = (n_records as f64 * plan.test_fraction).round() as usize;
    let rest = &idx[n_test..];
    let base = rest.len() / plan.fold_count;
    let extra = rest.len() % plan.fold_count;
    let mut folds = Vec::with_capacity(plan.fold_count);
    let mut at = 0;
    for k in 0..plan.fold_count {
        let size = base + usize::from(k < extra);
        folds.push(rest[at..at + size].to_vec());
        at += size;
    }
    Ok(Split {
        test: idx[..n_test].to_vec(),
        folds,
    })
}

/// Serializes to the RYDS1 layout: magic, u32 LE header length, JSON
/// header, records (label bytes then f32 LE samples), CRC32 of all that.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        n_records: ds.records.len(),
        n_bins: ds.spec.codec.n_bins,
        n: ds.spec.n,
        tag: ds.tag.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        MAGIC.len() + 4 + json.len() + ds.records.len() * (header.n_bins + 4 * header.n) + 4,
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for r in &ds.records {
        if r.label.len() != header.n_bins || r.samples.len() != header.n {
            return Err(Error::Shape(format!(
                "record has {} label bits and {} samples, header says {} and {}",
                r.label.len(),
                r.samples.len(),
                header.n_bins,
                header.n
            )));
        }
        buf.extend(r.label.bits().iter().map(|&b| u8::from(b)));
        for v in &r.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let malformed = |m: &str| Error::MalformedFile(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(malformed("missing RYDS1 magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut at = MAGIC.len();
    let hlen = u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes")) as usize;
    at += 4;
    let json = body
        .get(at..at + hlen)
        .ok_or_else(|| malformed("header length exceeds file"))?;
    let header: DatasetHeader =
        serde_json::from_slice(json).map_err(|e| malformed(&format!("bad header: {e}")))?;
    at += hlen;
    let rec_len = header.n_bins + 4 * header.n;
    if body.len() - at != header.n_records * rec_len {
        return Err(malformed("record block size does not match header"));
    }
    let mut records = Vec::with_capacity(header.n_records);
    for chunk in body[at..].chunks_exact(rec_len) {
        let (lb, sb) = chunk.split_at(header.n_bins);
        if lb.iter().any(|&b| b > 1) {
            return Err(malformed("label byte is not 0 or 1"));
        }
        let label = PhaseLabel::new(lb.iter().map(|&b| b == 1).collect())?;
        let samples = sb
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { label, samples });
    }
    Ok(Dataset {
        spec: header.spec,
        records,
        tag: header.tag,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_file(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

/// One row per record: label bits, then samples to 9 significant digits.
pub fn write_csv<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let nb = ds.spec.codec.n_bins;
    let mut head: Vec<String> = (0..nb).map(|k| format!("bit{k}")).collect();
    head.extend((0..ds.spec.n).map(|i| format!("s{i}")));
    writeln!(out, "{}", head.join(","))?;
    for r in &ds.records {
        let mut row: Vec<String> = r
            .label
            .bits()
            .iter()
            .map(|&b| u8::from(b).to_string())
            .collect();
        row.extend(r.samples.iter().map(|v| format!("{:.8e}", v)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_samples_per_class: 3,
            n: 64,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let spec = DatasetSpec {
            n_samples_per_class: 150,
            n: 8,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 1200);
        let mut per = vec![0; 8];
        for i in 0..ds.len() {
            per[ds.class_of(i).unwrap()] += 1;
        }
        assert!(per.iter().all(|&c| c == 150));
    }

    #[test]
    fn twenty_bins_default_to_three_active() {
        let spec = DatasetSpec {
            codec: CodecConfig {
                n_bins: 20,
                ..CodecConfig::default()
            },
            ..DatasetSpec::default()
        };
        assert_eq!(spec.n_classes(), 8);
        let l = spec.label_of(5).unwrap();
        assert_eq!(l.len(), 20);
        assert_eq!(&l.bits()[..3], &[true, false, true]);
        assert!(l.bits()[3..].iter().all(|b| !b));
    }

    #[test]
    fn noiseless_duplicates_match_and_samples_are_scaled() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.records[0], ds.records[1]);
        let noisy = generate_dataset(&small_spec()).unwrap();
        for r in &noisy.records {
            assert!(r.samples.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(noisy.records[0], noisy.records[1]);
    }

    #[test]
    fn split_arithmetic_and_partition() {
        let s = split(1000, &SplitPlan::default(), 9).unwrap();
        assert_eq!(s.test.len(), 200);
        assert!(s.folds.iter().all(|f| f.len() == 200));
        let mut all: Vec<usize> = s
            .test
            .iter()
            .chain(s.folds.iter().flatten())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split(1000, &SplitPlan::default(), 9).unwrap());
        assert_eq!(s.train_for(1).len(), 600);
        assert!(matches!(
            split(19, &SplitPlan::default(), 0),
            Err(Error::TooFewRecords { need: 20, got: 19 })
        ));
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::MalformedFile(_))));
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            decode_dataset(&flipped),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            spec: small_spec(),
            records: vec![],
            tag: "t".into(),
        };
        assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn csv_layout() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let mut out = Vec::new();
        write_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 4 + 64);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[..4], ["0", "0", "0", "0"]);
        assert_eq!(text.lines().count(), 1 + ds.len());
    }
}
