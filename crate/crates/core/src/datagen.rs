//! Synthetic Gaussian-cluster datasets for the class-incremental update
//! scenario, plus their text file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{parse_at_line, structural, Error, Result};
use crate::linalg::Matrix;

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "oca-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(structural(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    num_classes: usize,
    split: Split,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates dims, label range, id uniqueness and that every class has
    /// at least one sample.
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        split: Split,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(structural(
                "dataset needs positive input_dim and num_classes",
            ));
        }
        let mut seen = std::collections::HashSet::with_capacity(samples.len());
        let mut counts = vec![0usize; num_classes];
        for s in &samples {
            if s.x.len() != input_dim {
                return Err(structural(format!(
                    "sample {} has {} values, expected {input_dim}",
                    s.id,
                    s.x.len()
                )));
            }
            if s.label >= num_classes {
                return Err(structural(format!(
                    "sample {} has label {} outside [0, {num_classes})",
                    s.id, s.label
                )));
            }
            if !seen.insert(s.id) {
                return Err(structural(format!("duplicate sample id {}", s.id)));
            }
            counts[s.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(structural(format!("class {c} has no samples")));
        }
        Ok(Self {
            input_dim,
            num_classes,
            split,
            samples,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Inputs as an `n x input_dim` matrix in sample order.
    pub fn inputs(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.samples.len() * self.input_dim);
        for s in &self.samples {
            data.extend_from_slice(&s.x);
        }
        Matrix::new(self.samples.len(), self.input_dim, data).expect("validated dims")
    }

    /// Copy with samples ordered by id.
    pub fn sorted_by_id(&self) -> Dataset {
        let mut ds = self.clone();
        ds.samples.sort_by_key(|s| s.id);
        ds
    }
}

/// Parameters of the cluster generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_eval: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_classes: 20,
            per_class_train: 200,
            per_class_eval: 50,
            input_dim: 32,
            class_separation: 1.0,
            noise_sigma: 0.35,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("per_class_train", self.per_class_train),
            ("per_class_eval", self.per_class_eval),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(structural(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(structural(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws class centers on the sphere of radius `class_separation`, then
/// independent train and eval samples around them.
///
/// Train ids are `0..n_train`; eval ids continue from `n_train`.
pub fn gen_synthetic(params: &SynthParams, seed: u64) -> Result<(Dataset, Dataset)> {
    params.validate()?;
    let d = params.input_dim;
    let mut center_rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..params.num_classes)
        .map(|_| loop {
            let v = normal_vec(&mut center_rng, d);
            let n = crate::linalg::norm(&v);
            if n > 0.0 {
                break v.iter().map(|x| x * params.class_separation / n).collect();
            }
        })
        .collect();

    let draw = |stream: u64, per_class: usize, first_id: u64, split: Split| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut samples = Vec::with_capacity(per_class * params.num_classes);
        let mut id = first_id;
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let x = c
                    .iter()
                    .zip(normal_vec(&mut rng, d))
                    .map(|(m, z)| m + params.noise_sigma * z)
                    .collect();
                samples.push(Sample { id, label, x });
                id += 1;
            }
        }
        Dataset::new(d, params.num_classes, split, samples)
    };
    let n_train = (params.per_class_train * params.num_classes) as u64;
    let train = draw(1, params.per_class_train, 0, Split::Train)?;
    let eval = draw(2, params.per_class_eval, n_train, Split::Eval)?;
    Ok((train, eval))
}

/// Keeps samples with `label < keep`; ids are preserved.
pub fn restrict_classes(ds: &Dataset, keep: usize) -> Result<Dataset> {
    if keep == 0 || keep > ds.num_classes {
        return Err(structural(format!(
            "keep = {keep} outside [1, {}]",
            ds.num_classes
        )));
    }
    let samples = ds
        .samples
        .iter()
        .filter(|s| s.label < keep)
        .cloned()
        .collect();
    Dataset::new(ds.input_dim, keep, ds.split, samples)
}

/// Writes the text format. `f64` values use the shortest representation
/// that parses back to the same bits.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "version {DATASET_VERSION}")?;
    writeln!(w, "input_dim {}", ds.input_dim)?;
    writeln!(w, "num_classes {}", ds.num_classes)?;
    writeln!(w, "split {}", ds.split)?;
    writeln!(w, "samples {}", ds.samples.len())?;
    for s in &ds.samples {
        write!(w, "{},{}", s.id, s.label)?;
        for v in &s.x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

struct HeaderReader<'a, I: Iterator<Item = std::io::Result<String>>> {
    lines: &'a mut I,
    line_no: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> HeaderReader<'_, I> {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.lines.next() {
            Some(line) => Ok(line?),
            None => Err(parse_at_line(self.line_no, "unexpected end of file")),
        }
    }

    fn field<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| parse_at_line(self.line_no, format!("expected `{key} <value>`")))?;
        value
            .trim()
            .parse()
            .map_err(|_| parse_at_line(self.line_no, format!("invalid value for `{key}`: {value}")))
    }
}

pub(crate) fn parse_f64_list(line_no: usize, parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| parse_at_line(line_no, format!("invalid number `{p}`")))
        })
        .collect()
}

/// Reads the text format; fails without returning partial data.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let mut hdr = HeaderReader {
        lines: &mut lines,
        line_no: 0,
    };
    let magic = hdr.next_line()?;
    if magic.trim() != DATASET_MAGIC {
        return Err(parse_at_line(
            1,
            format!("expected `{DATASET_MAGIC}` header"),
        ));
    }
    let version: u32 = hdr.field("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let input_dim: usize = hdr.field("input_dim")?;
    let num_classes: usize = hdr.field("num_classes")?;
    let split: Split = {
        let s: String = hdr.field("split")?;
        s.parse()
            .map_err(|_| parse_at_line(hdr.line_no, format!("unknown split `{s}`")))?
    };
    let count: usize = hdr.field("samples")?;
    let mut line_no = hdr.line_no;
    let mut samples = Vec::with_capacity(count);
    for line in lines {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != input_dim + 2 {
            return Err(parse_at_line(
                line_no,
                format!("expected {} fields, found {}", input_dim + 2, parts.len()),
            ));
        }
        let id = parts[0]
            .trim()
            .parse()
            .map_err(|_| parse_at_line(line_no, format!("invalid id `{}`", parts[0])))?;
        let label = parts[1]
            .trim()
            .parse()
            .map_err(|_| parse_at_line(line_no, format!("invalid label `{}`", parts[1])))?;
        let x = parse_f64_list(line_no, &parts[2..])?;
        samples.push(Sample { id, label, x });
    }
    if samples.len() != count {
        return Err(parse_at_line(
            line_no + 1,
            format!(
                "header declares {count} samples, file has {}",
                samples.len()
            ),
        ));
    }
    Dataset::new(input_dim, num_classes, split, samples).map_err(|e| match e {
        Error::Structural(msg) => parse_at_line(line_no, msg),
        other => other,
    })
}

pub fn save_dataset(ds: &Dataset, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(f))
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            num_classes: 4,
            per_class_train: 5,
            per_class_eval: 3,
            input_dim: 6,
            class_separation: 1.0,
            noise_sigma: 0.3,
        }
    }

    fn to_bytes(ds: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = gen_synthetic(&small(), 9).unwrap();
        let (c, d) = gen_synthetic(&small(), 9).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&c));
        assert_eq!(to_bytes(&b), to_bytes(&d));
        let (e, _) = gen_synthetic(&small(), 10).unwrap();
        assert_ne!(to_bytes(&a), to_bytes(&e));
    }

    #[test]
    fn vanishing_noise_collapses_to_centers() {
        let p = SynthParams {
            noise_sigma: 1e-300,
            ..small()
        };
        let (train, _) = gen_synthetic(&p, 1).unwrap();
        for class in 0..p.num_classes {
            let xs: Vec<_> = train
                .samples()
                .iter()
                .filter(|s| s.label == class)
                .collect();
            for s in &xs {
                assert_eq!(s.x, xs[0].x);
            }
            let r = crate::linalg::norm(&xs[0].x);
            assert!((r - p.class_separation).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_and_labels() {
        let p = SynthParams {
            num_classes: 2,
            per_class_train: 3,
            ..small()
        };
        let (train, eval) = gen_synthetic(&p, 0).unwrap();
        assert_eq!(train.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(eval.len(), 6);
        let train_ids: std::collections::HashSet<_> =
            train.samples().iter().map(|s| s.id).collect();
        assert!(eval.samples().iter().all(|s| !train_ids.contains(&s.id)));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(gen_synthetic(
            &SynthParams {
                noise_sigma: 0.0,
                ..small()
            },
            0
        )
        .is_err());
        assert!(gen_synthetic(
            &SynthParams {
                per_class_eval: 0,
                ..small()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn restrict_partitions() {
        let (train, _) = gen_synthetic(&small(), 2).unwrap();
        assert_eq!(restrict_classes(&train, 4).unwrap(), train);
        let one = restrict_classes(&train, 1).unwrap();
        assert_eq!(one.num_classes(), 1);
        assert!(one.samples().iter().all(|s| s.label == 0));
        assert!(restrict_classes(&train, 0).is_err());
        assert!(restrict_classes(&train, 5).is_err());

        let kept = restrict_classes(&train, 2).unwrap();
        let mut ids: Vec<u64> = kept.samples().iter().map(|s| s.id).collect();
        ids.extend(
            train
                .samples()
                .iter()
                .filter(|s| s.label >= 2)
                .map(|s| s.id),
        );
        ids.sort();
        let all: Vec<u64> = train.samples().iter().map(|s| s.id).collect();
        assert_eq!(ids, all);
        assert!(kept.samples().iter().all(|s| s.label < 2));
    }

    #[test]
    fn round_trip() {
        for seed in 0..5 {
            let (train, eval) = gen_synthetic(&small(), seed).unwrap();
            for ds in [train, eval] {
                let back = read_dataset(&to_bytes(&ds)[..]).unwrap();
                assert_eq!(back, ds);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (train, _) = gen_synthetic(&small(), 0).unwrap();
        let bytes = to_bytes(&train);
        let text = String::from_utf8(bytes).unwrap();
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            read_dataset(cut.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let mid = &text[..text.len() / 2];
        assert!(matches!(
            read_dataset(mid.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let (train, _) = gen_synthetic(&small(), 0).unwrap();
        let text = String::from_utf8(to_bytes(&train))
            .unwrap()
            .replace("version 1", "version 7");
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }
}
