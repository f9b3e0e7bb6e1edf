//! Retrieval compatibility evaluation.
//!
//! Feature stores hold labeled embeddings for a gallery or query set.
//! Queries are ranked against the gallery by cosine distance; mAP@1.0 and
//! CMC-k summarize the rankings. Cross-model comparisons first equalize the
//! store dimensions by zero padding or by truncating to the compatible slice.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::parse_f64_list;
use crate::error::{numeric, parse_at_line, structural, Error, Location, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::par::Exec;

pub const STORE_MAGIC: &[u8; 4] = b"OCAF";
pub const STORE_VERSION: u32 = 1;
/// Default pair budget of [`def1_check`].
pub const DEF1_DEFAULT_CAP: u64 = 2_000_000;
const DEF1_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub label: u32,
    pub feature: Vec<f64>,
}

/// Labeled feature vectors of one model on one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureStore {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.feature.len() != dim {
                return Err(structural(format!(
                    "record {} has {} values, store dim is {dim}",
                    r.id,
                    r.feature.len()
                )));
            }
            if !ids.insert(r.id) {
                return Err(structural(format!("duplicate record id {}", r.id)));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(numeric(format!("record {} has non-finite values", r.id)));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy with every value rounded through `f32`, i.e. what a binary
    /// save/load cycle yields.
    pub fn rounded_f32(&self) -> FeatureStore {
        let records = self
            .records
            .iter()
            .map(|r| FeatureRecord {
                feature: r.feature.iter().map(|&v| v as f32 as f64).collect(),
                ..r.clone()
            })
            .collect();
        FeatureStore {
            dim: self.dim,
            records,
        }
    }

    /// Keeps the first `cols` coordinates of each feature.
    pub fn slice(&self, cols: usize) -> Result<FeatureStore> {
        if cols > self.dim {
            return Err(structural(format!(
                "cannot slice {cols} columns from a {}-dim store",
                self.dim
            )));
        }
        let records = self
            .records
            .iter()
            .map(|r| FeatureRecord {
                feature: r.feature[..cols].to_vec(),
                ..r.clone()
            })
            .collect();
        Ok(FeatureStore { dim: cols, records })
    }
}

/// Rule for comparing stores of different dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Extend the shorter store with zeros.
    Zero,
    /// Cut the longer store down to the shorter dimension.
    Truncate,
}

impl fmt::Display for PadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadMode::Zero => "zero",
            PadMode::Truncate => "truncate",
        })
    }
}

impl FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "truncate" => Ok(PadMode::Truncate),
            _ => Err(structural(format!("unknown padding mode `{s}`"))),
        }
    }
}

pub fn zero_pad(store: &FeatureStore, target_dim: usize) -> Result<FeatureStore> {
    if target_dim < store.dim {
        return Err(structural(format!(
            "cannot zero-pad a {}-dim store to {target_dim}",
            store.dim
        )));
    }
    let records = store
        .records
        .iter()
        .map(|r| {
            let mut feature = r.feature.clone();
            feature.resize(target_dim, 0.0);
            FeatureRecord {
                feature,
                ..r.clone()
            }
        })
        .collect();
    Ok(FeatureStore {
        dim: target_dim,
        records,
    })
}

/// Brings both stores to a common dimension.
pub fn equalize(
    queries: &FeatureStore,
    gallery: &FeatureStore,
    mode: PadMode,
) -> Result<(FeatureStore, FeatureStore)> {
    let (q, g) = (queries.dim, gallery.dim);
    Ok(match mode {
        PadMode::Zero => {
            let d = q.max(g);
            (zero_pad(queries, d)?, zero_pad(gallery, d)?)
        }
        PadMode::Truncate => {
            let d = q.min(g);
            (queries.slice(d)?, gallery.slice(d)?)
        }
    })
}

fn unit_rows(store: &FeatureStore) -> Result<Vec<Vec<f64>>> {
    store
        .records
        .iter()
        .map(|r| {
            let n = norm(&r.feature);
            if n == 0.0 {
                Err(numeric(format!("zero-norm feature for record id {}", r.id)))
            } else {
                Ok(r.feature.iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

fn check_dims(a: &FeatureStore, b: &FeatureStore) -> Result<()> {
    if a.dim != b.dim {
        return Err(structural(format!(
            "store dims differ ({} vs {}); equalize them first",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// `1 − cos(q_i, g_j)` for every query/gallery pair.
pub fn cosine_distance_matrix(queries: &FeatureStore, gallery: &FeatureStore) -> Result<Matrix> {
    cosine_distance_matrix_with(queries, gallery, Exec::default())
}

pub fn cosine_distance_matrix_with(
    queries: &FeatureStore,
    gallery: &FeatureStore,
    exec: Exec,
) -> Result<Matrix> {
    check_dims(queries, gallery)?;
    let qn = unit_rows(queries)?;
    let gn = unit_rows(gallery)?;
    let mut out = Matrix::zeros(qn.len(), gn.len());
    exec.for_each_row(out.as_mut_slice(), gn.len(), |i, row| {
        for (d, g) in row.iter_mut().zip(&gn) {
            *d = 1.0 - dot(&qn[i], g);
        }
    });
    Ok(out)
}

/// Average precision of one ranking: the mean of precision@k over the ranks
/// `k` of the relevant items. `None` when the ranking has no relevant item.
pub fn average_precision(ranked_labels: &[u32], query_label: u32) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &l) in ranked_labels.iter().enumerate() {
        if l == query_label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Drop the gallery item whose id equals the query id.
    pub self_exclusion: bool,
    /// CMC cutoffs to report; 1 is always included.
    pub k_list: Vec<usize>,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            self_exclusion: true,
            k_list: vec![1, 5, 10],
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub k: usize,
    pub value: f64,
}

/// Metrics for one query/gallery case. The query model is the one left of
/// the `/` in `case()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map_at_1: f64,
    pub cmc_1: f64,
    pub cmc: Vec<CmcPoint>,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries with no same-label gallery item; excluded from the means.
    pub num_skipped: usize,
    pub self_exclusion: bool,
    pub query_model: String,
    pub gallery_model: String,
    pub padding_mode: String,
}

impl RetrievalReport {
    pub fn tagged(mut self, query_model: &str, gallery_model: &str) -> Self {
        self.query_model = query_model.to_string();
        self.gallery_model = gallery_model.to_string();
        self
    }

    pub fn case(&self) -> String {
        format!("{}/{}", self.query_model, self.gallery_model)
    }
}

struct QueryOutcome {
    ap: Option<f64>,
    first_hit: Option<usize>,
}

fn rank_query(
    qi: usize,
    q: &FeatureRecord,
    dist: &Matrix,
    gallery: &FeatureStore,
    self_exclusion: bool,
) -> QueryOutcome {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(self_exclusion && gallery.records[j].id == q.id))
        .collect();
    let row = dist.row(qi);
    order.sort_by(|&a, &b| {
        row[a]
            .total_cmp(&row[b])
            .then(gallery.records[a].id.cmp(&gallery.records[b].id))
    });
    let ranked: Vec<u32> = order.iter().map(|&j| gallery.records[j].label).collect();
    let ap = average_precision(&ranked, q.label);
    let first_hit = ranked.iter().position(|&l| l == q.label);
    QueryOutcome { ap, first_hit }
}

/// mAP@1.0 and CMC-k of `queries` against `gallery` (equal dims).
///
/// Ties in distance are broken by ascending gallery id. Per-query results
/// are reduced in query order regardless of the execution policy.
pub fn evaluate(
    queries: &FeatureStore,
    gallery: &FeatureStore,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(structural(
            "evaluation needs non-empty query and gallery stores",
        ));
    }
    let dist = cosine_distance_matrix_with(queries, gallery, opts.exec)?;
    let outcomes = opts.exec.map_range(queries.len(), |i| {
        rank_query(i, &queries.records[i], &dist, gallery, opts.self_exclusion)
    });

    let mut ks: Vec<usize> = opts.k_list.iter().copied().filter(|&k| k > 0).collect();
    ks.push(1);
    ks.sort_unstable();
    ks.dedup();

    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut hits = vec![0usize; ks.len()];
    for o in &outcomes {
        let Some(ap) = o.ap else { continue };
        evaluated += 1;
        ap_sum += ap;
        let rank = o.first_hit.expect("a positive exists when AP is defined");
        for (h, &k) in hits.iter_mut().zip(&ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    let cmc: Vec<CmcPoint> = ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| CmcPoint {
            k,
            value: h as f64 / denom,
        })
        .collect();
    Ok(RetrievalReport {
        map_at_1: ap_sum / denom,
        cmc_1: cmc[0].value,
        cmc,
        num_queries: queries.len(),
        num_gallery: gallery.len(),
        num_skipped: queries.len() - evaluated,
        self_exclusion: opts.self_exclusion,
        query_model: "query".into(),
        gallery_model: "gallery".into(),
        padding_mode: "none".into(),
    })
}

/// Equalizes dimensions with `mode` (when they differ) and evaluates.
pub fn evaluate_cross(
    queries: &FeatureStore,
    gallery: &FeatureStore,
    mode: PadMode,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    if queries.dim == gallery.dim {
        return evaluate(queries, gallery, opts);
    }
    let (q, g) = equalize(queries, gallery, mode)?;
    let mut report = evaluate(&q, &g, opts)?;
    report.padding_mode = mode.to_string();
    Ok(report)
}

/// Empirical compatibility criterion: cross-model metric strictly above the
/// old model's self-test metric.
pub fn ecc_check(m_cross: f64, m_self_old: f64) -> bool {
    m_cross > m_self_old
}

/// Pairwise compatibility counts between an old and a new store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Def1Fractions {
    pub same_class_pairs_ok_fraction: f64,
    pub diff_class_pairs_ok_fraction: f64,
    pub same_class_pairs: u64,
    pub diff_class_pairs: u64,
    /// True when pairs were sampled rather than enumerated.
    pub sampled: bool,
}

#[derive(Default, Clone, Copy)]
struct PairCounts {
    same: u64,
    same_ok: u64,
    diff: u64,
    diff_ok: u64,
}

impl PairCounts {
    fn add(&mut self, o: PairCounts) {
        self.same += o.same;
        self.same_ok += o.same_ok;
        self.diff += o.diff;
        self.diff_ok += o.diff_ok;
    }
}

/// Checks the pairwise backward-compatibility inequalities over ordered
/// pairs `i != j`:
/// same class: `d(old_i, new_j) <= d(old_i, old_j)`;
/// different class: `d(old_i, new_j) >= d(old_i, old_j)`;
/// with cosine distance `d`. Beyond `sample_cap` pairs, a seeded uniform
/// sample of `sample_cap` pairs is used instead of enumeration.
pub fn def1_check(
    old: &FeatureStore,
    new: &FeatureStore,
    sample_cap: u64,
    seed: u64,
) -> Result<Def1Fractions> {
    def1_check_with(old, new, sample_cap, seed, Exec::default())
}

pub fn def1_check_with(
    old: &FeatureStore,
    new: &FeatureStore,
    sample_cap: u64,
    seed: u64,
    exec: Exec,
) -> Result<Def1Fractions> {
    check_dims(old, new)?;
    if old.len() != new.len() {
        return Err(structural(format!(
            "stores have {} and {} records",
            old.len(),
            new.len()
        )));
    }
    let pos: HashMap<u64, usize> = new
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id, i))
        .collect();
    let mut new_aligned = Vec::with_capacity(old.len());
    for r in &old.records {
        let j = *pos
            .get(&r.id)
            .ok_or_else(|| structural(format!("id {} missing from the new store", r.id)))?;
        if new.records[j].label != r.label {
            return Err(structural(format!("label mismatch for id {}", r.id)));
        }
        new_aligned.push(j);
    }
    let old_u = unit_rows(old)?;
    let new_all = unit_rows(new)?;
    let new_u: Vec<&Vec<f64>> = new_aligned.iter().map(|&j| &new_all[j]).collect();
    let labels: Vec<u32> = old.records.iter().map(|r| r.label).collect();

    let n = old.len() as u64;
    let total_pairs = n * n.saturating_sub(1);
    let check = |i: usize, j: usize, c: &mut PairCounts| {
        let cross = 1.0 - dot(&old_u[i], new_u[j]);
        let within = 1.0 - dot(&old_u[i], &old_u[j]);
        if labels[i] == labels[j] {
            c.same += 1;
            c.same_ok += u64::from(cross <= within);
        } else {
            c.diff += 1;
            c.diff_ok += u64::from(cross >= within);
        }
    };

    let sampled = total_pairs > sample_cap;
    let parts: Vec<PairCounts> = if !sampled {
        exec.map_range(old.len(), |i| {
            let mut c = PairCounts::default();
            for j in 0..old.len() {
                if i != j {
                    check(i, j, &mut c);
                }
            }
            c
        })
    } else {
        let chunks = sample_cap.div_ceil(DEF1_CHUNK);
        exec.map_range(chunks as usize, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let len = DEF1_CHUNK.min(sample_cap - k as u64 * DEF1_CHUNK);
            let mut c = PairCounts::default();
            for _ in 0..len {
                let i = rng.random_range(0..n) as usize;
                let mut j = rng.random_range(0..n - 1) as usize;
                if j >= i {
                    j += 1;
                }
                check(i, j, &mut c);
            }
            c
        })
    };
    let mut total = PairCounts::default();
    for p in parts {
        total.add(p);
    }
    let frac = |ok: u64, all: u64| {
        if all == 0 {
            1.0
        } else {
            ok as f64 / all as f64
        }
    };
    Ok(Def1Fractions {
        same_class_pairs_ok_fraction: frac(total.same_ok, total.same),
        diff_class_pairs_ok_fraction: frac(total.diff_ok, total.diff),
        same_class_pairs: total.same,
        diff_class_pairs: total.diff,
        sampled,
    })
}

/// Compatibility summary for one old/new model pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatReport {
    pub same_class_pairs_ok_fraction: f64,
    pub diff_class_pairs_ok_fraction: f64,
    pub same_class_pairs: u64,
    pub diff_class_pairs: u64,
    pub sampled: bool,
    pub ecc_holds: bool,
    pub m_cross: f64,
    pub m_self_old: f64,
}

impl CompatReport {
    pub fn new(def1: Def1Fractions, m_cross: f64, m_self_old: f64) -> Self {
        Self {
            same_class_pairs_ok_fraction: def1.same_class_pairs_ok_fraction,
            diff_class_pairs_ok_fraction: def1.diff_class_pairs_ok_fraction,
            same_class_pairs: def1.same_class_pairs,
            diff_class_pairs: def1.diff_class_pairs,
            sampled: def1.sampled,
            ecc_holds: ecc_check(m_cross, m_self_old),
            m_cross,
            m_self_old,
        }
    }
}

/// Binary store format: magic, version, dim, count, then `(id, label,
/// dim x f32)` per record, all little-endian.
pub fn write_store<W: Write>(store: &FeatureStore, mut w: W) -> Result<()> {
    let dim = u32::try_from(store.dim).map_err(|_| structural("store dim exceeds u32"))?;
    w.write_all(STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(store.records.len() as u64).to_le_bytes())?;
    for r in &store.records {
        w.write_all(&r.id.to_le_bytes())?;
        w.write_all(&r.label.to_le_bytes())?;
        for &v in &r.feature {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                location: Location::Offset(self.pos as u64),
                message: format!("truncated store: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn decode_binary(bytes: &[u8]) -> Result<FeatureStore> {
    let mut c = ByteCursor { bytes, pos: 0 };
    if c.take(4)? != STORE_MAGIC {
        return Err(Error::Parse {
            location: Location::Offset(0),
            message: "missing OCAF magic".into(),
        });
    }
    let version = c.u32()?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "feature store",
            found: version,
            expected: STORE_VERSION,
        });
    }
    let dim = c.u32()? as usize;
    let count = c.u64()?;
    let record_bytes = 12 + 4 * dim as u64;
    let remaining = (bytes.len() - c.pos) as u64;
    if count.checked_mul(record_bytes) != Some(remaining) {
        return Err(Error::Parse {
            location: Location::Offset(c.pos as u64),
            message: format!(
                "header declares {count} records of {record_bytes} bytes, {remaining} bytes follow"
            ),
        });
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = c.u64()?;
        let label = c.u32()?;
        let feature = (0..dim)
            .map(|_| c.f32().map(f64::from))
            .collect::<Result<_>>()?;
        records.push(FeatureRecord { id, label, feature });
    }
    FeatureStore::new(dim, records)
}

/// Line-delimited text alternative: `id,label,v1,...,vd` per line; blank
/// lines and `#` comments are ignored.
pub fn read_store_text<R: BufRead>(r: R) -> Result<FeatureStore> {
    let mut records = Vec::new();
    let mut dim = None;
    for (k, line) in r.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split(',').collect();
        if parts.len() < 3 {
            return Err(parse_at_line(line_no, "expected `id,label,values...`"));
        }
        let d = *dim.get_or_insert(parts.len() - 2);
        if parts.len() - 2 != d {
            return Err(parse_at_line(
                line_no,
                format!("expected {d} values, found {}", parts.len() - 2),
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
        let feature = parse_f64_list(line_no, &parts[2..])?;
        records.push(FeatureRecord { id, label, feature });
    }
    let dim = dim.ok_or_else(|| parse_at_line(1, "feature store text has no records"))?;
    FeatureStore::new(dim, records)
}

pub fn write_store_text<W: Write>(store: &FeatureStore, mut w: W) -> Result<()> {
    for r in &store.records {
        write!(w, "{},{}", r.id, r.label)?;
        for v in &r.feature {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes either format, detected by the magic bytes.
pub fn decode_store(bytes: &[u8]) -> Result<FeatureStore> {
    if bytes.starts_with(STORE_MAGIC) {
        decode_binary(bytes)
    } else {
        read_store_text(bytes)
    }
}

pub fn save_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_store(store, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<FeatureStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_store(&bytes)
}
