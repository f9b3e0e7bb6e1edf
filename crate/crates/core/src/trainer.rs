//! Two-phase update scenario: train the old model on the old classes,
//! average its features into class prototypes, train the new model under a
//! chosen objective, and extract inference features from the backbone only.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{parse_f64_list, Dataset};
use crate::error::{numeric, parse_at_line, structural, Error, Result};
use crate::linalg::Matrix;
use crate::losses::{LossBreakdown, LossSpec, Mode};
use crate::nn::{
    adam_step, backward, AdamConfig, AdamState, Backbone, Classifier, Dense, OrthoLayer,
};
use crate::retrieval::{FeatureRecord, FeatureStore};

const PROTOTYPES_MAGIC: &str = "oca-prototypes";
pub const PROTOTYPES_VERSION: u32 = 1;
/// Rows embedded at once during feature extraction.
const EXTRACT_CHUNK: usize = 1024;

// RNG stream ids; new-role streams are offset so an old and a new model
// built from the same seed never share an initialization.
const STREAM_BACKBONE: u64 = 0;
const STREAM_CLASSIFIER: u64 = 1;
const STREAM_ORTHO: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const NEW_ROLE_OFFSET: u64 = 16;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_ortho_init_scale() -> f64 {
    0.01
}

/// Training hyperparameters shared by the old and new runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Compatible embedding dimension (the old model's output size).
    pub d_old: usize,
    /// Extra dimensions appended by the OCA modes.
    pub d_extra: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_bct: f64,
    pub mode: Mode,
    /// Hidden layer widths between the input and the embedding.
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Half-width of the uniform initialization of the skew parameters.
    #[serde(default = "default_ortho_init_scale")]
    pub ortho_init_scale: f64,
    /// Initialize the new backbone from the old one instead of from scratch.
    #[serde(default)]
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            d_old: 16,
            d_extra: 4,
            lambda1: 10.0,
            lambda2: 5.0,
            lambda_bct: 1.0,
            mode: Mode::Oca,
            hidden_dims: vec![64, 64],
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            ortho_init_scale: default_ortho_init_scale(),
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(structural("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(structural("batch_size must be >= 1"));
        }
        if self.d_old == 0 {
            return Err(structural("d_old must be >= 1"));
        }
        if self.mode.is_oca() && self.d_extra == 0 {
            return Err(structural(format!("mode {} needs d_extra >= 1", self.mode)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(structural("hidden_dims must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(structural(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(structural("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(structural("eps must be finite and > 0"));
        }
        if !(self.ortho_init_scale.is_finite() && self.ortho_init_scale >= 0.0) {
            return Err(structural("ortho_init_scale must be finite and >= 0"));
        }
        self.loss_spec().validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            mode: self.mode,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_bct: self.lambda_bct,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Output size of the new backbone under the configured mode.
    pub fn new_embedding_dim(&self) -> usize {
        if self.mode.is_oca() {
            self.d_old + self.d_extra
        } else {
            self.d_old
        }
    }

    pub fn layer_dims(&self, input_dim: usize, embedding_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(embedding_dim);
        dims
    }
}

/// Which side of the update a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Old,
    New,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Old => "old",
            Role::New => "new",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "old" => Ok(Role::Old),
            "new" => Ok(Role::New),
            _ => Err(structural(format!("unknown role `{s}`"))),
        }
    }
}

/// Per-class mean old-model features, one row per class of the new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    vectors: Matrix,
    counts: Vec<usize>,
}

impl Prototypes {
    pub fn new(vectors: Matrix, counts: Vec<usize>) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(structural("prototypes need at least one class and one dim"));
        }
        if counts.len() != vectors.rows() {
            return Err(structural(format!(
                "{} counts for {} prototype rows",
                counts.len(),
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(numeric("prototype matrix has non-finite values"));
        }
        Ok(Self { vectors, counts })
    }

    /// Prototypes given directly, each counted as one sample.
    pub fn from_matrix(vectors: Matrix) -> Result<Self> {
        let n = vectors.rows();
        Self::new(vectors, vec![1; n])
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

pub fn write_prototypes<W: Write>(p: &Prototypes, mut w: W) -> Result<()> {
    writeln!(w, "{PROTOTYPES_MAGIC}")?;
    writeln!(w, "version {PROTOTYPES_VERSION}")?;
    writeln!(w, "classes {}", p.num_classes())?;
    writeln!(w, "dim {}", p.dim())?;
    for (c, row) in p.vectors.row_iter().enumerate() {
        write!(w, "{c},{}", p.counts[c])?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prototypes<R: BufRead>(r: R) -> Result<Prototypes> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let header = |i: usize, key: &str| -> Result<&str> {
        let line = lines
            .get(i)
            .ok_or_else(|| parse_at_line(i + 1, "unexpected end of file"))?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::trim)
            .ok_or_else(|| parse_at_line(i + 1, format!("expected `{key} <value>`")))
    };
    if lines.first().map(|l| l.trim()) != Some(PROTOTYPES_MAGIC) {
        return Err(parse_at_line(
            1,
            format!("expected `{PROTOTYPES_MAGIC}` header"),
        ));
    }
    let num = |i: usize, key: &str| -> Result<usize> {
        header(i, key)?
            .parse()
            .map_err(|_| parse_at_line(i + 1, format!("invalid `{key}`")))
    };
    let version = num(1, "version")? as u32;
    if version != PROTOTYPES_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "prototypes",
            found: version,
            expected: PROTOTYPES_VERSION,
        });
    }
    let classes = num(2, "classes")?;
    let dim = num(3, "dim")?;
    let body: Vec<(usize, &String)> = lines
        .iter()
        .enumerate()
        .skip(4)
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != classes {
        return Err(parse_at_line(
            lines.len() + 1,
            format!("header declares {classes} classes, file has {}", body.len()),
        ));
    }
    let mut data = Vec::with_capacity(classes * dim);
    let mut counts = Vec::with_capacity(classes);
    for (expected, (i, line)) in body.into_iter().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 2 {
            return Err(parse_at_line(i + 1, format!("expected {} fields", dim + 2)));
        }
        if parts[0].trim().parse::<usize>().ok() != Some(expected) {
            return Err(parse_at_line(i + 1, format!("expected class {expected}")));
        }
        counts.push(
            parts[1]
                .trim()
                .parse()
                .map_err(|_| parse_at_line(i + 1, "invalid count"))?,
        );
        data.extend(parse_f64_list(i + 1, &parts[2..])?);
    }
    Prototypes::new(Matrix::new(classes, dim, data)?, counts)
}

pub fn save_prototypes(p: &Prototypes, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_prototypes(p, std::io::BufWriter::new(f))
}

pub fn load_prototypes(path: &Path) -> Result<Prototypes> {
    read_prototypes(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Mean loss over one epoch, weighted by batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Orthogonality defect of `Q` at the end of the epoch.
    pub ortho_defect: Option<f64>,
}

/// Trained model plus the training-only parts (orthogonal layer and
/// classifier) that inference ignores.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub role: Role,
    /// Objective the model was trained with; `independent` for old models.
    pub mode: Mode,
    pub backbone: Backbone,
    pub ortho: Option<OrthoLayer>,
    pub classifier: Classifier,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

impl ModelBundle {
    pub fn d_old(&self) -> usize {
        self.config.d_old
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    pub fn final_loss(&self) -> Option<LossBreakdown> {
        self.history.last().map(|r| r.loss)
    }
}

fn stream_rng(seed: u64, role: Role, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = if role == Role::New {
        NEW_ROLE_OFFSET
    } else {
        0
    };
    rng.set_stream(stream + offset);
    rng
}

fn gather(inputs: &Matrix, labels: &[usize], idx: &[usize]) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(idx.len() * inputs.cols());
    for &i in idx {
        data.extend_from_slice(inputs.row(i));
    }
    let x = Matrix::new(idx.len(), inputs.cols(), data).expect("sized above");
    (x, idx.iter().map(|&i| labels[i]).collect())
}

struct Trainable {
    backbone: Backbone,
    ortho: Option<OrthoLayer>,
    classifier: Classifier,
}

impl Trainable {
    fn tensor_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for l in self.backbone.layers() {
            sizes.push(l.weight.as_slice().len());
            sizes.push(l.bias.len());
        }
        if let Some(o) = &self.ortho {
            sizes.push(o.params().values().len());
        }
        sizes.push(self.classifier.weight().as_slice().len());
        sizes
    }
}

/// Mini-batch Adam over `dataset` (already in canonical id order).
fn fit(
    model: &mut Trainable,
    dataset: &Dataset,
    prototypes: Option<&Prototypes>,
    spec: &LossSpec,
    cfg: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let inputs = dataset.inputs();
    let labels = dataset.labels();
    let n = labels.len();
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.tensor_sizes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = gather(&inputs, &labels, idx);
            let (_, cache) = model.backbone.forward(&x)?;
            let (loss, grads) = backward(
                &model.backbone,
                &cache,
                model.ortho.as_ref(),
                &model.classifier,
                prototypes,
                &y,
                spec,
                1.0,
            )?;
            if !loss.total.is_finite() {
                return Err(numeric(format!("loss became non-finite in epoch {epoch}")));
            }
            epoch_loss.accumulate(&loss, idx.len() as f64 / n as f64);

            let grad_slices = grads.slices();
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(grad_slices.len());
            for Dense { weight, bias } in model.backbone.layers_mut() {
                params.push(weight.as_mut_slice());
                params.push(bias.as_mut_slice());
            }
            if let Some(o) = model.ortho.as_mut() {
                params.push(o.params_mut());
            }
            params.push(model.classifier.weight_mut().as_mut_slice());
            adam_step(&mut params, &grad_slices, &mut state, &adam)?;
            if let Some(o) = model.ortho.as_mut() {
                o.refresh()?;
            }
        }
        let ortho_defect = match &model.ortho {
            Some(o) => Some(crate::linalg::orthogonality_defect(o.q())?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            ortho_defect,
        });
    }
    Ok(history)
}

/// Trains the old model with plain cross-entropy on its classes.
pub fn train_old(config: &TrainConfig, dataset_old: &Dataset) -> Result<ModelBundle> {
    let mut cfg = config.clone();
    // the old model never uses the expanded space
    cfg.mode = Mode::Independent;
    cfg.validate()?;
    if dataset_old.is_empty() {
        return Err(structural("old training set is empty"));
    }
    let data = dataset_old.sorted_by_id();
    let dims = cfg.layer_dims(data.input_dim(), cfg.d_old);
    let backbone =
        Backbone::init_with(&dims, &mut stream_rng(cfg.seed, Role::Old, STREAM_BACKBONE))?;
    let classifier = Classifier::random(
        data.num_classes(),
        cfg.d_old,
        &mut stream_rng(cfg.seed, Role::Old, STREAM_CLASSIFIER),
    )?;
    let mut model = Trainable {
        backbone,
        ortho: None,
        classifier,
    };
    let history = fit(
        &mut model,
        &data,
        None,
        &cfg.loss_spec(),
        &cfg,
        &mut stream_rng(cfg.seed, Role::Old, STREAM_SHUFFLE),
    )?;
    Ok(ModelBundle {
        role: Role::Old,
        mode: Mode::Independent,
        backbone: model.backbone,
        ortho: None,
        classifier: model.classifier,
        config: config.clone(),
        history,
    })
}

/// Row `y` is the mean old-model feature over the samples labeled `y`.
pub fn compute_prototypes(model_old: &ModelBundle, dataset_new: &Dataset) -> Result<Prototypes> {
    let d = model_old.d_old();
    if model_old.embedding_dim() < d {
        return Err(structural("old model embeds fewer than d_old dims"));
    }
    let feats = model_old.backbone.embed(&dataset_new.inputs())?;
    let c = dataset_new.num_classes();
    let mut sums = Matrix::zeros(c, d);
    let mut counts = vec![0usize; c];
    for (s, f) in dataset_new.samples().iter().zip(feats.row_iter()) {
        counts[s.label] += 1;
        for (acc, v) in sums.row_mut(s.label).iter_mut().zip(&f[..d]) {
            *acc += v;
        }
    }
    if let Some(y) = counts.iter().position(|&n| n == 0) {
        return Err(structural(format!(
            "class {y} has no samples for its prototype"
        )));
    }
    for (y, &n) in counts.iter().enumerate() {
        sums.row_mut(y).iter_mut().for_each(|v| *v /= n as f64);
    }
    Prototypes::new(sums, counts)
}

/// Copies the old backbone into a freshly initialized new one; the last
/// layer's first `d_old` rows come from the old model.
fn warm_backbone(fresh: &mut Backbone, old: &Backbone) -> Result<()> {
    let (fd, od) = (fresh.layer_dims(), old.layer_dims());
    if fd.len() != od.len() || fd[..fd.len() - 1] != od[..od.len() - 1] || fd.last() < od.last() {
        return Err(structural(format!("cannot warm-start {fd:?} from {od:?}")));
    }
    let last = fd.len() - 2;
    for (i, (new_l, old_l)) in fresh.layers_mut().iter_mut().zip(old.layers()).enumerate() {
        if i < last {
            *new_l = old_l.clone();
        } else {
            for r in 0..old_l.out_dim() {
                new_l.weight.row_mut(r).copy_from_slice(old_l.weight.row(r));
                new_l.bias[r] = old_l.bias[r];
            }
        }
    }
    Ok(())
}

/// Trains the new model on all classes under `config.mode`.
pub fn train_new(
    config: &TrainConfig,
    dataset_new: &Dataset,
    prototypes: &Prototypes,
) -> Result<ModelBundle> {
    train_new_from(config, dataset_new, Some(prototypes), None)
}

/// As [`train_new`], with an optional old backbone for warm starts.
/// Prototypes may be omitted only in `independent` mode.
pub fn train_new_from(
    config: &TrainConfig,
    dataset_new: &Dataset,
    prototypes: Option<&Prototypes>,
    warm_from: Option<&Backbone>,
) -> Result<ModelBundle> {
    config.validate()?;
    if dataset_new.is_empty() {
        return Err(structural("new training set is empty"));
    }
    let mode = config.mode;
    let protos = if mode.needs_prototypes() {
        let p = prototypes.ok_or_else(|| structural(format!("mode {mode} needs prototypes")))?;
        if p.dim() != config.d_old {
            return Err(structural(format!(
                "prototype dim {} does not match d_old {}",
                p.dim(),
                config.d_old
            )));
        }
        if p.num_classes() != dataset_new.num_classes() {
            return Err(structural(format!(
                "{} prototypes for {} classes",
                p.num_classes(),
                dataset_new.num_classes()
            )));
        }
        Some(p)
    } else {
        None
    };
    let data = dataset_new.sorted_by_id();
    let emb = config.new_embedding_dim();
    let dims = config.layer_dims(data.input_dim(), emb);
    let mut backbone = Backbone::init_with(
        &dims,
        &mut stream_rng(config.seed, Role::New, STREAM_BACKBONE),
    )?;
    match (config.warm_start, warm_from) {
        (true, Some(old)) => warm_backbone(&mut backbone, old)?,
        (true, None) => {
            return Err(Error::Usage(
                "warm_start is set but no old backbone was given".into(),
            ))
        }
        (false, _) => {}
    }
    let classifier = Classifier::random(
        data.num_classes(),
        emb,
        &mut stream_rng(config.seed, Role::New, STREAM_CLASSIFIER),
    )?;
    let ortho = if mode.uses_ortho() {
        Some(OrthoLayer::random(
            emb,
            config.ortho_init_scale,
            &mut stream_rng(config.seed, Role::New, STREAM_ORTHO),
        )?)
    } else {
        None
    };
    let mut model = Trainable {
        backbone,
        ortho,
        classifier,
    };
    let history = fit(
        &mut model,
        &data,
        protos,
        &config.loss_spec(),
        config,
        &mut stream_rng(config.seed, Role::New, STREAM_SHUFFLE),
    )?;
    Ok(ModelBundle {
        role: Role::New,
        mode,
        backbone: model.backbone,
        ortho: model.ortho,
        classifier: model.classifier,
        config: config.clone(),
        history,
    })
}

/// Which part of `h_new` to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    /// All `d_old + d_extra` coordinates.
    Full,
    /// The first `d_old` coordinates.
    Bct,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Full => "full",
            Part::Bct => "bct",
        })
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Part::Full),
            "bct" => Ok(Part::Bct),
            _ => Err(structural(format!("unknown feature part `{s}`"))),
        }
    }
}

/// Embeds `dataset` with the backbone alone. The orthogonal layer and the
/// classifier never touch inference features.
pub fn extract_features(
    bundle: &ModelBundle,
    dataset: &Dataset,
    part: Part,
) -> Result<FeatureStore> {
    let d_old = bundle.d_old();
    let emb = bundle.embedding_dim();
    let cols = match part {
        Part::Full if emb <= d_old => {
            return Err(structural(format!(
                "part=full needs an expanded embedding; this model has only d_old = {d_old} dims"
            )))
        }
        Part::Full => emb,
        Part::Bct => d_old,
    };
    if dataset.input_dim() != bundle.backbone.input_dim() {
        return Err(structural(format!(
            "dataset input dim {} does not match model input dim {}",
            dataset.input_dim(),
            bundle.backbone.input_dim()
        )));
    }
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(EXTRACT_CHUNK) {
        let rows: Vec<&[f64]> = chunk.iter().map(|s| s.x.as_slice()).collect();
        let feats = bundle.backbone.embed(&Matrix::from_rows(&rows)?)?;
        for (s, f) in chunk.iter().zip(feats.row_iter()) {
            records.push(FeatureRecord {
                id: s.id,
                label: u32::try_from(s.label).map_err(|_| structural("label exceeds u32"))?,
                feature: f[..cols].to_vec(),
            });
        }
    }
    FeatureStore::new(cols, records)
}

/// One line of the append-only run log.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub final_loss: LossBreakdown,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.final_loss;
        write!(
            f,
            "run={} config={} seed={} total={} ce_new={} ce_proto={} cos_align={}",
            self.run_id, self.config_hash, self.seed, l.total, l.ce_new, l.ce_proto, l.cos_align
        )
    }
}

pub fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{entry}")?;
    Ok(())
}
