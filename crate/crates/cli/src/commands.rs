//! The `oca` subcommands as library functions. Each returns its result
//! instead of printing so tests can drive them directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use oca_core::datagen::{gen_synthetic, load_dataset, restrict_classes, save_dataset, Dataset};
use oca_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use oca_core::retrieval::{
    def1_check, equalize, evaluate, evaluate_cross, load_store, save_store, CompatReport,
    EvalOptions, FeatureStore, PadMode, RetrievalReport,
};
use oca_core::trainer::{
    append_manifest, compute_prototypes, extract_features, load_prototypes, save_prototypes,
    train_new_from, train_old, ManifestEntry, ModelBundle,
};
use oca_core::{Exec, Mode, Part, Role};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, ExperimentConfig};
use crate::error::{CliError, CliResult, Context};

/// File locations under an experiment's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.txt")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data").join("eval.txt")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn old_checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("old.ckpt")
    }

    pub fn prototypes(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("prototypes.txt")
    }

    pub fn new_checkpoint(&self, seed: u64, mode: Mode) -> PathBuf {
        self.seed_dir(seed).join(format!("new-{mode}.ckpt"))
    }

    pub fn store(&self, seed: u64, tag: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("{tag}.eval.ocaf"))
    }

    pub fn report(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("compat-report-{mode}.json"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.log")
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loaded config plus where its artifacts live.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_path: PathBuf,
    pub layout: Layout,
}

impl Experiment {
    pub fn load(config_path: &Path) -> CliResult<Self> {
        let config = config::load(config_path)?;
        let layout = Layout::new(config::output_dir(&config, config_path));
        Ok(Self {
            config,
            config_path: config_path.to_path_buf(),
            layout,
        })
    }

    fn seeds(&self, over: Option<&[u64]>) -> CliResult<Vec<u64>> {
        match over {
            Some([]) => Err(CliError::Usage("--seeds needs at least one seed".into())),
            Some(s) => Ok(s.to_vec()),
            None => Ok(self.config.seeds.clone()),
        }
    }

    fn cmd(&self, rest: &str) -> String {
        format!("oca {rest} --config {}", self.config_path.display())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// `gen-data`: writes the train and eval splits.
pub fn gen_data(exp: &Experiment) -> CliResult<Vec<WrittenFile>> {
    let params = exp.config.data.synth_params();
    let (train, eval) =
        gen_synthetic(&params, exp.config.data.seed).context(|| "generating data".into())?;
    let mut out = Vec::new();
    for (ds, path) in [
        (&train, exp.layout.train_data()),
        (&eval, exp.layout.eval_data()),
    ] {
        ensure_dir(path.parent().expect("data dir"))?;
        save_dataset(ds, &path).context(|| format!("writing {}", path.display()))?;
        out.push(WrittenFile {
            sha256: sha256_file(&path)?,
            path,
        });
    }
    Ok(out)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub manifest: ManifestEntry,
}

fn run_id(role: Role, mode: Mode, seed: u64) -> String {
    match role {
        Role::Old => format!("seed-{seed}/old"),
        Role::New => format!("seed-{seed}/new-{mode}"),
    }
}

fn train_one(
    exp: &Experiment,
    role: Role,
    mode: Mode,
    seed: u64,
    train: &Dataset,
) -> CliResult<TrainOutcome> {
    let layout = &exp.layout;
    ensure_dir(&layout.seed_dir(seed))?;
    let (bundle, path) = match role {
        Role::Old => {
            let cfg = exp.config.train.to_config(seed, Mode::Independent);
            let old_data = restrict_classes(train, exp.config.data.old_classes)
                .context(|| "selecting old classes".into())?;
            let b = train_old(&cfg, &old_data)
                .context(|| format!("training old model (seed {seed})"))?;
            (b, layout.old_checkpoint(seed))
        }
        Role::New => {
            let cfg = exp.config.train.to_config(seed, mode);
            let old_path = layout.old_checkpoint(seed);
            let old =
                load_checkpoint(&old_path).context(|| format!("reading {}", old_path.display()))?;
            let proto_path = layout.prototypes(seed);
            let protos = if proto_path.exists() {
                load_prototypes(&proto_path)
                    .context(|| format!("reading {}", proto_path.display()))?
            } else {
                let p =
                    compute_prototypes(&old, train).context(|| "computing prototypes".into())?;
                save_prototypes(&p, &proto_path)
                    .context(|| format!("writing {}", proto_path.display()))?;
                p
            };
            let warm = cfg.warm_start.then_some(&old.backbone);
            let b = train_new_from(&cfg, train, Some(&protos), warm)
                .context(|| format!("training new model (mode {mode}, seed {seed})"))?;
            (b, layout.new_checkpoint(seed, mode))
        }
    };
    save_checkpoint(&bundle, &path).context(|| format!("writing {}", path.display()))?;
    Ok(TrainOutcome {
        seed,
        checkpoint: path,
        manifest: ManifestEntry {
            run_id: run_id(role, mode, seed),
            config_hash: exp.config.hash(),
            seed,
            final_loss: bundle.final_loss().unwrap_or_default(),
        },
    })
}

/// `train`: fits one model per seed. Seeds run concurrently; manifest lines
/// are appended afterwards in seed order.
pub fn train(
    exp: &Experiment,
    role: Role,
    mode: Option<Mode>,
    seeds: Option<&[u64]>,
) -> CliResult<Vec<TrainOutcome>> {
    let mode = mode.unwrap_or(exp.config.train.mode);
    let seeds = exp.seeds(seeds)?;
    if role == Role::New {
        exp.config
            .train
            .to_config(0, mode)
            .validate()
            .map_err(|e| CliError::Config(format!("`train` with mode {mode}: {e}")))?;
    }
    let layout = &exp.layout;
    let mut missing = Vec::new();
    if !layout.train_data().exists() {
        missing.push(exp.cmd("gen-data"));
    }
    if role == Role::New {
        let absent: Vec<String> = seeds
            .iter()
            .filter(|&&s| !layout.old_checkpoint(s).exists())
            .map(|s| s.to_string())
            .collect();
        if !absent.is_empty() {
            missing.push(exp.cmd(&format!("train --role old --seeds {}", absent.join(","))));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let train = load_data(&layout.train_data())?;
    let results = Exec::default().map_range(seeds.len(), |i| {
        train_one(exp, role, mode, seeds[i], &train)
    });
    let outcomes = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    for o in &outcomes {
        append_manifest(&layout.manifest(), &o.manifest)
            .context(|| "appending to the run manifest".into())?;
    }
    Ok(outcomes)
}

/// `extract`: embeds a dataset with a checkpoint's backbone.
pub fn extract(checkpoint: &Path, data: &Path, part: Part, out: &Path) -> CliResult<FeatureStore> {
    let bundle =
        load_checkpoint(checkpoint).context(|| format!("reading {}", checkpoint.display()))?;
    let ds = load_data(data)?;
    let store =
        extract_features(&bundle, &ds, part).context(|| format!("extracting part={part}"))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_store(&store, out).context(|| format!("writing {}", out.display()))?;
    Ok(store)
}

fn tag_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "store".into())
}

fn write_json<T: Serialize>(value: &T, out: &Path) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(out, text).context(|| format!("writing {}", out.display()))
}

#[derive(Debug, Clone)]
pub struct EvalArgs<'a> {
    pub query: &'a Path,
    pub gallery: &'a Path,
    pub pad: Option<PadMode>,
    pub self_exclusion: bool,
    pub k_list: Vec<usize>,
    pub out: &'a Path,
}

/// `eval`: retrieval metrics of one query store against one gallery store.
pub fn eval(args: &EvalArgs<'_>) -> CliResult<RetrievalReport> {
    let q = load_store(args.query).context(|| format!("reading {}", args.query.display()))?;
    let g = load_store(args.gallery).context(|| format!("reading {}", args.gallery.display()))?;
    let opts = EvalOptions {
        self_exclusion: args.self_exclusion,
        k_list: args.k_list.clone(),
        exec: Exec::default(),
    };
    let report = match (q.dim() == g.dim(), args.pad) {
        (true, _) => evaluate(&q, &g, &opts),
        (false, Some(pad)) => evaluate_cross(&q, &g, pad, &opts),
        (false, None) => {
            return Err(CliError::Usage(format!(
                "query dim {} differs from gallery dim {}; pass --pad zero or --pad truncate",
                q.dim(),
                g.dim()
            )))
        }
    }
    .context(|| "evaluating".into())?
    .tagged(&tag_of(args.query), &tag_of(args.gallery));
    write_json(&report, args.out)?;
    Ok(report)
}

/// One evaluated query/gallery pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub feature_part: Part,
    #[serde(flatten)]
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub cases: Vec<CaseReport>,
    /// pairwise compatibility fractions and ECC verdict for the evaluated method.
    pub compat: CompatReport,
    /// The same check for the independently trained model.
    pub independent_compat: CompatReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMean {
    pub case: String,
    pub padding_mode: String,
    pub map_at_1: f64,
    pub cmc_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub mode: Mode,
    pub padding_mode: PadMode,
    pub seeds: Vec<SeedReport>,
    pub mean: Vec<CaseMean>,
    pub ecc_holds_all_seeds: bool,
    pub mean_same_class_pairs_ok_fraction: f64,
    pub mean_diff_class_pairs_ok_fraction: f64,
}

impl ExperimentReport {
    /// Seed-averaged values of the case with this name and padding mode.
    pub fn mean_of(&self, case: &str, padding_mode: &str) -> Option<&CaseMean> {
        self.mean
            .iter()
            .find(|m| m.case == case && m.padding_mode == padding_mode)
    }
}

pub const CASE_OLD_OLD: &str = "old/old";
pub const CASE_NEW_OLD: &str = "new/old";
pub const CASE_NEW_NEW: &str = "new/new";
pub const CASE_INDEPENDENT_OLD: &str = "independent/old";

fn new_part(mode: Mode) -> Part {
    if mode.is_oca() {
        Part::Full
    } else {
        Part::Bct
    }
}

/// Extracts the eval split with `bundle` and reloads it from disk, so every
/// metric is computed from the stored 32-bit values.
fn stored_features(
    bundle: &ModelBundle,
    eval: &oca_core::datagen::Dataset,
    part: Part,
    path: &Path,
) -> CliResult<FeatureStore> {
    let store = extract_features(bundle, eval, part)
        .context(|| format!("extracting {}", path.display()))?;
    save_store(&store, path).context(|| format!("writing {}", path.display()))?;
    load_store(path).context(|| format!("reading {}", path.display()))
}

fn seed_report(
    exp: &Experiment,
    mode: Mode,
    seed: u64,
    eval_ds: &Dataset,
) -> CliResult<SeedReport> {
    let layout = &exp.layout;
    let ev = &exp.config.eval;
    let load = |p: PathBuf| load_checkpoint(&p).context(|| format!("reading {}", p.display()));
    let old_b = load(layout.old_checkpoint(seed))?;
    let new_b = load(layout.new_checkpoint(seed, mode))?;
    let ind_b = load(layout.new_checkpoint(seed, Mode::Independent))?;
    let new_tag = format!("new-{mode}");
    let old = stored_features(&old_b, eval_ds, Part::Bct, &layout.store(seed, "old"))?;
    let new = stored_features(
        &new_b,
        eval_ds,
        new_part(mode),
        &layout.store(seed, &new_tag),
    )?;
    let ind = stored_features(
        &ind_b,
        eval_ds,
        Part::Bct,
        &layout.store(seed, "new-independent"),
    )?;

    let opts = EvalOptions {
        self_exclusion: ev.self_exclusion,
        k_list: ev.cmc_k.clone(),
        exec: Exec::default(),
    };
    let ctx = |c: &str| format!("evaluating {c} (seed {seed})");
    let case = |name: &str, part: Part, r: RetrievalReport| CaseReport {
        case: name.to_string(),
        feature_part: part,
        report: r,
    };
    let old_old = evaluate(&old, &old, &opts)
        .context(|| ctx(CASE_OLD_OLD))?
        .tagged("old", "old");
    let mut cases = vec![case(CASE_OLD_OLD, Part::Bct, old_old.clone())];
    let mut m_cross = None;
    for pad in [PadMode::Zero, PadMode::Truncate] {
        let mut r = evaluate_cross(&new, &old, pad, &opts)
            .context(|| ctx(CASE_NEW_OLD))?
            .tagged(&new_tag, "old");
        // equal dims need no padding; still record which rule was requested
        if new.dim() == old.dim() {
            r.padding_mode = pad.to_string();
        }
        if pad == ev.padding_mode {
            m_cross = Some(r.map_at_1);
        }
        cases.push(case(CASE_NEW_OLD, new_part(mode), r));
    }
    let new_new = evaluate(&new, &new, &opts)
        .context(|| ctx(CASE_NEW_NEW))?
        .tagged(&new_tag, &new_tag);
    cases.push(case(CASE_NEW_NEW, new_part(mode), new_new));
    let ind_old = evaluate_cross(&ind, &old, ev.padding_mode, &opts)
        .context(|| ctx(CASE_INDEPENDENT_OLD))?
        .tagged("new-independent", "old");
    cases.push(case(CASE_INDEPENDENT_OLD, Part::Bct, ind_old.clone()));

    let compat_of = |store: &FeatureStore, m: f64| -> CliResult<CompatReport> {
        let (n_eq, o_eq) =
            equalize(store, &old, ev.padding_mode).context(|| "equalizing dims".into())?;
        let def1 = def1_check(&o_eq, &n_eq, ev.def1_sample_cap, ev.def1_seed)
            .context(|| format!("pairwise compatibility check (seed {seed})"))?;
        Ok(CompatReport::new(def1, m, old_old.map_at_1))
    };
    Ok(SeedReport {
        seed,
        compat: compat_of(&new, m_cross.expect("configured padding evaluated"))?,
        independent_compat: compat_of(&ind, ind_old.map_at_1)?,
        cases,
    })
}

/// `compat-report`: the four retrieval cases, pairwise compatibility fractions and the ECC
/// verdict for every seed, plus seed means.
pub fn compat_report(
    exp: &Experiment,
    mode: Option<Mode>,
    seeds: Option<&[u64]>,
) -> CliResult<ExperimentReport> {
    let mode = mode.unwrap_or(exp.config.train.mode);
    let seeds = exp.seeds(seeds)?;
    let layout = &exp.layout;
    let mut missing = Vec::new();
    if !layout.eval_data().exists() {
        missing.push(exp.cmd("gen-data"));
    }
    let lacking = |p: &dyn Fn(u64) -> PathBuf| -> Vec<String> {
        seeds
            .iter()
            .filter(|&&s| !p(s).exists())
            .map(|s| s.to_string())
            .collect()
    };
    let old_missing = lacking(&|s| layout.old_checkpoint(s));
    if !old_missing.is_empty() {
        missing.push(exp.cmd(&format!(
            "train --role old --seeds {}",
            old_missing.join(",")
        )));
    }
    let mut modes = vec![mode];
    if mode != Mode::Independent {
        modes.push(Mode::Independent);
    }
    for m in modes {
        let absent = lacking(&|s| layout.new_checkpoint(s, m));
        if !absent.is_empty() {
            missing.push(exp.cmd(&format!(
                "train --role new --mode {m} --seeds {}",
                absent.join(",")
            )));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let eval_ds = load_data(&layout.eval_data())?;
    let per_seed =
        Exec::default().map_range(seeds.len(), |i| seed_report(exp, mode, seeds[i], &eval_ds));
    let seed_reports = per_seed.into_iter().collect::<CliResult<Vec<_>>>()?;

    let n = seed_reports.len() as f64;
    let mut mean: Vec<CaseMean> = Vec::new();
    for (idx, c) in seed_reports[0].cases.iter().enumerate() {
        let (m, k) = seed_reports.iter().fold((0.0, 0.0), |(m, k), s| {
            (
                m + s.cases[idx].report.map_at_1,
                k + s.cases[idx].report.cmc_1,
            )
        });
        mean.push(CaseMean {
            case: c.case.clone(),
            padding_mode: c.report.padding_mode.clone(),
            map_at_1: m / n,
            cmc_1: k / n,
        });
    }
    let report = ExperimentReport {
        config_hash: exp.config.hash(),
        mode,
        padding_mode: exp.config.eval.padding_mode,
        ecc_holds_all_seeds: seed_reports.iter().all(|s| s.compat.ecc_holds),
        mean_same_class_pairs_ok_fraction: seed_reports
            .iter()
            .map(|s| s.compat.same_class_pairs_ok_fraction)
            .sum::<f64>()
            / n,
        mean_diff_class_pairs_ok_fraction: seed_reports
            .iter()
            .map(|s| s.compat.diff_class_pairs_ok_fraction)
            .sum::<f64>()
            / n,
        seeds: seed_reports,
        mean,
    };
    write_json(&report, &layout.report(mode))?;
    Ok(report)
}

/// Human-readable table of a compatibility report.
pub fn render_report<W: Write>(r: &ExperimentReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "mode {}  config {}", r.mode, &r.config_hash[..12])?;
    writeln!(
        w,
        "{:<8} {:<18} {:<9} {:>9} {:>8}",
        "seed", "case", "padding", "mAP@1.0", "CMC-1"
    )?;
    for s in &r.seeds {
        for c in &s.cases {
            writeln!(
                w,
                "{:<8} {:<18} {:<9} {:>9.4} {:>8.4}",
                s.seed, c.case, c.report.padding_mode, c.report.map_at_1, c.report.cmc_1
            )?;
        }
        writeln!(
            w,
            "{:<8} ECC {} (cross {:.4} vs old {:.4}); pairs same {:.4} diff {:.4}",
            s.seed,
            if s.compat.ecc_holds { "holds" } else { "fails" },
            s.compat.m_cross,
            s.compat.m_self_old,
            s.compat.same_class_pairs_ok_fraction,
            s.compat.diff_class_pairs_ok_fraction
        )?;
    }
    for m in &r.mean {
        writeln!(
            w,
            "{:<8} {:<18} {:<9} {:>9.4} {:>8.4}",
            "mean", m.case, m.padding_mode, m.map_at_1, m.cmc_1
        )?;
    }
    writeln!(
        w,
        "ECC on all seeds: {}",
        if r.ecc_holds_all_seeds { "yes" } else { "no" }
    )
}
