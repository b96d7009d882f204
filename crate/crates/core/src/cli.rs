//! The `nodx` command line.
//!
//! Exit codes: 0 success, 1 usage error (nothing written), 2 data error,
//! 3 internal error.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{concat_features, save_forest, train_forest, DEFAULT_TREES};
use crate::consensus::{build_consensus, build_cohort, write_cohort_csv, CohortRow, Design, Mask3D};
use crate::eval::{
    export_report, hex, labeled, parse_models, run_design, run_reduced_training, DataItem, EvalConfig, EvalReport,
    ModelKind, ReducedMode,
};
use crate::ingest::{parse_annotations_with_warnings, parse_volume, CtVolume};
use crate::nn::{
    build_network, extract_cnn_features, load_weights, save_weights, train, write_train_log, Arch, TrainConfig,
};
use crate::patchset::{
    extract_patch, normalize_patch, read_container, write_container, Normalization, PatchSet,
};
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::qif::{auto_segment, compute_features, read_feature_csv, registry_text, write_feature_csv, FeatureRow};
use crate::{seed, Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const CONSENSUS_FILE: &str = "consensus.json";
pub const QIF_FILE: &str = "qif.csv";

#[derive(Debug, Parser)]
#[command(name = "nodx", version, about = "Lung-nodule malignancy pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct GlobalArgs {
    /// Global seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 forces the sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_normalization)]
    pub normalization: Option<Normalization>,
    #[arg(long, global = true, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    /// Operating point for acc/sens/spc.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub balance: Option<OnOff>,
    /// CNN training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Trees per random forest.
    #[arg(long, global = true)]
    pub trees: Option<usize>,
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_design(s: &str) -> std::result::Result<Design, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<ReducedMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic CT studies.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Input validation.
    Ingest {
        #[command(subcommand)]
        cmd: IngestCmd,
    },
    /// Reader consensus and cohorts.
    Consensus {
        #[command(subcommand)]
        cmd: ConsensusCmd,
    },
    /// CNN input patches.
    Patches {
        #[command(subcommand)]
        cmd: PatchesCmd,
    },
    /// Quantitative image features.
    Qif {
        #[command(subcommand)]
        cmd: QifCmd,
    },
    /// CNN training and feature extraction.
    Cnn {
        #[command(subcommand)]
        cmd: CnnCmd,
    },
    /// CNN+QIF fusion.
    Fuse {
        #[command(subcommand)]
        cmd: FuseCmd,
    },
    /// Experiments.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Report rendering.
    Report {
        #[command(subcommand)]
        cmd: ReportCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    Gen {
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        benign: usize,
        #[arg(long, default_value_t = 1)]
        malignant: usize,
        #[arg(long, default_value_t = 1)]
        non_nodules: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    Check {
        /// Directory of `.rawct`/`.xml` pairs, or a single file.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConsensusCmd {
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a labeled cohort for this design.
        #[arg(long, value_parser = parse_design)]
        design: Option<Design>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PatchesCmd {
    Extract {
        /// Consensus directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `<in>/patches_<arch>.ndx1`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum QifCmd {
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `<in>/qif.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CnnCmd {
    Train {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long, value_parser = parse_design)]
        design: Option<Design>,
        #[arg(long)]
        out: PathBuf,
    },
    Features {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FuseCmd {
    TrainRf {
        /// Consensus directory (ratings and patients).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Defaults to `<in>/qif.csv`.
        #[arg(long)]
        qif: Option<PathBuf>,
        #[arg(long, value_parser = parse_design)]
        design: Option<Design>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    Run {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_design)]
        design: Option<Design>,
        /// Comma-separated: cnn21, cnn21+rf, cnn47, cnn47+rf, lm, rf, rf_no_size.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        qif: Option<PathBuf>,
        /// NDX1 patch files; default `<in>/patches_<arch>.ndx1` for needed archs.
        #[arg(long)]
        patches: Vec<PathBuf>,
        /// Defaults to `<in>/eval_<design>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Reduced {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_design)]
        design: Option<Design>,
        #[arg(long, value_parser = parse_model)]
        model: ModelKind,
        #[arg(long, value_parser = parse_mode)]
        mode: ReducedMode,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long)]
        qif: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings loadable from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub design: Option<String>,
    pub models: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub balance: Option<bool>,
    pub normalization: Option<String>,
    pub arch: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub augment: Option<bool>,
    pub n_trees: Option<usize>,
    pub train_fraction: Option<f64>,
}

/// Flags merged over the config file over defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub threads: Option<usize>,
    pub normalization: Normalization,
    pub arch: Arch,
    pub design: Option<Design>,
    pub models: Option<Vec<ModelKind>>,
    pub eval: EvalConfig,
}

impl Resolved {
    pub fn from_args(g: &GlobalArgs) -> Result<Self> {
        let file = match &g.config {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_slice::<ConfigFile>(&bytes)
                    .map_err(|e| Error::InvalidInput(format!("config {}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let d = EvalConfig::default();
        let train = TrainConfig {
            epochs: g.epochs.or(file.epochs).unwrap_or(d.train.epochs),
            batch_size: file.batch_size.unwrap_or(d.train.batch_size),
            learning_rate: file.learning_rate.unwrap_or(d.train.learning_rate),
            momentum: file.momentum.unwrap_or(d.train.momentum),
            augment: file.augment.unwrap_or(d.train.augment),
            ..d.train.clone()
        };
        let eval = EvalConfig {
            train,
            n_trees: g.trees.or(file.n_trees).unwrap_or(DEFAULT_TREES),
            threshold: g.threshold.or(file.threshold).unwrap_or(d.threshold),
            balance: g
                .balance
                .map(|b| b == OnOff::On)
                .or(file.balance)
                .unwrap_or(d.balance),
            train_fraction: file.train_fraction.unwrap_or(d.train_fraction),
        };
        let normalization = match (g.normalization, &file.normalization) {
            (Some(n), _) => n,
            (None, Some(s)) => s.parse()?,
            (None, None) => Normalization::default(),
        };
        let arch = match (g.arch, &file.arch) {
            (Some(a), _) => a,
            (None, Some(s)) => s.parse()?,
            (None, None) => Arch::Cnn21,
        };
        let design = file.design.as_deref().map(str::parse).transpose()?;
        let models = file
            .models
            .as_ref()
            .map(|v| v.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Resolved {
            seed: g.seed.or(file.seed).unwrap_or(0),
            threads: g.threads,
            normalization,
            arch,
            design,
            models,
            eval,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
}

#[derive(Default)]
pub struct RunLog {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunLog {
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs
            .insert(path.display().to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }
}

/// Writes `bytes` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(log: &mut RunLog, path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    log.output(path);
    Ok(())
}

/// On-disk consensus: per patient, the volume path, nodules with RLE masks,
/// and merged non-nodule loci.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusFile {
    pub patients: Vec<ConsensusPatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusPatient {
    pub patient_id: String,
    pub volume: PathBuf,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub nodules: Vec<ConsensusEntry>,
    pub non_nodules: Vec<LocusEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub nodule_uid: String,
    pub rating: u8,
    pub centroid: [f64; 3],
    pub n_readers: usize,
    pub runs: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocusEntry {
    pub locus_id: String,
    pub position: [f64; 3],
    pub n_readers: usize,
}

/// Every candidate item in a consensus file: (item id, patient, rating, center).
pub fn consensus_items(c: &ConsensusFile) -> Vec<(String, String, u8, [f64; 3])> {
    let mut v = Vec::new();
    for p in &c.patients {
        for n in &p.nodules {
            v.push((n.nodule_uid.clone(), p.patient_id.clone(), n.rating, n.centroid));
        }
        for l in &p.non_nodules {
            v.push((l.locus_id.clone(), p.patient_id.clone(), 0, l.position));
        }
    }
    v
}

pub fn read_consensus(dir: &Path, log: &mut RunLog) -> Result<ConsensusFile> {
    let path = dir.join(CONSENSUS_FILE);
    log.input(&path)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn annotation_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut xmls: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    xmls.sort();
    if xmls.is_empty() {
        return Err(Error::InvalidInput(format!("no .xml annotations in {}", dir.display())));
    }
    Ok(xmls
        .into_iter()
        .map(|x| (x.with_extension("rawct"), x))
        .collect())
}

/// Entry point shared by the binary and the tests.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let resolved = match Resolved::from_args(&cli.global) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(resolved.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("internal error: {e}");
            return EXIT_INTERNAL;
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        pool.install(|| dispatch(&cli.command, &resolved, &argv))
    }));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(_) => {
            eprintln!("internal error: panic");
            EXIT_INTERNAL
        }
    }
}

pub fn main() -> ! {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    std::process::exit(run(std::env::args()))
}

fn finish(out_dir: &Path, name: &str, argv: &[String], r: &Resolved, log: RunLog) -> Result<()> {
    create_dir(out_dir)?;
    let m = RunManifest {
        command: argv.to_vec(),
        config: serde_json::to_value(r)?,
        input_hashes: log.inputs,
        outputs: log.outputs,
        seed: r.seed,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let path = out_dir.join(format!("run_manifest_{name}.json"));
    write_atomic(&path, &serde_json::to_vec_pretty(&m)?)
}

fn need_design(flag: Option<Design>, r: &Resolved) -> Result<Design> {
    flag.or(r.design)
        .ok_or_else(|| Error::InvalidInput("--design is required".into()))
}

fn dispatch(cmd: &Command, r: &Resolved, argv: &[String]) -> Result<()> {
    let mut log = RunLog::default();
    match cmd {
        Command::Phantom {
            cmd:
                PhantomCmd::Gen {
                    patients,
                    out,
                    benign,
                    malignant,
                    non_nodules,
                },
        } => {
            let cfg = PhantomConfig {
                n_patients: *patients,
                benign_per_patient: *benign,
                malignant_per_patient: *malignant,
                non_nodules_per_patient: *non_nodules,
                seed: r.seed,
                ..PhantomConfig::default()
            };
            let m = generate_phantom(&cfg, out)?;
            for p in &m.patients {
                log.output(&out.join(&p.volume));
                log.output(&out.join(&p.annotations));
            }
            log.output(&out.join("manifest.json"));
            log::info!("{} patients, {} nodules written to {}", m.patients.len(), m.nodules.len(), out.display());
            finish(out, "phantom_gen", argv, r, log)
        }
        Command::Ingest {
            cmd: IngestCmd::Check { input },
        } => ingest_check(input),
        Command::Consensus {
            cmd: ConsensusCmd::Build { input, out, design },
        } => {
            consensus_cmd(input, out, design.or(r.design), r, &mut log)?;
            finish(out, "consensus_build", argv, r, log)
        }
        Command::Patches {
            cmd: PatchesCmd::Extract { input, out },
        } => {
            let out = out
                .clone()
                .unwrap_or_else(|| input.join(format!("patches_{}.ndx1", r.arch)));
            let c = read_consensus(input, &mut log)?;
            let set = extract_patch_set(&c, r.arch, r.normalization)?;
            write_container(&set, &out)?;
            log.output(&out);
            log::info!("{} patches ({}) written to {}", set.patches.len(), r.arch, out.display());
            finish(parent_dir(&out), "patches_extract", argv, r, log)
        }
        Command::Qif {
            cmd: QifCmd::Extract { input, out },
        } => {
            let out = out.clone().unwrap_or_else(|| input.join(QIF_FILE));
            let c = read_consensus(input, &mut log)?;
            let rows = extract_qif_rows(&c)?;
            let mut buf = Vec::new();
            write_feature_csv(&mut buf, &rows)?;
            write_file(&mut log, &out, &buf)?;
            let sidecar = out.with_extension("registry.tsv");
            write_file(&mut log, &sidecar, registry_text().as_bytes())?;
            log::info!("{} feature rows written to {}", rows.len(), out.display());
            finish(parent_dir(&out), "qif_extract", argv, r, log)
        }
        Command::Cnn {
            cmd: CnnCmd::Train { patches, design, out },
        } => {
            let design = need_design(*design, r)?;
            log.input(patches)?;
            let all = read_container(patches)?;
            let arch = arch_for_shape(all.shape())?;
            let mut set = PatchSet::new(design.name(), all.normalization);
            for mut p in all.patches {
                if let Some(l) = design.label_for_rating(p.label.clamp(0, 5) as u8) {
                    p.label = l.as_u8() as i32;
                    set.patches.push(p);
                }
            }
            let cfg = TrainConfig {
                seed: seed::sub_seed(r.seed, &format!("train/{arch}")),
                ..r.eval.train.clone()
            };
            let model = build_network(arch, seed::sub_seed(r.seed, &format!("{}/{arch}", seed::INIT)));
            let outcome = train(model, &set, &cfg)?;
            create_dir(out)?;
            let cp = &outcome.checkpoints;
            let final_path = out.join("final.ndxw");
            save_weights(&cp.final_model, &final_path, Some(cp.final_epoch), Some(cp.final_heldout_loss))?;
            log.output(&final_path);
            for (k, s) in cp.best.iter().enumerate() {
                let p = out.join(format!("best_{}.ndxw", k + 1));
                save_weights(&s.model, &p, Some(s.epoch), Some(s.heldout_loss))?;
                log.output(&p);
            }
            let mut buf = Vec::new();
            write_train_log(&mut buf, &outcome.log)?;
            write_file(&mut log, &out.join("train_log.csv"), &buf)?;
            finish(out, "cnn_train", argv, r, log)
        }
        Command::Cnn {
            cmd: CnnCmd::Features { patches, weights, out },
        } => {
            log.input(patches)?;
            log.input(weights)?;
            let set = read_container(patches)?;
            let model = load_weights(weights)?;
            let feats = extract_cnn_features(&model, &set)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["item_id".to_string()];
            header.extend((0..crate::nn::FEATURE_UNITS).map(|i| format!("cnn_{i:03}")));
            w.write_record(&header)?;
            for (p, f) in set.patches.iter().zip(&feats) {
                let mut rec = vec![p.item_id.clone()];
                rec.extend(f.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            let buf = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
            write_file(&mut log, out, &buf)?;
            finish(parent_dir(out), "cnn_features", argv, r, log)
        }
        Command::Fuse {
            cmd:
                FuseCmd::TrainRf {
                    input,
                    features,
                    qif,
                    design,
                    out,
                },
        } => {
            let design = need_design(*design, r)?;
            let c = read_consensus(input, &mut log)?;
            let qif_path = qif.clone().unwrap_or_else(|| input.join(QIF_FILE));
            let qif = read_qif_map(&qif_path, &mut log)?;
            log.input(features)?;
            let cnn = read_cnn_features(features)?;
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for (id, _, rating, _) in consensus_items(&c) {
                let (Some(l), Some(f), Some(q)) = (design.label_for_rating(rating), cnn.get(&id), qif.get(&id)) else {
                    continue;
                };
                x.push(concat_features(f, q)?);
                y.push(l.as_u8());
            }
            let forest = train_forest(&x, &y, r.eval.n_trees, seed::sub_seed(r.seed, seed::FOREST))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_forest(&forest, out)?;
            log.output(out);
            finish(parent_dir(out), "fuse_train_rf", argv, r, log)
        }
        Command::Eval {
            cmd:
                EvalCmd::Run {
                    input,
                    design,
                    models,
                    qif,
                    patches,
                    out,
                },
        } => {
            let design = need_design(*design, r)?;
            let models = match (models, &r.models) {
                (Some(s), _) => parse_models(s)?,
                (None, Some(m)) => m.clone(),
                (None, None) => vec![ModelKind::Cnn21, ModelKind::Cnn21Rf, ModelKind::Lm],
            };
            let out = out
                .clone()
                .unwrap_or_else(|| input.join(format!("eval_{}", design.name())));
            let items = load_data_items(input, qif.as_deref(), patches, &models, &mut log)?;
            let report = run_design(design, &models, &items, &r.eval, r.seed)?;
            for row in &report.rows {
                log::info!(
                    "{} {}: auc {:.3} acc {:.3} sens {:.3} spc {:.3}",
                    report.design,
                    row.model,
                    row.auc,
                    row.acc,
                    row.sens,
                    row.spc
                );
            }
            create_dir(&out)?;
            let rp = out.join("report.json");
            write_file(&mut log, &rp, &serde_json::to_vec_pretty(&report)?)?;
            for p in export_report(&report, &out)? {
                log.output(&p);
            }
            finish(&out, "eval_run", argv, r, log)
        }
        Command::Eval {
            cmd:
                EvalCmd::Reduced {
                    input,
                    design,
                    model,
                    mode,
                    trials,
                    qif,
                    out,
                },
        } => {
            let design = need_design(*design, r)?;
            let items = load_data_items(input, qif.as_deref(), &[], &[*model], &mut log)?;
            let res = run_reduced_training(design, *model, *mode, *trials, &items, &r.eval, r.seed)?;
            log::info!(
                "{} {} {:?}: mean acc {:.3} over {} trial(s)",
                res.design,
                res.model,
                res.mode,
                res.mean_acc,
                res.trials.len()
            );
            create_dir(out)?;
            let stem = format!("reduced_{}_{}", model.name(), serde_json::to_value(mode)?.as_str().unwrap_or("mode"));
            write_file(&mut log, &out.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&res)?)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for t in &res.trials {
                w.serialize(t)?;
            }
            let buf = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
            write_file(&mut log, &out.join(format!("{stem}.csv")), &buf)?;
            finish(out, "eval_reduced", argv, r, log)
        }
        Command::Report {
            cmd: ReportCmd::Export { report, out },
        } => {
            log.input(report)?;
            let bytes = fs::read(report).map_err(|e| Error::io(report, e))?;
            let rep: EvalReport = serde_json::from_slice(&bytes)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", report.display())))?;
            for p in export_report(&rep, out)? {
                log.output(&p);
            }
            finish(out, "report_export", argv, r, log)
        }
    }
}

fn parent_dir(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

// Closed pipes are not an error for a report.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn ingest_check(input: &Path) -> Result<()> {
    let pairs = if input.is_dir() {
        annotation_pairs(input)?
    } else if input.extension().is_some_and(|x| x == "xml") {
        vec![(input.with_extension("rawct"), input.to_path_buf())]
    } else {
        let v = parse_volume(input)?;
        say(&format!("{}: volume {:?} spacing {:?}", v.patient_id, v.dims, v.spacing_mm));
        return Ok(());
    };
    for (vpath, xpath) in pairs {
        let bytes = fs::read(&xpath).map_err(|e| Error::io(&xpath, e))?;
        let (set, warnings) = parse_annotations_with_warnings(&bytes)?;
        let mut line = format!(
            "{}: {} session(s), {} nodule reading(s), {} non-nodule mark(s)",
            set.patient_id,
            set.sessions.len(),
            set.nodule_readings().count(),
            set.non_nodule_loci().count()
        );
        if vpath.exists() {
            let v = parse_volume(&vpath)?;
            set.validate_bounds(v.dims)?;
            line.push_str(&format!(", volume {:?}", v.dims));
        }
        say(&format!("{line}, {} warning(s)", warnings.len()));
        for w in warnings {
            say(&format!("  warning: {w}"));
        }
    }
    Ok(())
}

fn consensus_cmd(input: &Path, out: &Path, design: Option<Design>, r: &Resolved, log: &mut RunLog) -> Result<()> {
    let pairs = annotation_pairs(input)?;
    let mut file = ConsensusFile { patients: Vec::new() };
    let mut rows: Vec<CohortRow> = Vec::new();
    let mut loci_rows = Vec::new();
    let mut all_nodules = Vec::new();
    let mut all_loci = Vec::new();
    for (vpath, xpath) in pairs {
        log.input(&xpath)?;
        log.input(&vpath)?;
        let bytes = fs::read(&xpath).map_err(|e| Error::io(&xpath, e))?;
        let (set, warnings) = parse_annotations_with_warnings(&bytes)?;
        for w in warnings {
            log::warn!("{}: {w}", xpath.display());
        }
        let vol = parse_volume(&vpath)?;
        let (nodules, loci) = build_consensus(&set, vol.dims, vol.spacing_mm)?;
        for n in &nodules {
            rows.push(CohortRow {
                nodule_uid: n.nodule_uid.clone(),
                patient_id: n.patient_id.clone(),
                design: "all".into(),
                label: "unlabeled".into(),
                rating: n.rating,
                centroid_x: n.centroid[0],
                centroid_y: n.centroid[1],
                centroid_z: n.centroid[2],
            });
        }
        for l in &loci {
            loci_rows.push(l.clone());
        }
        file.patients.push(ConsensusPatient {
            patient_id: set.patient_id.clone(),
            volume: vpath.clone(),
            dims: vol.dims,
            spacing_mm: vol.spacing_mm,
            nodules: nodules
                .iter()
                .map(|n| ConsensusEntry {
                    nodule_uid: n.nodule_uid.clone(),
                    rating: n.rating,
                    centroid: n.centroid,
                    n_readers: n.member_readings.len(),
                    runs: n.consensus_mask.to_runs(),
                })
                .collect(),
            non_nodules: loci
                .iter()
                .map(|l| LocusEntry {
                    locus_id: l.locus_id.clone(),
                    position: l.position,
                    n_readers: l.n_readers,
                })
                .collect(),
        });
        all_nodules.extend(nodules);
        all_loci.extend(loci);
    }
    create_dir(out)?;
    let mut buf = Vec::new();
    write_cohort_csv(&mut buf, &rows)?;
    write_file(log, &out.join("consensus.csv"), &buf)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in &loci_rows {
        w.write_record([
            l.locus_id.clone(),
            l.patient_id.clone(),
            l.position[0].to_string(),
            l.position[1].to_string(),
            l.position[2].to_string(),
            l.n_readers.to_string(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut nn = b"locus_id,patient_id,x,y,z,n_readers\n".to_vec();
    nn.extend(body);
    write_file(log, &out.join("non_nodules.csv"), &nn)?;
    write_file(log, &out.join(CONSENSUS_FILE), &serde_json::to_vec(&file)?)?;
    if let Some(d) = design {
        let cohort = build_cohort(&all_nodules, &all_loci, d, r.eval.balance, seed::sub_seed(r.seed, seed::COHORT))?;
        let rows: Vec<CohortRow> = cohort.iter().map(|c| c.to_row(d)).collect();
        let mut buf = Vec::new();
        write_cohort_csv(&mut buf, &rows)?;
        write_file(log, &out.join(format!("cohort_{}.csv", d.name())), &buf)?;
    }
    log::info!("{} consensus nodules, {} non-nodule loci", rows.len(), loci_rows.len());
    Ok(())
}

fn arch_for_shape(shape: [usize; 3]) -> Result<Arch> {
    [Arch::Cnn21, Arch::Cnn47]
        .into_iter()
        .find(|a| a.patch_shape() == shape)
        .ok_or_else(|| Error::ShapeMismatch(format!("no architecture takes {shape:?} patches")))
}

fn load_volume_cached<'a>(cache: &'a mut HashMap<PathBuf, CtVolume>, path: &Path) -> Result<&'a CtVolume> {
    if !cache.contains_key(path) {
        cache.clear();
        cache.insert(path.to_path_buf(), parse_volume(path)?);
    }
    Ok(&cache[path])
}

/// Patches for every nodule and non-nodule locus; labels carry the
/// consensus rating (0 for non-nodules).
pub fn extract_patch_set(c: &ConsensusFile, arch: Arch, norm: Normalization) -> Result<PatchSet> {
    let mut set = PatchSet::new("all", norm);
    let mut cache = HashMap::new();
    for p in &c.patients {
        let vol = load_volume_cached(&mut cache, &p.volume)?;
        let (lo, hi) = vol.min_max_hu();
        let centers = p
            .nodules
            .iter()
            .map(|n| (&n.nodule_uid, n.rating, n.centroid))
            .chain(p.non_nodules.iter().map(|l| (&l.locus_id, 0, l.position)));
        for (id, rating, center) in centers {
            let raw = extract_patch(vol, center, arch.patch_shape())?;
            set.patches
                .push(normalize_patch(&raw, norm, lo as f64, hi as f64, id.clone(), rating as i32)?);
        }
    }
    Ok(set)
}

/// QIF rows: consensus masks for nodules, auto-segmentation for loci.
pub fn extract_qif_rows(c: &ConsensusFile) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    let mut cache = HashMap::new();
    for p in &c.patients {
        let vol = load_volume_cached(&mut cache, &p.volume)?;
        for n in &p.nodules {
            let mask = Mask3D::from_runs(p.dims, &n.runs)?;
            rows.push(FeatureRow {
                item_id: n.nodule_uid.clone(),
                patient_id: p.patient_id.clone(),
                features: compute_features(vol, &mask)?,
            });
        }
        for l in &p.non_nodules {
            match auto_segment(vol, l.position).and_then(|m| compute_features(vol, &m)) {
                Ok(features) => rows.push(FeatureRow {
                    item_id: l.locus_id.clone(),
                    patient_id: p.patient_id.clone(),
                    features,
                }),
                Err(e) => log::warn!("{}: no features ({e})", l.locus_id),
            }
        }
    }
    Ok(rows)
}

fn read_qif_map(path: &Path, log: &mut RunLog) -> Result<HashMap<String, Vec<f64>>> {
    log.input(path)?;
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_feature_csv(f)?
        .into_iter()
        .map(|r| (r.item_id, r.features.into_values()))
        .collect())
}

fn read_cnn_features(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(f);
    let mut map = HashMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad value {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        map.insert(rec[0].to_string(), vals);
    }
    Ok(map)
}

/// Joins consensus items with QIF rows and patch files.
pub fn load_data_items(
    dir: &Path,
    qif: Option<&Path>,
    patches: &[PathBuf],
    models: &[ModelKind],
    log: &mut RunLog,
) -> Result<Vec<DataItem>> {
    let c = read_consensus(dir, log)?;
    let needs_qif = models.iter().any(|m| m.arch().is_none() || m.name().ends_with("+rf"));
    let qif_path = qif.map(Path::to_path_buf).unwrap_or_else(|| dir.join(QIF_FILE));
    let qif = if needs_qif || qif_path.exists() {
        read_qif_map(&qif_path, log)?
    } else {
        HashMap::new()
    };
    let mut patch_files: Vec<PathBuf> = patches.to_vec();
    if patch_files.is_empty() {
        let mut archs: Vec<Arch> = models.iter().filter_map(|m| m.arch()).collect();
        archs.dedup();
        patch_files = archs
            .iter()
            .map(|a| dir.join(format!("patches_{a}.ndx1")))
            .collect();
    }
    let mut p21 = HashMap::new();
    let mut p47 = HashMap::new();
    for path in &patch_files {
        log.input(path)?;
        let set = read_container(path)?;
        let target = match arch_for_shape(set.shape())? {
            Arch::Cnn21 => &mut p21,
            Arch::Cnn47 => &mut p47,
        };
        for p in set.patches {
            target.insert(p.item_id.clone(), p.values.iter().map(|&v| v as f64).collect::<Vec<f64>>());
        }
    }
    Ok(consensus_items(&c)
        .into_iter()
        .map(|(id, patient_id, rating, _)| DataItem {
            qif: qif.get(&id).cloned(),
            patch21: p21.remove(&id),
            patch47: p47.remove(&id),
            item_id: id,
            patient_id,
            rating,
        })
        .collect())
}

/// Number of design-labeled items available in a consensus directory.
pub fn labeled_count(items: &[DataItem], design: Design) -> usize {
    labeled(items, design).0.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["nodx", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["nodx", "eval", "run"]), EXIT_USAGE);
        assert_eq!(run(["nodx", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_file_and_flags_merge() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"seed": 5, "threshold": 0.3, "epochs": 7, "balance": false}"#).unwrap();
        let cli = Cli::try_parse_from([
            "nodx",
            "--config",
            cfg.to_str().unwrap(),
            "--threshold",
            "0.6",
            "report",
            "export",
            "--report",
            "r.json",
            "--out",
            "o",
        ])
        .unwrap();
        let r = Resolved::from_args(&cli.global).unwrap();
        assert_eq!(r.seed, 5);
        assert_eq!(r.eval.threshold, 0.6);
        assert_eq!(r.eval.train.epochs, 7);
        assert!(!r.eval.balance);
        fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
        assert!(Resolved::from_args(&cli.global).is_err());
    }

    #[test]
    fn data_error_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert_eq!(
            run(["nodx", "consensus", "build", "--in", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]),
            EXIT_DATA
        );
    }
}
