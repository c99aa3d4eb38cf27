//! Subcommand definitions and their drivers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use bisgan_core::gqm::{self, GqmReport};
use bisgan_core::sigdata::{make_domains, synthesize_corpus};
use bisgan_core::spoofbench::{run_bench, train_verifier, ForgerySource, SpoofReport, VerifierMetrics, VerifierPreset};
use bisgan_core::training::{generate, train_observed, Direction, TrainObserver};
use bisgan_core::{Corpus, DomainMode, Label, LossRecord, ModelCheckpoint, SignatureImage, SignatureSample};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{list_pngs, load_corpus, load_image, write_corpus, write_png, Layout};

pub const LOSSES_FILE: &str = "losses.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GQM_FILE: &str = "gqm.json";
pub const SPOOF_JSON: &str = "spoof.json";
pub const SPOOF_CSV: &str = "spoof.csv";
pub const VERIFIERS_FILE: &str = "verifiers.json";

#[derive(Debug, Parser)]
#[command(name = "bisgan", version, about = "Signature forgery synthesis, scoring and spoofing bench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus to the writer/label PNG layout.
    Synth(SynthArgs),
    /// Train the cycle-consistent translation networks.
    Train(TrainArgs),
    /// Translate corpus samples with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generated images against genuine and forged references.
    Gqm(GqmArgs),
    /// Train verifiers and measure how many forgeries they accept.
    Spoofbench(SpoofArgs),
    /// Train the configured verifiers and report held-out metrics.
    VerifyTrain(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(seed) = self.seed.or(cfg.seed) {
            cfg.set_seed(seed);
        }
        cfg.to_toml()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("--out DIR is required".into()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Corpus root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub layout: Option<Layout>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.data.root = Some(d.clone());
        }
        if let Some(l) = self.layout {
            cfg.data.layout = l;
        }
    }
}

fn load_configured_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::Usage("no corpus given: pass --data DIR or set data.root".into()))?;
    load_corpus(root, cfg.data.layout, cfg.generator.resolution)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub writers: Option<usize>,
    #[arg(long)]
    pub genuine: Option<usize>,
    #[arg(long)]
    pub forged: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Standard,
    Paradigm,
}

impl From<ModeArg> for DomainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => DomainMode::Standard,
            ModeArg::Paradigm => DomainMode::Paradigm,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    AToB,
    BToA,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
}

#[derive(Debug, Clone, Args)]
pub struct GqmArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// One generated image.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub image: Option<PathBuf>,
    /// A flat folder of generated images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Restrict the reference sets to one writer.
    #[arg(long)]
    pub writer: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SpoofArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Flat folder of forgeries; repeat for several sources.
    #[arg(long = "source", required = true)]
    pub sources: Vec<PathBuf>,
    /// Verifier presets to train, overriding the configured list.
    #[arg(long = "verifier")]
    pub verifiers: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "verifier")]
    pub verifiers: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Gqm(a) => cmd_gqm(&a),
        Command::Spoofbench(a) => cmd_spoofbench(&a),
        Command::VerifyTrain(a) => cmd_verify_train(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut cfg = args.common.resolve()?;
    let seed = cfg.global_seed();
    let s = &mut cfg.synth;
    s.writers = args.writers.unwrap_or(s.writers);
    s.genuine_per_writer = args.genuine.unwrap_or(s.genuine_per_writer);
    s.forged_per_writer = args.forged.unwrap_or(s.forged_per_writer);
    s.resolution = args.resolution.unwrap_or(s.resolution);
    let corpus = synthesize_corpus(seed, s.writers, s.genuine_per_writer, s.forged_per_writer, s.resolution)?;
    let files = write_corpus(&corpus, out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} images for {} writers to {}", files.len(), cfg.synth.writers, out.display());
    Ok(())
}

/// Streams loss records and checkpoints into a run directory.
struct RunWriter {
    dir: PathBuf,
    losses: BufWriter<File>,
    total_steps: u64,
    error: Option<Error>,
}

impl RunWriter {
    fn fail(&mut self, e: Error) -> ControlFlow<()> {
        self.error.get_or_insert(e);
        ControlFlow::Break(())
    }
}

impl TrainObserver for RunWriter {
    fn on_record(&mut self, r: &LossRecord) -> ControlFlow<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(self.losses, "{line}").and_then(|_| self.losses.flush()) {
            let path = self.dir.join(LOSSES_FILE);
            return self.fail(Error::io(path, e));
        }
        if r.step % 10 == 0 || r.step == self.total_steps {
            eprintln!(
                "step {}/{}  gen {:.4}  disc_a {:.4}  disc_b {:.4}  cycle {:.4}",
                r.step, self.total_steps, r.loss_gen_total, r.loss_disc_a, r.loss_disc_b, r.loss_cycle
            );
        }
        if self.error.is_some() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    fn on_checkpoint(&mut self, cp: &ModelCheckpoint) {
        let path = self.dir.join(format!("ckpt_{}", cp.step));
        if let Err(e) = save_checkpoint(cp, &path) {
            self.error.get_or_insert(e);
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut cfg = args.common.resolve()?;
    args.data.apply(&mut cfg);
    let t = &mut cfg.train;
    if let Some(m) = args.mode {
        t.mode = m.into();
    }
    t.steps = args.steps.unwrap_or(t.steps);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lr = args.lr.unwrap_or(t.lr);
    t.checkpoint_every = args.checkpoint_every.unwrap_or(t.checkpoint_every);
    cfg.train.validate()?;
    let corpus = load_configured_corpus(&cfg)?;
    let bundle = make_domains(&corpus, cfg.train.mode)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let losses_path = out.join(LOSSES_FILE);
    let losses = File::create(&losses_path).map_err(|e| Error::io(&losses_path, e))?;
    let mut writer = RunWriter {
        dir: out.to_path_buf(),
        losses: BufWriter::new(losses),
        total_steps: cfg.train.steps,
        error: None,
    };
    let (cp, records) = train_observed(&bundle, &cfg.generator, &cfg.discriminator, &cfg.train, &mut writer)?;
    if let Some(e) = writer.error {
        return Err(e);
    }
    println!(
        "trained {} steps in {:?} mode; final checkpoint {}",
        records.len(),
        cfg.train.mode,
        out.join(format!("ckpt_{}", cp.step)).display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ManifestItem {
    pub file: String,
    pub source_index: usize,
    pub source_writer: String,
    pub source_label: Label,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub config_digest: String,
    pub mode: DomainMode,
    pub direction: Direction,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut cfg = args.common.resolve()?;
    args.data.apply(&mut cfg);
    if let Some(n) = args.count {
        cfg.generate.count = n;
    }
    if let Some(d) = args.direction {
        cfg.generate.direction = match d {
            DirectionArg::AToB => Direction::AToB,
            DirectionArg::BToA => Direction::BToA,
        };
    }
    let cp = if args.common.config.is_some() {
        load_checkpoint_for(&args.checkpoint, &cfg.digest())?
    } else {
        load_checkpoint(&args.checkpoint)?
    };
    // Sources are read at the checkpoint's resolution, whatever the config says.
    cfg.generator = cp.generator.clone();
    let corpus = load_configured_corpus(&cfg)?;
    let bundle = make_domains(&corpus, cp.mode)?;
    let pool = match cfg.generate.direction {
        Direction::AToB => &bundle.domain_a,
        Direction::BToA => &bundle.domain_b,
    };
    let count = cfg.generate.count;
    if count == 0 || count > pool.len() {
        return Err(Error::Usage(format!("--count must be between 1 and {} (source domain size)", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.global_seed());
    let picks = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    let sources: Vec<SignatureSample> = picks.iter().map(|&i| pool[i].clone()).collect();
    let images = generate(&cp, &sources, cfg.generate.direction)?;
    create_dir(out)?;
    let mut items = Vec::with_capacity(count);
    for (k, (img, (&i, src))) in images.iter().zip(picks.iter().zip(&sources)).enumerate() {
        let file = format!("gen_{k:04}.png");
        write_png(&out.join(&file), img)?;
        items.push(ManifestItem {
            file,
            source_index: i,
            source_writer: src.writer_id.clone(),
            source_label: src.label,
        });
    }
    let manifest = Manifest {
        checkpoint: args.checkpoint.clone(),
        step: cp.step,
        config_digest: hex::encode(cp.config_digest),
        mode: cp.mode,
        direction: cfg.generate.direction,
        seed: cfg.global_seed(),
        items,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    cfg.write_resolved(out)?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct GqmRow {
    pub file: String,
    #[serde(flatten)]
    pub report: GqmReport,
}

#[derive(Debug, Serialize)]
pub struct GqmSummary {
    pub rows: Vec<GqmRow>,
    pub n_images: usize,
    pub mean_score_genuine: f64,
    pub mean_score_forged: f64,
    pub grade_o: usize,
    pub grade_f: usize,
}

fn reference_sets(corpus: &Corpus, writer: Option<&str>) -> (Vec<SignatureImage>, Vec<SignatureImage>) {
    let pick = |label| {
        corpus
            .with_label(label)
            .filter(|s| writer.map_or(true, |w| s.writer_id == w))
            .map(|s| s.image.clone())
            .collect()
    };
    (pick(Label::Genuine), pick(Label::Forged))
}

pub fn cmd_gqm(args: &GqmArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.data.apply(&mut cfg);
    let corpus = load_configured_corpus(&cfg)?;
    let (genuine, forged) = reference_sets(&corpus, args.writer.as_deref());
    let res = cfg.generator.resolution;
    let json = if let Some(path) = &args.image {
        let img = load_image(path, res)?;
        let report = gqm::evaluate(&img, &genuine, &forged, &cfg.gqm)?;
        serde_json::to_value(&report)
    } else {
        let dir = args.images.as_deref().expect("clap requires --image or --images");
        let files = list_pngs(dir)?;
        if files.is_empty() {
            return Err(Error::Usage(format!("{} holds no PNG files", dir.display())));
        }
        let mut rows = Vec::with_capacity(files.len());
        for f in &files {
            let img = load_image(f, res)?;
            rows.push(GqmRow {
                file: f.file_name().unwrap().to_string_lossy().into_owned(),
                report: gqm::evaluate(&img, &genuine, &forged, &cfg.gqm)?,
            });
        }
        let n = rows.len() as f64;
        let grade_o = rows.iter().filter(|r| r.report.grade == gqm::Grade::O).count();
        let summary = GqmSummary {
            n_images: rows.len(),
            mean_score_genuine: rows.iter().map(|r| r.report.score_genuine).sum::<f64>() / n,
            mean_score_forged: rows.iter().map(|r| r.report.score_forged).sum::<f64>() / n,
            grade_o,
            grade_f: rows.len() - grade_o,
            rows,
        };
        serde_json::to_value(&summary)
    }
    .expect("report serializes");
    if let Some(out) = &args.common.out {
        create_dir(out)?;
        write_json(&out.join(GQM_FILE), &json)?;
        cfg.write_resolved(out)?;
    }
    println!("{}", serde_json::to_string_pretty(&json).expect("report serializes"));
    Ok(())
}

fn apply_presets(cfg: &mut RunConfig, names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Ok(());
    }
    let template = cfg.verifiers.first().cloned();
    cfg.verifiers = names
        .iter()
        .map(|n| {
            let preset = VerifierPreset::parse(n)?;
            Ok(match &template {
                Some(t) => bisgan_core::spoofbench::VerifierConfig { preset, ..t.clone() },
                None => bisgan_core::spoofbench::VerifierConfig::new(preset, cfg.global_seed()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(())
}

/// Reads every source folder, reporting all unreadable ones together.
pub fn load_sources(dirs: &[PathBuf], resolution: usize) -> Result<Vec<ForgerySource>> {
    let mut sources = Vec::new();
    let mut bad = Vec::new();
    for dir in dirs {
        let files = match list_pngs(dir) {
            Ok(f) if f.is_empty() => {
                bad.push(format!("{}: no PNG files", dir.display()));
                continue;
            }
            Ok(f) => f,
            Err(e) => {
                bad.push(e.to_string());
                continue;
            }
        };
        let mut images = Vec::with_capacity(files.len());
        for f in &files {
            match load_image(f, resolution) {
                Ok(img) => images.push(img),
                Err(e) => bad.push(e.to_string()),
            }
        }
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        sources.push(ForgerySource { name, images });
    }
    if bad.is_empty() {
        Ok(sources)
    } else {
        Err(Error::BadSources(bad))
    }
}

#[derive(Debug, Serialize)]
pub struct VerifierSummary {
    pub name: String,
    pub preset: VerifierPreset,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub confusion: [[usize; 2]; 2],
}

#[derive(Debug, Serialize)]
pub struct SpoofOutput {
    pub verifiers: Vec<VerifierSummary>,
    pub reports: Vec<SpoofReport>,
}

fn summarize(name: &str, cfg: &bisgan_core::spoofbench::VerifierConfig, m: &VerifierMetrics) -> VerifierSummary {
    VerifierSummary {
        name: name.to_string(),
        preset: cfg.preset,
        seed: cfg.seed,
        epochs: cfg.epochs,
        accuracy: m.accuracy,
        precision: m.precision,
        confusion: m.confusion,
    }
}

pub fn write_spoof_csv(path: &Path, reports: &[SpoofReport]) -> Result<()> {
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["source", "verifier", "n_forgeries", "accepted", "success_rate", "verifier_seed", "corpus_tag"])
        .map_err(io_err)?;
    for r in reports {
        for (name, rate) in &r.per_verifier {
            w.write_record([
                r.source.clone(),
                name.clone(),
                r.n_forgeries.to_string(),
                r.accepted[name].to_string(),
                rate.to_string(),
                r.verifier_seeds[name].to_string(),
                r.corpus_tag.clone(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_spoofbench(args: &SpoofArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut cfg = args.common.resolve()?;
    args.data.apply(&mut cfg);
    apply_presets(&mut cfg, &args.verifiers)?;
    let sources = load_sources(&args.sources, cfg.generator.resolution)?;
    let corpus = load_configured_corpus(&cfg)?;
    let outcome = run_bench(corpus.samples(), corpus.seed(), &cfg.verifiers, &sources)?;
    create_dir(out)?;
    let output = SpoofOutput {
        verifiers: outcome.verifiers.iter().map(|v| summarize(&v.name, &v.config, &v.metrics)).collect(),
        reports: outcome.reports,
    };
    write_json(&out.join(SPOOF_JSON), &output)?;
    write_spoof_csv(&out.join(SPOOF_CSV), &output.reports)?;
    cfg.write_resolved(out)?;
    for r in &output.reports {
        for (name, rate) in &r.per_verifier {
            println!("{:<24} {:<12} {:>6.1}% ({}/{})", r.source, name, rate, r.accepted[name], r.n_forgeries);
        }
    }
    Ok(())
}

pub fn cmd_verify_train(args: &VerifyArgs) -> Result<()> {
    let out = args.common.out_dir()?;
    let mut cfg = args.common.resolve()?;
    args.data.apply(&mut cfg);
    apply_presets(&mut cfg, &args.verifiers)?;
    let corpus = load_configured_corpus(&cfg)?;
    let mut summaries = Vec::with_capacity(cfg.verifiers.len());
    for v in &cfg.verifiers {
        let (_, m) = train_verifier(corpus.samples(), v)?;
        println!("{:<12} accuracy {:.4}  precision {:.4}", v.preset.name(), m.accuracy, m.precision);
        summaries.push(summarize(v.preset.name(), v, &m));
    }
    create_dir(out)?;
    write_json(&out.join(VERIFIERS_FILE), &summaries)?;
    cfg.write_resolved(out)?;
    Ok(())
}
