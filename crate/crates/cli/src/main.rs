//! `zsar`: the pipeline driver. Every stage reads and writes the JSON
//! artifacts defined in the core crate, so stages can be re-run, diffed,
//! and swapped out individually. One command is one process; all
//! randomness inside a command flows from one explicit seed.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use zsar_core::attention::{build_mask, AttentionScheme, SequenceLayout};
use zsar_core::data::{Dataset, RepresentationItem, RepresentationSet};
use zsar_core::embeddings::{to_embedding_file, EmbeddingFile, WordVectorTable};
use zsar_core::encoder::{
    load_checkpoint, represent, save_checkpoint, train, write_log_csv, ModelParams, Vocabulary,
};
use zsar_core::eval::{
    classify, hubness_skewness, run_split_protocol, write_assignments_csv, ProtocolSettings,
};
use zsar_core::synth::generate;
use zsar_core::transfer::{
    build_seen_prototypes, cv_select_params_on_grid, transfer_prototypes, CvGrid, PrototypeFile,
    TransferOutput, TransferParams,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "zsar", version, about = "Zero-shot action recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic compositional dataset plus word vectors
    Synth(SynthArgs),
    /// Average word vectors into one embedding per class label
    EmbedLabels(EmbedLabelsArgs),
    /// Train the encoder on a seen-class dataset
    Train(TrainArgs),
    /// Encode every instance of a dataset with a trained checkpoint
    Represent(RepresentArgs),
    /// Average representations into per-class prototypes
    Prototypes(PrototypesArgs),
    /// Compose unseen prototypes from seen ones by semantic relatedness
    Transfer(TransferArgs),
    /// Run the repeated-split zero-shot evaluation protocol
    Eval(EvalArgs),
    /// Count nearest-neighbour assignments per prototype and their skewness
    Hubness(HubnessArgs),
    /// Print an attention mask as a 0/1 grid
    MaskDump(MaskDumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration with a `synth` section (seed required)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for train.json, test.json, vectors.txt and labels
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedLabelsArgs {
    /// Word vector table (text format: optional count/dim header, then one
    /// token and its values per line)
    #[arg(long)]
    vectors: PathBuf,
    /// JSON array of class labels, index = class id
    #[arg(long)]
    labels: PathBuf,
    /// Label embedding JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Seen-class training dataset JSON
    #[arg(long)]
    data: PathBuf,
    /// Run configuration with `encoder` (seed required) and `training`
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss/accuracy CSV
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RepresentArgs {
    /// Trained checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSON to encode
    #[arg(long)]
    data: PathBuf,
    /// Representation set JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrototypesArgs {
    /// Representation set JSON of seen-class instances
    #[arg(long)]
    reps: PathBuf,
    /// Prototype JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Seen-class prototypes JSON
    #[arg(long)]
    protos: PathBuf,
    /// Seen label embeddings JSON
    #[arg(long)]
    seen_emb: PathBuf,
    /// Unseen label embeddings JSON
    #[arg(long)]
    unseen_emb: PathBuf,
    /// Pruning threshold in (0, 1]
    #[arg(long)]
    theta: Option<f64>,
    /// Nearest seen classes kept per unseen class
    #[arg(long)]
    k: Option<usize>,
    /// Seen classes combined per unseen class
    #[arg(long)]
    rho: Option<usize>,
    /// Pick theta/k/rho by cross-validation over the seen classes instead
    #[arg(long, conflicts_with_all = ["theta", "k", "rho"], requires = "reps", requires = "seed")]
    cv: bool,
    /// Seen-class representations for the cross-validation folds
    #[arg(long)]
    reps: Option<PathBuf>,
    /// Fold shuffle seed for --cv
    #[arg(long)]
    seed: Option<u64>,
    /// JSON grid file overriding the built-in search space (axes theta, k,
    /// rho; missing axes keep their defaults)
    #[arg(long, requires = "cv")]
    grid: Option<PathBuf>,
    /// Optional run configuration supplying defaults for theta/k/rho
    #[arg(long)]
    config: Option<PathBuf>,
    /// Composite prototypes with selection provenance, JSON
    #[arg(long)]
    out: PathBuf,
    /// Also write the composites in plain prototype form, ready for
    /// `hubness --protos`
    #[arg(long)]
    protos_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Representation set JSON of unseen-class test instances
    #[arg(long)]
    reps: PathBuf,
    /// Seen-class prototypes JSON
    #[arg(long)]
    seen_protos: PathBuf,
    /// Seen label embeddings JSON
    #[arg(long)]
    seen_emb: PathBuf,
    /// Unseen label embeddings JSON (full set; splits re-index per run)
    #[arg(long)]
    unseen_emb: PathBuf,
    /// Pruning threshold in (0, 1]
    #[arg(long)]
    theta: Option<f64>,
    /// Nearest seen classes kept per unseen class
    #[arg(long)]
    k: Option<usize>,
    /// Seen classes combined per unseen class
    #[arg(long)]
    rho: Option<usize>,
    /// Take theta/k/rho from a transfer output instead of flags
    #[arg(long, conflicts_with_all = ["theta", "k", "rho"])]
    transfer: Option<PathBuf>,
    /// Share of unseen classes per split
    #[arg(long)]
    fraction: Option<f64>,
    /// Number of random splits
    #[arg(long)]
    splits: Option<usize>,
    /// Split shuffle seed
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation: compose from every positively related seen class
    #[arg(long)]
    unconstrained: bool,
    /// Optional run configuration supplying defaults for the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path
    #[arg(long)]
    out: PathBuf,
    /// Report encoding
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Optional per-instance assignment CSV
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct HubnessArgs {
    /// Representation set JSON
    #[arg(long)]
    reps: PathBuf,
    /// Prototype JSON
    #[arg(long)]
    protos: PathBuf,
    /// Count occurrences among the top-k neighbours
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Count/skewness JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskDumpArgs {
    /// Number of visual frame positions
    #[arg(long)]
    t: usize,
    /// Number of word positions
    #[arg(long)]
    words: usize,
    /// Mask policy
    #[arg(long, value_enum)]
    scheme: SchemeArg,
}

#[derive(Copy, Clone, ValueEnum)]
enum SchemeArg {
    /// Visual/[CLS] rows never attend to words; word rows are causal
    Modality,
    /// Every row may attend everywhere words may be seen
    Full,
}

impl From<SchemeArg> for AttentionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Modality => AttentionScheme::ModalitySpecific,
            SchemeArg::Full => AttentionScheme::FullCross,
        }
    }
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::EmbedLabels(args) => cmd_embed_labels(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Represent(args) => cmd_represent(args),
        Cmd::Prototypes(args) => cmd_prototypes(args),
        Cmd::Transfer(args) => cmd_transfer(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Hubness(args) => cmd_hubness(args),
        Cmd::MaskDump(args) => cmd_mask_dump(args),
    }
}

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    let labels: Vec<String> =
        serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))?;
    if labels.is_empty() {
        bail!("label list {} is empty", path.display());
    }
    Ok(labels)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?.synth.materialize()?;
    let out = generate(&config)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    out.train.save(&args.out.join("train.json"))?;
    out.test.save(&args.out.join("test.json"))?;
    std::fs::write(args.out.join("vectors.txt"), out.word_vectors_text())?;
    write_pretty_json(&out.seen_labels, &args.out.join("seen_labels.json"))?;
    write_pretty_json(&out.unseen_labels, &args.out.join("unseen_labels.json"))?;
    println!(
        "wrote {} train and {} test instances ({} seen, {} unseen classes) to {}",
        out.train.instances.len(),
        out.test.instances.len(),
        out.seen_labels.len(),
        out.unseen_labels.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_embed_labels(args: EmbedLabelsArgs) -> Result<()> {
    let table = WordVectorTable::load(&args.vectors)?;
    let labels = load_labels(&args.labels)?;
    let embeddings = table.embed_labels(&labels)?;
    to_embedding_file(&embeddings)?.save(&args.out)?;
    println!("embedded {} labels into {}", labels.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    let data = Dataset::load(&args.data)?;
    let vocab = Vocabulary::build(&data.labels)?;
    let data_word_len = data
        .labels
        .iter()
        .map(|label| Ok(vocab.encode_label(label)?.len()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(1);
    let config = run.encoder.materialize(
        data.feature_dim,
        vocab.len(),
        data.max_frames().max(1),
        data_word_len,
        data.labels.len(),
    )?;
    let settings = run.training.materialize()?;
    let mut params = ModelParams::init(&config)?;
    let records = train(&mut params, &config, &vocab, &data, &settings)?;
    save_checkpoint(&params, &config, &vocab, &args.out)?;
    if let Some(log_path) = &args.log {
        write_log_csv(&records, log_path)?;
    }
    let last = records.last().expect("at least one epoch");
    println!(
        "trained {} epochs: loss {:.4}, train top-1 {:.3}; checkpoint {}",
        records.len(),
        last.loss_total,
        last.train_top1,
        args.out.display()
    );
    Ok(())
}

fn cmd_represent(args: RepresentArgs) -> Result<()> {
    let (params, config, vocab) = load_checkpoint(&args.model)?;
    let data = Dataset::load(&args.data)?;
    if data.feature_dim != config.input_feature_dim {
        bail!(
            "dataset feature width {} does not match the checkpoint's {}",
            data.feature_dim,
            config.input_feature_dim
        );
    }
    let items = data
        .instances
        .iter()
        .map(|inst| {
            Ok(RepresentationItem {
                id: inst.id.clone(),
                class_id: inst.class_id,
                vector: represent(&params, &config, vocab.mask_id(), &inst.frames)
                    .with_context(|| format!("encoding instance {}", inst.id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reps = RepresentationSet {
        dim: config.hidden_dim,
        labels: data.labels,
        items,
    };
    reps.save(&args.out)?;
    println!("encoded {} instances into {}", reps.items.len(), args.out.display());
    Ok(())
}

fn cmd_prototypes(args: PrototypesArgs) -> Result<()> {
    let reps = RepresentationSet::load(&args.reps)?;
    let protos = build_seen_prototypes(&reps)?;
    protos.save(&args.out)?;
    println!("averaged {} prototypes into {}", protos.entries.len(), args.out.display());
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let protos = PrototypeFile::load(&args.protos)?;
    let seen_emb = EmbeddingFile::load(&args.seen_emb)?.embeddings();
    let unseen_emb = EmbeddingFile::load(&args.unseen_emb)?.embeddings();
    let section = match &args.config {
        Some(path) => RunConfig::load(path)?.transfer,
        None => Default::default(),
    };

    let output = if args.cv {
        let reps_path = args.reps.as_ref().expect("clap enforces --reps with --cv");
        let seed = args.seed.expect("clap enforces --seed with --cv");
        let reps = RepresentationSet::load(reps_path)?;
        let grid = match &args.grid {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading grid {}", path.display()))?;
                serde_json::from_str::<CvGrid>(&text)
                    .with_context(|| format!("parsing grid {}", path.display()))?
            }
            None => CvGrid::default(),
        };
        let cv = cv_select_params_on_grid(&reps, &seen_emb, seed, &grid)?;
        println!(
            "cross-validation picked theta {} k {} rho {}",
            cv.params.theta, cv.params.k, cv.params.rho
        );
        let mut output = transfer_prototypes(&protos, &seen_emb, &unseen_emb, &cv.params)?;
        output.cv_table = Some(cv.table);
        output
    } else {
        let theta = args.theta.or(section.theta);
        let k = args.k.or(section.k);
        let rho = args.rho.or(section.rho);
        let (Some(theta), Some(k), Some(rho)) = (theta, k, rho) else {
            bail!("provide --theta, --k and --rho (or a config transfer section), or use --cv");
        };
        transfer_prototypes(&protos, &seen_emb, &unseen_emb, &TransferParams { theta, k, rho })?
    };

    let fallbacks = output.rows.iter().filter(|r| r.fallback).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} unseen classes had no eligible seen class and fell back to the single nearest");
    }
    output.save(&args.out)?;
    if let Some(path) = &args.protos_out {
        output.to_prototype_file().save(path)?;
    }
    println!(
        "composed {} unseen prototypes (objective {:.4}) into {}",
        output.rows.len(),
        output.objective,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let reps = RepresentationSet::load(&args.reps)?;
    let seen_protos = PrototypeFile::load(&args.seen_protos)?;
    let seen_emb = EmbeddingFile::load(&args.seen_emb)?.embeddings();
    let unseen_emb = EmbeddingFile::load(&args.unseen_emb)?.embeddings();
    let run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => Default::default(),
    };

    let params = if let Some(path) = &args.transfer {
        TransferOutput::load(path)?.params
    } else {
        let theta = args.theta.or(run.transfer.theta);
        let k = args.k.or(run.transfer.k);
        let rho = args.rho.or(run.transfer.rho);
        let (Some(theta), Some(k), Some(rho)) = (theta, k, rho) else {
            bail!("provide --theta, --k and --rho (or --transfer, or a config transfer section)");
        };
        TransferParams { theta, k, rho }
    };
    let Some(seed) = args.seed.or(run.eval.seed) else {
        bail!("--seed is required: the split protocol must be reproducible");
    };
    let settings = ProtocolSettings {
        fraction: args.fraction.or(run.eval.fraction).unwrap_or(0.5),
        num_splits: args.splits.or(run.eval.num_splits).unwrap_or(10),
        seed,
        params,
        unconstrained: args.unconstrained || run.eval.unconstrained.unwrap_or(false),
    };
    let (report, assignments) =
        run_split_protocol(&reps, &unseen_emb, &seen_protos, &seen_emb, &settings)?;
    match args.format {
        ReportFormat::Json => report.save(&args.out)?,
        ReportFormat::Csv => report.write_csv(&args.out)?,
    }
    if let Some(path) = &args.assignments {
        write_assignments_csv(&assignments, path)?;
    }
    println!(
        "top-1 {:.4} +- {:.4}, top-5 {:.4}, hubness skew {:.3}, seen-label baseline {:.4} over {} splits",
        report.mean_top1,
        report.std_top1,
        report.mean_top5,
        report.mean_hubness,
        report.mean_baseline_top1,
        settings.num_splits
    );
    Ok(())
}

#[derive(Serialize)]
struct HubnessReport {
    k: usize,
    skewness: f64,
    counts: Vec<HubCount>,
}

#[derive(Serialize)]
struct HubCount {
    class_id: usize,
    label: String,
    count: usize,
}

fn cmd_hubness(args: HubnessArgs) -> Result<()> {
    if args.k == 0 {
        bail!("--k must be at least 1");
    }
    let reps = RepresentationSet::load(&args.reps)?;
    let protos = PrototypeFile::load(&args.protos)?;
    let mut counts = vec![0usize; protos.entries.len()];
    for item in &reps.items {
        for ranked in classify(&item.vector, &protos)?.iter().take(args.k) {
            let idx = protos
                .entries
                .iter()
                .position(|e| e.class_id == ranked.class_id)
                .expect("ranked ids come from the prototype file");
            counts[idx] += 1;
        }
    }
    let report = HubnessReport {
        k: args.k,
        skewness: hubness_skewness(&counts),
        counts: protos
            .entries
            .iter()
            .zip(&counts)
            .map(|(e, &count)| HubCount {
                class_id: e.class_id,
                label: e.label.clone(),
                count,
            })
            .collect(),
    };
    write_pretty_json(&report, &args.out)?;
    println!(
        "top-{} occupancy skewness {:.4} over {} prototypes into {}",
        args.k,
        report.skewness,
        report.counts.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_mask_dump(args: MaskDumpArgs) -> Result<()> {
    let layout = SequenceLayout::new(args.t, args.words)?;
    let mask = build_mask(layout, args.scheme.into());
    print!("{}", mask.grid_string());
    Ok(())
}
