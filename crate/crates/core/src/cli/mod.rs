//! The `actiondiff` command line: one subcommand per pipeline stage and per
//! study. Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 selftest failure.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

pub use config::{merge, protocol_preset, resolve, resolve_file, ConfigError, LocalizeSettings, RunConfig};

use crate::backbone::{load_checkpoint, pretrain_backbone, save_checkpoint, Backbone};
use crate::classifier::{load_classifier, predict_batch, save_classifier, ClassifierModel};
use crate::datagen::{load_corpus, save_corpus, VideoClip};
use crate::experiments::{
    default_sweep_protocols, domain_tags, fit_and_evaluate, grid_search, label_indices, layer_sweep, localization_study, prepare, pretraining_corpus,
    run_ablations, run_protocol, write_ablations, write_csv, write_grid, write_heatmap, write_json, write_sweep, AblationConfig, GridConfig,
    RunSpec, SweepConfig, VERSION,
};
use crate::extraction::{Extractor, FeatureCache};
use crate::metrics::EvalReport;
use crate::numerics::io::{to_bytes, Dtype};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

type AnyResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Parser, Debug)]
#[command(name = "actiondiff", version, about = "Action recognition from frozen video-diffusion denoiser features")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: one per logical core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a protocol's train/test corpora.
    GenData(DataFlags),
    /// Pretrain the backbone on the denoising objective.
    Pretrain {
        /// Corpus split directory; defaults to the built-in 16-clip corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Extract features for every clip of a corpus split.
    Extract {
        #[command(flatten)]
        backbone: BackboneFlag,
        /// Corpus split directory (holding manifest.json).
        #[arg(long, required = true)]
        corpus: PathBuf,
        #[command(flatten)]
        extract: ExtractFlags,
    },
    /// Train a classifier on the train split of a corpus.
    Train {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        extract: ExtractFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a trained classifier on one split of a corpus.
    Eval {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[arg(long, required = true)]
        classifier: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test", "test_in_domain"])]
        split: String,
        #[command(flatten)]
        extract: ExtractFlags,
    },
    /// Generate, extract, train and evaluate one protocol.
    Protocol {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        extract: ExtractFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Layer x generative-step grid on one protocol.
    Gridsearch {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// One-factor sweeps over head, window, loss and conditioning.
    Ablate {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Shallow/mid/deep layers across the four protocols.
    Layersweep {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Patch heatmaps of the true class on test clips.
    Localize {
        #[command(flatten)]
        backbone: BackboneFlag,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        extract: ExtractFlags,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args, Debug, Default)]
struct BackboneFlag {
    /// Backbone checkpoint written by `pretrain`; defaults to the config's `backbone`.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct DataFlags {
    #[arg(long, value_parser = ["cross_species", "cross_view", "cross_context", "in_domain"])]
    protocol: Option<String>,
    /// Clips per domain, `TRAIN,TEST`.
    #[arg(long)]
    counts: Option<String>,
    /// `uniform` or `skewed:STRENGTH[:SEED]`.
    #[arg(long)]
    imbalance: Option<String>,
    /// Multi-label variant with this partner rate.
    #[arg(long)]
    multi_label: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ExtractFlags {
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    gen_step: Option<usize>,
    #[arg(long)]
    gen_total: Option<usize>,
    #[arg(long, value_parser = ["frame", "action", "action_text", "none"])]
    cond: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    noisy: bool,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["focal", "bce"])]
    loss: Option<String>,
    #[arg(long, value_parser = ["transformer", "mlp", "linear"])]
    head: Option<String>,
}

fn push<T: Into<Value>>(flags: &mut Vec<(String, Value)>, path: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((path.to_string(), v.into()));
    }
}

impl DataFlags {
    fn collect(&self, flags: &mut Vec<(String, Value)>) -> Result<(), ConfigError> {
        push(flags, "protocol.kind", self.protocol.clone());
        if let Some(c) = &self.counts {
            let parts: Vec<&str> = c.split(',').collect();
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| ConfigError::Invalid(format!("--counts `{c}`: expected TRAIN,TEST")));
            if parts.len() != 2 {
                return Err(ConfigError::Invalid(format!("--counts `{c}`: expected TRAIN,TEST")));
            }
            flags.push(("protocol.train_per_domain".into(), parse(parts[0])?.into()));
            flags.push(("protocol.test_per_domain".into(), parse(parts[1])?.into()));
        }
        if let Some(i) = &self.imbalance {
            let bad = || ConfigError::Invalid(format!("--imbalance `{i}`: expected uniform or skewed:STRENGTH[:SEED]"));
            let v = match i.split(':').collect::<Vec<_>>().as_slice() {
                ["uniform"] => json!({"kind": "uniform"}),
                ["skewed", s] => json!({"kind": "skewed", "strength": s.parse::<f64>().map_err(|_| bad())?, "seed": 0}),
                ["skewed", s, seed] => {
                    json!({"kind": "skewed", "strength": s.parse::<f64>().map_err(|_| bad())?, "seed": seed.parse::<u64>().map_err(|_| bad())?})
                }
                _ => return Err(bad()),
            };
            flags.push(("protocol.imbalance".into(), v));
        }
        push(flags, "multi_label", self.multi_label);
        Ok(())
    }
}

impl ExtractFlags {
    fn collect(&self, flags: &mut Vec<(String, Value)>) {
        push(flags, "extraction.layer", self.layer);
        match (self.gen_step, self.gen_total) {
            (Some(s), Some(t)) => flags.push(("extraction.time".into(), json!({"generative": {"step": s, "total": t}}))),
            (s, t) => {
                push(flags, "extraction.time.generative.step", s);
                push(flags, "extraction.time.generative.total", t);
            }
        }
        let cond = self.cond.as_deref().map(|c| if c == "action" { "action_text" } else { c });
        push(flags, "extraction.cond", cond);
        push(flags, "extraction.window", self.window);
        if self.noisy {
            flags.push(("extraction.noisy".into(), true.into()));
        }
    }
}

impl TrainFlags {
    fn collect(&self, flags: &mut Vec<(String, Value)>) {
        push(flags, "train.epochs", self.epochs);
        push(flags, "train.peak_lr", self.lr);
        push(flags, "train.loss", self.loss.clone());
        push(flags, "head.head", self.head.clone());
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl Cli {
    fn flags(&self) -> Result<Vec<(String, Value)>, ConfigError> {
        let mut f = Vec::new();
        push(&mut f, "seed", self.seed);
        push(&mut f, "jobs", self.jobs);
        push(&mut f, "out", self.out.as_deref().map(path_value));
        match &self.command {
            Command::GenData(d) => d.collect(&mut f)?,
            Command::Pretrain { corpus, steps } => {
                push(&mut f, "corpus", corpus.as_deref().map(path_value));
                push(&mut f, "pretrain.steps", *steps);
            }
            Command::Extract { backbone, corpus, extract } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                f.push(("corpus".into(), path_value(corpus)));
                extract.collect(&mut f);
            }
            Command::Train { backbone, corpus, extract, train } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                push(&mut f, "corpus", corpus.as_deref().map(path_value));
                extract.collect(&mut f);
                train.collect(&mut f);
            }
            Command::Eval { backbone, classifier, corpus, extract, .. } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                f.push(("classifier".into(), path_value(classifier)));
                push(&mut f, "corpus", corpus.as_deref().map(path_value));
                extract.collect(&mut f);
            }
            Command::Protocol { backbone, data, extract, train } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                data.collect(&mut f)?;
                extract.collect(&mut f);
                train.collect(&mut f);
            }
            Command::Gridsearch { backbone, data, train } | Command::Ablate { backbone, data, train } | Command::Layersweep { backbone, data, train } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                data.collect(&mut f)?;
                train.collect(&mut f);
            }
            Command::Localize { backbone, data, extract, grid, clips } => {
                push(&mut f, "backbone", backbone.backbone.as_deref().map(path_value));
                data.collect(&mut f)?;
                extract.collect(&mut f);
                push(&mut f, "localize.grid", *grid);
                push(&mut f, "localize.clips", *clips);
            }
            Command::Selftest => {}
        }
        Ok(f)
    }

    fn name(&self) -> &'static str {
        match self.command {
            Command::GenData(_) => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Extract { .. } => "extract",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Protocol { .. } => "protocol",
            Command::Gridsearch { .. } => "gridsearch",
            Command::Ablate { .. } => "ablate",
            Command::Layersweep { .. } => "layersweep",
            Command::Localize { .. } => "localize",
            Command::Selftest => "selftest",
        }
    }
}

/// Parse `argv`, resolve the config, run the subcommand on a worker pool of
/// `jobs` threads. Messages go to `out` and `err`.
pub fn parse_and_dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let cfg = match cli.flags().and_then(|f| resolve_file(cli.config.as_deref(), &f)) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let argv_text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    // the pool needs a `Send` sink, so output is buffered and flushed after
    let mut buf = Vec::new();
    let res = pool.install(|| dispatch(&cli, &cfg, &argv_text, &mut buf));
    let _ = out.write_all(&buf);
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// `config.json` (the resolved config) and `run.json` (version, command,
/// argv, backbone fingerprint) in the run directory.
fn write_snapshot(cfg: &RunConfig, command: &str, argv: &[String], backbone: Option<&Backbone>) -> AnyResult<()> {
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    write_json(
        &cfg.out.join("run.json"),
        &json!({
            "version": VERSION,
            "command": command,
            "argv": argv,
            "seed": cfg.seed,
            "backbone_fingerprint": backbone.map(|b| b.fingerprint_hex()),
        }),
    )?;
    Ok(())
}

fn run_spec(cfg: &RunConfig) -> RunSpec {
    RunSpec {
        protocol: cfg.protocol.clone(),
        multi_label: cfg.multi_label,
        extraction: cfg.extraction.clone(),
        head: cfg.head.clone(),
        train: cfg.train.clone(),
    }
}

fn split_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.corpus.join(split)
}

fn features(ex: &Extractor<'_>, clips: &[VideoClip], cfg: &RunConfig) -> AnyResult<Vec<crate::numerics::Tensor>> {
    Ok(ex.extract_all(clips, &cfg.extraction)?.into_iter().map(|f| f.features).collect())
}

fn dispatch(cli: &Cli, cfg: &RunConfig, argv: &[String], out: &mut dyn Write) -> AnyResult<i32> {
    let name = cli.name();
    if let Command::Selftest = cli.command {
        write_snapshot(cfg, name, argv, None)?;
        let ok = crate::selftest::run_selftest(out);
        return Ok(if ok { EXIT_OK } else { EXIT_SELFTEST });
    }
    if let Command::GenData(_) = cli.command {
        write_snapshot(cfg, name, argv, None)?;
        let p = prepare(&cfg.protocol, cfg.multi_label)?;
        for (split, manifest, clips) in
            [("train", &p.splits.train, &p.train), ("test", &p.splits.test, &p.test), ("test_in_domain", &p.splits.test_in_domain, &p.test_in_domain)]
        {
            save_corpus(&cfg.out.join(split), manifest, clips)?;
            writeln!(out, "{split}: {} clips", clips.len())?;
        }
        return Ok(EXIT_OK);
    }
    if let Command::Pretrain { corpus, .. } = &cli.command {
        write_snapshot(cfg, name, argv, None)?;
        let clips = match corpus {
            Some(_) => load_corpus(&cfg.corpus)?.1,
            None => pretraining_corpus()?,
        };
        let (bb, log) = pretrain_backbone(&Backbone::new(cfg.backbone_spec.clone())?, &clips, &cfg.pretrain)?;
        let path = cfg.out.join("backbone.ck");
        save_checkpoint(&path, &bb)?;
        let rows: Vec<Vec<String>> = log.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]).collect();
        write_csv(&cfg.out.join("pretrain_loss.csv"), cfg, &["step", "loss"], &rows)?;
        let n = (log.losses.len() / 10).clamp(1, 100);
        writeln!(out, "backbone {} -> {}", bb.fingerprint_hex(), path.display())?;
        if !log.losses.is_empty() {
            writeln!(out, "loss median: first {n} steps {:.4}, last {n} steps {:.4}", log.head_median(n), log.tail_median(n))?;
        }
        return Ok(EXIT_OK);
    }

    let bb = load_checkpoint(&cfg.backbone)?;
    write_snapshot(cfg, name, argv, Some(&bb))?;
    let ex = Extractor::new(&bb).with_cache(FeatureCache::new(&cfg.cache));
    match &cli.command {
        Command::Extract { .. } => {
            let (_, clips) = load_corpus(&cfg.corpus)?;
            let seqs = ex.extract_all(&clips, &cfg.extraction)?;
            let dir = cfg.out.join("features");
            fs::create_dir_all(&dir)?;
            for s in &seqs {
                let id = &s.provenance.clip_id;
                fs::write(dir.join(format!("{id}.adt")), to_bytes(&s.features, Dtype::F64))?;
                write_json(&dir.join(format!("{id}.json")), &s.provenance)?;
            }
            let c = ex.cache().expect("cache set");
            writeln!(out, "{} clips -> {} (cache hits {}, misses {})", seqs.len(), dir.display(), c.hits(), c.misses())?;
        }
        Command::Train { .. } => {
            let (manifest, clips) = load_corpus(&split_dir(cfg, "train"))?;
            let feats = features(&ex, &clips, cfg)?;
            let model = ClassifierModel::new(cfg.head.classifier(feats[0].shape()[1], manifest.task_mode, cfg.train.seed))?;
            let (model, log) = crate::classifier::train_classifier(&model, &feats, &label_indices(&clips), &cfg.train)?;
            save_classifier(&cfg.out.join("classifier.bundle"), &model)?;
            log.write_csv(&cfg.out.join("train_log.csv"))?;
            if let Some(last) = log.epochs.last() {
                writeln!(out, "trained {} epochs, final loss {:.4}, train metric {:.4}", log.epochs.len(), last.loss, last.train_metric)?;
            }
        }
        Command::Eval { split, .. } => {
            let model = load_classifier(&cfg.classifier)?;
            let (_, clips) = load_corpus(&split_dir(cfg, split))?;
            let feats = features(&ex, &clips, cfg)?;
            let scores = predict_batch(&model, &feats)?;
            let report = EvalReport::new(&scores, &label_indices(&clips), &domain_tags(cfg.protocol.kind, &clips))?;
            write_json(&cfg.out.join("report.json"), &json!({"version": VERSION, "config": cfg, "split": split, "report": report}))?;
            writeln!(out, "{split}: {} clips, accuracy {:?}, mAP {:?}", report.count, report.accuracy, report.map)?;
        }
        Command::Protocol { .. } => {
            let p = prepare(&cfg.protocol, cfg.multi_label)?;
            let (report, model) = run_protocol(&p, &run_spec(cfg), &ex)?;
            save_classifier(&cfg.out.join("classifier.bundle"), &model)?;
            write_json(&cfg.out.join("report.json"), &report)?;
            writeln!(
                out,
                "{}: train {:.4}, test {:.4}, in-domain {:.4}, baseline {:?}",
                cfg.protocol.kind.name(),
                report.train_metric,
                report.test_metric()?,
                report.in_domain_metric()?,
                report.baseline_accuracy
            )?;
        }
        Command::Gridsearch { .. } => {
            let p = prepare(&cfg.protocol, cfg.multi_label)?;
            let gc = GridConfig { base: run_spec(cfg), axes: cfg.grid.clone() };
            let r = grid_search(&gc, &p, &ex)?;
            write_grid(&cfg.out, &r)?;
            writeln!(out, "{} cells; {}; cache hit rate {:?}", r.rows.len(), r.observation, r.cache_hit_rate())?;
        }
        Command::Ablate { .. } => {
            let p = prepare(&cfg.protocol, cfg.multi_label)?;
            let ac = AblationConfig { base: run_spec(cfg), axes: cfg.ablation.clone() };
            let rows = run_ablations(&ac, &p, &bb, Some(&cfg.cache))?;
            write_ablations(&cfg.out, &ac, &bb, &rows)?;
            for r in &rows {
                writeln!(out, "{}={}: {:.4}", r.axis, r.value, r.metric)?;
            }
        }
        Command::Layersweep { .. } => {
            let protocols = default_sweep_protocols(cfg.protocol.train_per_domain, cfg.protocol.test_per_domain);
            let sc = SweepConfig {
                layers: cfg.sweep_layers.clone(),
                protocols,
                multi_label: cfg.multi_label,
                extraction: cfg.extraction.clone(),
                head: cfg.head.clone(),
                train: cfg.train.clone(),
            };
            let cells = layer_sweep(&sc, &ex)?;
            write_sweep(&cfg.out, &sc, &bb.fingerprint_hex(), &cells)?;
            for c in &cells {
                writeln!(out, "{} layer {}: {:.4}", c.protocol, c.layer, c.metric)?;
            }
        }
        Command::Localize { .. } => {
            let p = prepare(&cfg.protocol, cfg.multi_label)?;
            let spec = run_spec(cfg);
            let (ytr, feats) = (label_indices(&p.train), features(&ex, &p.train, cfg)?);
            let fitted = fit_and_evaluate(&feats, &ytr, p.task_mode(), &spec.head, &spec.train, &[])?;
            let study = localization_study(&p.test, &fitted.model, &cfg.extraction, cfg.localize.grid, cfg.localize.clips, &ex)?;
            let maps: Vec<_> = study.iter().map(|o| o.map.clone()).collect();
            write_heatmap(&cfg.out.join("heatmap.csv"), cfg, &maps)?;
            let hits = study.iter().filter(|o| o.hit).count();
            write_json(&cfg.out.join("report.json"), &json!({"version": VERSION, "config": cfg, "backbone": bb.fingerprint_hex(), "clips": study, "hits": hits}))?;
            writeln!(out, "sprite patch above every background patch in {hits} of {} clips", study.len())?;
        }
        Command::Selftest | Command::GenData(_) | Command::Pretrain { .. } => unreachable!("handled above"),
    }
    Ok(EXIT_OK)
}
