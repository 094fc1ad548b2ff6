use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anticipate::datastore::{
    build_examples, clip_key, read_feature_pack, AnnotationSet, Dataset, LTAExample, SplitName,
};
use anticipate::evalkit::{
    evaluate, predict, read_predictions, write_per_step_csv, write_predictions, write_report, MetricsReport,
    PredictionSet, Target,
};
use anticipate::numcore::{derive_seed, ParamStore, Precision, Real};
use anticipate::prompts::{
    build_kmeans_prompts, build_most_common, coco_prompts, count_noun_frequencies, load_fixed_prompts,
    EmbeddingTable, PromptList, Strategy,
};
use anticipate::pte::{load_checkpoint, pte_forward, save_checkpoint, ForwardOptions, PTEConfig};
use anticipate::rollout::{attention_rollout, heatmap_csv, heatmap_pgm, heatmap_rows, top_objects, HEATMAP_STEPS};
use anticipate::synthlab::{generate, PROMPTS_FILE};
use anticipate::tokens::{build_model_inputs, FeatureLayout, ModelInput, RegionSource};
use anticipate::train::{fit, EpochLog, FitResult};
use log::{info, warn};
use serde::Serialize;

use crate::args::{
    EvalArgs, PromptsBuildArgs, RolloutArgs, SplitArg, StrategyArg, SynthGenArgs, TrainArgs, ValidateArgs,
};
use crate::config::{RegionMode, RunConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const CHECKPOINT: &str = "model.fpk";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const REPORT: &str = "report.json";
pub const PER_STEP_CSV: &str = "per_step_ed.csv";
pub const HEATMAP_CSV: &str = "heatmap.csv";
pub const HEATMAP_PGM: &str = "heatmap.pgm";
pub const TOP_OBJECTS: &str = "top_objects.json";

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { path: path.to_path_buf() })
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn make_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn pick(flag: Option<&PathBuf>, config: Option<&PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or(config)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("no {what}: pass --{what} or set `{what}_dir` in the config")))
}

/// Config with command-line overrides applied and paths resolved; written to the run directory.
fn resolve(
    config: Option<&Path>,
    data: Option<&PathBuf>,
    out: Option<&PathBuf>,
) -> CliResult<(RunConfig, PathBuf, PathBuf)> {
    let mut cfg = RunConfig::load_or_default(config)?;
    let data_dir = pick(data, cfg.data_dir.as_ref(), "data")?;
    let out_dir = pick(out, cfg.out_dir.as_ref(), "out")?;
    require(&data_dir)?;
    cfg.data_dir = Some(data_dir.clone());
    cfg.out_dir = Some(out_dir.clone());
    Ok((cfg, data_dir, out_dir))
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    make_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_ECHO), cfg.to_json())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    for f in [anticipate::datastore::ANNOTATIONS_FILE, anticipate::datastore::DETECTIONS_FILE] {
        require(&dir.join(f))?;
    }
    Ok(Dataset::load(dir)?)
}

fn prompt_list(cfg: &RunConfig, data_dir: &Path) -> CliResult<PromptList> {
    let path = cfg.prompts.clone().unwrap_or_else(|| data_dir.join(PROMPTS_FILE));
    require(&path)?;
    Ok(PromptList::load(&path)?)
}

/// `(verb_count, noun_count)`: one past the largest id in the annotations.
pub fn vocab_sizes(annotations: &AnnotationSet) -> (usize, usize) {
    annotations.segments().fold((0, 0), |(v, n), s| {
        (v.max(s.verb_id as usize + 1), n.max(s.noun_id as usize + 1))
    })
}

fn descriptor_dim(ds: &Dataset) -> CliResult<usize> {
    let Some(d) = ds.detections.first() else {
        return Ok(0);
    };
    ds.packs
        .pack(&d.pack_id)
        .map(|p| p.dim())
        .ok_or_else(|| CliError::Invalid(format!("detections reference missing pack `{}`", d.pack_id)))
}

fn split_annotations(ds: &Dataset, split: SplitArg) -> AnnotationSet {
    match split {
        SplitArg::All => ds.annotations.clone(),
        SplitArg::Train => ds.subset(SplitName::Train),
        SplitArg::Val => ds.subset(SplitName::Val),
    }
}

fn examples(ds: &Dataset, cfg: &RunConfig, split: SplitArg) -> CliResult<Vec<LTAExample>> {
    Ok(build_examples(&split_annotations(ds, split), &ds.detections, &ds.packs, &cfg.window)?)
}

/// Token sets for one split, with the feature widths they imply.
pub struct Inputs {
    pub inputs: Vec<ModelInput>,
    pub layout: FeatureLayout,
    pub clip_dim: usize,
}

fn model_inputs(ds: &Dataset, cfg: &RunConfig, data_dir: &Path, split: SplitArg) -> CliResult<Inputs> {
    let layout = FeatureLayout {
        descriptor_dim: descriptor_dim(ds)?,
        prompt_count: prompt_list(cfg, data_dir)?.len(),
    };
    let source = match cfg.regions {
        RegionMode::Detections => RegionSource::Detections,
        RegionMode::Random => RegionSource::Random {
            seed: derive_seed(cfg.train.seed, &[7]),
        },
    };
    let inputs = build_model_inputs(&examples(ds, cfg, split)?, &ds.packs, &cfg.selection, &layout, &source)?;
    let clip_dim = ds.packs.pack(&cfg.window.clip_pack).map_or(0, |p| p.dim());
    Ok(Inputs {
        inputs,
        layout,
        clip_dim,
    })
}

pub fn model_config(cfg: &RunConfig, ds: &Dataset, layout: &FeatureLayout, clip_dim: usize) -> PTEConfig {
    let (verb_count, noun_count) = vocab_sizes(&ds.annotations);
    let m = &cfg.model;
    PTEConfig {
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        horizon: cfg.window.horizon,
        n_observed: cfg.window.n_observed,
        n_img: cfg.selection.n_img,
        n_obj: cfg.selection.n_obj,
        dropout: m.dropout,
        verb_count,
        noun_count,
        fusion: m.fusion,
        clip_input_dim: clip_dim,
        object_input_dim: layout.feature_dim(),
        ffn_mult: m.ffn_mult,
    }
}

pub fn synth_gen(args: &SynthGenArgs) -> CliResult<()> {
    let mut synth = RunConfig::load_or_default(args.config.as_deref())?.synth;
    if let Some(s) = args.seed {
        synth.seed = s;
    }
    if let Some(n) = args.n_videos {
        synth.n_videos = n;
    }
    if let Some(n) = args.noun_count {
        synth.noun_count = n;
    }
    let data = generate(&synth, &args.out)?;
    info!(
        "wrote {} videos ({} train / {} val) to {}",
        synth.n_videos,
        data.split.train.len(),
        data.split.val.len(),
        args.out.display()
    );
    Ok(())
}

pub fn prompts_build(args: &PromptsBuildArgs) -> CliResult<()> {
    let counts = || -> CliResult<_> {
        let dir = args
            .data
            .as_ref()
            .ok_or_else(|| CliError::Usage("this strategy needs --data".into()))?;
        Ok(count_noun_frequencies(&load_dataset(dir)?.subset(SplitName::Train)))
    };
    let list = match args.strategy {
        StrategyArg::MostCommon => build_most_common(&counts()?, args.n)?,
        StrategyArg::Random => {
            let base = build_most_common(&counts()?, args.n)?;
            PromptList::new(base.entries, Strategy::Random, base.provenance)?
        }
        StrategyArg::Kmeans => {
            let path = match (&args.embeddings, &args.data) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => d.join(anticipate::synthlab::NOUN_EMBEDDINGS_FILE),
                (None, None) => return Err(CliError::Usage("kmeans needs --embeddings or --data".into())),
            };
            require(&path)?;
            let table = EmbeddingTable::from_pack(&read_feature_pack(&path)?)?;
            build_kmeans_prompts(&counts()?, &table, args.k.unwrap_or(args.n), args.n, args.seed)?
        }
        StrategyArg::Fixed => match &args.fixed {
            Some(p) => {
                require(p)?;
                load_fixed_prompts(p)?
            }
            None => coco_prompts(),
        },
    };
    if list.len() < args.n {
        warn!("only {} distinct prompts available (asked for {})", list.len(), args.n);
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(parent)?;
    }
    if args.out.extension().and_then(|e| e.to_str()) == Some("json") {
        list.save_json(&args.out)?;
    } else {
        list.save_text(&args.out)?;
    }
    info!("wrote {} prompts to {}", list.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    train_examples: usize,
    val_examples: usize,
    epochs_completed: usize,
    diverged_at: Option<usize>,
    model: PTEConfig,
}

fn fit_as<T: Real>(
    train: &[ModelInput],
    val: &[ModelInput],
    model: &PTEConfig,
    cfg: &RunConfig,
    out_dir: &Path,
) -> CliResult<(Vec<EpochLog>, Option<usize>)> {
    let FitResult {
        params,
        log,
        diverged_at,
    } = fit::<T>(train, val, model, &cfg.train)?;
    save_checkpoint(out_dir.join(CHECKPOINT), model, &params)?;
    Ok((log, diverged_at))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let (mut cfg, data_dir, out_dir) = resolve(args.config.as_deref(), args.data.as_ref(), args.out.as_ref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    echo_config(&cfg, &out_dir)?;

    let ds = load_dataset(&data_dir)?;
    let has_val = ds.split.as_ref().is_some_and(|s| !s.val.is_empty());
    let train_split = if ds.split.is_some() { SplitArg::Train } else { SplitArg::All };
    let tr = model_inputs(&ds, &cfg, &data_dir, train_split)?;
    let val = if has_val {
        model_inputs(&ds, &cfg, &data_dir, SplitArg::Val)?.inputs
    } else {
        Vec::new()
    };
    let model = model_config(&cfg, &ds, &tr.layout, tr.clip_dim);
    info!("training on {} examples, validating on {}", tr.inputs.len(), val.len());

    let (log, diverged_at) = match cfg.train.precision {
        Precision::Check => fit_as::<f64>(&tr.inputs, &val, &model, &cfg, &out_dir)?,
        Precision::Fast => fit_as::<f32>(&tr.inputs, &val, &model, &cfg, &out_dir)?,
    };
    let mut lines = String::new();
    for e in &log {
        lines.push_str(&serde_json::to_string(e).expect("log entry serialises"));
        lines.push('\n');
    }
    write_file(&out_dir.join(TRAIN_LOG), lines)?;
    let summary = TrainSummary {
        train_examples: tr.inputs.len(),
        val_examples: val.len(),
        epochs_completed: log.len(),
        diverged_at,
        model,
    };
    write_file(
        &out_dir.join(TRAIN_SUMMARY),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    if let Some(e) = diverged_at {
        warn!("training diverged at epoch {e}; the checkpoint holds the last finite parameters");
    }
    Ok(())
}

fn targets_of(examples: &[LTAExample]) -> Vec<Target> {
    examples
        .iter()
        .map(|e| Target {
            example_id: e.example_id.clone(),
            actions: e.target_verbs.iter().copied().zip(e.target_nouns.iter().copied()).collect(),
        })
        .collect()
}

fn load_params(path: &Path) -> CliResult<(PTEConfig, ParamStore<f64>)> {
    require(path)?;
    let ck = load_checkpoint(path)?;
    Ok((ck.config, ck.params))
}

fn write_metrics(out_dir: &Path, report: &MetricsReport) -> CliResult<()> {
    write_report(out_dir.join(REPORT), report)?;
    write_per_step_csv(out_dir.join(PER_STEP_CSV), report)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let (cfg, data_dir, out_dir) = resolve(args.config.as_deref(), args.data.as_ref(), args.out.as_ref())?;
    echo_config(&cfg, &out_dir)?;
    let ds = load_dataset(&data_dir)?;
    let (preds, targets, verb_count, noun_count): (Vec<PredictionSet>, Vec<Target>, usize, usize) =
        match (&args.checkpoint, &args.predictions) {
            (Some(ck), _) => {
                let (model, params) = load_params(ck)?;
                let inputs = model_inputs(&ds, &cfg, &data_dir, args.split)?.inputs;
                let preds = predict(&params, &model, &inputs, &cfg.generation)?;
                write_predictions(out_dir.join(PREDICTIONS), &preds)?;
                let targets = inputs.iter().map(Target::from_input).collect();
                (preds, targets, model.verb_count, model.noun_count)
            }
            (None, Some(p)) => {
                require(p)?;
                let (v, n) = vocab_sizes(&ds.annotations);
                (read_predictions(p)?, targets_of(&examples(&ds, &cfg, args.split)?), v, n)
            }
            (None, None) => return Err(CliError::Usage("pass --checkpoint or --predictions".into())),
        };
    let report = evaluate(&preds, &targets, verb_count, noun_count)?;
    write_metrics(&out_dir, &report)?;
    info!(
        "ED@{}: verb {:.4} noun {:.4} action {:.4} over {} examples",
        report.horizon, report.verb_ed, report.noun_ed, report.action_ed, report.examples
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct StepObjects {
    z: usize,
    objects: Vec<anticipate::rollout::ObjectWeight>,
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    example_id: String,
    steps: Vec<StepObjects>,
}

pub fn rollout(args: &RolloutArgs) -> CliResult<()> {
    let (cfg, data_dir, out_dir) = resolve(args.config.as_deref(), args.data.as_ref(), args.out.as_ref())?;
    echo_config(&cfg, &out_dir)?;
    let ds = load_dataset(&data_dir)?;
    let (model, params) = load_params(&args.checkpoint)?;
    let split = if ds.split.is_some() { SplitArg::Val } else { SplitArg::All };
    let inputs = model_inputs(&ds, &cfg, &data_dir, split)?.inputs;
    let input = match &args.example {
        Some(id) => inputs
            .iter()
            .find(|i| &i.example_id == id)
            .ok_or_else(|| CliError::Invalid(format!("no example `{id}` in the {split:?} split")))?,
        None => inputs
            .first()
            .ok_or_else(|| CliError::Invalid("no examples to analyse".into()))?,
    };
    let out = pte_forward(&params, &model, input, &ForwardOptions::eval())?;
    let Some(branch) = out.branches.iter().find(|b| b.layout.tokens.iter().any(|t| t.object.is_some())) else {
        return Err(CliError::Invalid(format!("{:?} fusion has no object tokens to roll out to", model.fusion)));
    };
    let map = attention_rollout(&branch.attentions, &branch.layout.mask, &cfg.rollout)?;
    let steps: Vec<usize> = HEATMAP_STEPS.iter().copied().filter(|z| *z < model.horizon).collect();
    let rows = heatmap_rows(&map, &branch.layout, &input.slots, &steps)?;
    write_file(&out_dir.join(HEATMAP_CSV), heatmap_csv(&rows))?;
    if args.pgm {
        write_file(&out_dir.join(HEATMAP_PGM), heatmap_pgm(&rows))?;
    }
    let steps = steps
        .iter()
        .map(|&z| {
            Ok(StepObjects {
                z,
                objects: top_objects(&map, &branch.layout, &input.slots, z, args.top_k, &cfg.rollout)?,
            })
        })
        .collect::<anticipate::Result<Vec<_>>>()?;
    let summary = RolloutSummary {
        example_id: input.example_id.clone(),
        steps,
    };
    write_file(
        &out_dir.join(TOP_OBJECTS),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    Ok(())
}

/// Everything wrong with a dataset directory, or an empty list.
pub fn dataset_problems(ds: &Dataset, cfg: &RunConfig) -> Vec<String> {
    let mut problems = Vec::new();
    for d in &ds.detections {
        if let Err(e) = d.validate() {
            problems.push(format!("detection in `{}` segment {}: {e}", d.video_id, d.segment_idx));
        } else if ds.packs.resolve(&d.pack_id, d.row).is_none() {
            problems.push(format!(
                "detection in `{}` segment {} frame {} points at missing row {} of pack `{}`",
                d.video_id, d.segment_idx, d.frame_idx, d.row, d.pack_id
            ));
        } else if ds.annotations.video(&d.video_id).is_none() {
            problems.push(format!("detection for unannotated video `{}`", d.video_id));
        }
    }
    let clips = ds.packs.pack(&cfg.window.clip_pack);
    for s in ds.annotations.segments() {
        let key = clip_key(&s.video_id, s.segment_idx);
        if clips.and_then(|p| p.get(&key)).is_none() {
            problems.push(format!("no clip descriptor `{key}` in pack `{}`", cfg.window.clip_pack));
        }
    }
    if let Some(split) = &ds.split {
        let known: BTreeSet<&str> = ds.annotations.videos.iter().map(|v| v.video_id.as_str()).collect();
        for id in split.train.iter().chain(&split.val) {
            if !known.contains(id.as_str()) {
                problems.push(format!("split lists unknown video `{id}`"));
            }
        }
    }
    problems
}

pub fn validate(args: &ValidateArgs) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    require(&args.data)?;
    let ds = load_dataset(&args.data).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut problems = dataset_problems(&ds, &cfg);
    if let Some(p) = &args.predictions {
        require(p)?;
        let (v, n) = vocab_sizes(&ds.annotations);
        match read_predictions(p) {
            Ok(preds) => problems.extend(
                preds
                    .iter()
                    .filter_map(|x| x.validate(v, n).err().map(|e| format!("prediction `{}`: {e}", x.example_id))),
            ),
            Err(e) => problems.push(e.to_string()),
        }
    }
    for p in problems.iter().take(20) {
        eprintln!("  {p}");
    }
    if !problems.is_empty() {
        return Err(CliError::Invalid(format!("{} problem(s) in {}", problems.len(), args.data.display())));
    }
    println!(
        "ok: {} videos, {} segments, {} detections, {} packs",
        ds.annotations.videos.len(),
        ds.annotations.segment_count(),
        ds.detections.len(),
        ds.packs.ids().count()
    );
    Ok(())
}
