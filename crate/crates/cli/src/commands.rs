use std::path::Path;

use candle_core::{DType, Device};
use serde::Serialize;
use tbn::data::{generate_synthetic, scan_split_dir, Split, SyntheticSpec, GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
use tbn::eval::{
    dump_ranking, evaluate, evaluate_sets, extract_features, k_reciprocal_rerank, EmbeddingSet, EvalReport,
    FeatureMode, Protocol, RerankParams,
};
use tbn::model::TbnModel;
use tbn::trainer::{load_checkpoint, train_mutual, train_single, EpochSummary, TrainLog, TrainMode};
use toml::{Table, Value};

use crate::config::{apply_overrides, read_table, DataConfig, EvalConfig, RunConfig};
use crate::{CliError, EvalArgs, RerankArgs, SynthArgs, TrainArgs};

const DTYPE: DType = DType::F32;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn print_training_summary(tag: &str, history: &[EpochSummary], checkpoint: &Path) {
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => {
            let (a, b) = (first.supervised(), last.supervised());
            let kl = last.kl.map(|k| format!(", kl {k:.4}")).unwrap_or_default();
            println!(
                "{tag}trained {} epochs: local+global loss {a:.4} -> {b:.4} ({:+.1}%){kl}",
                history.len(),
                100.0 * (b - a) / a
            );
        }
        _ => println!("{tag}no epochs run"),
    }
    println!("{tag}checkpoint: {}", checkpoint.display());
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    require_dir(&cfg.data.root, "dataset root")?;
    let train_dir = cfg.data.root.join(TRAIN_DIR);
    require_dir(&train_dir, "training directory")?;
    if args.resume.is_some() && cfg.trainer.mode == TrainMode::Mutual {
        return Err(CliError::Validation("--resume supports single-model runs only".into()));
    }
    let resume = match &args.resume {
        Some(p) if !p.is_file() => {
            return Err(CliError::Validation(format!("checkpoint {} does not exist", p.display())))
        }
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };

    let data = scan_split_dir(&train_dir, Split::Train, cfg.data.naming)?;
    if data.num_identities != cfg.head.num_identities {
        return Err(CliError::Validation(format!(
            "{} holds {} identities but head.num_identities = {}",
            train_dir.display(),
            data.num_identities,
            cfg.head.num_identities
        )));
    }

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_resolved_toml()?).map_err(|e| io_err(&resolved, e))?;

    let trainer = cfg.trainer.resolved();
    let model_cfg = cfg.model();
    let device = Device::Cpu;
    let mut log = TrainLog::to_file(&out.join("train_log.jsonl"), resume.is_some())?.with_progress(!args.quiet);
    let mut trained: Vec<(String, TbnModel)> = Vec::new();
    match trainer.mode {
        TrainMode::Single => {
            let model = TbnModel::new(&model_cfg, trainer.seed, DTYPE, &device)?;
            let ckpt = train_single(&model, &data, &trainer, &cfg.loss, &mut log, resume.as_ref())?;
            let path = out.join("checkpoint.safetensors");
            ckpt.save(&path)?;
            print_training_summary("", &ckpt.loss_history, &path);
            trained.push((String::new(), model));
        }
        TrainMode::Mutual => {
            let a = TbnModel::new(&model_cfg, trainer.seed, DTYPE, &device)?;
            let b = TbnModel::new(&model_cfg, trainer.partner_seed(), DTYPE, &device)?;
            let (ca, cb) = train_mutual(&a, &b, &data, &trainer, &cfg.loss, &mut log, None)?;
            for (tag, ckpt, model) in [("a", ca, a), ("b", cb, b)] {
                let path = out.join(format!("checkpoint_{tag}.safetensors"));
                ckpt.save(&path)?;
                print_training_summary(&format!("[{tag}] "), &ckpt.loss_history, &path);
                trained.push((format!("_{tag}"), model));
            }
        }
    }

    if cfg.eval.after_training {
        for (tag, model) in &trained {
            run_eval(model, &cfg.eval, &cfg.data, &out, tag)?;
        }
    }
    Ok(())
}

fn parse_feature_modes(s: &str) -> Result<Vec<FeatureMode>, CliError> {
    if s == "all" {
        return Ok(FeatureMode::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<FeatureMode>().map_err(CliError::from))
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(d) = &args.data {
        cfg.data.root = d.clone();
    }
    if let Some(m) = &args.feature_mode {
        cfg.eval.feature_modes = parse_feature_modes(m)?;
    }
    if args.rerank {
        cfg.eval.rerank = true;
    }
    cfg.eval.validate()?;
    if !args.checkpoint.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    require_dir(&cfg.data.root, "dataset root")?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    create_dir(&out)?;
    let model = load_checkpoint(&args.checkpoint)?.build_model(DTYPE, &Device::Cpu)?;
    run_eval(&model, &cfg.eval, &cfg.data, &out, "")
}

/// Metrics for one feature mode; the raw metrics sit at the top level.
#[derive(Debug, Serialize)]
struct ModeReport {
    #[serde(flatten)]
    raw: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    reranked: Option<EvalReport>,
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}  ({} queries, {} without a match)",
        r.rank1, r.rank5, r.rank10, r.map, r.num_valid_queries, r.num_invalid_queries
    );
}

fn run_eval(model: &TbnModel, eval: &EvalConfig, data: &DataConfig, out: &Path, tag: &str) -> Result<(), CliError> {
    let query_dir = data.root.join(QUERY_DIR);
    let gallery_dir = data.root.join(GALLERY_DIR);
    require_dir(&query_dir, "query directory")?;
    require_dir(&gallery_dir, "gallery directory")?;
    let query = scan_split_dir(&query_dir, Split::Query, data.naming)?;
    let gallery = scan_split_dir(&gallery_dir, Split::Gallery, data.naming)?;
    let qf = extract_features(model, &query, eval.batch_size)?;
    let gf = extract_features(model, &gallery, eval.batch_size)?;

    for &mode in &eval.feature_modes {
        let q = qf.embeddings(mode, eval.normalization);
        let g = gf.embeddings(mode, eval.normalization);
        if eval.save_embeddings {
            q.save(&out.join(format!("query{tag}_{mode}.json")))?;
            g.save(&out.join(format!("gallery{tag}_{mode}.json")))?;
        }
        let (raw, pooled) = evaluate_sets(&q, &g, eval.protocol)?;
        dump_ranking(&raw, &pooled, &g, eval.top_n, &out.join(format!("ranking{tag}_{mode}.csv")))?;
        let raw = raw.report(eval.protocol, mode);
        print_report(&format!("{mode}{tag}"), &raw);
        let reranked = if eval.rerank {
            let r = rerank_and_evaluate(&pooled, &g, &eval.rerank_params)?;
            dump_ranking(&r, &pooled, &g, eval.top_n, &out.join(format!("ranking{tag}_{mode}_reranked.csv")))?;
            let r = r.report(eval.protocol, mode);
            print_report(&format!("{mode}{tag} re-ranked"), &r);
            Some(r)
        } else {
            None
        };
        write_json(&out.join(format!("report{tag}_{mode}.json")), &ModeReport { raw, reranked })?;
    }
    Ok(())
}

fn rerank_and_evaluate(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    params: &RerankParams,
) -> Result<tbn::eval::RankingResult, CliError> {
    let dist = k_reciprocal_rerank(query, gallery, params)?;
    Ok(evaluate(
        &dist,
        &query.identity_ids,
        &query.camera_ids,
        &gallery.identity_ids,
        &gallery.camera_ids,
    )?)
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut table = match &args.spec {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    apply_overrides(&mut table, &args.overrides)?;
    let spec: SyntheticSpec = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("synthetic spec: {}", e.message())))?;
    spec.validate()?;
    let ds = generate_synthetic(&spec, &args.out)?;
    println!(
        "wrote {}: {} train images ({} identities), {} query, {} gallery",
        args.out.display(),
        ds.train.len(),
        ds.train.num_identities,
        ds.query.len(),
        ds.gallery.len()
    );
    Ok(())
}

fn parse_protocol(s: &str) -> Result<Protocol, CliError> {
    match s {
        "single_query" | "single" => Ok(Protocol::SingleQuery),
        "multi_query" | "multi" => Ok(Protocol::MultiQuery),
        other => Err(CliError::Validation(format!("unknown protocol `{other}`"))),
    }
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet, CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("embedding file {} does not exist", path.display())));
    }
    Ok(EmbeddingSet::load(path)?)
}

pub fn rerank(args: &RerankArgs) -> Result<(), CliError> {
    let protocol = parse_protocol(&args.protocol)?;
    if args.top_n == 0 {
        return Err(CliError::Validation("--top-n must be >= 1".into()));
    }
    let query = load_embeddings(&args.query)?;
    let gallery = load_embeddings(&args.gallery)?;
    if query.feature_mode != gallery.feature_mode {
        return Err(CliError::Validation(format!(
            "query holds {} descriptors, gallery holds {}",
            query.feature_mode, gallery.feature_mode
        )));
    }
    let params = RerankParams {
        k1: args.k1,
        k2: args.k2,
        lambda: args.lambda,
    };
    params.validate(gallery.len())?;
    create_dir(&args.out)?;
    let mode = query.feature_mode;
    let (raw, pooled) = evaluate_sets(&query, &gallery, protocol)?;
    let reranked = rerank_and_evaluate(&pooled, &gallery, &params)?;
    dump_ranking(&reranked, &pooled, &gallery, args.top_n, &args.out.join("ranking_reranked.csv"))?;
    let report = ModeReport {
        raw: raw.report(protocol, mode),
        reranked: Some(reranked.report(protocol, mode)),
    };
    print_report(&format!("{mode}"), &report.raw);
    print_report(&format!("{mode} re-ranked"), report.reranked.as_ref().expect("set above"));
    write_json(&args.out.join("report.json"), &report)
}
