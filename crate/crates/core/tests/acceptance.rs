//! Acceptance criteria, one pass/fail line each.
//!
//! Run with `cargo test -p tbn --test acceptance -- --nocapture` to see the
//! report. The test fails if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use common::gradcheck::{check_head_gradients, model as tiny_model, pixels};
use common::oracles::{concat_rows, oracle_ce, oracle_kl, random_set, reference_jaccard, reference_metrics};
use common::{flat, outputs, random_matrix, rng, scalar, tensor, tiny_model_config};
use rand::Rng;
use tbn::backbone::BackboneConfig;
use tbn::data::{generate_synthetic, SyntheticSpec};
use tbn::eval::{
    distance_matrix, evaluate, evaluate_sets, extract_features, k_reciprocal_rerank, FeatureMode, Normalization,
    Protocol, RerankParams,
};
use tbn::head::{partition, PartitionTreeConfig};
use tbn::losses::{
    global_ce_loss, local_ce_loss, mutual_kl_term, mutual_total_loss, supervised_loss, LossConfig, ModelRole,
};
use tbn::model::{ModelConfig, TbnModel};
use tbn::trainer::{
    load_checkpoint, save_checkpoint, train_mutual, train_single, TrainConfig, TrainLog, TrainMode,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn close(actual: f64, expected: f64) -> bool {
    (actual - expected).abs() <= 1e-10 * expected.abs().max(1e-6)
}

fn shape_ledger() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::default();
    let m = TbnModel::new(&config, 0, DType::F32, &Device::Cpu).map_err(err)?;
    let x = Tensor::zeros((2, 3, 384, 128), DType::F32, &Device::Cpu).map_err(err)?;
    let t0 = m.backbone().forward(&x, false).map_err(err)?;
    ensure(t0.dims() == [2, 2048, 24, 8], || format!("T0 {:?}", t0.dims()))?;
    for (i, piece) in partition(&t0, 2).map_err(err)?.iter().enumerate() {
        let block = m.head().bottleneck(0, i).ok_or("missing level-1 block")?;
        let out = block.forward(piece, false).map_err(err)?;
        ensure(out.dims() == [2, 2048, 12, 8], || format!("level-1 piece {i} {:?}", out.dims()))?;
    }
    let leaves = m.head().leaf_tensors(&t0, false).map_err(err)?;
    ensure(leaves.len() == 6, || format!("{} leaves", leaves.len()))?;
    for (k, leaf) in leaves.iter().enumerate() {
        ensure(leaf.dims() == [2, 2048, 4, 8], || format!("leaf {k} {:?}", leaf.dims()))?;
    }
    let out = m.head().forward(&t0, false).map_err(err)?;
    let local: usize = out.local_embeddings.iter().map(|e| e.dims()[1]).sum();
    let global = out.global_embedding.dims()[1];
    ensure((local, global) == (1536, 2048), || format!("local {local}, global {global}"))?;
    ensure(config.head.local_dim() == 1536 && config.head.joint_dim() == 3584, || {
        "configured descriptor widths".into()
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("T0 (2048, 24, 8), pieces (2048, 12, 8), leaves (2048, 4, 8), dims 1536/2048/3584 in {elapsed:.1?}"))
}

fn loss_oracles() -> Outcome {
    let instances = 120;
    for seed in 0..instances {
        let mut r = rng(90_000 + seed);
        let n = r.random_range(1..6);
        let m = r.random_range(2..9);
        let k = r.random_range(1..7);
        let scale = r.random_range(0.1..8.0);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..m as u32)).collect();
        let local: Vec<_> = (0..k).map(|_| random_matrix(&mut r, n, m, scale)).collect();
        let global = random_matrix(&mut r, n, m, scale);
        let partner: Vec<_> = (0..k).map(|_| random_matrix(&mut r, n, m, scale)).collect();

        let out = outputs(&local, &global);
        let g = scalar(&global_ce_loss(&out.global_logits, &labels).map_err(err)?);
        ensure(close(g, oracle_ce(&global, &labels)), || format!("global CE, instance {seed}"))?;
        let (l, _) = local_ce_loss(&out.local_logits, &labels).map_err(err)?;
        let l_oracle: f64 = local.iter().map(|p| oracle_ce(p, &labels)).sum();
        ensure(close(scalar(&l), l_oracle), || format!("local CE, instance {seed}"))?;

        let own_t: Vec<_> = local.iter().map(|p| tensor(p)).collect();
        let partner_t: Vec<_> = partner.iter().map(|p| tensor(p)).collect();
        let kl = scalar(&mutual_kl_term(&own_t, &partner_t, &LossConfig::default(), ModelRole::First).map_err(err)?);
        let kl_oracle = oracle_kl(&concat_rows(&partner), &concat_rows(&local));
        ensure(close(kl, kl_oracle), || format!("concatenated KL, instance {seed}"))?;

        let cfg = LossConfig {
            num_identities: m,
            num_leaves: k,
            kl_weight: 0.5,
            ..LossConfig::default()
        };
        let total = mutual_total_loss(&out, &outputs(&partner, &global), &labels, &cfg, ModelRole::First)
            .map_err(err)?;
        ensure(close(scalar(&total.total), l_oracle + g + 0.5 * kl_oracle), || {
            format!("mutual total, instance {seed}")
        })?;
    }
    for (k, m) in [(6usize, 751usize), (6, 8), (3, 17)] {
        let row = vec![vec![0.0; m]; 2];
        let s = supervised_loss(&outputs(&vec![row.clone(); k], &row), &[0, 1]).map_err(err)?;
        let ln_m = (m as f64).ln();
        ensure((s.report.local_ce - k as f64 * ln_m).abs() <= 1e-12 * k as f64 * ln_m, || {
            format!("uniform local CE for K={k}, M={m}")
        })?;
        ensure((s.report.global_ce - ln_m).abs() <= 1e-12 * ln_m, || format!("uniform global CE for M={m}"))?;
    }
    Ok(format!("{instances} random instances within 1e-10 relative; uniform logits give K ln M and ln M"))
}

fn gradient_suite() -> Outcome {
    let m = tiny_model(11);
    let t0 = m.backbone().forward(&pixels(1, 4), false).map_err(err)?.detach();
    let labels = [0, 2, 1, 2];
    let forward = |m: &TbnModel| m.head().forward(&t0, true).unwrap();
    let (n_sup, bad) = check_head_gradients(&m, || supervised_loss(&forward(&m), &labels).unwrap().total);
    ensure(bad.is_empty(), || format!("supervised: {} of {n_sup} entries off, e.g. {}", bad.len(), bad[0]))?;

    let a = tiny_model(21);
    let b = tiny_model(22);
    let px = pixels(2, 4);
    let partner = b.forward(&px, true).map_err(err)?;
    let cfg = LossConfig {
        num_identities: 3,
        kl_weight: 0.7,
        ..LossConfig::default()
    };
    let t0a = a.backbone().forward(&px, false).map_err(err)?.detach();
    let detached = partner.detach();
    let (n_mut, bad) = check_head_gradients(&a, || {
        mutual_total_loss(&a.head().forward(&t0a, true).unwrap(), &detached, &labels, &cfg, ModelRole::First)
            .unwrap()
            .total
    });
    ensure(bad.is_empty(), || format!("mutual: {} of {n_mut} entries off, e.g. {}", bad.len(), bad[0]))?;

    let own = a.forward(&px, true).map_err(err)?;
    let loss = mutual_total_loss(&own, &partner, &labels, &cfg, ModelRole::First).map_err(err)?;
    let grads = loss.total.backward().map_err(err)?;
    for (name, var) in b.store().vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            ensure(flat(g).iter().all(|x| *x == 0.0), || format!("partner parameter {name} got gradient"))?;
        }
    }
    Ok(format!("{} head entries within 1e-3 relative; partner gradient exactly zero", n_sup + n_mut))
}

fn mutual_identity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = SyntheticSpec {
        num_identities: 3,
        images_per_identity: 4,
        height: 96,
        width: 32,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, dir.path()).map_err(err)?.train;
    let cfg = |mode| TrainConfig {
        mode,
        epochs: Some(2),
        base_lr_pretrained: Some(0.01),
        base_lr_new: Some(0.05),
        decay_epoch: Some(1),
        batch_size: 4,
        ..TrainConfig::default()
    };
    let loss = |w| LossConfig {
        num_identities: 3,
        kl_weight: w,
        ..LossConfig::default()
    };
    let mut log = TrainLog::in_memory();
    train_mutual(&tiny_model(6), &tiny_model(6), &data, &cfg(TrainMode::Mutual), &loss(1.0), &mut log, None)
        .map_err(err)?;
    let kl = log.records()[0].loss.kl.ok_or("no KL logged")?;
    ensure(kl.abs() < 1e-12, || format!("first-step KL {kl}"))?;

    let single = |seed| {
        train_single(&tiny_model(seed), &data, &cfg(TrainMode::Single), &loss(0.0), &mut TrainLog::in_memory(), None)
    };
    let (sa, sb) = (single(7).map_err(err)?, single(8).map_err(err)?);
    let (ma, mb) = train_mutual(
        &tiny_model(7),
        &tiny_model(8),
        &data,
        &cfg(TrainMode::Mutual),
        &loss(0.0),
        &mut TrainLog::in_memory(),
        None,
    )
    .map_err(err)?;
    for (single, mutual, tag) in [(&sa, &ma, "a"), (&sb, &mb, "b")] {
        for (name, t) in &single.params {
            ensure(flat(t) == flat(&mutual.params[name]), || format!("model {tag}: {name} differs"))?;
        }
    }
    Ok("first-step KL 0 for identical models; kl_weight=0 matches two single runs bit for bit".into())
}

fn eval_oracles() -> Outcome {
    let mut r = rng(77);
    let cases = 40;
    let mut invalid = 0;
    for case in 0..cases {
        let q = r.random_range(1..=50);
        let g = r.random_range(1..=200);
        let ids = r.random_range(1..10);
        let q_ids: Vec<i64> = (0..q).map(|_| r.random_range(-1..ids)).collect();
        let q_cams: Vec<u32> = (0..q).map(|_| r.random_range(1..=3)).collect();
        let g_ids: Vec<i64> = (0..g).map(|_| r.random_range(-1..ids)).collect();
        let g_cams: Vec<u32> = (0..g).map(|_| r.random_range(1..=3)).collect();
        let dist: Vec<Vec<f64>> = (0..q)
            .map(|_| (0..g).map(|_| r.random_range(0..30) as f64).collect())
            .collect();
        let got = evaluate(&dist, &q_ids, &q_cams, &g_ids, &g_cams).map_err(err)?;
        let (cmc, map, aps) = reference_metrics(&dist, &q_ids, &q_cams, &g_ids, &g_cams);
        ensure(got.cmc == cmc && got.map == map && got.average_precision == aps, || {
            format!("case {case} differs from the reference")
        })?;
        invalid += got.num_invalid_queries;
    }
    let hand = evaluate(&[vec![0.1, 0.2, 0.3, 0.4]], &[1], &[1], &[2, 1, 3, 1], &[2, 2, 2, 2]).map_err(err)?;
    ensure(hand.map == 0.5, || format!("hand example AP {}", hand.map))?;
    Ok(format!("{cases} random instances exact ({invalid} queries excluded); hand AP = 0.5"))
}

fn rerank_suite() -> Outcome {
    let mut r = rng(55);
    for case in 0..30 {
        let q = random_set(&mut r, 2, 3, 3, 2);
        let g = random_set(&mut r, 5, 3, 3, 2);
        let got = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 3, k2: 2, lambda: 0.0 }).map_err(err)?;
        let want = reference_jaccard(&q, &g, 3, 2);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            ensure((a - b).abs() <= 1e-10, || format!("case {case}: {a} vs {b}"))?;
        }
        let one = k_reciprocal_rerank(&q, &g, &RerankParams { k1: 3, k2: 2, lambda: 1.0 }).map_err(err)?;
        ensure(one == distance_matrix(&q, &g).map_err(err)?, || format!("case {case}: lambda = 1 endpoint"))?;
    }
    Ok("lambda = 1 exact; Q=2, G=5 Jaccard within 1e-10 of the set oracle".into())
}

fn desk_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::desk_tiny(192, 64, 64),
        head: PartitionTreeConfig {
            leaf_embedding_dim: 32,
            global_embedding_dim: 64,
            num_identities: 8,
            ..PartitionTreeConfig::default()
        },
    }
}

struct DeskRun {
    _dir: tempfile::TempDir,
    checkpoint: std::path::PathBuf,
    data: tbn::data::ReidDataset,
    elapsed: Duration,
    epochs: usize,
}

fn desk_train() -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = generate_synthetic(&SyntheticSpec::default(), &dir.path().join("synth")).map_err(err)?;
    let config = TrainConfig {
        mode: TrainMode::Single,
        epochs: Some(30),
        decay_epoch: Some(20),
        batch_size: 16,
        seed: 0,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        num_identities: 8,
        ..LossConfig::default()
    };
    let start = Instant::now();
    let model = TbnModel::new(&desk_model_config(), config.seed, DType::F32, &Device::Cpu).map_err(err)?;
    let ckpt = train_single(&model, &data.train, &config, &loss, &mut TrainLog::in_memory(), None).map_err(err)?;
    let elapsed = start.elapsed();
    let checkpoint = dir.path().join("checkpoint.safetensors");
    save_checkpoint(&ckpt, &checkpoint).map_err(err)?;
    Ok(DeskRun {
        _dir: dir,
        checkpoint,
        data,
        elapsed,
        epochs: ckpt.epoch,
    })
}

fn desk_end_to_end(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| format!("training failed: {e}"))?;
    ensure(run.epochs <= 30, || format!("{} epochs", run.epochs))?;
    ensure(run.elapsed <= Duration::from_secs(600), || format!("training took {:?}", run.elapsed))?;
    let model = load_checkpoint(&run.checkpoint)
        .and_then(|c| c.build_model(DType::F32, &Device::Cpu))
        .map_err(err)?;
    let qf = extract_features(&model, &run.data.query, 64).map_err(err)?;
    let gf = extract_features(&model, &run.data.gallery, 64).map_err(err)?;
    let mut scores = Vec::new();
    for mode in [FeatureMode::Joint, FeatureMode::LocalOnly, FeatureMode::GlobalOnly] {
        let q = qf.embeddings(mode, Normalization::BlockwiseL2);
        let g = gf.embeddings(mode, Normalization::BlockwiseL2);
        let (res, _) = evaluate_sets(&q, &g, Protocol::SingleQuery).map_err(err)?;
        scores.push((res.rank1, res.map));
    }
    let (joint, local, global) = (scores[0], scores[1], scores[2]);
    ensure(joint.0 >= 0.95, || format!("joint rank-1 {:.4} < 0.95", joint.0))?;
    ensure(joint.1 >= 0.90, || format!("joint mAP {:.4} < 0.90", joint.1))?;
    ensure(joint.1 >= local.1.max(global.1), || {
        format!("joint mAP {:.4} below local {:.4} / global {:.4}", joint.1, local.1, global.1)
    })?;

    let q = qf.embeddings(FeatureMode::Joint, Normalization::BlockwiseL2);
    let g = gf.embeddings(FeatureMode::Joint, Normalization::BlockwiseL2);
    let reranked = k_reciprocal_rerank(&q, &g, &RerankParams::default()).map_err(err)?;
    let rr = evaluate(&reranked, &q.identity_ids, &q.camera_ids, &g.identity_ids, &g.camera_ids).map_err(err)?;
    ensure(rr.map >= joint.1 - 0.01, || format!("re-ranked mAP {:.4} vs raw {:.4}", rr.map, joint.1))?;
    Ok(format!(
        "{} epochs in {:.1?}; joint rank-1 {:.4} mAP {:.4}, local mAP {:.4}, global mAP {:.4}, re-ranked mAP {:.4}",
        run.epochs, run.elapsed, joint.0, joint.1, local.1, global.1, rr.map
    ))
}

fn ablation_plumbing(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let model = load_checkpoint(&run.checkpoint)
        .and_then(|c| c.build_model(DType::F32, &Device::Cpu))
        .map_err(err)?;
    let qf = extract_features(&model, &run.data.query, 64).map_err(err)?;
    let gf = extract_features(&model, &run.data.gallery, 64).map_err(err)?;
    let mut lines = Vec::new();
    for (mode, dim) in [(FeatureMode::LocalOnly, 192), (FeatureMode::GlobalOnly, 64), (FeatureMode::Joint, 256)] {
        let q = qf.embeddings(mode, Normalization::BlockwiseL2);
        let g = gf.embeddings(mode, Normalization::BlockwiseL2);
        ensure(q.dim() == dim, || format!("{mode:?} width {}", q.dim()))?;
        let (res, _) = evaluate_sets(&q, &g, Protocol::SingleQuery).map_err(err)?;
        let report = res.report(Protocol::SingleQuery, mode);
        let json = serde_json::to_value(&report).map_err(err)?;
        ensure(json.get("mAP").is_some() && json.get("rank1").is_some(), || "report keys".into())?;
        lines.push(format!("{mode:?} D={dim}"));
    }
    Ok(format!("one checkpoint, three reports: {}", lines.join(", ")))
}

#[test]
fn acceptance() {
    let desk = desk_train();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 shape ledger", shape_ledger()),
        ("2 loss oracles", loss_oracles()),
        ("3 gradient suite", gradient_suite()),
        ("4 mutual-learning identity", mutual_identity()),
        ("5 evaluation oracles", eval_oracles()),
        ("6 re-ranking", rerank_suite()),
        ("7 end-to-end desk run", desk_end_to_end(&desk)),
        ("8 ablation plumbing", ablation_plumbing(&desk)),
    ];
    let mut failed = Vec::new();
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                println!("[FAIL] {name}: {detail}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}

#[test]
fn tiny_config_is_consistent() {
    tiny_model_config().validate().unwrap();
    desk_model_config().validate().unwrap();
}
