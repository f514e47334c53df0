//! Stage functions shared by the command line and the one-shot pipeline:
//! synthetic world, place-level splits, pretraining, finetuning, embedding,
//! enhancement and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::dataset::{
    build_index, generate_synthetic_world, split_query_database, split_train_test, write_manifest, write_manifest_rows,
    SubmapRecord,
};
use crate::encoder::{encode_batch, init_architecture, save_checkpoint, EncoderParams, OptimizerState, Target};
use crate::error::{Error, Result};
use crate::finetune::{finetune_epoch, FinetuneStats};
use crate::pointcloud::PointCloud;
use crate::pretrain::{pretrain_epoch, PretrainState, PretrainStats};
use crate::retrieval::{
    enhance_all, evaluate, save_descriptors, DescriptorStore, EnhanceMode, EvalReport, Origin,
};
use crate::rng;

/// Sub-stream indices under the run seed.
mod streams {
    pub const WORLD: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const FINETUNE: u64 = 5;
}

/// Records of one run after the place-level splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SubmapRecord>,
    pub database: Vec<SubmapRecord>,
    pub queries: Vec<SubmapRecord>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn synth_world(cfg: &PipelineConfig) -> Result<Vec<SubmapRecord>> {
    generate_synthetic_world(&cfg.world, &mut rng::stream(cfg.seed, streams::WORLD))
}

/// Holds out whole places for testing (places are separated by more than
/// the negative threshold), then splits the held-out places into queries
/// and database.
pub fn split_records(records: &[SubmapRecord], cfg: &PipelineConfig) -> Result<Splits> {
    let mut r = rng::stream(cfg.seed, streams::SPLIT);
    let (train, test) = split_train_test(records, cfg.data.test_fraction, cfg.data.neg_threshold, &mut r)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty(format!(
            "train/test split left {} train and {} test records",
            train.len(),
            test.len()
        )));
    }
    let qd = split_query_database(&test, cfg.data.query_fraction, cfg.data.match_radius, &mut r)?;
    Ok(Splits {
        train,
        database: qd.database,
        queries: qd.queries,
    })
}

pub fn initial_params(cfg: &PipelineConfig) -> Result<EncoderParams> {
    init_architecture(rng::derive_seed(cfg.seed, streams::INIT), &cfg.encoder)
}

/// Runs every pretraining epoch, handing each epoch's stats to `on_epoch`.
pub fn pretrain_model(
    init: EncoderParams,
    clouds: &[&PointCloud],
    cfg: &PipelineConfig,
    mut on_epoch: impl FnMut(&PretrainStats) -> Result<()>,
) -> Result<PretrainState> {
    let mut state = PretrainState::new(init, &cfg.pretrain)?;
    let mut r = rng::stream(cfg.seed, streams::PRETRAIN);
    for _ in 0..cfg.pretrain.epochs {
        let stats = pretrain_epoch(&mut state, clouds, &cfg.pretrain, &mut r)?;
        log::info!("pretrain {}", stats.to_line());
        on_epoch(&stats)?;
    }
    Ok(state)
}

/// Runs every finetuning epoch on `train`, handing each epoch's stats to `on_epoch`.
pub fn finetune_model(
    mut params: EncoderParams,
    train: Vec<SubmapRecord>,
    cfg: &PipelineConfig,
    mut on_epoch: impl FnMut(&FinetuneStats) -> Result<()>,
) -> Result<(EncoderParams, OptimizerState)> {
    let index = build_index(train, cfg.data.pos_threshold, cfg.data.neg_threshold)?;
    let mut optimizer = OptimizerState::adam(cfg.finetune.learning_rate, &params);
    let mut r = rng::stream(cfg.seed, streams::FINETUNE);
    for epoch in 1..=cfg.finetune.epochs {
        let stats = finetune_epoch(&mut params, &mut optimizer, &index, &cfg.finetune, epoch, &mut r)?;
        log::info!("finetune {}", stats.to_line());
        on_epoch(&stats)?;
    }
    Ok((params, optimizer))
}

/// Descriptors of `records` under `params`, tagged with `origin`.
pub fn embed_records(params: &EncoderParams, records: &[SubmapRecord], origin: Origin) -> Result<DescriptorStore> {
    let clouds: Vec<&PointCloud> = records.iter().map(|r| r.cloud.as_ref()).collect();
    let descriptors = encode_batch(params, &clouds, Target::Descriptor)?;
    let mut store = DescriptorStore::new(params.descriptor_dim())?;
    for (r, v) in records.iter().zip(descriptors) {
        store.insert(r.id, v, r.coord, origin)?;
    }
    Ok(store)
}

/// Recall reports without enhancement and with each enhancement mode.
pub fn evaluate_all(
    train: &DescriptorStore,
    database: &DescriptorStore,
    queries: &DescriptorStore,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, EvalReport, Option<(DescriptorStore, DescriptorStore)>)>> {
    let echo = |name: &str| {
        // Where and how wide a run executes does not change its results.
        let mut c = vec![("enhancement".to_string(), name.to_string())];
        c.extend(
            cfg.entries()
                .into_iter()
                .filter(|(k, _)| k != "run.output_dir" && k != "run.threads"),
        );
        c
    };
    let mut out = Vec::new();
    let plain = evaluate(queries, database, cfg.data.match_radius)?.with_config(echo("none"));
    out.push(("none".to_string(), plain, None));
    for mode in [EnhanceMode::Inductive, EnhanceMode::Transductive] {
        let (q, d) = enhance_all(queries, database, train, &cfg.enhance_for(mode))?;
        let report = evaluate(&q, &d, cfg.data.match_radius)?.with_config(echo(&mode.to_string()));
        out.push((mode.to_string(), report, Some((q, d))));
    }
    Ok(out)
}

/// What a pipeline run leaves on disk.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub output_dir: PathBuf,
    pub reports: Vec<(String, EvalReport)>,
}

impl PipelineOutcome {
    /// One line per enhancement mode.
    pub fn summary(&self) -> String {
        let mut s = String::from("enhancement    recall_top1  recall_top1pct  queries\n");
        for (name, r) in &self.reports {
            s.push_str(&format!(
                "{name:<14} {:>11.4}  {:>14.4}  {:>7}\n",
                r.recall_top1, r.recall_top1pct, r.num_queries_evaluated
            ));
        }
        s
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Synthetic world, splits, optional pretraining, finetuning, embedding,
/// enhancement and evaluation, writing every artifact under
/// `cfg.output_dir`. Artifacts of completed stages are kept on failure.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        return pool.install(|| run_stages(cfg));
    }
    run_stages(cfg)
}

fn run_stages(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;

    let data_dir = out.join("data");
    let splits = stage("synth", || {
        let records = synth_world(cfg)?;
        write_manifest(&data_dir, &records)?;
        let splits = split_records(&records, cfg)?;
        write_manifest_rows(data_dir.join("train.csv"), &splits.train)?;
        write_manifest_rows(data_dir.join("database.csv"), &splits.database)?;
        write_manifest_rows(data_dir.join("queries.csv"), &splits.queries)?;
        Ok(splits)
    })?;

    let init = initial_params(cfg)?;
    let start = if cfg.skip_pretrain {
        log::info!("pretraining skipped; finetuning starts from random weights");
        init
    } else {
        stage("pretrain", || {
            let clouds: Vec<&PointCloud> = splits.train.iter().map(|r| r.cloud.as_ref()).collect();
            let mut log_text = String::new();
            let state = pretrain_model(init, &clouds, cfg, |s| {
                log_text.push_str(&s.to_line());
                log_text.push('\n');
                Ok(())
            })?;
            write_file(&out.join("pretrain.log"), &log_text)?;
            save_checkpoint(&state.anchor, Some(&state.optimizer), out.join("pretrain.ckpt"))?;
            Ok(state.anchor)
        })?
    };

    let model = stage("train", || {
        let mut log_text = String::new();
        let (params, opt) = finetune_model(start, splits.train.clone(), cfg, |s| {
            log_text.push_str(&s.to_line());
            log_text.push('\n');
            Ok(())
        })?;
        write_file(&out.join("finetune.log"), &log_text)?;
        save_checkpoint(&params, Some(&opt), out.join("model.ckpt"))?;
        Ok(params)
    })?;

    let (train, database, queries) = stage("embed", || {
        let t = embed_records(&model, &splits.train, Origin::Train)?;
        let d = embed_records(&model, &splits.database, Origin::Database)?;
        let q = embed_records(&model, &splits.queries, Origin::Query)?;
        save_descriptors(&t, out.join("train.ds"))?;
        save_descriptors(&d, out.join("database.ds"))?;
        save_descriptors(&q, out.join("queries.ds"))?;
        Ok((t, d, q))
    })?;

    let reports = stage("eval", || {
        let mut reports = Vec::new();
        for (name, report, enhanced) in evaluate_all(&train, &database, &queries, cfg)? {
            if let Some((q, d)) = enhanced {
                save_descriptors(&q, out.join(format!("queries.{name}.ds")))?;
                save_descriptors(&d, out.join(format!("database.{name}.ds")))?;
            }
            write_file(&out.join(format!("report.{name}.txt")), &report.to_text())?;
            reports.push((name, report));
        }
        Ok(reports)
    })?;

    let outcome = PipelineOutcome {
        output_dir: out.clone(),
        reports,
    };
    write_file(&out.join("summary.txt"), &outcome.summary())?;
    Ok(outcome)
}
