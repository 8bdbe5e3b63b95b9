use std::fs::{self, File};
use std::io::{BufWriter, Write};

use anyhow::{Context, Result};
use metavgan::datasets::{make_synthetic, write_features_csv, ClassId, DatasetBundle};
use metavgan::episodes::subsample_fewshot;
use metavgan::genmodel::Checkpoint;
use metavgan::metatrain::{init_params, LossTrace, MetaTrainer, TrainState};
use metavgan::neural::{streams, Rng};
use metavgan::zsleval::{
    evaluate_gzsl, evaluate_zsl, format_gzsl_report, format_zsl_report, synthesize_dataset, TrainedGenerator,
};
use metavgan::Error;

use crate::config::RunConfig;

fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    DatasetBundle::load(&cfg.dataset_dir).with_context(|| format!("loading {}", cfg.dataset_dir.display()))
}

/// Loads the checkpoint and checks it against the dataset's widths.
fn load_checkpoint(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    for (what, expected, found) in [
        ("checkpoint feature width", bundle.feature_dim, ck.config.feature_dim),
        ("checkpoint attribute width", bundle.attr_dim, ck.config.attr_dim),
    ] {
        if expected != found {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected,
                found,
            }
            .into());
        }
    }
    Ok(ck)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let mut spec = cfg.data.clone();
    spec.seed = cfg.seed;
    cfg.validate()?;
    spec.validate()?;
    cfg.echo("gen-data")?;
    let (bundle, _) = make_synthetic(&spec)?;
    bundle.save(&cfg.dataset_dir)?;
    println!(
        "wrote {} ({} seen, {} unseen classes, {} rows)",
        cfg.dataset_dir.display(),
        bundle.seen_classes.len(),
        bundle.unseen_classes.len(),
        bundle.labels.len()
    );
    Ok(())
}

pub fn validate_data(cfg: &RunConfig) -> Result<()> {
    let b = load_bundle(cfg)?;
    println!("name\t{}", b.name);
    println!("feature_dim\t{}", b.feature_dim);
    println!("attr_dim\t{}", b.attr_dim);
    println!("rows\t{}", b.labels.len());
    println!("seen_classes\t{}", b.seen_classes.len());
    println!("unseen_classes\t{}", b.unseen_classes.len());
    println!("seen_test_rows\t{}", b.seen_test_rows.len());
    println!("unseen_test_rows\t{}", b.unseen_test_rows.len());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    cfg.echo("train")?;
    let bundle = load_bundle(cfg)?;
    let model = cfg.model.build(bundle.feature_dim, bundle.attr_dim)?;
    let mut pool = subsample_fewshot(&bundle, cfg.shots()?, cfg.seed)?;
    if cfg.val_from_full {
        pool = pool.with_full_query_rows(&bundle);
    }
    pool.save_selection(cfg.out.join("selection.txt"))?;

    let trainer = MetaTrainer::from_config(&model, cfg.meta.clone(), cfg.episodes)?;
    let state = TrainState::new(init_params(&model, cfg.seed), &cfg.meta, cfg.seed)?;

    let trace_path = cfg.out.join("trace.tsv");
    let mut trace = BufWriter::new(
        File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?,
    );
    let interval = cfg.meta.checkpoint_interval;
    let result = trainer.train(state, &bundle, &pool, |state, record| {
        let io = |e| Error::Io {
            path: trace_path.clone(),
            source: e,
        };
        trace.write_all(LossTrace::format_record(record).as_bytes()).map_err(io)?;
        trace.flush().map_err(io)?;
        if interval > 0 && state.step % interval == 0 {
            state.checkpoint(&model).save(cfg.out.join(format!("checkpoint-{}.bin", state.step)))?;
        }
        Ok(())
    });
    let state = result?;
    let path = cfg.out.join("checkpoint.bin");
    state.checkpoint(&model).save(&path)?;
    match state.trace.records.last() {
        Some(r) => println!(
            "trained {} steps; outer VG {:.4}, outer D {:.4}; checkpoint {}",
            state.step,
            r.outer_vg,
            r.outer_d,
            path.display()
        ),
        None => println!("no steps run; checkpoint {}", path.display()),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, generalized: bool) -> Result<()> {
    cfg.validate()?;
    let mode = if generalized { "gzsl" } else { "zsl" };
    cfg.echo(&format!("eval-{mode}"))?;
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let generator = TrainedGenerator {
        cfg: &ck.config,
        params: &ck.params,
    };
    let report = if generalized {
        format_gzsl_report(&evaluate_gzsl(&bundle, &generator, &cfg.eval, cfg.seed)?)
    } else {
        format_zsl_report(&evaluate_zsl(&bundle, &generator, &cfg.eval, cfg.seed)?)
    };
    let path = cfg.out.join(format!("metrics-{mode}.tsv"));
    fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    print!("{report}");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    cfg.echo("synth")?;
    let bundle = load_bundle(cfg)?;
    let ck = load_checkpoint(cfg, &bundle)?;
    let classes: Vec<ClassId> = if cfg.synth.classes.is_empty() {
        bundle.unseen_classes.clone()
    } else {
        cfg.synth.classes.iter().map(|c| ClassId::new(c.as_str())).collect()
    };
    let generator = TrainedGenerator {
        cfg: &ck.config,
        params: &ck.params,
    };
    let mut rng = Rng::derive(cfg.seed, streams::SYNTH);
    let set = synthesize_dataset(&generator, &bundle, &classes, cfg.synth.n, &mut rng)?;
    let path = cfg.out.join("synthetic.csv");
    write_features_csv(&path, &set.labels, &set.x)?;
    println!("wrote {} rows to {}", set.labels.len(), path.display());
    Ok(())
}
