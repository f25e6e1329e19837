//! The six pipeline subcommands.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchvq::cache::{encode_dataset, FeatureCache};
use patchvq::classifier::train::{evaluate, train, EpochMetrics, FeatureSource, TrainConfig};
use patchvq::classifier::{load_model, save_model, ClassifierModel, ModelConfig};
use patchvq::dataset::{load_cifar10, patch_at, LabeledImageSet, Patch, Split};
use patchvq::dictionary::{
    load_dictionary, sample_dictionary, sample_gaussian_dictionary, save_dictionary, Dictionary,
};
use patchvq::encoder::EncoderFilters;
use patchvq::pipeline::{encode_set_in_memory, AugmentingEncoderSource};
use patchvq::whitening::{
    build_whitening_operator, estimate_patch_moments, load_whitening_operator,
    save_whitening_operator, WhiteningOperator,
};
use patchvq::{analysis, whitening::Orientation};

use crate::config::ExperimentConfig;

fn load_split(config: &ExperimentConfig, split: Split) -> Result<LabeledImageSet> {
    load_cifar10(&config.dataset_root, split)
        .with_context(|| format!("loading CIFAR-10 from {}", config.dataset_root.display()))
}

/// Random patches drawn with replacement for moment estimation.
fn sample_patches(
    set: &LabeledImageSet,
    count: usize,
    patch_side: usize,
    seed: u64,
) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = set.images[0].side();
    (0..count)
        .map(|_| {
            let img = rng.gen_range(0..set.len());
            let row = rng.gen_range(0..=n - patch_side);
            let col = rng.gen_range(0..=n - patch_side);
            patch_at(&set.images[img], row, col, patch_side)
        })
        .collect()
}

fn fit_whitening(
    set: &LabeledImageSet,
    patch_side: usize,
    lambda: f64,
    moment_sample: usize,
    orientation: Orientation,
    seed: u64,
) -> Result<WhiteningOperator> {
    let patches = sample_patches(set, moment_sample, patch_side, seed);
    let moments = estimate_patch_moments(&patches)?;
    Ok(build_whitening_operator(&moments, lambda, orientation)?)
}

fn build_artifacts(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
) -> Result<(WhiteningOperator, Dictionary)> {
    let d = &config.dictionary;
    let op = fit_whitening(
        train_set,
        d.patch_side,
        d.lambda,
        d.moment_sample,
        config.orientation()?,
        config.seeds.dictionary,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.dictionary ^ 0xd1c7);
    let dict = if d.gaussian {
        sample_gaussian_dictionary(d.size, d.patch_side, config.seeds.dictionary, &mut rng)?
    } else {
        sample_dictionary(
            train_set,
            d.size,
            d.patch_side,
            &op,
            config.seeds.dictionary,
            &mut rng,
        )?
    };
    Ok((op, dict))
}

pub fn cmd_build_dict(config: &ExperimentConfig) -> Result<()> {
    let run_dir = crate::runs::create_run_dir(config, "build-dict")?;
    let train_set = load_split(config, Split::Train)?;
    let (op, dict) = build_artifacts(config, &train_set)?;
    std::fs::create_dir_all(&config.artifacts_dir)
        .with_context(|| format!("creating {}", config.artifacts_dir.display()))?;
    save_whitening_operator(&op, &config.whitening_file())?;
    save_dictionary(&dict, &config.dict_file())?;
    println!(
        "dictionary: |D|={} ({}), P={}, lambda={}, dExt={}, atoms={}",
        dict.base_size,
        if config.dictionary.gaussian {
            "gaussian"
        } else {
            "image patches"
        },
        dict.patch_side,
        config.dictionary.lambda,
        op.dim(),
        dict.num_atoms(),
    );
    println!(
        "wrote {} and {} (run {})",
        config.whitening_file().display(),
        config.dict_file().display(),
        run_dir.display()
    );
    Ok(())
}

fn load_artifacts(config: &ExperimentConfig) -> Result<(WhiteningOperator, Dictionary)> {
    let op = load_whitening_operator(&config.whitening_file())
        .context("loading whitening operator (run build-dict first)")?;
    let dict =
        load_dictionary(&config.dict_file()).context("loading dictionary (run build-dict first)")?;
    Ok((op, dict))
}

/// True when a cache file already holds a readable encoding of `count`
/// records.
fn cache_is_complete(path: &Path, count: usize) -> bool {
    matches!(FeatureCache::open(path), Ok(c) if c.len() == count)
}

pub fn cmd_encode(config: &ExperimentConfig) -> Result<()> {
    let _run_dir = crate::runs::create_run_dir(config, "encode")?;
    let (op, dict) = load_artifacts(config)?;
    let filters = EncoderFilters::new(&dict, &op)?;
    let q = config.resolved_q();
    let assignment = config.assignment()?;
    for (split, path) in [
        (Split::Train, config.train_cache()),
        (Split::Test, config.test_cache()),
    ] {
        let set = load_split(config, split)?;
        if cache_is_complete(&path, set.len()) {
            println!("{}: cache complete, skipping", path.display());
            continue;
        }
        let start = Instant::now();
        let shape = encode_dataset(
            &set,
            &filters,
            q,
            assignment,
            config.encoder.pool_kernel,
            config.encoder.pool_stride,
            &path,
        )?;
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{}: {} images -> [{}, {}, {}] in {:.1}s ({:.1} img/s)",
            path.display(),
            set.len(),
            shape.channels,
            shape.height,
            shape.width,
            secs,
            set.len() as f64 / secs
        );
    }
    Ok(())
}

fn model_config(config: &ExperimentConfig, in_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        k2: config.classifier.k2,
        c2: config.classifier.c2,
        k3: config.classifier.k3,
        hidden_relu: config.classifier.hidden,
        num_classes: 10,
    }
}

fn train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.train.epochs,
        initial_lr: config.train.lr,
        decay_factor: config.train.decay_factor,
        decay_epochs: config.train.decay_epochs.clone(),
        momentum: config.train.momentum,
        batch_size: config.train.batch_size,
        seed: config.seeds.training,
    }
}

fn run_training(
    config: &ExperimentConfig,
    train_source: &mut dyn FeatureSource,
    test_source: &dyn FeatureSource,
    metrics_path: &Path,
) -> Result<(ClassifierModel, f64)> {
    let (channels, _, _) = train_source.feature_shape();
    let mc = model_config(config, channels);
    let mut model = ClassifierModel::new(&mc, &mut ChaCha8Rng::seed_from_u64(config.seeds.training));
    let mut csv = std::fs::File::create(metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(csv, "{}", EpochMetrics::CSV_HEADER)?;
    let mut on_epoch = |m: &EpochMetrics| {
        let _ = writeln!(csv, "{}", m.to_csv_row());
        eprintln!(
            "epoch {:3}  lr {:.2e}  loss {:.4}  train {:.4}  test {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
        );
    };
    train(
        &mut model,
        train_source,
        Some(test_source),
        &train_config(config),
        Some(&mut on_epoch),
    )?;
    let acc = evaluate(&mut model, test_source, config.train.batch_size)?;
    Ok((model, acc))
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let run_dir = crate::runs::create_run_dir(config, "train")?;
    let metrics_path = run_dir.join("metrics.csv");
    let accuracy = if config.train.augment {
        let (op, dict) = load_artifacts(config)?;
        let filters = EncoderFilters::new(&dict, &op)?;
        let train_set = load_split(config, Split::Train)?;
        let test_set = load_split(config, Split::Test)?;
        let q = config.resolved_q();
        let assignment = config.assignment()?;
        let test_features = encode_set_in_memory(
            &test_set,
            &filters,
            q,
            assignment,
            config.encoder.pool_kernel,
            config.encoder.pool_stride,
        )?;
        let mut source = AugmentingEncoderSource::new(
            &train_set,
            &filters,
            q,
            assignment,
            config.encoder.pool_kernel,
            config.encoder.pool_stride,
            config.seeds.augmentation,
        );
        let (model, acc) = run_training(config, &mut source, &test_features, &metrics_path)?;
        save_model(&model, &config.model_file())?;
        acc
    } else {
        let mut train_cache = FeatureCache::open(&config.train_cache())
            .context("opening train cache (run encode first, or set train.augment)")?;
        let test_cache =
            FeatureCache::open(&config.test_cache()).context("opening test cache (run encode first)")?;
        let (model, acc) = run_training(config, &mut train_cache, &test_cache, &metrics_path)?;
        save_model(&model, &config.model_file())?;
        acc
    };
    println!("test accuracy: {accuracy:.4}");
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<()> {
    let mut model =
        load_model(&config.model_file()).context("loading model (run train first)")?;
    let test_cache =
        FeatureCache::open(&config.test_cache()).context("opening test cache (run encode first)")?;
    let acc = evaluate(&mut model, &test_cache, config.train.batch_size)?;
    println!("test accuracy: {acc:.4}");
    Ok(())
}

pub fn cmd_analyze(config: &ExperimentConfig) -> Result<()> {
    let run_dir = crate::runs::create_run_dir(config, "analyze")?;
    let train_set = load_split(config, Split::Train)?;
    let a = &config.analysis;

    // normalized covariance spectrum per patch size
    for &p in &a.patch_sides {
        let patches = sample_patches(&train_set, a.moment_sample, p, config.seeds.dictionary ^ p as u64);
        let moments = estimate_patch_moments(&patches)?;
        let spectrum = analysis::covariance_spectrum(&moments.covariance, true)?;
        let path = run_dir.join(format!("spectrum-p{p}.csv"));
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "index,value")?;
        for (i, v) in spectrum.values.iter().enumerate() {
            writeln!(f, "{i},{v}")?;
        }
    }

    let sweep = analysis::SweepConfig {
        patch_sides: a.patch_sides.clone(),
        lambda: a.lambda,
        moment_sample: a.moment_sample,
        knn_sample: a.knn_sample,
        neighbor_horizon: a.neighbor_horizon,
        anchor_budget: Some(a.anchor_budget),
        seed: config.seeds.dictionary,
    };
    let reports = analysis::dimension_sweep(&train_set, &sweep)?;
    let path = run_dir.join("dimensions.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "{}", analysis::DIMENSION_CSV_HEADER)?;
    for report in &reports {
        writeln!(f, "{}", report.to_csv_row())?;
        println!("{}", report.to_csv_row());
    }
    println!("analysis written to {}", run_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    /// dictionary size |D|
    DictSize,
    /// number of selected neighbors Q
    Q,
    /// patch side P
    P,
    /// whitening regularizer λ
    Lambda,
}

fn apply_axis(config: &mut ExperimentConfig, axis: AblationAxis, value: f64) -> Result<()> {
    match axis {
        AblationAxis::DictSize => config.dictionary.size = value as usize,
        AblationAxis::Q => config.encoder.q = Some(value as usize),
        AblationAxis::P => config.dictionary.patch_side = value as usize,
        AblationAxis::Lambda => config.dictionary.lambda = value,
    }
    config.validate()
}

/// Full pipeline for one configuration: dictionary, disk caches under
/// `work`, training, evaluation.
fn pipeline_accuracy(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    work: &Path,
) -> Result<f64> {
    let (op, dict) = build_artifacts(config, train_set)?;
    let filters = EncoderFilters::new(&dict, &op)?;
    let q = config.resolved_q();
    let assignment = config.assignment()?;
    let train_path = work.join("train.cache");
    let test_path = work.join("test.cache");
    for (set, path) in [(train_set, &train_path), (test_set, &test_path)] {
        encode_dataset(
            set,
            &filters,
            q,
            assignment,
            config.encoder.pool_kernel,
            config.encoder.pool_stride,
            path,
        )?;
    }
    let mut train_cache = FeatureCache::open(&train_path)?;
    let test_cache = FeatureCache::open(&test_path)?;
    let (_, acc) = run_training(config, &mut train_cache, &test_cache, &work.join("metrics.csv"))?;
    let _ = std::fs::remove_file(&train_path);
    let _ = std::fs::remove_file(&test_path);
    Ok(acc)
}

pub fn cmd_ablate(config: &ExperimentConfig, axis: AblationAxis, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        bail!("ablation needs at least one value");
    }
    let run_dir = crate::runs::create_run_dir(config, "ablate")?;
    let train_set = load_split(config, Split::Train)?;
    let test_set = load_split(config, Split::Test)?;
    let csv_path = run_dir.join("ablation.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "axis,value,testAcc")?;
    for &value in values {
        let mut variant = config.clone();
        apply_axis(&mut variant, axis, value)?;
        let work = run_dir.join(format!("value-{value}"));
        std::fs::create_dir_all(&work)?;
        let acc = pipeline_accuracy(&variant, &train_set, &test_set, &work)?;
        writeln!(csv, "{axis:?},{value},{acc}")?;
        println!("{axis:?} = {value}: test accuracy {acc:.4}");
    }
    println!("ablation written to {}", csv_path.display());
    Ok(())
}
