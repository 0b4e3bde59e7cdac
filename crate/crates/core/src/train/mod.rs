//! Training, evaluation and noise sweeps with CSV and checkpoint output.

mod adam;
mod checkpoint;
mod config;
mod metrics;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use adam::{adam_step, adam_update, AdamState};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use metrics::{
    read_metrics, read_sweep, read_uncertainty, sig9, write_metrics, write_sweep, write_uncertainty, MetricsRow,
    SweepRow, UncertaintyRow, METRICS_HEADER, SWEEP_HEADER, UNCERTAINTY_HEADER,
};

use crate::data::{add_noise, adapt_input, batches, load_split, BatchPlan, Dataset, DatasetKind, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::layers::{derive_seed, NoiseStream};
use crate::objective::{free_energy, KlWeightSchedule};
use crate::uncertainty::{argmax, batch_uncertainty, NormalizerKind};
use crate::zoo::Model;
use crate::Real;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const UNCERTAINTY_FILE: &str = "uncertainty.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

// domain tags mixed into the run seed
const SHUFFLE_KEY: u64 = 1;
const TRAIN_NOISE_KEY: u64 = 2;
const UNCERTAINTY_KEY: u64 = 3;
const SWEEP_NOISE_KEY: u64 = 4;

/// Images per forward pass when scoring accuracy.
const SCORE_CHUNK: usize = 256;

/// Writes `path` through a sibling temporary file and a rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    write(&mut f).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}

/// Training and validation images brought to the model's input shape.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
}

fn limit(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

/// Loads `train_n` training images and `val_n` images from the start of
/// the test split (which serves as validation set).
pub fn load_run_data(cfg: &TrainConfig) -> Result<RunData> {
    let shape = cfg.input_shape();
    let train = load_split(&cfg.data_dir, cfg.dataset, Split::Train, limit(cfg.train_n))?;
    let val = load_split(&cfg.data_dir, cfg.dataset, Split::Test, limit(cfg.val_n))?;
    Ok(RunData {
        train: adapt_input(&train, shape)?,
        val: adapt_input(&val, shape)?,
    })
}

/// Fraction of images whose normalized posterior-mean prediction matches
/// the label.
pub fn map_accuracy(model: &Model, ds: &Dataset) -> Result<Real> {
    if ds.is_empty() {
        return Err(Error::Contract("no images to score".into()));
    }
    let c = model.spec.num_classes;
    let mut hits = 0;
    let noise = NoiseStream::new(0, 0);
    for start in (0..ds.len()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(ds.len());
        let logits = model.forward(&ds.images.slice_outer(start, end), &noise, false)?;
        for (row, &label) in logits.data().chunks(c).zip(&ds.labels[start..end]) {
            if argmax(&NormalizerKind::SoftplusN.apply(row)?) == label {
                hits += 1;
            }
        }
    }
    Ok(hits as Real / ds.len() as Real)
}

fn check_classes(model: &Model, ds: &Dataset) -> Result<()> {
    if model.spec.num_classes != ds.num_classes {
        return Err(Error::Contract(format!(
            "model predicts {} classes but {} has {}",
            model.spec.num_classes, ds.name, ds.num_classes
        )));
    }
    Ok(())
}

/// Settings a resumed run may change without invalidating the state.
fn resumable_view(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: 0,
        checkpoint_every: 1,
        data_dir: PathBuf::new(),
        ..cfg.clone()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
}

/// [`train_on`] with data loaded per the config.
pub fn train(
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_run_data(cfg)?;
    train_on(cfg, &data, out_dir, resume, progress)
}

/// Runs epochs `1..=cfg.epochs` (or continues after a checkpoint), writing
/// `metrics.csv` after every epoch and `checkpoint.bin` every
/// `checkpoint_every` epochs and at the end.
///
/// Minibatch `i` of epoch `e` draws the noise of pass `s` for its `k`-th
/// image from a seed derived from `(seed, e, i, s, k)`, so a run is fully
/// determined by its config and resuming replays the same randomness.
pub fn train_on(
    cfg: &TrainConfig,
    data: &RunData,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let (mut model, mut adam, first_epoch, mut rows) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if resumable_view(&ck.config) != resumable_view(cfg) {
                return Err(Error::Contract(format!(
                    "checkpoint {} was written by a different configuration",
                    path.display()
                )));
            }
            let rows: Vec<MetricsRow> = if metrics_path.exists() {
                read_metrics(&metrics_path)?.into_iter().filter(|r| r.epoch <= ck.epoch).collect()
            } else {
                Vec::new()
            };
            (ck.model()?, ck.adam.clone(), ck.epoch + 1, rows)
        }
        None => {
            let model = cfg.build_model()?;
            let adam = AdamState::for_model(&model);
            (model, adam, 1, Vec::new())
        }
    };
    check_classes(&model, &data.train)?;
    check_classes(&model, &data.val)?;
    if data.train.image_shape() != model.spec.input_shape || data.val.image_shape() != model.spec.input_shape {
        return Err(Error::Contract(format!(
            "images {:?} do not match model input {:?}",
            data.train.image_shape(),
            model.spec.input_shape
        )));
    }

    let plan = BatchPlan::new(cfg.batch_size, derive_seed(cfg.seed, &[SHUFFLE_KEY]));
    let schedule = KlWeightSchedule::new(plan.num_batches(data.train.len()))?;
    let slice = data.val.head(cfg.uncertainty_slice.min(data.val.len()));

    for epoch in first_epoch..=cfg.epochs as u64 {
        let started = Instant::now();
        let (mut nll, mut kl, mut total) = (0.0, 0.0, 0.0);
        for batch in batches(&data.train, &plan, epoch)? {
            let nb = batch.labels.len();
            let (bi, noise_seed) = (batch.index as u64, cfg.seed);
            let fe = free_energy(
                &model,
                &batch.images,
                &batch.labels,
                schedule,
                batch.index,
                cfg.mc_samples,
                cfg.prior,
                |s| {
                    let seeds = (0..nb as u64)
                        .map(|k| derive_seed(noise_seed, &[TRAIN_NOISE_KEY, epoch, bi, s as u64, k]))
                        .collect();
                    NoiseStream::per_sample(seeds, 0)
                },
            )?;
            nll += fe.loss.nll;
            kl += fe.loss.kl;
            total += fe.loss.total;
            adam_step(&mut model, &fe.grads, &mut adam, cfg.learning_rate, cfg.weight_decay)?;
        }
        let m = schedule.batches() as Real;

        let unc = batch_uncertainty(
            &model,
            &slice.images,
            Some(&slice.labels),
            cfg.eval_samples,
            NormalizerKind::SoftplusN,
            derive_seed(cfg.seed, &[UNCERTAINTY_KEY]),
            true,
        )?;
        let val_acc = if cfg.mc_validation {
            batch_uncertainty(
                &model,
                &data.val.images,
                Some(&data.val.labels),
                cfg.eval_samples,
                NormalizerKind::SoftplusN,
                derive_seed(cfg.seed, &[UNCERTAINTY_KEY]),
                true,
            )?
            .accuracy
            .expect("labels given")
        } else {
            map_accuracy(&model, &data.val)?
        };
        let row = MetricsRow {
            epoch,
            train_nll: nll / m,
            train_kl: kl / m,
            train_total: total / m,
            train_acc: map_accuracy(&model, &data.train)?,
            val_acc,
            val_aleatoric: unc.aleatoric,
            val_epistemic: unc.epistemic,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        rows.push(row);
        write_metrics(&metrics_path, &rows)?;
        if epoch % cfg.checkpoint_every as u64 == 0 || epoch == cfg.epochs as u64 {
            Checkpoint::capture(cfg, epoch, &model, &adam).save(&checkpoint_path)?;
        }
    }
    Ok(TrainOutcome {
        model,
        metrics: rows,
        checkpoint: checkpoint_path,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracy: Real,
    pub aleatoric: Real,
    pub epistemic: Real,
    pub images: usize,
}

/// Monte-Carlo evaluation of `model` on `ds`: accuracy of the mean
/// prediction and mean scalar uncertainties, plus one row per image.
pub fn evaluate_on(
    model: &Model,
    ds: &Dataset,
    samples: usize,
    normalizer: NormalizerKind,
    seed: u64,
) -> Result<(EvalSummary, Vec<UncertaintyRow>)> {
    check_classes(model, ds)?;
    let b = batch_uncertainty(model, &ds.images, Some(&ds.labels), samples, normalizer, seed, true)?;
    let rows = b
        .per_image
        .iter()
        .zip(&ds.labels)
        .enumerate()
        .map(|(i, (u, &label))| UncertaintyRow {
            image_index: i,
            scalar_aleatoric: u.scalar_aleatoric,
            scalar_epistemic: u.scalar_epistemic,
            predicted: u.predicted,
            label,
        })
        .collect();
    Ok((
        EvalSummary {
            accuracy: b.accuracy.expect("labels given"),
            aleatoric: b.aleatoric,
            epistemic: b.epistemic,
            images: ds.len(),
        },
        rows,
    ))
}

/// Loads `limit` test-split images of `dataset` shaped for `model`.
pub fn load_eval_data(model: &Model, data_dir: &Path, dataset: DatasetKind, limit: Option<usize>) -> Result<Dataset> {
    let ds = load_split(data_dir, dataset, Split::Test, limit)?;
    let ds = adapt_input(&ds, model.spec.input_shape)?;
    check_classes(model, &ds)?;
    Ok(ds)
}

/// Evaluates a checkpoint on the test split of `dataset` and writes
/// `uncertainty.csv` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    checkpoint: &Checkpoint,
    data_dir: &Path,
    dataset: DatasetKind,
    limit: Option<usize>,
    samples: usize,
    normalizer: NormalizerKind,
    seed: u64,
    out_dir: &Path,
) -> Result<EvalSummary> {
    let model = checkpoint.model()?;
    if model.spec.num_classes != dataset.num_classes() {
        return Err(Error::Contract(format!(
            "checkpoint predicts {} classes but {dataset} has {}",
            model.spec.num_classes,
            dataset.num_classes()
        )));
    }
    let ds = load_eval_data(&model, data_dir, dataset, limit)?;
    let (summary, rows) = evaluate_on(&model, &ds, samples, normalizer, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    write_uncertainty(&out_dir.join(UNCERTAINTY_FILE), &rows)?;
    Ok(summary)
}

/// Scalar uncertainties of `ds` after adding pixel noise of each level in
/// `gammas`. Every level uses its own fixed noise seed and the same
/// Monte-Carlo seed, so the `γ = 0` row equals a plain evaluation.
pub fn noise_sweep_on(
    model: &Model,
    ds: &Dataset,
    gammas: &[Real],
    samples: usize,
    normalizer: NormalizerKind,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() {
        return Err(Error::Contract("no noise levels given".into()));
    }
    gammas
        .iter()
        .map(|&gamma| {
            let noisy = add_noise(
                ds,
                NoiseSpec {
                    gamma,
                    seed: derive_seed(seed, &[SWEEP_NOISE_KEY, gamma.to_bits()]),
                },
            )?;
            let (s, _) = evaluate_on(model, &noisy, samples, normalizer, seed)?;
            Ok(SweepRow {
                gamma,
                aleatoric: s.aleatoric,
                epistemic: s.epistemic,
            })
        })
        .collect()
}

/// Noise sweep of a checkpoint over the first `slice` validation images
/// of its own dataset; writes `sweep.csv` into `out_dir`.
pub fn noise_sweep(
    checkpoint: &Checkpoint,
    gammas: &[Real],
    slice: usize,
    samples: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let model = checkpoint.model()?;
    let cfg = &checkpoint.config;
    let ds = load_eval_data(&model, &cfg.data_dir, cfg.dataset, limit(slice))?;
    let rows = noise_sweep_on(&model, &ds, gammas, samples, NormalizerKind::SoftplusN, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    write_sweep(&out_dir.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}
