use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, RngState};
use super::data::{Dataset, MetricsRow};
use super::generator::rotate_augment;
use super::loss::{tape_loss, LossTerms, LossWeights};
use super::optim::{lr_schedule, AdamW, AdamWConfig};
use super::{Result, TrainError};
use crate::model::{forward, render, ModelConfig, ModelWeights, Params};
use crate::oracle::{psnr, sample_seed, Psnr};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub resolution: [u32; 2],
    pub max_triangles: usize,
    /// Random scene rotation per sample.
    pub augment: bool,
    /// The last `holdout` manifest records are kept out of training and
    /// used for the PSNR column; with 0 the training records are scored.
    pub holdout: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Stop at the first logged PSNR at or above this value.
    pub target_psnr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1,
            warmup_steps: 200,
            peak_lr: 1e-3,
            total_steps: 10_000,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            resolution: [32, 32],
            max_triangles: 64,
            augment: true,
            holdout: 0,
            log_every: 100,
            checkpoint_every: 1000,
            target_psnr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return fail("need 0 < total_steps and warmup_steps <= total_steps");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return fail("peak_lr must be positive and finite");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return fail("log_every and checkpoint_every must be positive");
        }
        if !(self.loss.l1 >= 0.0 && self.loss.perceptual >= 0.0) {
            return fail("loss weights must be nonnegative");
        }
        self.optimizer.validate()
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_schedule(step, self.warmup_steps, self.total_steps, self.peak_lr)
    }
}

impl Checkpoint {
    /// Freshly initialized weights and optimizer at step 0.
    pub fn fresh(config: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let weights = ModelWeights::<f32>::init(config, train.seed)?;
        Ok(Checkpoint {
            config: config.clone(),
            optimizer: Some(AdamW::new(train.optimizer, &weights)),
            weights,
            step: 0,
            rng: RngState {
                seed: train.seed,
                step: 0,
            },
        })
    }
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one CSV line per logged row.
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint: Option<&'a Path>,
    /// Where to write the batch description when the loss goes non-finite.
    pub dump_dir: Option<&'a Path>,
    /// Stop after this step as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<MetricsRow>,
    /// Total loss of every step taken in this call.
    pub losses: Vec<f64>,
    pub reached_target: bool,
}

const BATCH_STREAM: u64 = 0xba7c;

struct StepResult {
    grads: Vec<Vec<f32>>,
    terms: LossTerms,
}

fn sample_step(
    cfg: &ModelConfig,
    weights: &ModelWeights<f32>,
    data: &Dataset,
    index: usize,
    rotation_seed: Option<u64>,
    loss: &LossWeights,
) -> Result<StepResult> {
    let sample = &data.samples[index];
    let scene = match rotation_seed {
        Some(s) => rotate_augment(&sample.scene, &mut ChaCha8Rng::seed_from_u64(s))?,
        None => sample.scene.clone(),
    };
    let mut tape = Tape::<f32>::new();
    let params = Params::bind(&mut tape, weights, true);
    let out = forward(&mut tape, cfg, &params, &scene)?;
    let v = tape_loss(&mut tape, out.log_image, &sample.reference, loss)?;
    let get = |x| tape.value(x).data()[0] as f64;
    let terms = LossTerms {
        total: get(v.total),
        l1: get(v.l1),
        perceptual: get(v.perceptual),
    };
    let vars: Vec<_> = params.iter().map(|(_, v)| *v).collect();
    let grads = tape.backward(v.total)?;
    let grads = vars
        .iter()
        .zip(weights.iter())
        .map(|(var, (_, w))| match grads.get(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; w.len()],
        })
        .collect();
    Ok(StepResult { grads, terms })
}

/// Mean log-encoded PSNR of `weights` over `indices`; infinite values count
/// as infinite only when every image matches exactly.
pub fn evaluate_psnr(
    cfg: &ModelConfig,
    weights: &ModelWeights<f32>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Psnr> {
    let scores: Vec<Psnr> = indices
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            Ok(psnr(&render(&s.scene, cfg, weights)?, &s.reference)?)
        })
        .collect::<Result<_>>()?;
    let finite: Vec<f64> = scores
        .iter()
        .filter_map(|p| match p {
            Psnr::Finite(v) => Some(*v),
            Psnr::Infinite => None,
        })
        .collect();
    if finite.is_empty() {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(
        finite.iter().sum::<f64>() / finite.len() as f64,
    ))
}

fn dump_batch(dir: &Path, step: u64, data: &Dataset, batch: &[usize]) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let body = serde_json::json!({
        "step": step,
        "batch": batch,
        "records": batch.iter().map(|&i| &data.samples[i].record).collect::<Vec<_>>(),
    });
    fs::write(&path, serde_json::to_string_pretty(&body).expect("json"))
        .map_err(|e| TrainError::io(&path, e))?;
    Ok(path.display().to_string())
}

/// Runs AdamW from `start` until `cfg.total_steps`, the PSNR target, or
/// `hooks.stop_after`. Gradients of a batch are computed in parallel and
/// summed in batch order, so results do not depend on the thread count.
pub fn train_loop(
    start: Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    start.config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if cfg.holdout >= data.len() {
        return Err(TrainError::Config(format!(
            "holdout {} leaves no training records out of {}",
            cfg.holdout,
            data.len()
        )));
    }
    for (i, s) in data.samples.iter().enumerate() {
        let res = [s.scene.camera.width, s.scene.camera.height];
        if res != cfg.resolution {
            return Err(TrainError::Manifest {
                line: i + 1,
                message: format!(
                    "resolution {res:?} differs from training resolution {:?}",
                    cfg.resolution
                ),
            });
        }
        s.scene.validate(cfg.max_triangles)?;
    }
    let n_train = data.len() - cfg.holdout;
    let eval: Vec<usize> = if cfg.holdout > 0 {
        (n_train..data.len()).collect()
    } else {
        (0..n_train).collect()
    };

    let Checkpoint {
        config,
        mut weights,
        mut step,
        optimizer,
        rng,
    } = start;
    let mut opt = optimizer.unwrap_or_else(|| AdamW::new(cfg.optimizer, &weights));
    let seed = rng.seed;
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0u64);
    let mut reached_target = false;

    let save = |weights: &ModelWeights<f32>, opt: &AdamW, step: u64| -> Result<()> {
        if let Some(path) = hooks.checkpoint {
            let ck = Checkpoint {
                config: config.clone(),
                weights: weights.clone(),
                step,
                optimizer: Some(opt.clone()),
                rng: RngState { seed, step },
            };
            save_checkpoint(&ck, path)?;
        }
        Ok(())
    };

    while step < cfg.total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, step, BATCH_STREAM));
        let batch: Vec<(usize, Option<u64>)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..n_train);
                (i, cfg.augment.then(|| rng.random::<u64>()))
            })
            .collect();
        let results: Vec<StepResult> = batch
            .par_iter()
            .map(|&(i, rot)| sample_step(&config, &weights, data, i, rot, &cfg.loss))
            .collect::<Result<_>>()?;

        let ids: Vec<usize> = batch.iter().map(|b| b.0).collect();
        let nonfinite = results.iter().any(|r| {
            !r.terms.total.is_finite() || r.grads.iter().flatten().any(|g| !g.is_finite())
        });
        if nonfinite {
            let dump = match hooks.dump_dir {
                Some(dir) => Some(dump_batch(dir, step, data, &ids)?),
                None => None,
            };
            return Err(TrainError::NonFinite {
                step,
                batch: ids,
                dump,
            });
        }

        let inv = 1.0 / cfg.batch_size as f32;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
        if cfg.batch_size > 1 {
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
        }
        let mut mean = LossTerms {
            total: 0.0,
            l1: 0.0,
            perceptual: 0.0,
        };
        for r in &results {
            mean.total += r.terms.total / cfg.batch_size as f64;
            mean.l1 += r.terms.l1 / cfg.batch_size as f64;
            mean.perceptual += r.terms.perceptual / cfg.batch_size as f64;
        }

        let lr = cfg.lr(step + 1);
        opt.update(&mut weights, &grads, lr)?;
        if !weights.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                batch: ids,
                dump: None,
            });
        }
        step += 1;
        losses.push(mean.total);
        window.0 += mean.total;
        window.1 += mean.l1;
        window.2 += mean.perceptual;
        window.3 += 1;

        let last = step == cfg.total_steps || hooks.stop_after == Some(step);
        if step % cfg.log_every == 0 || last {
            let n = window.3 as f64;
            let score = evaluate_psnr(&config, &weights, data, &eval)?;
            let row = MetricsRow {
                step,
                lr,
                loss_total: window.0 / n,
                loss_l1: window.1 / n,
                loss_perc: window.2 / n,
                psnr_holdout: score,
            };
            window = (0.0, 0.0, 0.0, 0);
            log::info!("{}", row.to_csv());
            if let Some(out) = hooks.metrics.as_deref_mut() {
                writeln!(out, "{}", row.to_csv())
                    .map_err(|e| TrainError::io(Path::new("<metrics>"), e))?;
            }
            rows.push(row);
            if cfg.target_psnr.is_some_and(|t| score.value() >= t) {
                reached_target = true;
            }
        }
        if step % cfg.checkpoint_every == 0 || last || reached_target {
            save(&weights, &opt, step)?;
        }
        if reached_target || hooks.stop_after == Some(step) {
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config,
            weights,
            step,
            optimizer: Some(opt),
            rng: RngState { seed, step },
        },
        rows,
        losses,
        reached_target,
    })
}
