//! Mini-batch AdamW training on the total Chamfer loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ModelConfig, SampleRecord};
use crate::diffcore::AdamW;
use crate::error::{Error, Result};
use crate::geometry::chamfer_l1;
use crate::model::{LossGrads, SymmCompletion};

pub const BETAS: (f64, f64) = (0.9, 0.999);
pub const LOG_HEADER: &str = "epoch,train_cd,val_cd,seconds";

/// One training-log row. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean l1 Chamfer distance of the final output over the training set.
    pub train_cd: f64,
    pub val_cd: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("{},{:.6e},{:.6e},{:.3}", self.epoch, self.train_cd, self.val_cd, self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub param_count: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.log {
            let _ = writeln!(s, "{}", e.line());
        }
        s
    }
}

/// Mean l1 Chamfer distance of the final output; NaN for an empty set.
pub fn mean_final_cd(model: &SymmCompletion, samples: &[SampleRecord]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let cds: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let c = model.complete(&s.partial)?;
            Ok(chamfer_l1(c.fines.last().unwrap(), &s.gt))
        })
        .collect::<Result<_>>()?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

/// Trains a fresh model; see [`train_with`].
pub fn train(cfg: &ModelConfig, train_set: &[SampleRecord], val_set: &[SampleRecord]) -> Result<(SymmCompletion, TrainReport)> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch AdamW. Per-sample
/// gradients may be computed in parallel but are summed in sample order, so
/// the result does not depend on the thread count. `on_epoch` sees each log
/// row as it is produced.
pub fn train_with(
    cfg: &ModelConfig,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(SymmCompletion, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Size("training set is empty".into()));
    }
    let mut model = SymmCompletion::new(cfg)?;
    let mut opt = AdamW::new(cfg.lr, BETAS, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    let t0 = Instant::now();
    let row = EpochLog {
        epoch: 0,
        train_cd: mean_final_cd(&model, train_set)?,
        val_cd: mean_final_cd(&model, val_set)?,
        seconds: t0.elapsed().as_secs_f64(),
    };
    on_epoch(&row);
    log.push(row);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut cd_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let steps: Vec<(LossGrads, f64)> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let lg = model.loss_and_grads(&s.partial, &s.gt)?;
                    let cd = chamfer_l1(&lg.fine, &s.gt);
                    Ok((lg, cd))
                })
                .collect::<Result<_>>()?;
            let mut acc: Vec<Vec<f64>> = model.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            let mut batch_loss = 0.0;
            for (s, cd) in &steps {
                batch_loss += s.loss;
                cd_sum += cd;
                for (a, g) in acc.iter_mut().zip(&s.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / steps.len() as f64;
            batch_loss *= inv;
            let grads_finite = acc.iter().flatten().all(|x| x.is_finite());
            if !batch_loss.is_finite() || !grads_finite {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: batch_loss,
                });
            }
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x *= inv;
                }
            }
            opt.step(&mut model.store, &acc)?;
        }
        let row = EpochLog {
            epoch,
            train_cd: cd_sum / train_set.len() as f64,
            val_cd: mean_final_cd(&model, val_set)?,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    let param_count = model.param_count();
    Ok((model, TrainReport { log, param_count }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::gen_synthetic;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_k: 8,
            c: 8,
            enc_channels: 4,
            heads: 2,
            knn_k: 4,
            ratios: [2, 2],
            epochs: 2,
            batch_size: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = gen_synthetic(0, 3, 128).unwrap();
        let cfg = ModelConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..tiny()
        };
        let (model, report) = train(&cfg, &data, &[]).unwrap();
        let fresh = SymmCompletion::new(&cfg).unwrap();
        for (a, b) in model.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(report.log.len(), 3);
        assert!(report.log[0].val_cd.is_nan());
    }

    #[test]
    fn log_format() {
        let row = EpochLog {
            epoch: 3,
            train_cd: 0.5,
            val_cd: 0.25,
            seconds: 1.5,
        };
        assert_eq!(row.line(), "3,5.000000e-1,2.500000e-1,1.500");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(train(&tiny(), &[], &[]), Err(Error::Size(_))));
    }
}
