//! SGD with momentum on clean (standard) or PGD-perturbed (adversarial)
//! mini-batches.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::{DatasetShard, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Network, Regime};
use crate::tensor::{argmax, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub lr_decay_factor: f32,
    pub lr_decay_every: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Used to build training batches in the adversarial regime and for
    /// adversarial validation in every regime.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub seed: u64,
    /// Adversarial validation runs every this many epochs (and after the last).
    #[serde(default = "default_adv_every")]
    pub adv_eval_every: usize,
    /// Epochs over which the training-time ε (and α) ramp linearly up to the
    /// configured values. Zero disables the ramp.
    #[serde(default)]
    pub eps_warmup_epochs: usize,
}

fn default_adv_every() -> usize {
    5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Standard,
            epochs: 30,
            batch_size: 128,
            lr0: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_every: 15,
            momentum: 0.9,
            weight_decay: 1e-4,
            attack: Some(AttackConfig::default()),
            seed: 0,
            adv_eval_every: default_adv_every(),
            eps_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 >= 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("learning-rate schedule must be non-negative with a positive decay factor and period");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0,1) and weight_decay >= 0");
        }
        if self.adv_eval_every == 0 {
            return bad("adv_eval_every must be positive");
        }
        match (&self.regime, &self.attack) {
            (Regime::Adversarial, None) => return bad("adversarial regime requires an attack config"),
            (_, Some(a)) => a.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Attack used to build training batches during `epoch` (0-based).
    pub fn train_attack_at(&self, epoch: usize) -> Option<AttackConfig> {
        let a = self.attack?;
        if epoch >= self.eps_warmup_epochs {
            return Some(a);
        }
        let f = (epoch + 1) as f32 / (self.eps_warmup_epochs + 1) as f32;
        Some(AttackConfig {
            epsilon: a.epsilon * f,
            alpha: a.alpha * f,
            steps: a.steps,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub adv_acc: Option<f64>,
    pub lr: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub steps: usize,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,train_acc,val_acc,adv_acc,lr,seconds";

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
        for r in &self.rows {
            let adv = r.adv_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{},{},{:.3}",
                r.epoch, r.loss, r.train_acc, r.val_acc, adv, r.lr, r.seconds
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Trains `net` in place and returns it with a per-epoch log.
///
/// Each step: build the batch (clean, or PGD against the current weights),
/// compute mean cross-entropy, then `v ← μv − lr(g + λθ)`, `θ ← θ + v`, with
/// weight decay on weights only.
pub fn train(
    mut net: Network,
    train_shard: &DatasetShard,
    val_shard: &DatasetShard,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train_shard.is_empty() || val_shard.is_empty() {
        return Err(Error::Config("training and validation shards must be nonempty".into()));
    }
    let names: Vec<String> = net.params.keys().cloned().collect();
    let decays: Vec<bool> = names.iter().map(|n| n.ends_with(".weight")).collect();
    let mut velocity: Vec<Vec<f32>> = net.params.values().map(|t| vec![0.0; t.numel()]).collect();
    let labels = train_shard.labels_usize();
    let mut log = TrainLog::default();
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let train_attack = cfg.train_attack_at(epoch);
        let mut order: Vec<usize> = (0..train_shard.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let clean = train_shard.batch(chunk);
            let input = match (cfg.regime, &train_attack) {
                (Regime::Adversarial, Some(a)) => {
                    let preds = net.predict(clean.clone(), &ForwardOptions::default())?;
                    correct += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
                    attack::perturb(&net, &clean, &y, a)?.0
                }
                _ => clean,
            };

            tape.clear();
            let params = net.bind(&mut tape, true);
            let x = tape.leaf(input);
            let trace = net.forward(&mut tape, &params, x, &ForwardOptions::default())?;
            if cfg.regime != Regime::Adversarial {
                let logits = tape.value(trace.logits).data();
                correct += logits
                    .chunks(NUM_CLASSES)
                    .map(argmax)
                    .zip(&y)
                    .filter(|(p, l)| p == *l)
                    .count();
            }
            let loss = tape.softmax_cross_entropy(trace.logits, &y)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += lv as f64 * chunk.len() as f64;
            tape.backward(loss)?;

            for (k, t) in net.params.values_mut().enumerate() {
                let g = tape.grad(params[k]).expect("parameter gradient");
                let wd = if decays[k] { cfg.weight_decay } else { 0.0 };
                let v = &mut velocity[k];
                for ((theta, vel), &gv) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = cfg.momentum * *vel - lr * (gv + wd * *theta);
                    *theta += *vel;
                }
            }
            log.steps += 1;
        }

        let val_acc = attack::clean_accuracy(&net, val_shard, 256)?;
        let adv_due = (epoch + 1) % cfg.adv_eval_every == 0 || epoch + 1 == cfg.epochs;
        let adv_acc = match (&cfg.attack, adv_due) {
            (Some(a), true) => Some(attack::evaluate(&net, val_shard, a, 256)?.adv_accuracy),
            _ => None,
        };
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            loss: loss_sum / train_shard.len() as f64,
            train_acc: correct as f64 / train_shard.len() as f64,
            val_acc,
            adv_acc,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    net.meta.regime = cfg.regime;
    net.meta.seed = cfg.seed;
    net.meta.epochs = cfg.epochs as u32;
    Ok((net, log))
}
