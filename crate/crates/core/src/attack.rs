//! L2-constrained projected gradient ascent on the input.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetShard, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Network};
use crate::tensor::{argmax, Tape, Tensor};

/// Perturbation budget and schedule. Pixels are always clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L2 radius of the perturbation ball.
    pub epsilon: f32,
    /// Length of each normalized gradient step.
    pub alpha: f32,
    pub steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            alpha: 0.25,
            steps: 7,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0 when steps > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Achieved ‖x_adv − x‖₂ per sample.
    pub delta_norm: Vec<f32>,
    /// Whether the top-1 prediction on `x_adv` differs from the label.
    pub fooled: Vec<bool>,
    /// Per-sample iterations skipped because the input gradient was zero.
    pub zero_grad_skips: usize,
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Runs PGD from a zero perturbation and returns the adversarial batch plus
/// the number of skipped zero-gradient updates. Network parameters are only
/// read.
pub(crate) fn perturb(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("attack input must lie in [0, 1]".into()));
    }
    let n = x.shape()[0];
    if y.len() != n {
        return Err(Error::Input(format!("{} labels for batch of {n}", y.len())));
    }
    let row = x.numel() / n;
    let mut delta = vec![0.0f32; x.numel()];
    let mut x_adv = x.clone();
    let mut skips = 0;
    let mut tape = Tape::new();
    for _ in 0..cfg.steps {
        tape.clear();
        let params = net.bind(&mut tape, false);
        let xv = tape.leaf(x_adv.clone().with_grad());
        let trace = net.forward(&mut tape, &params, xv, &ForwardOptions::default())?;
        let loss = tape.softmax_cross_entropy(trace.logits, y)?;
        tape.backward(loss)?;
        let grad = tape.grad(xv).expect("input requires grad");
        for i in 0..n {
            let g = &grad[i * row..(i + 1) * row];
            let d = &mut delta[i * row..(i + 1) * row];
            let gn = l2(g);
            if gn == 0.0 {
                skips += 1;
            } else {
                let step = (cfg.alpha as f64 / gn) as f32;
                d.iter_mut().zip(g).for_each(|(dv, gv)| *dv += step * gv);
            }
            let dn = l2(d);
            if dn > cfg.epsilon as f64 {
                let shrink = (cfg.epsilon as f64 / dn) as f32;
                d.iter_mut().for_each(|v| *v *= shrink);
            }
            let xs = &x.data()[i * row..(i + 1) * row];
            let xa = &mut x_adv.data_mut()[i * row..(i + 1) * row];
            for ((a, &orig), dv) in xa.iter_mut().zip(xs).zip(d.iter_mut()) {
                *a = (orig + *dv).clamp(0.0, 1.0);
                *dv = *a - orig;
            }
        }
    }
    Ok((x_adv, skips))
}

pub fn pgd(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    let (x_adv, zero_grad_skips) = perturb(net, x, y, cfg)?;
    let n = x.shape()[0];
    let row = x.numel() / n;
    let delta_norm = (0..n)
        .map(|i| {
            let a = &x_adv.data()[i * row..(i + 1) * row];
            let b = &x.data()[i * row..(i + 1) * row];
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect();
    let preds = net.predict(x_adv.clone(), &ForwardOptions::default())?;
    let fooled = preds.iter().zip(y).map(|(p, l)| p != l).collect();
    Ok(AttackResult {
        x_adv,
        delta_norm,
        fooled,
        zero_grad_skips,
    })
}

/// Adversarial evaluation over a shard, with contract statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvEval {
    pub n: usize,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
    /// Accuracy under the same attack at half the radius and step size.
    pub half_eps_accuracy: f64,
    /// Largest ‖Δ‖₂ − ε over all samples (≤ 0 when the budget holds).
    pub max_norm_excess: f64,
    pub min_pixel: f32,
    pub max_pixel: f32,
    pub zero_grad_skips: usize,
    /// Whether `steps = 0` and `epsilon = 0` both returned the clean inputs
    /// bit for bit, on the first [`DEGENERACY_SAMPLES`] samples.
    pub degenerate_exact: bool,
}

/// Samples used for the degenerate-budget check in [`evaluate`].
pub const DEGENERACY_SAMPLES: usize = 32;

/// True when neither a zero-step nor a zero-radius attack moves any pixel.
pub fn degeneracies_exact(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<bool> {
    let no_steps = AttackConfig { steps: 0, ..*cfg };
    let no_radius = AttackConfig { epsilon: 0.0, ..*cfg };
    for c in [no_steps, no_radius] {
        let (x_adv, _) = perturb(net, x, y, &c)?;
        if x_adv.data().iter().zip(x.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn evaluate(net: &Network, shard: &DatasetShard, cfg: &AttackConfig, batch_size: usize) -> Result<AdvEval> {
    if shard.is_empty() {
        return Err(Error::Config("cannot attack an empty shard".into()));
    }
    let mut out = AdvEval {
        n: shard.len(),
        clean_accuracy: 0.0,
        adv_accuracy: 0.0,
        half_eps_accuracy: 0.0,
        max_norm_excess: f64::NEG_INFINITY,
        min_pixel: f32::INFINITY,
        max_pixel: f32::NEG_INFINITY,
        zero_grad_skips: 0,
        degenerate_exact: false,
    };
    let idx: Vec<usize> = (0..shard.len()).collect();
    let head = &idx[..DEGENERACY_SAMPLES.min(idx.len())];
    let head_y: Vec<usize> = head.iter().map(|&i| shard.label(i)).collect();
    out.degenerate_exact = degeneracies_exact(net, &shard.batch(head), &head_y, cfg)?;
    let half = AttackConfig {
        epsilon: cfg.epsilon / 2.0,
        alpha: cfg.alpha / 2.0,
        steps: cfg.steps,
    };
    let (mut clean, mut adv, mut adv_half) = (0usize, 0usize, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = shard.batch(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| shard.label(i)).collect();
        let clean_pred = net.predict(x.clone(), &ForwardOptions::default())?;
        clean += clean_pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        let res = pgd(net, &x, &y, cfg)?;
        adv += res.fooled.iter().filter(|f| !**f).count();
        out.zero_grad_skips += res.zero_grad_skips;
        adv_half += pgd(net, &x, &y, &half)?.fooled.iter().filter(|f| !**f).count();
        for &d in &res.delta_norm {
            out.max_norm_excess = out.max_norm_excess.max(d as f64 - cfg.epsilon as f64);
        }
        for &v in res.x_adv.data() {
            out.min_pixel = out.min_pixel.min(v);
            out.max_pixel = out.max_pixel.max(v);
        }
    }
    out.clean_accuracy = clean as f64 / shard.len() as f64;
    out.adv_accuracy = adv as f64 / shard.len() as f64;
    out.half_eps_accuracy = adv_half as f64 / shard.len() as f64;
    Ok(out)
}

/// Top-1 accuracy under attack.
pub fn adv_accuracy(net: &Network, shard: &DatasetShard, cfg: &AttackConfig) -> Result<f64> {
    Ok(evaluate(net, shard, cfg, 256)?.adv_accuracy)
}

/// Clean top-1 accuracy of a network on a shard.
pub fn clean_accuracy(net: &Network, shard: &DatasetShard, batch_size: usize) -> Result<f64> {
    let preds = predict_shard(net, shard, batch_size, &ForwardOptions::default())?;
    let correct = preds.iter().enumerate().filter(|(i, &p)| p == shard.label(*i)).count();
    Ok(correct as f64 / shard.len().max(1) as f64)
}

/// Top-1 predictions for every sample in a shard.
pub fn predict_shard(net: &Network, shard: &DatasetShard, batch_size: usize, opts: &ForwardOptions) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(shard.len());
    let idx: Vec<usize> = (0..shard.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = net.logits(shard.batch(chunk), opts)?;
        preds.extend(logits.data().chunks(NUM_CLASSES).map(argmax));
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_train;
    use crate::model::build;

    #[test]
    fn zero_steps_is_identity() {
        let net = build("mini3", 0).unwrap();
        let shard = gen_train(1, 1).unwrap();
        let x = shard.batch(&[0, 1, 2]);
        let cfg = AttackConfig { epsilon: 1.0, alpha: 0.25, steps: 0 };
        let res = pgd(&net, &x, &[0, 1, 2], &cfg).unwrap();
        assert_eq!(res.x_adv, x);
        assert!(res.delta_norm.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let net = build("mini3", 0).unwrap();
        let shard = gen_train(1, 1).unwrap();
        let x = shard.batch(&[0, 1]);
        let cfg = AttackConfig { epsilon: 0.0, alpha: 0.25, steps: 3 };
        let res = pgd(&net, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(res.x_adv.data(), x.data());
    }

    #[test]
    fn budget_respected() {
        let net = build("mini3", 2).unwrap();
        let shard = gen_train(1, 1).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let x = shard.batch(&idx);
        let y = shard.labels_usize();
        let cfg = AttackConfig { epsilon: 0.5, alpha: 0.2, steps: 5 };
        let res = pgd(&net, &x, &y, &cfg).unwrap();
        assert!(res.delta_norm.iter().all(|&d| d <= 0.5 + 1e-5));
        assert!(res.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AttackConfig { epsilon: -1.0, alpha: 0.1, steps: 1 }.validate().is_err());
        assert!(AttackConfig { epsilon: 1.0, alpha: 0.0, steps: 1 }.validate().is_err());
        assert!(AttackConfig { epsilon: 1.0, alpha: 0.0, steps: 0 }.validate().is_ok());
    }
}
