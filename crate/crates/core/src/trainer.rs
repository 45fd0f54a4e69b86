//! Shuffled DP-SGD: Poisson sampling, per-example clipping, batch clipping,
//! Gaussian noise, an SGD step and a fresh weight permutation per step.

use std::borrow::Borrow;
use std::io::Write;

use log::{info, warn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{fallback_check, solve_sigma_with, AccountantConfig, Budget, MechanismSpec};
use crate::error::{Error, Result};
use crate::nn::{clip, per_sample_gradients, Loss, Model, ModelConfig, ParamSet, Sample};
use crate::permute::{invariant_groups, GroupPermutation};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub budget: Budget,
    pub c: f64,
    pub c_prime: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: Loss,
    /// Allow the shuffled path at all. When false every step uses the plain
    /// Gaussian noise level.
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Keep the weight layout fixed on the shuffled path (noise level and
    /// batch clipping unchanged).
    #[serde(default)]
    pub freeze_permutations: bool,
    /// Use this noise multiplier instead of the accountant's, for both paths.
    #[serde(default)]
    pub sigma_override: Option<f64>,
    #[serde(default)]
    pub accountant: AccountantConfig,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        Budget::new(self.budget.epsilon, self.budget.delta)?;
        self.model.validate()?;
        for (name, v) in [("c", self.c), ("c_prime", self.c_prime), ("lr", self.lr)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if self.batch_size > dataset_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {dataset_size}",
                self.batch_size
            )));
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma_override must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathTaken {
    Shuffled,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean loss of the sampled batch before the update; the full training
    /// set mean when the batch came out empty.
    pub loss: f64,
    pub batch_size: usize,
    pub sigma_used: f64,
    pub path: PathTaken,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Norm of the summed clipped gradients before batch clipping.
    pub batch_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Shuffled noise multiplier from the accountant (absent with an override).
    pub sigma: Option<f64>,
    pub sigma0: Option<f64>,
    pub sigma_used: f64,
    pub path: PathTaken,
    pub d: u64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub groups: Vec<crate::permute::InvariantGroup>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub records: Vec<StepRecord>,
    pub summary: TrainSummary,
}

/// Each index kept independently with probability `batch_size / dataset_size`.
pub fn poisson_sample<R: rand::Rng + ?Sized>(dataset_size: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let p = (batch_size as f64 / dataset_size.max(1) as f64).min(1.0);
    (0..dataset_size).filter(|_| rng.random_bool(p)).collect()
}

/// Rescales `g` to norm at most `c_prime`; returns the norm before clipping.
pub fn batch_clip<T: Scalar, P: ParamSet<T>>(g: &mut P, c_prime: T) -> T {
    let norm = g.l2_norm();
    if norm > c_prime {
        g.scale(c_prime / norm);
    }
    norm
}

/// i.i.d. `N(0, (sigma c)^2)` with the shapes of `template`.
pub fn draw_noise<T: Scalar, P: ParamSet<T>, R: rand::Rng + ?Sized>(template: &P, sigma: f64, c: f64, rng: &mut R) -> P {
    let mut z = template.zeroed();
    let std = sigma * c;
    if std > 0.0 {
        for b in z.buffers_mut() {
            for x in b.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *x = T::lit(std * n);
            }
        }
    }
    z
}

/// `(g + z) / divisor` with `z ~ N(0, (sigma c)^2 I)`.
pub fn add_noise<T: Scalar, P: ParamSet<T>, R: rand::Rng + ?Sized>(
    g: &P,
    sigma: f64,
    c: f64,
    divisor: f64,
    rng: &mut R,
) -> P {
    let mut out = g.clone();
    if sigma > 0.0 {
        out.axpy(T::one(), &draw_noise(g, sigma, c, rng));
    }
    out.scale(T::one() / T::lit(divisor));
    out
}

/// Noise multipliers `(sigma, sigma0)` for a model with `d` parameters.
pub fn solve_noise(cfg: &TrainConfig, d: u64, dataset_size: usize) -> Result<(f64, f64)> {
    let spec = MechanismSpec {
        sigma: 1.0,
        c: cfg.c,
        c_prime: cfg.c_prime,
        d,
        p: cfg.batch_size as f64 / dataset_size as f64,
        steps: cfg.steps,
    };
    let sigma0 = solve_sigma_with(cfg.budget, &spec, false, &cfg.accountant)?.sigma;
    let sigma = if cfg.shuffle && d >= 2 {
        solve_sigma_with(cfg.budget, &spec, true, &cfg.accountant)?.sigma
    } else {
        sigma0
    };
    Ok((sigma, sigma0))
}

/// Runs the full training loop.
///
/// Noise is drawn in the layout the model had at step 0 and carried into the
/// current layout by the accumulated permutation of each group, so a run with
/// permutations and a run without them consume identical noise.
pub fn train<T, S>(cfg: &TrainConfig, data: &[S]) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    S: Borrow<Sample<T>> + Sync,
{
    cfg.validate(data.len())?;
    let mut model: Model<T> = cfg.model.build()?;
    let groups = invariant_groups(&model);
    let d = groups.iter().map(|g| g.num_params as u64).sum::<u64>();
    let n = data.len();
    let p = cfg.batch_size as f64 / n as f64;

    let (solved, path, sigma_used) = match cfg.sigma_override {
        Some(s) => {
            let path = if cfg.shuffle { PathTaken::Shuffled } else { PathTaken::Fallback };
            (None, path, s)
        }
        None => {
            let (sigma, sigma0) = solve_noise(cfg, d, n)?;
            if cfg.shuffle && fallback_check(sigma, sigma0) {
                (Some((sigma, sigma0)), PathTaken::Shuffled, sigma)
            } else {
                (Some((sigma, sigma0)), PathTaken::Fallback, sigma0)
            }
        }
    };
    info!("training with d = {d}, p = {p:.5}, sigma_used = {sigma_used:.6}, path = {path:?}");
    if path == PathTaken::Shuffled && groups.len() != model.blocks.len() {
        warn!("some blocks are not permutation invariant; they receive the shuffled noise level unaccounted");
    }

    let mut sampling_rng = stream(cfg.seed, Stream::Sampling);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut perm_rng = stream(cfg.seed, Stream::Permutation);
    let mut layout: Vec<GroupPermutation> = groups.iter().map(|g| g.identity()).collect();
    let c = T::lit(cfg.c);
    let c_prime = T::lit(cfg.c_prime);
    let lr = T::lit(cfg.lr);
    let mut records = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let idx = poisson_sample(n, cfg.batch_size, &mut sampling_rng);
        let batch: Vec<&Sample<T>> = idx.iter().map(|&i| data[i].borrow()).collect();
        let per = per_sample_gradients(&model, &batch, cfg.loss)?;
        let loss = if per.is_empty() {
            model.mean_loss(data, cfg.loss)?.as_f64()
        } else {
            per.losses.iter().map(|l| l.as_f64()).sum::<f64>() / per.len() as f64
        };
        let clipped = clip(&per, c)?;
        let mut g_hat = clipped.sum().unwrap_or_else(|| model.zeroed());

        let batch_grad_norm = if path == PathTaken::Shuffled {
            batch_clip(&mut g_hat, c_prime)
        } else {
            g_hat.l2_norm()
        };

        let mut noise = draw_noise(&model, sigma_used, cfg.c, &mut noise_rng);
        for (g, perm) in groups.iter().zip(&layout) {
            if !perm.is_identity() {
                perm.apply(&mut noise.blocks[g.block])?;
            }
        }
        g_hat.axpy(T::one(), &noise);
        g_hat.scale(T::one() / T::lit(cfg.batch_size as f64));
        model.axpy(-lr, &g_hat);

        if path == PathTaken::Shuffled && !cfg.freeze_permutations {
            for (g, acc) in groups.iter().zip(layout.iter_mut()) {
                let perm = g.sample(&mut perm_rng)?;
                perm.apply(&mut model.blocks[g.block])?;
                *acc = acc.compose(&perm);
            }
        }

        let norms: Vec<f64> = per.norms.iter().map(|v| v.as_f64()).collect();
        records.push(StepRecord {
            step,
            loss,
            batch_size: idx.len(),
            sigma_used,
            path,
            grad_norm_mean: if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 },
            grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
            batch_grad_norm: batch_grad_norm.as_f64(),
        });
    }

    let final_loss = model.mean_loss(data, cfg.loss)?.as_f64();
    let final_accuracy = model.accuracy(data)?;
    let summary = TrainSummary {
        sigma: solved.map(|s| s.0),
        sigma0: solved.map(|s| s.1),
        sigma_used,
        path,
        d,
        sampling_rate: p,
        steps: cfg.steps,
        final_loss,
        final_accuracy,
        groups,
    };
    Ok(TrainOutcome { model, records, summary })
}

pub fn write_jsonl<W: Write>(records: &[StepRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn poisson_full_rate_takes_everything() {
        let mut rng = stream(1, Stream::Sampling);
        assert_eq!(poisson_sample(50, 50, &mut rng), (0..50).collect::<Vec<_>>());
        let a = poisson_sample(1000, 10, &mut stream(2, Stream::Sampling));
        let b = poisson_sample(1000, 10, &mut stream(2, Stream::Sampling));
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_mean_batch_size() {
        let mut rng = stream(3, Stream::Sampling);
        let trials = 1000;
        let total: usize = (0..trials).map(|_| poisson_sample(10_000, 100, &mut rng).len()).sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 100.0).abs() < 3.0, "mean batch {mean}");
    }

    #[test]
    fn batch_clip_cases() {
        let mut m: Model<f64> = small_model();
        let norm = m.l2_norm();
        let mut same = m.clone();
        assert_eq!(batch_clip(&mut same, norm * 2.0), norm);
        assert_eq!(same, m);
        batch_clip(&mut m, norm / 2.0);
        assert!((m.l2_norm() - norm / 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_moments_and_reproducibility() {
        let template = crate::tensor::Matrix::<f64>::zeros(1000, 1000);
        let m = Model::new(vec![crate::nn::Block::Mlp(crate::nn::MlpParams {
            w_t: template,
            b_t: vec![0.0; 1000],
            w_t1: crate::tensor::Matrix::zeros(1, 1000),
            b_t1: vec![0.0],
            activation: crate::nn::Activation::Tanh,
        })]);
        let z = draw_noise(&m, 1.0, 1.0, &mut stream(4, Stream::Noise));
        let flat = z.flatten();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let std = (flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.005, "std {std}");
        assert_eq!(z, draw_noise(&m, 1.0, 1.0, &mut stream(4, Stream::Noise)));
        let unchanged = add_noise(&m, 0.0, 1.0, 1.0, &mut stream(4, Stream::Noise));
        assert_eq!(unchanged, m);
    }

    fn small_model() -> Model<f64> {
        ModelConfig::parse("input_dim = 2\n[[blocks]]\nkind = \"mlp\"\nhidden = 3\noutput = 2\n")
            .unwrap()
            .build()
            .unwrap()
    }
}
