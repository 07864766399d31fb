//! The federated protocol: fedSGD user updates, aggregation of many users,
//! and user-side defenses (clipping and noise).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{gradient, Batch, GradientUpdate, ModelParams};
use crate::numkernel::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    #[default]
    Laplace,
    Gaussian,
}

/// Defense a user applies to its own update before sending it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Global L2 norm bound.
    pub clip_norm: Option<f64>,
    /// Laplace scale `b`, or Gaussian standard deviation.
    pub noise_scale: f64,
    pub noise_dist: NoiseDist,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_norm {
            ensure!(
                c > 0.0 && c.is_finite(),
                InvalidArgument,
                "clip_norm must be positive, got {c}"
            );
        }
        ensure!(
            self.noise_scale >= 0.0 && self.noise_scale.is_finite(),
            InvalidArgument,
            "noise_scale must be >= 0, got {}",
            self.noise_scale
        );
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.clip_norm.is_none() && self.noise_scale == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub users_per_round: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub defense: DefenseConfig,
    pub dropout_enabled: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            users_per_round: 1,
            batch_size: 1,
            seq_len: 32,
            defense: DefenseConfig::default(),
            dropout_enabled: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.users_per_round >= 1 && self.batch_size >= 1 && self.seq_len >= 1,
            InvalidArgument,
            "users, B and S must all be >= 1"
        );
        self.defense.validate()
    }
}

/// One user's fedSGD update: the gradient of the mean loss over its local
/// batch. `dropout` draws the user's dropout masks when training mode is on.
pub fn user_update<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    dropout: Option<&mut Rng>,
) -> Result<GradientUpdate<T>> {
    ensure!(!batch.is_empty(), InvalidArgument, "user batch is empty");
    gradient(params, batch, dropout)
}

/// Arithmetic mean of the updates, tensor by tensor.
pub fn aggregate<T: Scalar>(updates: &[GradientUpdate<T>]) -> Result<GradientUpdate<T>> {
    let (first, rest) = updates
        .split_first()
        .ok_or_else(|| crate::Error::InvalidArgument("no updates to aggregate".into()))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut grads = ModelParams::zeros(&first.grads.config)?;
    let w = T::lit(1.0 / updates.len() as f64);
    for u in updates {
        grads.axpy(w, &u.grads)?;
    }
    Ok(GradientUpdate {
        grads,
        token_count: updates.iter().map(|u| u.token_count).sum(),
    })
}

/// Laplace(0, b) by inversion of the CDF.
fn laplace(rng: &mut Rng, b: f64) -> f64 {
    let u = rng.uniform() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clips the update to a global norm of `clip_norm` (when set), then adds
/// i.i.d. noise to every entry.
pub fn apply_defense<T: Scalar>(
    update: &GradientUpdate<T>,
    cfg: &DefenseConfig,
    rng: &mut Rng,
) -> Result<GradientUpdate<T>> {
    cfg.validate()?;
    let mut out = update.clone();
    if let Some(c) = cfg.clip_norm {
        let n = out.grads.global_norm().as_f64();
        if n > c {
            out.grads.scale(T::lit(c / n));
        }
    }
    if cfg.noise_scale > 0.0 {
        let b = cfg.noise_scale;
        out.grads.for_each_tensor_mut(|t| {
            for x in t.data.iter_mut() {
                let z = match cfg.noise_dist {
                    NoiseDist::Laplace => laplace(rng, b),
                    NoiseDist::Gaussian => b * rng.normal(),
                };
                *x += T::lit(z);
            }
        });
    }
    Ok(out)
}
