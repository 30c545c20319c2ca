//! Spindle-shaped per-layer budget: shallow layers keep most of their
//! context, deep layers keep little, and the mean over layers equals the
//! context reserve ratio.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const DEFAULT_MIN_RATIO: f64 = 0.05;
pub const DEFAULT_WINDOW: usize = 8;

/// Which form of the deep-layer endpoint to use when `r_c > alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointRule {
    /// `2 r_c - 1`: keeps the layer mean at `r_c` and is continuous at alpha.
    #[default]
    Conserving,
    /// `1 - 2 r_c`: the literal published form, kept for comparison runs.
    Printed,
}

/// What to do when the context ratio is at or below the per-layer minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BelowMinimum {
    #[default]
    Fail,
    /// Give every layer the same ratio `r_c`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetOptions {
    pub min_ratio: f64,
    pub rule: EndpointRule,
    pub below_minimum: BelowMinimum,
}

impl Default for BudgetOptions {
    fn default() -> Self {
        Self {
            min_ratio: DEFAULT_MIN_RATIO,
            rule: EndpointRule::Conserving,
            below_minimum: BelowMinimum::Fail,
        }
    }
}

/// `alpha = (1 + beta) / 2`, the context ratio where the shallowest layer
/// saturates at full retention.
pub fn midpoint(min_ratio: f64) -> f64 {
    0.5 * (1.0 + min_ratio)
}

/// Share of the non-window context that can be kept when a fraction `r` of
/// the whole sequence is kept and the window is always kept.
pub fn context_reserve_ratio(r: f64, seq_len: usize, window_len: usize) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(config_err(format!("reserve ratio {r} outside (0, 1]")));
    }
    if seq_len <= window_len {
        return Err(Error::WindowCoversSequence { seq_len, window_len });
    }
    let budget = r * seq_len as f64;
    if budget <= window_len as f64 {
        return Err(Error::BudgetBelowWindow { budget, window_len });
    }
    Ok((budget - window_len as f64) / (seq_len - window_len) as f64)
}

/// Ratios of the first and last layer.
pub fn endpoint_ratios(context_ratio: f64, options: &BudgetOptions) -> Result<(f64, f64)> {
    let beta = options.min_ratio;
    let alpha = midpoint(beta);
    let rc = context_ratio;
    if !(rc <= 1.0) {
        return Err(config_err(format!("context ratio {rc} above 1")));
    }
    if rc <= beta {
        return match options.below_minimum {
            BelowMinimum::Fail => Err(Error::BudgetBelowMinimum {
                context_ratio: rc,
                min_ratio: beta,
            }),
            BelowMinimum::Uniform => Ok((rc, rc)),
        };
    }
    if rc <= alpha {
        Ok(((2.0 * rc - beta).min(1.0), beta))
    } else {
        let last = match options.rule {
            EndpointRule::Conserving => 2.0 * rc - 1.0,
            EndpointRule::Printed => 1.0 - 2.0 * rc,
        };
        Ok((1.0, last))
    }
}

/// Linear interpolation between the endpoints; a single-layer model gets
/// the first endpoint.
pub fn layer_ratio(layer: usize, num_layers: usize, endpoints: (f64, f64)) -> f64 {
    let (first, last) = endpoints;
    if num_layers <= 1 {
        return first;
    }
    if layer + 1 >= num_layers {
        return last;
    }
    let v = first + (last - first) / (num_layers - 1) as f64 * layer as f64;
    v.clamp(first.min(last), first.max(last))
}

/// Resolved per-layer context ratios for one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub global_ratio: f64,
    pub seq_len: usize,
    pub window_len: usize,
    pub context_ratio: f64,
    pub endpoints: (f64, f64),
    pub per_layer: Vec<f64>,
    pub min_ratio: f64,
    pub midpoint: f64,
    pub rule: EndpointRule,
}

impl BudgetPlan {
    pub fn new(
        r: f64,
        seq_len: usize,
        window_len: usize,
        num_layers: usize,
        options: &BudgetOptions,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(config_err("model needs at least one layer"));
        }
        let context_ratio = context_reserve_ratio(r, seq_len, window_len)?;
        let mut endpoints = endpoint_ratios(context_ratio, options)?;
        if num_layers == 1 {
            // no depth to taper over
            endpoints = (context_ratio, context_ratio);
        }
        let per_layer = (0..num_layers)
            .map(|l| layer_ratio(l, num_layers, endpoints))
            .collect();
        Ok(Self {
            global_ratio: r,
            seq_len,
            window_len,
            context_ratio,
            endpoints,
            per_layer,
            min_ratio: options.min_ratio,
            midpoint: midpoint(options.min_ratio),
            rule: options.rule,
        })
    }

    pub fn context_len(&self) -> usize {
        self.seq_len - self.window_len
    }

    /// Context tokens each head of `layer` keeps (window not included).
    pub fn retained_context(&self, layer: usize) -> usize {
        retained_count(self.per_layer[layer], self.context_len())
    }

    /// Total tokens each head of `layer` keeps, window included.
    pub fn retained_tokens(&self, layer: usize) -> usize {
        self.retained_context(layer) + self.window_len
    }
}

/// `floor(ratio * context_len)`, with the ratio clamped into `[0, 1]`.
pub fn retained_count(ratio: f64, context_len: usize) -> usize {
    let k = (ratio.clamp(0.0, 1.0) * context_len as f64).floor() as usize;
    k.min(context_len)
}
