//! Batch-hard triplet loss: per anchor, hinge on the farthest same-identity
//! distance minus the nearest different-identity distance. Loss and gradient
//! are computed in double precision.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TripletVariant {
    #[default]
    BatchHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub variant: TripletVariant,
    pub distance: DistanceKind,
    /// Replace the hinge with softplus(log(1+exp(x))); off by default.
    pub soft_margin: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.3,
            variant: TripletVariant::BatchHard,
            distance: DistanceKind::Euclidean,
            soft_margin: false,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// All-pairs Euclidean distances: (n, n), symmetric, zero diagonal.
pub fn pairwise_distances(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding".into()));
    }
    let n = embeddings.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..embeddings.ncols() {
                let diff = embeddings[[i, c]] - embeddings[[j, c]];
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    Ok(d)
}

/// Loss plus gradient with respect to the embeddings.
///
/// Every anchor needs at least one positive (same label, other index) and one
/// negative in the batch. The hinge subgradient at zero is zero, and the
/// distance gradient at coincident points is taken as zero.
pub fn batch_hard_triplet_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    config: &TripletConfig,
) -> Result<(f64, Array2<f64>)> {
    config.validate()?;
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            n
        )));
    }
    let d = pairwise_distances(embeddings)?;

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(embeddings.raw_dim());
    // d d(a,b) / d e_a = (e_a - e_b) / d(a,b); zero when the points coincide.
    let add_pair = |grad: &mut Array2<f64>, a: usize, b: usize, coef: f64| {
        let dist = d[[a, b]];
        if dist <= 0.0 {
            return;
        }
        for c in 0..embeddings.ncols() {
            let u = (embeddings[[a, c]] - embeddings[[b, c]]) / dist;
            grad[[a, c]] += coef * u;
            grad[[b, c]] -= coef * u;
        }
    };

    for a in 0..n {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for o in 0..n {
            if o == a {
                continue;
            }
            if labels[o] == labels[a] {
                if hardest_pos.is_none_or(|p| d[[a, o]] > d[[a, p]]) {
                    hardest_pos = Some(o);
                }
            } else if hardest_neg.is_none_or(|m| d[[a, o]] < d[[a, m]]) {
                hardest_neg = Some(o);
            }
        }
        let (p, m) = match (hardest_pos, hardest_neg) {
            (Some(p), Some(m)) => (p, m),
            (None, _) => {
                return Err(Error::Validation(format!(
                    "anchor {a} has no positive in the batch"
                )))
            }
            (_, None) => {
                return Err(Error::Validation(format!(
                    "anchor {a} has no negative in the batch"
                )))
            }
        };

        let raw = config.margin + d[[a, p]] - d[[a, m]];
        let (term, slope) = if config.soft_margin {
            // softplus, numerically stable on both tails
            let sp = if raw > 0.0 {
                raw + (-raw).exp().ln_1p()
            } else {
                raw.exp().ln_1p()
            };
            (sp, 1.0 / (1.0 + (-raw).exp()))
        } else if raw > 0.0 {
            (raw, 1.0)
        } else {
            (0.0, 0.0)
        };
        loss += term;
        if slope != 0.0 {
            let coef = slope / n as f64;
            add_pair(&mut grad, a, p, coef);
            add_pair(&mut grad, a, m, -coef);
        }
    }

    Ok((loss / n as f64, grad))
}
