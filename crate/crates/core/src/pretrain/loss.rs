use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{MaskingPlan, TrainError};
use crate::numerics::{Graph, Tensor, Var};

/// Mean of `-log softmax(row)[target]` over the rows of `logits`.
pub fn softmax_loss_rows(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[usize],
) -> Result<Var, TrainError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(TrainError::InvalidArgument(format!(
            "{} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    let v = shape[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(TrainError::InvalidArgument(format!(
            "target id {t} outside vocabulary of {v}"
        )));
    }
    let logp = g.log_softmax(logits, 1)?;
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| r * v + t)
        .collect();
    let picked = g.pick(logp, &flat)?;
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

fn masked_targets(targets: &[usize], plan: &MaskingPlan) -> Result<Vec<usize>, TrainError> {
    if plan.is_empty() {
        return Err(TrainError::InvalidArgument(format!(
            "{}: empty masking plan",
            plan.example_id
        )));
    }
    plan.positions
        .iter()
        .map(|&p| {
            targets.get(p).copied().ok_or_else(|| {
                TrainError::InvalidArgument(format!(
                    "{}: masked position {p} has no target",
                    plan.example_id
                ))
            })
        })
        .collect()
}

/// Cross-entropy over masked positions only; other rows of `logits` and
/// other entries of `targets` are never read.
pub fn masked_softmax_loss(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[usize],
    plan: &MaskingPlan,
) -> Result<Var, TrainError> {
    let t = masked_targets(targets, plan)?;
    let rows = g.gather_rows(logits, &plan.positions)?;
    softmax_loss_rows(g, rows, &t)
}

/// Add-one smoothed unigram distribution used to draw NCE noise words.
#[derive(Clone, Debug)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl NoiseDistribution {
    pub fn from_counts(counts: &[u64]) -> Result<Self, TrainError> {
        if counts.is_empty() {
            return Err(TrainError::InvalidArgument(
                "noise distribution needs a vocabulary".into(),
            ));
        }
        let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
        let probs: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0) / total).collect();
        let sampler =
            WeightedIndex::new(&probs).map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
        Ok(Self { probs, sampler })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// `[target, noise_1, …, noise_k]` for each target. A noise draw may
    /// coincide with the target.
    pub fn candidates<R: Rng + ?Sized>(
        &self,
        targets: &[usize],
        k: usize,
        rng: &mut R,
    ) -> Vec<Vec<usize>> {
        targets
            .iter()
            .map(|&t| {
                let mut ids = Vec::with_capacity(k + 1);
                ids.push(t);
                ids.extend((0..k).map(|_| self.sample(rng)));
                ids
            })
            .collect()
    }
}

/// NCE on candidate scores `[m × (1+k)]` whose first column is the target.
///
/// With `s = score − ln Z` and `Δ = s − ln(k·Pn(w))`, each row contributes
/// `−ln σ(Δ_target) − Σ ln(1 − σ(Δ_noise))`; rows are averaged.
pub fn nce_from_scores(
    g: &mut Graph<'_>,
    scores: Var,
    candidates: &[Vec<usize>],
    noise: &NoiseDistribution,
    normalizer: f64,
) -> Result<Var, TrainError> {
    let shape = g.shape(scores).to_vec();
    let m = candidates.len();
    let width = candidates.first().map_or(0, Vec::len);
    if m == 0 || width < 2 || shape != [m, width] || candidates.iter().any(|c| c.len() != width) {
        return Err(TrainError::InvalidArgument(format!(
            "NCE needs at least one noise sample per row; scores {shape:?}, {m} candidate rows"
        )));
    }
    if !(normalizer > 0.0) {
        return Err(TrainError::InvalidArgument(format!(
            "normalizer {normalizer} must be positive"
        )));
    }
    let k = (width - 1) as f64;
    let ln_z = normalizer.ln();
    let mut offset = Vec::with_capacity(m * width);
    let mut sign = Vec::with_capacity(m * width);
    for row in candidates {
        for (j, &id) in row.iter().enumerate() {
            let p = *noise.probs().get(id).ok_or_else(|| {
                TrainError::InvalidArgument(format!("candidate id {id} outside noise vocabulary"))
            })?;
            // σ(−Δ) = 1 − σ(Δ), so noise columns flip sign.
            let s = if j == 0 { 1.0 } else { -1.0 };
            offset.push(-s * (ln_z + (k * p).ln()));
            sign.push(s);
        }
    }
    let sign = g.constant(Tensor::new(vec![m, width], sign)?);
    let offset = g.constant(Tensor::new(vec![m, width], offset)?);
    let signed = g.mul(scores, sign)?;
    let delta = g.add(signed, offset)?;
    let ll = g.log_sigmoid(delta);
    let total = g.sum_all(ll);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// NCE over masked positions of full logits `[L × V]`. Draws the noise words
/// from `rng` exactly as the sampled-logit training path does.
#[allow(clippy::too_many_arguments)]
pub fn nce_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[usize],
    plan: &MaskingPlan,
    noise: &NoiseDistribution,
    k_noise: usize,
    normalizer: f64,
    rng: &mut R,
) -> Result<Var, TrainError> {
    if k_noise == 0 {
        return Err(TrainError::InvalidArgument(
            "k_noise must be at least 1".into(),
        ));
    }
    let t = masked_targets(targets, plan)?;
    let candidates = noise.candidates(&t, k_noise, rng);
    let v = g.shape(logits)[1];
    let flat: Vec<usize> = plan
        .positions
        .iter()
        .zip(&candidates)
        .flat_map(|(&p, ids)| ids.iter().map(move |&id| p * v + id))
        .collect();
    let picked = g.pick(logits, &flat)?;
    let scores = g.reshape(picked, &[t.len(), k_noise + 1])?;
    nce_from_scores(g, scores, &candidates, noise, normalizer)
}
