use crate::data::NUM_EMOTIONS;
use crate::numerics::PROB_CLAMP;
use crate::pretrain::TrainError;

/// Presence targets: 1 iff the Likert score is strictly positive.
pub fn binarize(scores: &[f64; NUM_EMOTIONS]) -> Result<[u8; NUM_EMOTIONS], TrainError> {
    let mut out = [0; NUM_EMOTIONS];
    for (k, &s) in scores.iter().enumerate() {
        if !(0.0..=3.0).contains(&s) {
            return Err(TrainError::InvalidArgument(format!(
                "emotion score {s} (index {k}) outside the Likert range [0, 3]"
            )));
        }
        out[k] = u8::from(s > 0.0);
    }
    Ok(out)
}

/// `(w_pos, w_neg) = (n / (2·n_pos), n / (2·n_neg))` per emotion, so both
/// classes carry the same total weight.
pub fn class_weights(
    targets: &[[u8; NUM_EMOTIONS]],
) -> Result<[(f64, f64); NUM_EMOTIONS], TrainError> {
    let n = targets.len();
    let mut out = [(0.0, 0.0); NUM_EMOTIONS];
    for (k, slot) in out.iter_mut().enumerate() {
        let pos = targets.iter().filter(|t| t[k] == 1).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            return Err(TrainError::InvalidArgument(format!(
                "emotion {k} has {pos} positive and {neg} negative training examples; \
                 both classes are required, resample the training split"
            )));
        }
        *slot = (n as f64 / (2.0 * pos as f64), n as f64 / (2.0 * neg as f64));
    }
    Ok(out)
}

/// Per-emotion weights for one example's targets.
pub fn example_weights(
    targets: &[u8; NUM_EMOTIONS],
    weights: &[(f64, f64); NUM_EMOTIONS],
) -> [f64; NUM_EMOTIONS] {
    let mut w = [0.0; NUM_EMOTIONS];
    for k in 0..NUM_EMOTIONS {
        w[k] = if targets[k] == 1 {
            weights[k].0
        } else {
            weights[k].1
        };
    }
    w
}

/// Class-weighted binary cross-entropy summed over emotions. Probabilities
/// are clamped to `[1e-12, 1 − 1e-12]`; the second value counts clamps.
pub fn weighted_bce(probs: &[f64], targets: &[u8], weights: &[(f64, f64)]) -> (f64, usize) {
    let mut clamped = 0;
    let mut loss = 0.0;
    for ((&p, &t), &(wp, wn)) in probs.iter().zip(targets).zip(weights) {
        let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        clamped += usize::from(q != p);
        loss += if t == 1 {
            -wp * q.ln()
        } else {
            -wn * (1.0 - q).ln()
        };
    }
    if clamped > 0 {
        log::warn!("weighted_bce clamped {clamped} probabilities");
    }
    (loss, clamped)
}
