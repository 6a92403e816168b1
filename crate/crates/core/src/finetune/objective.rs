use super::{binarize, class_weights, emotion_forward, example_weights};
use crate::data::PreparedExample;
use crate::model::{Model, ModelConfig, ModelWeights, Session};
use crate::numerics::{Fault, GradMap, NumericsError, Objective, ParamMap};
use crate::pretrain::TrainError;

/// Mean class-weighted BCE over a fixed labeled batch, as a function of the
/// parameters. Class weights come from the batch itself.
pub struct EmotionObjective {
    pub config: ModelConfig,
    pub batch: Vec<PreparedExample>,
    pub fault: Option<Fault>,
}

impl EmotionObjective {
    fn evaluate(&self, params: &ParamMap, want_grad: bool) -> Result<(f64, GradMap), TrainError> {
        let model = Model::new(
            self.config.clone(),
            ModelWeights::from_params(params.clone()),
        )?;
        let targets = self
            .batch
            .iter()
            .map(|ex| {
                let s = ex.emotions.ok_or_else(|| {
                    TrainError::InvalidArgument(format!("{}: no emotion scores", ex.id))
                })?;
                binarize(&s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let weights = class_weights(&targets)?;
        let n = self.batch.len() as f64;
        let mut total = 0.0;
        let mut grads = GradMap::new();
        for (ex, t) in self.batch.iter().zip(&targets) {
            let mut s = Session::new(&model, self.fault);
            let p = emotion_forward(&mut s, &ex.inputs)?;
            let tf: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
            let (l, _) = s
                .graph_mut()
                .weighted_bce(p, &tf, &example_weights(t, &weights))?;
            total += s.value(l).data()[0] / n;
            if want_grad {
                for (k, v) in s.gradients(l)? {
                    let slot = grads.entry(k).or_insert_with(|| vec![0.0; v.len()]);
                    slot.iter_mut().zip(v).for_each(|(a, b)| *a += b / n);
                }
            }
        }
        if want_grad {
            for (k, t) in params {
                grads.entry(k.clone()).or_insert_with(|| vec![0.0; t.len()]);
            }
        }
        Ok((total, grads))
    }
}

impl Objective for EmotionObjective {
    fn value(&self, params: &ParamMap) -> Result<f64, NumericsError> {
        self.evaluate(params, false)
            .map(|r| r.0)
            .map_err(|e| NumericsError::InvalidArgument(e.to_string()))
    }

    fn value_and_grad(&self, params: &ParamMap) -> Result<(f64, GradMap), NumericsError> {
        self.evaluate(params, true)
            .map_err(|e| NumericsError::InvalidArgument(e.to_string()))
    }
}
