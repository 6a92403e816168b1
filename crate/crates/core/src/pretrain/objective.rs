use super::{mlm_example_loss, MaskingPlan, MlmLoss, NoiseDistribution, TrainError};
use crate::data::PreparedExample;
use crate::model::{Model, ModelConfig, ModelWeights, Session};
use crate::numerics::{Fault, GradMap, NumericsError, Objective, ParamMap};

/// Mean masked-LM loss over a fixed batch with fixed masks and noise draws,
/// as a function of the parameters.
pub struct MlmObjective {
    pub config: ModelConfig,
    pub batch: Vec<(PreparedExample, MaskingPlan)>,
    /// `None` selects the full softmax; otherwise NCE with these candidates
    /// per example.
    pub nce: Option<(NoiseDistribution, Vec<Vec<Vec<usize>>>)>,
    pub fault: Option<Fault>,
}

fn to_numerics(e: TrainError) -> NumericsError {
    NumericsError::InvalidArgument(e.to_string())
}

impl MlmObjective {
    fn evaluate(&self, params: &ParamMap, want_grad: bool) -> Result<(f64, GradMap), TrainError> {
        let model = Model::new(
            self.config.clone(),
            ModelWeights::from_params(params.clone()),
        )?;
        let n = self.batch.len() as f64;
        let mut total = 0.0;
        let mut grads = GradMap::new();
        for (i, (ex, plan)) in self.batch.iter().enumerate() {
            let loss = match &self.nce {
                None => MlmLoss::Softmax,
                Some((noise, cands)) => MlmLoss::Nce {
                    noise,
                    candidates: cands[i].clone(),
                    normalizer: self.config.vocab_size as f64,
                },
            };
            let mut s = Session::new(&model, self.fault);
            let l = mlm_example_loss(&mut s, ex, plan, &loss)?;
            total += s.value(l).data()[0] / n;
            if want_grad {
                let g = s.gradients(l)?;
                for (k, v) in g {
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

impl Objective for MlmObjective {
    fn value(&self, params: &ParamMap) -> Result<f64, NumericsError> {
        self.evaluate(params, false)
            .map(|r| r.0)
            .map_err(to_numerics)
    }

    fn value_and_grad(&self, params: &ParamMap) -> Result<(f64, GradMap), NumericsError> {
        self.evaluate(params, true).map_err(to_numerics)
    }
}
