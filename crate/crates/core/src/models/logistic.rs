use super::{check_training_inputs, softmax_in_place, Matrix, Prediction, TrainConfig};
use crate::error::{Error, Result};
use crate::labeling::ClassWeights;

/// Multinomial logistic regression. `weights` is `k × (d + 1)` row-major,
/// each class row ending with its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(k: usize, d: usize) -> Self {
        LogisticModel {
            k,
            d,
            weights: vec![0.0; k * (d + 1)],
        }
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.d + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * stride..(c + 1) * stride];
            *o = w[self.d] + w[..self.d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Prediction> {
        if x.cols() != self.d {
            return Err(Error::data(format!(
                "model expects {} features, got {}",
                self.d,
                x.cols()
            )));
        }
        let mut probs = vec![0.0; x.rows() * self.k];
        for (i, row) in x.iter_rows().enumerate() {
            let out = &mut probs[i * self.k..(i + 1) * self.k];
            self.logits_into(row, out);
            softmax_in_place(out);
        }
        Ok(Prediction { k: self.k, probs })
    }
}

/// Class-weighted mean cross-entropy plus `l2/2 · ||W||²` (biases excluded)
/// and its gradient with respect to `model.weights`.
pub fn logistic_loss_and_grad(
    model: &LogisticModel,
    x: &Matrix,
    y: &[u8],
    class_weights: &ClassWeights,
    l2: f64,
) -> (f64, Vec<f64>) {
    let (k, d) = (model.k, model.d);
    let stride = d + 1;
    let mut grad = vec![0.0; model.weights.len()];
    let mut loss = 0.0;
    let mut total_w = 0.0;
    let mut p = vec![0.0; k];
    for (row, &yi) in x.iter_rows().zip(y) {
        let w = class_weights.get(yi);
        model.logits_into(row, &mut p);
        softmax_in_place(&mut p);
        loss -= w * p[yi as usize].max(1e-300).ln();
        total_w += w;
        for c in 0..k {
            let delta = w * (p[c] - if c == yi as usize { 1.0 } else { 0.0 });
            if delta == 0.0 {
                continue;
            }
            let g = &mut grad[c * stride..(c + 1) * stride];
            for (gj, xj) in g[..d].iter_mut().zip(row) {
                *gj += delta * xj;
            }
            g[d] += delta;
        }
    }
    loss /= total_w;
    for g in &mut grad {
        *g /= total_w;
    }
    let mut penalty = 0.0;
    for c in 0..k {
        for j in 0..d {
            let idx = c * stride + j;
            let wv = model.weights[idx];
            penalty += wv * wv;
            grad[idx] += l2 * wv;
        }
    }
    (loss + 0.5 * l2 * penalty, grad)
}

/// Full-batch gradient descent from zero weights with a fixed step.
pub fn train_logistic(
    x: &Matrix,
    y: &[u8],
    class_weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<LogisticModel> {
    let mut models = train_logistic_checkpoints(x, y, class_weights, cfg, &[cfg.epochs])?;
    Ok(models.pop().expect("one checkpoint"))
}

/// One descent run returning the model after each epoch count in
/// `checkpoints` (ascending). Every checkpoint equals a standalone run with
/// that many epochs.
pub fn train_logistic_checkpoints(
    x: &Matrix,
    y: &[u8],
    class_weights: &ClassWeights,
    cfg: &TrainConfig,
    checkpoints: &[usize],
) -> Result<Vec<LogisticModel>> {
    cfg.validate()?;
    check_training_inputs(x, y, class_weights)?;
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("checkpoints must be ascending"));
    }
    let mut model = LogisticModel::zeros(class_weights.n_classes(), x.cols());
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    let last = checkpoints.last().copied().unwrap_or(0);
    for epoch in 0..=last {
        while next.peek().is_some_and(|&&c| c == epoch) {
            out.push(model.clone());
            next.next();
        }
        if epoch == last {
            break;
        }
        let (loss, grad) = logistic_loss_and_grad(&model, x, y, class_weights, cfg.l2);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "logistic loss became non-finite at epoch {epoch}; try a smaller learning rate"
            )));
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence(format!(
                "logistic weights became non-finite at epoch {epoch}; try a smaller learning rate"
            )));
        }
    }
    Ok(out)
}
