use crate::error::{Error, Result};
use crate::nn::loss::{loss_and_dlogits, Target};
use crate::nn::MlpModel;

/// Parameter-shaped buffer (weights and biases per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights().iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flatten()
            .chain(self.biases.iter_mut().flatten())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }
}

fn check_batch<R: AsRef<[f64]>>(model: &MlpModel, rows: &[R], labels: &[usize]) -> Result<()> {
    model.check_rows(rows)?;
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let k = model.classes();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::Label { row, label, classes: k });
    }
    Ok(())
}

/// Mean cross-entropy of the batch (unclamped softmax path, as trained).
pub fn mean_loss<R: AsRef<[f64]>>(model: &MlpModel, rows: &[R], labels: &[usize]) -> Result<f64> {
    check_batch(model, rows, labels)?;
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, &y)| loss_and_dlogits(&model.logits(r.as_ref()), Target::Hard(y)).0)
        .sum();
    Ok(total / rows.len() as f64)
}

/// Gradient of the mean cross-entropy over the batch.
pub fn batch_gradient<R: AsRef<[f64]>>(
    model: &MlpModel,
    rows: &[R],
    labels: &[usize],
) -> Result<Gradients> {
    check_batch(model, rows, labels)?;
    let mut g = Gradients::zeros_like(model);
    let scale = 1.0 / rows.len() as f64;
    for (r, &y) in rows.iter().zip(labels) {
        let cache = model.forward_cached(r.as_ref());
        let (_, dz) = loss_and_dlogits(cache.logits(), Target::Hard(y));
        model.backprop(&cache, &dz, scale, &mut g);
    }
    Ok(g)
}

/// One cross-entropy gradient per example.
pub fn per_example_gradients<R: AsRef<[f64]>>(
    model: &MlpModel,
    rows: &[R],
    labels: &[usize],
) -> Result<Vec<Gradients>> {
    check_batch(model, rows, labels)?;
    Ok(rows
        .iter()
        .zip(labels)
        .map(|(r, &y)| {
            let mut g = Gradients::zeros_like(model);
            let cache = model.forward_cached(r.as_ref());
            let (_, dz) = loss_and_dlogits(cache.logits(), Target::Hard(y));
            model.backprop(&cache, &dz, 1.0, &mut g);
            g
        })
        .collect())
}
