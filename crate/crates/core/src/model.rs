//! Dense softmax classifier with ReLU hidden layers, cross-entropy loss and
//! hand-written backpropagation.
//!
//! Parameters live in one flat vector so that federated averaging and the
//! optimizer can treat the model as a plain `Vec<f64>`. Each layer stores a
//! row-major `in_dim x out_dim` weight matrix followed by its `out_dim` bias
//! vector, layers concatenated in order.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, FedAlError, Result};
use crate::optim::OptimizerState;
use crate::rng::Stream;

/// Floor applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layer_dims: Vec<usize>,
    weights: Vec<f64>,
}

/// Number of scalars needed for a network with the given layer widths.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(config_err(format!(
            "layer_dims needs at least 2 entries, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(config_err(format!(
            "layer_dims entries must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn from_parts(layer_dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        check_dims(&layer_dims)?;
        let expected = param_count(&layer_dims);
        if weights.len() != expected {
            return Err(shape_err(format!(
                "expected {expected} weights for dims {layer_dims:?}, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FedAlError::Training("non-finite weight".into()));
        }
        Ok(Self {
            layer_dims,
            weights,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: vec![0.0; param_count(layer_dims)],
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `(weight matrix, bias)` views for every layer.
    fn layers(&self) -> Vec<(ArrayView2<'_, f64>, &[f64])> {
        let mut out = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mat = ArrayView2::from_shape(
                (fan_in, fan_out),
                &self.weights[offset..offset + fan_in * fan_out],
            )
            .expect("layout checked at construction");
            offset += fan_in * fan_out;
            out.push((mat, &self.weights[offset..offset + fan_out]));
            offset += fan_out;
        }
        out
    }
}

/// Fan-in scaled uniform initialisation, `U(-1/sqrt(in), 1/sqrt(in))`, zero biases.
pub fn init_params(layer_dims: &[usize], rng_seed: u64) -> Result<ModelParams> {
    check_dims(layer_dims)?;
    let mut rng = crate::rng::stream(rng_seed, &[crate::rng::tag::MODEL_INIT]);
    let mut weights = Vec::with_capacity(param_count(layer_dims));
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        weights.extend((0..fan_in * fan_out).map(|_| rng.random_range(-scale..scale)));
        weights.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ModelParams {
        layer_dims: layer_dims.to_vec(),
        weights,
    })
}

/// A labeled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(shape_err("batch must have at least one row"));
        }
        if features.nrows() != labels.len() {
            return Err(shape_err(format!(
                "batch has {} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of this batch, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Batch::new(
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

fn check_features(params: &ModelParams, features: &ArrayView2<'_, f64>) -> Result<()> {
    if features.ncols() != params.input_dim() {
        return Err(shape_err(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn check_labels(params: &ModelParams, batch: &Batch) -> Result<()> {
    let c = params.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(shape_err(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok(())
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Forward pass keeping every layer's post-activation output; the last
/// entry holds the softmax probabilities.
fn forward_cached(params: &ModelParams, features: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let layers = params.layers();
    let last = layers.len() - 1;
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (i, (w, b)) in layers.iter().enumerate() {
        let input = acts.last().map(|a| a.view()).unwrap_or(features);
        let mut z = input.dot(w);
        z += &ArrayView2::from_shape((1, b.len()), b).unwrap();
        if i == last {
            softmax_rows(&mut z);
        } else {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Class probabilities for every row of `features`.
pub fn forward_probs(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_features(params, &features)?;
    if features.nrows() == 0 {
        return Ok(Array2::zeros((0, params.num_classes())));
    }
    Ok(forward_cached(params, features).pop().unwrap())
}

/// Batch convenience over [`forward_probs`].
pub fn predict_proba(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    forward_probs(params, features)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_labels(params, batch)?;
    let probs = forward_probs(params, batch.features.view())?;
    let total: f64 = batch
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs[[r, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of [`cross_entropy_loss`] with respect to every weight, in
/// storage order. Rows whose true-class probability sits below the floor
/// contribute nothing, matching the flat region of the floored loss.
pub fn backprop_grad(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    check_features(params, &batch.features.view())?;
    check_labels(params, batch)?;
    let acts = forward_cached(params, batch.features.view());
    let n = batch.len() as f64;

    let mut delta = acts.last().unwrap().clone();
    for (r, &y) in batch.labels.iter().enumerate() {
        if delta[[r, y]] < PROB_FLOOR {
            delta.row_mut(r).fill(0.0);
        } else {
            delta[[r, y]] -= 1.0;
        }
    }
    delta.mapv_inplace(|v| v / n);

    let layers = params.layers();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for (w, b) in &layers {
        offsets.push(offset);
        offset += w.len() + b.len();
    }

    for l in (0..layers.len()).rev() {
        let input = if l == 0 {
            batch.features.view()
        } else {
            acts[l - 1].view()
        };
        let (w, _) = &layers[l];
        let gw = input.t().dot(&delta);
        let gb: Array1<f64> = delta.sum_axis(Axis(0));
        let start = offsets[l];
        let wlen = w.len();
        grad[start..start + wlen].copy_from_slice(gw.as_slice().unwrap());
        grad[start + wlen..start + wlen + gb.len()].copy_from_slice(gb.as_slice().unwrap());

        if l > 0 {
            let mut prev = delta.dot(&w.t());
            prev.zip_mut_with(&acts[l - 1], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }
    Ok(grad)
}

/// Run `epochs` passes of shuffled minibatch Adam over `data`.
///
/// The shuffle order is drawn only from `rng`, so identical inputs give
/// bit-identical outputs.
pub fn train_local(
    params: &ModelParams,
    opt_state: &OptimizerState,
    data: &Batch,
    epochs: usize,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<(ModelParams, OptimizerState)> {
    if data.is_empty() {
        return Err(FedAlError::Training("empty labeled training set".into()));
    }
    if batch_size == 0 {
        return Err(config_err("batch_size must be positive"));
    }
    let mut params = params.clone();
    let mut state = opt_state.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mb = data.select(chunk)?;
            let grad = backprop_grad(&params, &mb)?;
            state.step(&mut params, &grad)?;
        }
    }
    if !params.is_finite() {
        return Err(FedAlError::Training(
            "training diverged to non-finite weights".into(),
        ));
    }
    Ok((params, state))
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let probs = forward_probs(params, batch.features.view())?;
    let hits = argmax_rows(&probs)
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Index of the largest entry in every row; ties go to the lower class.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use ndarray::{array, s};

    fn blobs(n_per: usize, seed: u64) -> Batch {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::stream(seed, &[42]);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let center = if c == 0 { -2.0 } else { 2.0 };
            for _ in 0..n_per {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                feats.push(center + 0.5 * a);
                feats.push(center + 0.5 * b);
                labels.push(c);
            }
        }
        Batch::new(
            Array2::from_shape_vec((2 * n_per, 2), feats).unwrap(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_params(&[2, 3], 7).unwrap();
        let b = init_params(&[2, 3], 7).unwrap();
        let c = init_params(&[2, 3], 8).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn init_size_formula_and_bias_zero() {
        let p = init_params(&[4, 8, 3], 1).unwrap();
        assert_eq!(p.len(), 4 * 8 + 8 + 8 * 3 + 3);
        assert!(p.weights()[32..40].iter().all(|&b| b == 0.0));
        let bound = 0.5;
        assert!(p.weights()[..32].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_params(&[3], 0), Err(FedAlError::Config(_))));
        assert!(matches!(
            init_params(&[3, 0, 2], 0),
            Err(FedAlError::Config(_))
        ));
    }

    #[test]
    fn zero_weights_give_uniform_probs_and_ln_c_loss() {
        let p = ModelParams::zeros(&[4, 5, 3]).unwrap();
        let x = array![[1.0, -2.0, 3.0, 0.5], [0.0, 0.0, 0.0, 0.0]];
        let probs = forward_probs(&p, x.view()).unwrap();
        for v in probs.iter() {
            assert_eq!(*v, 1.0 / 3.0);
        }
        let batch = Batch::new(x, vec![0, 2]).unwrap();
        let loss = cross_entropy_loss(&p, &batch).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_softmax() {
        // single layer, 1 input, biases carry the logits (ln2, 0, 0)
        let w = vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, 0.0];
        let p = ModelParams::from_parts(vec![1, 3], w).unwrap();
        let probs = forward_probs(&p, array![[1.0]].view()).unwrap();
        assert!((probs[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((probs[[0, 1]] - 0.25).abs() < 1e-15);
        assert!((probs[[0, 2]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one() {
        let p = init_params(&[3, 16, 4], 3).unwrap();
        let mut rng = crate::rng::stream(3, &[1]);
        let x = Array2::from_shape_fn((100, 3), |_| rng.random_range(-5.0..5.0));
        let probs = forward_probs(&p, x.view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = init_params(&[3, 2], 0).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            forward_probs(&p, x.view()),
            Err(FedAlError::Shape(_))
        ));
    }

    #[test]
    fn confident_true_class_gives_zero_loss() {
        // bias of 1e3 on class 1 saturates softmax to exactly 1.0
        let w = vec![0.0, 0.0, 0.0, 1e3];
        let p = ModelParams::from_parts(vec![1, 2], w).unwrap();
        let batch = Batch::new(array![[0.3]], vec![1]).unwrap();
        assert_eq!(cross_entropy_loss(&p, &batch).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_class_loss() {
        // logits = (w0*x, w1*x) with x=1, w=(1,-1): p1 = 1/(1+e^2)
        let p = ModelParams::from_parts(vec![1, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(array![[1.0]], vec![1]).unwrap();
        let expected = (1.0 + 2f64.exp()).ln();
        assert!((cross_entropy_loss(&p, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_keep_the_gradient() {
        let p = init_params(&[2, 4, 3], 5).unwrap();
        let single = Batch::new(array![[0.5, -1.0], [1.5, 0.2]], vec![0, 2]).unwrap();
        let doubled = Batch::new(
            array![[0.5, -1.0], [1.5, 0.2], [0.5, -1.0], [1.5, 0.2]],
            vec![0, 2, 0, 2],
        )
        .unwrap();
        let g1 = backprop_grad(&p, &single).unwrap();
        let g2 = backprop_grad(&p, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let p = init_params(&[2, 4, 2], 5).unwrap();
        let opt = OptimizerState::new(p.len(), AdamConfig::default()).unwrap();
        let data = blobs(10, 1);
        let mut rng = crate::rng::stream(0, &[]);
        let (q, _) = train_local(&p, &opt, &data, 0, 4, &mut rng).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn empty_training_set_is_training_error() {
        let p = init_params(&[2, 2], 5).unwrap();
        let opt = OptimizerState::new(p.len(), AdamConfig::default()).unwrap();
        let data = Batch {
            features: Array2::zeros((0, 2)),
            labels: vec![],
        };
        let mut rng = crate::rng::stream(0, &[]);
        assert!(matches!(
            train_local(&p, &opt, &data, 1, 4, &mut rng),
            Err(FedAlError::Training(_))
        ));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let p = init_params(&[2, 8, 2], 11).unwrap();
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        };
        let opt = OptimizerState::new(p.len(), cfg).unwrap();
        let data = blobs(50, 2);
        let mut rng = crate::rng::stream(9, &[]);
        let (q, _) = train_local(&p, &opt, &data, 50, 16, &mut rng).unwrap();
        assert!(accuracy(&q, &data).unwrap() >= 0.95);

        let mut rng = crate::rng::stream(9, &[]);
        let (q2, _) = train_local(&p, &opt, &data, 50, 16, &mut rng).unwrap();
        assert_eq!(q.weights(), q2.weights());
    }

    #[test]
    fn gradient_vanishes_after_convergence() {
        let p = init_params(&[2, 2], 11).unwrap();
        let cfg = AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(p.len(), cfg).unwrap();
        let data = blobs(20, 4);
        let mut q = p.clone();
        for _ in 0..3000 {
            let g = backprop_grad(&q, &data).unwrap();
            opt.step(&mut q, &g).unwrap();
        }
        let g = backprop_grad(&q, &data).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "grad norm {norm}");
    }

    #[test]
    fn predict_proba_handles_empty_and_matches_rows() {
        let p = init_params(&[3, 6, 3], 2).unwrap();
        let empty = Array2::zeros((0, 3));
        assert_eq!(predict_proba(&p, empty.view()).unwrap().nrows(), 0);

        let mut rng = crate::rng::stream(1, &[2]);
        let x = Array2::from_shape_fn((1000, 3), |_| rng.random_range(-3.0..3.0));
        let batch = predict_proba(&p, x.view()).unwrap();
        assert_eq!(batch, forward_probs(&p, x.view()).unwrap());
        for r in 0..x.nrows() {
            let row = predict_proba(&p, x.slice(s![r..r + 1, ..])).unwrap();
            for c in 0..3 {
                assert!((row[[0, c]] - batch[[r, c]]).abs() < 1e-12);
            }
        }
    }
}
