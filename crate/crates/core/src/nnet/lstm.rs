//! Batched LSTM forward pass and backpropagation through time.
//!
//! Sequences are laid out time-major: row `t * batch + b` holds timestep `t`
//! of sequence `b`, so each timestep is a contiguous `batch × width` block and
//! the input and weight gradients reduce to single matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::loss::{bce_grad_logit, sigmoid};
use super::params::{DetectorModel, LstmParams};
use super::NnetError;

/// Activations recorded by [`forward_batch`], consumed by [`backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `T·B × d`
    x: Array2<f64>,
    /// Post-activation gates `T·B × 4h` in IFGO order.
    gates: Array2<f64>,
    /// Cell states `T·B × h`.
    cells: Array2<f64>,
    /// `tanh(c_t)`, `T·B × h`.
    cells_tanh: Array2<f64>,
    /// Hidden states `T·B × h`.
    hidden: Array2<f64>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

impl ForwardCache {
    /// Hidden state of sequence `b` after timestep `t`.
    pub fn hidden_state(&self, t: usize, b: usize) -> ndarray::ArrayView1<'_, f64> {
        self.hidden.row(t * self.batch + b)
    }

    pub fn cell_state(&self, t: usize, b: usize) -> ndarray::ArrayView1<'_, f64> {
        self.cells.row(t * self.batch + b)
    }
}

fn check_inputs(model: &DetectorModel, xs: &[ArrayView2<f64>]) -> Result<(), NnetError> {
    let (t, d) = (model.config.seq_len, model.config.input_dim);
    for (b, x) in xs.iter().enumerate() {
        if x.dim() != (t, d) {
            return Err(NnetError::Shape(format!("sequence {b} has shape {:?}, model expects ({t}, {d})", x.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnetError::NonFinite(format!("sequence {b} contains a non-finite entry")));
        }
    }
    Ok(())
}

/// Run the LSTM over each sequence from zero initial states and apply the
/// sigmoid head to the final hidden state.
pub fn forward_batch(model: &DetectorModel, xs: &[ArrayView2<f64>]) -> Result<ForwardCache, NnetError> {
    check_inputs(model, xs)?;
    let p = &model.params;
    let (batch, seq_len, d, h) = (xs.len(), model.config.seq_len, model.config.input_dim, model.config.hidden_dim);
    let rows = batch * seq_len;

    let mut x = Array2::zeros((rows, d));
    for (b, seq) in xs.iter().enumerate() {
        for t in 0..seq_len {
            x.row_mut(t * batch + b).assign(&seq.row(t));
        }
    }

    // Input projections for every timestep at once.
    let mut gates = Array2::zeros((rows, 4 * h));
    general_mat_mul(1.0, &x, &p.w_in.t(), 0.0, &mut gates);
    gates += &p.bias;

    let mut cells = Array2::zeros((rows, h));
    let mut cells_tanh = Array2::zeros((rows, h));
    let mut hidden = Array2::zeros((rows, h));

    for t in 0..seq_len {
        let r = t * batch..(t + 1) * batch;
        if t > 0 {
            let h_prev = hidden.slice(s![(t - 1) * batch..t * batch, ..]);
            let mut z = gates.slice_mut(s![r.clone(), ..]);
            general_mat_mul(1.0, &h_prev, &p.w_rec.t(), 1.0, &mut z);
        }
        let (c_before, mut c_now) = cells.view_mut().split_at(Axis(0), t * batch);
        for b in 0..batch {
            let row = t * batch + b;
            let c_prev = (t > 0).then(|| c_before.row(row - batch));
            let mut g = gates.row_mut(row);
            let g = g.as_slice_mut().expect("standard layout");
            let mut c_row = c_now.row_mut(b);
            let mut tc_row = cells_tanh.row_mut(row);
            let mut h_row = hidden.row_mut(row);
            for j in 0..h {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h + j]);
                let c_g = g[2 * h + j].tanh();
                let o_g = sigmoid(g[3 * h + j]);
                g[j] = i_g;
                g[h + j] = f_g;
                g[2 * h + j] = c_g;
                g[3 * h + j] = o_g;
                let cp = c_prev.as_ref().map_or(0.0, |c| c[j]);
                let c = f_g * cp + i_g * c_g;
                let tc = c.tanh();
                c_row[j] = c;
                tc_row[j] = tc;
                h_row[j] = o_g * tc;
            }
        }
    }

    let last = hidden.slice(s![(seq_len - 1) * batch.., ..]);
    let logits = last.dot(&p.w_out) + p.b_out[0];
    let probabilities = logits.mapv(sigmoid);
    Ok(ForwardCache {
        batch,
        seq_len,
        input_dim: d,
        hidden_dim: h,
        x,
        gates,
        cells,
        cells_tanh,
        hidden,
        logits,
        probabilities,
    })
}

/// Gradients produced by [`backward_batch`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Parameter gradients summed over the batch (`None` when not requested).
    pub params: Option<LstmParams>,
    /// `∂J/∂X` per sequence, each `T × d`.
    pub inputs: Vec<Array2<f64>>,
}

/// Backpropagate BCE through time given per-sequence labels. `loss_weight`
/// scales every sequence's loss (use `1/B` for a batch mean).
pub fn backward_batch(
    model: &DetectorModel,
    cache: &ForwardCache,
    labels: &[f64],
    loss_weight: f64,
    want_params: bool,
) -> Result<Gradients, NnetError> {
    if labels.len() != cache.batch {
        return Err(NnetError::Contract(format!("{} labels for a batch of {}", labels.len(), cache.batch)));
    }
    let dlogits: Vec<f64> =
        cache.logits.iter().zip(labels).map(|(&z, &y)| loss_weight * bce_grad_logit(z, y)).collect();
    backward_from_logit_grads(model, cache, &dlogits, want_params)
}

/// Backpropagate arbitrary `∂J/∂logit` values.
pub fn backward_from_logit_grads(
    model: &DetectorModel,
    cache: &ForwardCache,
    dlogits: &[f64],
    want_params: bool,
) -> Result<Gradients, NnetError> {
    let cfg = &model.config;
    if (cache.seq_len, cache.input_dim, cache.hidden_dim) != (cfg.seq_len, cfg.input_dim, cfg.hidden_dim) {
        return Err(NnetError::Contract(format!(
            "cache shape (T={}, d={}, h={}) does not match model (T={}, d={}, h={})",
            cache.seq_len, cache.input_dim, cache.hidden_dim, cfg.seq_len, cfg.input_dim, cfg.hidden_dim
        )));
    }
    if dlogits.len() != cache.batch {
        return Err(NnetError::Contract(format!("{} logit gradients for a batch of {}", dlogits.len(), cache.batch)));
    }
    let p = &model.params;
    let (batch, seq_len, h) = (cache.batch, cache.seq_len, cache.hidden_dim);
    let rows = batch * seq_len;

    let mut dz = Array2::<f64>::zeros((rows, 4 * h));
    let mut dh = Array2::<f64>::zeros((batch, h));
    for (b, &dl) in dlogits.iter().enumerate() {
        dh.row_mut(b).scaled_add(dl, &p.w_out);
    }
    let mut dc = Array2::<f64>::zeros((batch, h));

    for t in (0..seq_len).rev() {
        for b in 0..batch {
            let row = t * batch + b;
            let g = cache.gates.row(row);
            let g = g.as_slice().expect("standard layout");
            let tc = cache.cells_tanh.row(row);
            let tc = tc.as_slice().expect("standard layout");
            let c_prev = (t > 0).then(|| cache.cells.row(row - batch));
            let mut dz_row = dz.row_mut(row);
            let dz_row = dz_row.as_slice_mut().expect("standard layout");
            let dh_row = dh.row(b);
            let mut dc_row = dc.row_mut(b);
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let dh_j = dh_row[j];
                let mut dc_j = dc_row[j] + dh_j * o_g * (1.0 - tc[j] * tc[j]);
                let cp = c_prev.as_ref().map_or(0.0, |c| c[j]);
                dz_row[j] = dc_j * c_g * i_g * (1.0 - i_g);
                dz_row[h + j] = dc_j * cp * f_g * (1.0 - f_g);
                dz_row[2 * h + j] = dc_j * i_g * (1.0 - c_g * c_g);
                dz_row[3 * h + j] = dh_j * tc[j] * o_g * (1.0 - o_g);
                dc_j *= f_g;
                dc_row[j] = dc_j;
            }
        }
        if t > 0 {
            let dz_t = dz.slice(s![t * batch..(t + 1) * batch, ..]);
            general_mat_mul(1.0, &dz_t, &p.w_rec, 0.0, &mut dh);
        }
    }

    let mut dx_all = Array2::<f64>::zeros((rows, cache.input_dim));
    general_mat_mul(1.0, &dz, &p.w_in, 0.0, &mut dx_all);
    let inputs = (0..batch)
        .map(|b| {
            let mut g = Array2::zeros((seq_len, cache.input_dim));
            for t in 0..seq_len {
                g.row_mut(t).assign(&dx_all.row(t * batch + b));
            }
            g
        })
        .collect();

    let params = want_params.then(|| {
        let mut grads = p.zeros_like();
        general_mat_mul(1.0, &dz.t(), &cache.x, 0.0, &mut grads.w_in);
        if seq_len > 1 {
            let dz_later = dz.slice(s![batch.., ..]);
            let h_earlier = cache.hidden.slice(s![..rows - batch, ..]);
            general_mat_mul(1.0, &dz_later.t(), &h_earlier, 0.0, &mut grads.w_rec);
        }
        grads.bias = dz.sum_axis(Axis(0));
        let last = cache.hidden.slice(s![rows - batch.., ..]);
        let dl = Array1::from(dlogits.to_vec());
        grads.w_out = last.t().dot(&dl);
        grads.b_out[0] = dl.sum();
        grads
    });

    Ok(Gradients { params, inputs })
}

/// Single-sequence forward pass.
pub fn forward(model: &DetectorModel, x: &ArrayView2<f64>) -> Result<(f64, ForwardCache), NnetError> {
    let cache = forward_batch(model, std::slice::from_ref(x))?;
    Ok((cache.probabilities[0], cache))
}

/// Single-sequence backward pass: `(∂J/∂θ, ∂J/∂X)`.
pub fn backward(model: &DetectorModel, cache: &ForwardCache, label: f64) -> Result<(LstmParams, Array2<f64>), NnetError> {
    if cache.batch != 1 {
        return Err(NnetError::Contract(format!("expected a single-sequence cache, got batch {}", cache.batch)));
    }
    let mut g = backward_batch(model, cache, &[label], 1.0, true)?;
    Ok((g.params.take().expect("requested"), g.inputs.pop().expect("one sequence")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> (DetectorModel, Vec<Array2<f64>>) {
        let cfg = ModelConfig { input_dim: 3, hidden_dim: 4, seq_len: 5, init_seed: seed, threshold: 0.5 };
        let model = init_model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let xs = (0..3).map(|_| Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0))).collect();
        (model, xs)
    }

    #[test]
    fn zero_model_outputs_half() {
        let cfg = ModelConfig { input_dim: 2, hidden_dim: 3, seq_len: 4, ..Default::default() };
        let m = DetectorModel::zeroed(cfg);
        let x = Array2::from_elem((4, 2), 0.7);
        let (p, cache) = forward(&m, &x.view()).unwrap();
        assert_eq!(p, 0.5);
        assert!(cache.hidden_state(3, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_matches_individual() {
        let (model, xs) = small(1);
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let cache = forward_batch(&model, &views).unwrap();
        let labels = [1.0, 0.0, 1.0];
        let g = backward_batch(&model, &cache, &labels, 1.0, true).unwrap();
        let mut summed = model.params.zeros_like();
        for (b, x) in xs.iter().enumerate() {
            let (p, c) = forward(&model, &x.view()).unwrap();
            assert!((p - cache.probabilities[b]).abs() < 1e-14);
            let (pg, ig) = backward(&model, &c, labels[b]).unwrap();
            summed.add_assign(&pg);
            for (a, e) in ig.iter().zip(g.inputs[b].iter()) {
                assert!((a - e).abs() < 1e-13);
            }
        }
        for (a, e) in summed.to_flat().iter().zip(g.params.unwrap().to_flat()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_pair_doubles_gradient() {
        let (model, xs) = small(2);
        let one = forward_batch(&model, &[xs[0].view()]).unwrap();
        let two = forward_batch(&model, &[xs[0].view(), xs[0].view()]).unwrap();
        let g1 = backward_batch(&model, &one, &[1.0], 1.0, true).unwrap().params.unwrap().to_flat();
        let g2 = backward_batch(&model, &two, &[1.0, 1.0], 1.0, true).unwrap().params.unwrap().to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (model, xs) = small(3);
        let mut bad = xs[0].clone();
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(forward(&model, &bad.view()), Err(NnetError::NonFinite(_))));
        let wrong = Array2::<f64>::zeros((4, 3));
        assert!(matches!(forward(&model, &wrong.view()), Err(NnetError::Shape(_))));

        let (_, cache) = forward(&model, &xs[0].view()).unwrap();
        let other = init_model(&ModelConfig { input_dim: 3, hidden_dim: 5, seq_len: 5, ..Default::default() });
        assert!(matches!(backward(&other, &cache, 1.0), Err(NnetError::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, xs) = small(4);
        let a = forward(&model, &xs[1].view()).unwrap().0;
        let b = forward(&model, &xs[1].view()).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
