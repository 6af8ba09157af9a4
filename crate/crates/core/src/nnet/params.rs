use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gate order used in every flattened layout: input, forget, cell candidate, output.
pub const GATE_ORDER: [u8; 4] = *b"IFGO";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub init_seed: u64,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_dim: 20, hidden_dim: 128, seq_len: 100, init_seed: 0, threshold: 0.5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [("input_dim", self.input_dim), ("hidden_dim", self.hidden_dim), ("seq_len", self.seq_len)] {
            if v == 0 {
                problems.push(format!("model.{name} must be at least 1"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            problems.push(format!("model.threshold must be in (0, 1), got {}", self.threshold));
        }
        problems
    }
}

/// `4·(h·(d+h) + h) + h + 1`
pub fn parameter_count(input_dim: usize, hidden_dim: usize) -> usize {
    4 * (hidden_dim * (input_dim + hidden_dim) + hidden_dim) + hidden_dim + 1
}

/// LSTM layer plus a single sigmoid output unit. The same shape is reused
/// for gradients and optimizer accumulators.
///
/// Gate blocks are stacked by rows in [`GATE_ORDER`]: rows `0..h` input gate,
/// `h..2h` forget gate, `2h..3h` cell candidate, `3h..4h` output gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h × d`
    pub w_in: Array2<f64>,
    /// `4h × h`
    pub w_rec: Array2<f64>,
    /// `4h`
    pub bias: Array1<f64>,
    /// `h`
    pub w_out: Array1<f64>,
    /// length 1
    pub b_out: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = 4 * hidden_dim;
        LstmParams {
            w_in: Array2::zeros((g, input_dim)),
            w_rec: Array2::zeros((g, hidden_dim)),
            bias: Array1::zeros(g),
            w_out: Array1::zeros(hidden_dim),
            b_out: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim(), self.hidden_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_rec.ncols()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter blocks in flattening order.
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.w_rec.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_in.as_slice_mut().expect("standard layout"),
            self.w_rec.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut rest = flat;
        for block in self.slices_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn get(&self, flat_index: usize) -> f64 {
        let mut i = flat_index;
        for block in self.slices() {
            if i < block.len() {
                return block[i];
            }
            i -= block.len();
        }
        panic!("parameter index {flat_index} out of range");
    }

    pub fn set(&mut self, flat_index: usize, value: f64) {
        let mut i = flat_index;
        for block in self.slices_mut() {
            if i < block.len() {
                block[i] = value;
                return;
            }
            i -= block.len();
        }
        panic!("parameter index {flat_index} out of range");
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.slices_mut() {
            block.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub params: LstmParams,
}

impl DetectorModel {
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// All-zero parameters; the output is always `sigmoid(0) = 0.5`.
    pub fn zeroed(config: ModelConfig) -> Self {
        let params = LstmParams::zeros(config.input_dim, config.hidden_dim);
        DetectorModel { config, params }
    }
}

/// Weights uniform in `±1/√hidden`, biases zero except the forget gate at 1.
pub fn init_model(config: &ModelConfig) -> DetectorModel {
    let h = config.hidden_dim;
    let bound = 1.0 / (h as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut params = LstmParams::zeros(config.input_dim, h);
    params.w_in.mapv_inplace(|_| rng.gen_range(-bound..bound));
    params.w_rec.mapv_inplace(|_| rng.gen_range(-bound..bound));
    params.w_out.mapv_inplace(|_| rng.gen_range(-bound..bound));
    params.bias.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
    DetectorModel { config: config.clone(), params }
}
