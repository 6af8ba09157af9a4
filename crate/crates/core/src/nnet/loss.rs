/// Probability clamp applied before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LossValue(pub f64);

impl LossValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy `-(y ln p + (1-y) ln(1-p))` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(probability: f64, label: f64) -> LossValue {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
    LossValue(loss.max(0.0))
}

/// `dJ/dz = sigmoid(z) - y`, evaluated without cancellation so confident
/// predictions still yield a nonzero gradient.
pub fn bce_grad_logit(logit: f64, label: f64) -> f64 {
    if label == 1.0 {
        -sigmoid(-logit)
    } else if label == 0.0 {
        sigmoid(logit)
    } else {
        sigmoid(logit) - label
    }
}
