//! Decoupled-weight-decay adaptive-moment optimizer.

use crate::model::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state, one flat buffer per parameter tensor in the
/// model's fixed tensor order.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub weight_decay: f64,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> AdamW {
        let shapes: Vec<usize> = params.flat().iter().map(|(_, _, d)| d.len()).collect();
        AdamW {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            weight_decay,
            step: 0,
        }
    }

    /// One update with the given learning rate:
    ///
    ///   m <- b1 m + (1 - b1) g
    ///   v <- b2 v + (1 - b2) g^2
    ///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    ///
    /// with bias-corrected m_hat, v_hat. Weight decay applies to weight
    /// matrices only, not to biases, norms, or embeddings.
    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let grad_views = grads.flat();
        for (idx, (name, dst)) in params.flat_mut().into_iter().enumerate() {
            let g = grad_views[idx].2;
            debug_assert_eq!(grad_views[idx].0, name);
            let decay = if tensor_gets_decay(&name) {
                self.weight_decay
            } else {
                0.0
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..dst.len() {
                let gi = g[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                dst[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * dst[i]);
            }
        }
    }
}

/// Weight matrices decay; biases, norm scales/shifts, and embeddings do not.
fn tensor_gets_decay(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "head")
}
