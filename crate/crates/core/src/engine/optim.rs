//! Decoupled-weight-decay Adam and the polynomial learning-rate schedule.

use diffcore::{ParamStore, Tensor};

/// `lr0 · (1 − t/T)^power`, zero from `T` on.
pub fn poly_lr(lr0: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros = |p: &diffcore::Parameter<f32>| {
            Tensor::full(p.tensor.shape().to_vec(), 0.0f32).expect("valid shape")
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One update. Weight decay applies to matrices and kernels, not to
    /// biases and normalisation gains.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.tensor.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, &g), (mi, vi)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = f64::from(*mi) / c1;
                let vhat = f64::from(*vi) / c2;
                let upd = mhat / (vhat.sqrt() + self.eps) + decay * f64::from(*w);
                *w -= (lr * upd) as f32;
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
