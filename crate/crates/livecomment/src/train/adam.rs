use crate::model::{ModelParams, ParamGroup};
use crate::tensor::quantize_f32;

/// Scale gradients in place so their global L2 norm (over included entries)
/// does not exceed `max_norm`. Returns the post-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], include: &[bool], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (g, &inc) in grads.iter().zip(include) {
        if inc {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return norm;
    }
    let scale = max_norm / norm;
    for (g, &inc) in grads.iter_mut().zip(include) {
        if inc {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    max_norm
}

/// Adam with the conventional defaults (β₁=0.9, β₂=0.999, ε=1e-8). Moment
/// buffers follow the canonical `ModelParams::visit` order. Updated values
/// are rounded through `f32` so checkpoints stay lossless.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, _, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over the parameter groups selected by `include`. `grads`
    /// must align with the canonical visit order.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<f64>],
        include: impl Fn(ParamGroup) -> bool,
    ) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (m, v) = (&mut self.m, &mut self.v);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        params.visit_mut(&mut |group, _, tensor| {
            if include(group) {
                let g = &grads[idx];
                let (m, v) = (&mut m[idx], &mut v[idx]);
                for i in 0..tensor.data.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    tensor.data[i] =
                        quantize_f32(tensor.data[i] - lr * m_hat / (v_hat.sqrt() + eps));
                }
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            d_model: 4,
            d_frame: 3,
            layers_encoder: 1,
            layers_decoder: 1,
            n_heads: 2,
            d_ff: 6,
            dropout: 0.0,
            p_audio: 4,
            p_comment: 4,
            p_response: 4,
            n_context: 1,
            t1: 2,
            t2: 4,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        ModelParams::init(&cfg, 9, &mut rng)
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let mut params = tiny_params();
        let before: Vec<Vec<f64>> = params.named().iter().map(|(_, _, t)| t.data.clone()).collect();
        let grads: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, _, t)| vec![0.5; t.numel()])
            .collect();
        let mut adam = Adam::new(&params, 0.0);
        adam.step(&mut params, &grads, |_| true);
        let after: Vec<Vec<f64>> = params.named().iter().map(|(_, _, t)| t.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn step_moves_only_included_groups() {
        let mut params = tiny_params();
        let before_emb = params.token_embedding.data.clone();
        let before_out = params.output_w.data.clone();
        let grads: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, _, t)| vec![1.0; t.numel()])
            .collect();
        let mut adam = Adam::new(&params, 1e-2);
        adam.step(&mut params, &grads, |g| g == ParamGroup::TokenEmbedding);
        assert_ne!(before_emb, params.token_embedding.data);
        assert_eq!(before_out, params.output_w.data);
    }

    #[test]
    fn params_stay_f32_representable_after_steps() {
        let mut params = tiny_params();
        let grads: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, _, t)| vec![0.37; t.numel()])
            .collect();
        let mut adam = Adam::new(&params, 3e-3);
        for _ in 0..5 {
            adam.step(&mut params, &grads, |_| true);
        }
        params.visit(&mut |_, name, t| {
            for &x in &t.data {
                assert_eq!(quantize_f32(x), x, "{name} drifted off the f32 grid");
            }
        });
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = vec![vec![3.0, 4.0], vec![12.0]];
        let include = vec![true, true];
        let norm = clip_gradients(&mut grads, &include, 6.5);
        assert!((norm - 6.5).abs() < 1e-12);
        let post: f64 = grads
            .iter()
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt();
        assert!((post - 6.5).abs() < 1e-9);

        // under the cap: untouched
        let mut small = vec![vec![0.3]];
        let n = clip_gradients(&mut small, &[true], 10.0);
        assert!((n - 0.3).abs() < 1e-12);
        assert_eq!(small[0][0], 0.3);
    }
}
