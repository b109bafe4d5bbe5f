//! Adam with decoupled weight decay, plus schedule and clipping helpers.

pub(crate) struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Adam {
    pub(crate) fn new(sizes: impl Iterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], lr: f32, decay: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), (m, v)), &wd) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(decay)
        {
            for i in 0..p.len() {
                p[i] -= lr * wd * p[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to a tenth of the peak.
pub(crate) fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = (total - warmup).max(1) as f32;
    let progress = ((step - warmup) as f32 / span).min(1.0);
    let min = 0.1 * peak;
    min + 0.5 * (peak - min) * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_grads(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}
