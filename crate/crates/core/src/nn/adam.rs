//! Adam optimizer with externally visible state so checkpoints can resume
//! bit-exactly.

use ndarray::ArrayD;

/// Adam with bias correction. One instance owns the first/second moment
/// buffers for a fixed list of parameters (order matters and must match
/// the parameter collection order of the network it drives).
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32, params: &[&ArrayD<f32>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i] = None` is treated as a zero gradient
    /// (moments decay but the parameter does not move much); this keeps the
    /// step count consistent across parameters.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f32>], grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(params[i].raw_dim());
                    &zero
                }
            };
            debug_assert_eq!(g.shape(), params[i].shape());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut *params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, mv, vv| {
                    let mhat = mv / b1t;
                    let vhat = vv / b2t;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[ArrayD<f32>], &[ArrayD<f32>]) {
        (self.t, &self.m, &self.v)
    }

    /// Rebuild from checkpointed state.
    pub fn from_state(lr: f32, t: u64, m: Vec<ArrayD<f32>>, v: Vec<ArrayD<f32>>) -> Self {
        assert_eq!(m.len(), v.len());
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m,
            v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With bias correction, the very first Adam step is ~lr * sign(g).
        let mut p = arr1(&[1.0f32, -2.0]).into_dyn();
        let g = arr1(&[0.3f32, -0.7]).into_dyn();
        let mut opt = Adam::new(0.1, &[&p]);
        opt.step(&mut [&mut p], &[Some(g)]);
        assert!((p[[0]] - (1.0 - 0.1)).abs() < 1e-3, "{}", p[[0]]);
        assert!((p[[1]] - (-2.0 + 0.1)).abs() < 1e-3, "{}", p[[1]]);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (p - 3)^2; gradient 2(p - 3).
        let mut p = arr1(&[0.0f32]).into_dyn();
        let mut opt = Adam::new(0.05, &[&p]);
        for _ in 0..2000 {
            let g = p.mapv(|v| 2.0 * (v - 3.0));
            opt.step(&mut [&mut p], &[Some(g)]);
        }
        assert!((p[[0]] - 3.0).abs() < 1e-2, "{}", p[[0]]);
    }

    #[test]
    fn state_round_trip_matches_uninterrupted_run() {
        let g_seq: Vec<f32> = (0..20).map(|i| ((i * 37) % 11) as f32 / 5.0 - 1.0).collect();
        // Continuous run.
        let mut p1 = arr1(&[0.5f32]).into_dyn();
        let mut o1 = Adam::new(0.01, &[&p1]);
        for gv in &g_seq {
            o1.step(&mut [&mut p1], &[Some(arr1(&[*gv]).into_dyn())]);
        }
        // Interrupted at step 10, state carried over.
        let mut p2 = arr1(&[0.5f32]).into_dyn();
        let mut o2 = Adam::new(0.01, &[&p2]);
        for gv in &g_seq[..10] {
            o2.step(&mut [&mut p2], &[Some(arr1(&[*gv]).into_dyn())]);
        }
        let (t, m, v) = o2.state();
        let mut o3 = Adam::from_state(0.01, t, m.to_vec(), v.to_vec());
        for gv in &g_seq[10..] {
            o3.step(&mut [&mut p2], &[Some(arr1(&[*gv]).into_dyn())]);
        }
        assert_eq!(p1[[0]].to_bits(), p2[[0]].to_bits(), "resume must be bit-exact");
    }
}
