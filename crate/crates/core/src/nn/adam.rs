//! Parameter updates: adaptive moment estimation, with plain SGD behind the
//! same interface.

use ndarray::ArrayD;

use super::unet::DenoiserParams;
use super::El;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: usize,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: El> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &DenoiserParams<F>) -> Self {
        let shapes: Vec<ArrayD<F>> = params
            .named_views()
            .iter()
            .map(|(_, view)| ArrayD::zeros(view.raw_dim()))
            .collect();
        Self {
            kind,
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update in place. Gradients must come from the same
    /// parameter manifest (same tensor order).
    pub fn update(&mut self, params: &mut DenoiserParams<F>, grads: &DenoiserParams<F>) {
        self.step += 1;
        let gviews = grads.named_views();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, mut p), (_, g)) in params.named_views_mut().into_iter().zip(gviews) {
                    p.zip_mut_with(&g, |pv, gv| *pv = *pv - self.lr * *gv);
                }
            }
            OptimizerKind::Adam => {
                let one = F::one();
                let bc1 = one - self.beta1.powi(self.step as i32);
                let bc2 = one - self.beta2.powi(self.step as i32);
                for (i, ((_, mut p), (_, g))) in
                    params.named_views_mut().into_iter().zip(gviews).enumerate()
                {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    ndarray::Zip::from(m).and(v).and(&mut p).and(&g).for_each(
                        |m, v, p, g| {
                            *m = self.beta1 * *m + (one - self.beta1) * *g;
                            *v = self.beta2 * *v + (one - self.beta2) * *g * *g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
                        },
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::ArchConfig;

    #[test]
    fn sgd_moves_against_gradient() {
        let params = DenoiserParams::<f64>::init(&ArchConfig::tiny(), 3).unwrap();
        let mut updated = params.clone();
        let mut grads = params.zeros_like();
        grads.conv_in.b[0] = 2.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &params);
        opt.update(&mut updated, &grads);
        assert!((updated.conv_in.b[0] - (params.conv_in.b[0] - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // with bias correction the first Adam step is ~lr * sign(g)
        let params = DenoiserParams::<f64>::init(&ArchConfig::tiny(), 4).unwrap();
        let mut updated = params.clone();
        let mut grads = params.zeros_like();
        grads.conv_in.b[0] = 0.5;
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &params);
        opt.update(&mut updated, &grads);
        let delta = params.conv_in.b[0] - updated.conv_in.b[0];
        assert!((delta - 1e-3).abs() < 1e-7, "delta {delta}");
        // untouched parameters stay put
        assert_eq!(updated.conv_in.b[1], params.conv_in.b[1]);
    }

    #[test]
    fn adam_is_deterministic() {
        let params = DenoiserParams::<f64>::init(&ArchConfig::tiny(), 5).unwrap();
        let mut grads = params.zeros_like();
        grads.time1.w[[0, 0]] = 0.3;
        let run = || {
            let mut p = params.clone();
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, &params);
            for _ in 0..5 {
                opt.update(&mut p, &grads);
            }
            p.time1.w[[0, 0]]
        };
        assert_eq!(run(), run());
    }
}
