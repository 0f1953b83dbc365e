use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g ← g + λw; v ← μv + g; w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient only decay.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape != v.shape {
                return Err(Error::ShapeMismatch(format!("parameter {:?} vs state {:?}", p.shape, v.shape)));
            }
            for i in 0..p.data.len() {
                let grad = g.as_ref().map_or(0.0, |g| g.data[i]) + wd * p.data[i];
                v.data[i] = mu * v.data[i] + grad;
                p.data[i] -= lr * v.data[i];
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
