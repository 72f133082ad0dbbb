use super::param::ParamSet;
use super::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct OptState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptState {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptState {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v <- momentum * v + grad + weight_decay * value; value <- value - lr * v`,
/// then clears the gradients.
pub fn sgd_step(params: &mut ParamSet, opt: &mut OptState) {
    assert_eq!(params.len(), opt.velocity.len(), "optimizer built for another parameter set");
    for (p, v) in params.iter_mut().zip(opt.velocity.iter_mut()) {
        let vel = v.data_mut();
        let grad = p.grad.data_mut();
        let val = p.value.data_mut();
        for i in 0..val.len() {
            vel[i] = opt.momentum * vel[i] + grad[i] + opt.weight_decay * val[i];
            val[i] -= opt.lr * vel[i];
            grad[i] = 0.0;
        }
    }
}
