use super::{Real, Tensor, TensorError};

/// RMSProp state: one running mean-square accumulator per parameter.
///
/// `s ← ρ·s + (1−ρ)·g²`, `p ← p − lr·g / (√s + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    accum: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self::with_hyper(lr, 0.9, 1e-8, shapes)
    }

    pub fn with_hyper(lr: f64, rho: f64, eps: f64, shapes: &[&[usize]]) -> Self {
        OptimizerState {
            lr,
            rho,
            eps,
            accum: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Rebuilds a state from saved accumulators.
    pub fn from_accumulators(lr: f64, rho: f64, eps: f64, accum: Vec<Tensor<T>>) -> Self {
        OptimizerState { lr, rho, eps, accum }
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accum
    }

    /// Applies one update in place. Nothing is modified if any gradient
    /// is non-finite or mis-shaped.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.accum.len() {
            return Err(TensorError::InvalidArgument(format!(
                "rmsprop: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.accum.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != g.shape() || p.shape() != self.accum[i].shape() {
                return Err(TensorError::InvalidArgument(format!(
                    "rmsprop: shape mismatch for `{name}`: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { name, index });
            }
        }
        let rho = T::from_f64_lossy(self.rho);
        let one_minus = T::from_f64_lossy(1.0 - self.rho);
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(self.accum.iter_mut()) {
            for ((pv, &gv), sv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(s.data_mut().iter_mut())
            {
                *sv = rho * *sv + one_minus * gv * gv;
                *pv = *pv - lr * gv / (sv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
