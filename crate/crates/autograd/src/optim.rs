use crate::{Float, Tensor};

/// Adaptive moment estimation over a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(shapes: &[Vec<usize>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Returns updated parameter values; `params` and `grads` are index aligned.
    pub fn update(&mut self, params: &[&Tensor<T>], grads: &[&Tensor<T>]) -> Vec<Tensor<T>> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step_size = self.lr / bc1;
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let (p, g) = (params[i], grads[i]);
            assert_eq!(p.shape(), g.shape());
            let mut m = std::mem::replace(&mut self.m[i], Tensor::scalar(T::zero())).into_vec();
            let mut v = std::mem::replace(&mut self.v[i], Tensor::scalar(T::zero())).into_vec();
            let mut np = p.to_vec();
            for j in 0..np.len() {
                let gj = g.data()[j].to_f64().unwrap();
                let mj = b1 * m[j].to_f64().unwrap() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64().unwrap() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj).unwrap();
                v[j] = T::from_f64(vj).unwrap();
                let denom = (vj / bc2).sqrt() + eps;
                np[j] -= T::from_f64(step_size * mj / denom).unwrap();
            }
            self.m[i] = Tensor::new(p.shape(), m);
            self.v[i] = Tensor::new(p.shape(), v);
            out.push(Tensor::new(p.shape(), np));
        }
        out
    }
}
