use crate::error::TensorError;
use crate::tensor::Tensor;

/// A trainable value with its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    shapes: Vec<Vec<usize>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update to every parameter. Moment buffers are created on
    /// the first call and matched to parameters by position afterwards.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), TensorError> {
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad.as_ref().ok_or(TensorError::MissingGrad(i))?;
            if grad.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    left: p.value.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if let Some(shape) = self.shapes.get(i) {
                if shape.as_slice() != p.value.shape() {
                    return Err(TensorError::ParamShapeChanged {
                        index: i,
                        before: shape.clone(),
                        after: p.value.shape().to_vec(),
                    });
                }
            }
        }
        while self.shapes.len() < params.len() {
            let p = &params[self.shapes.len()];
            self.shapes.push(p.value.shape().to_vec());
            self.m.push(vec![0.0; p.value.len()]);
            self.v.push(vec![0.0; p.value.len()]);
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Param { value, grad } = &mut **p;
            let g = grad.as_ref().expect("checked above").data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
