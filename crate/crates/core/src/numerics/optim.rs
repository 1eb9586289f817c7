use super::tensor::{ParamId, ParamSet};

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let shapes: Vec<usize> = params.iter().map(|(_, p)| p.value.numel()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            frozen: vec![false; shapes.len()],
        }
    }

    /// Excludes a parameter from updates.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    /// Clears moment estimates for one row of a matrix parameter (used when a
    /// codebook row is re-seeded).
    pub fn reset_row(&mut self, id: ParamId, row: usize, cols: usize) {
        self.m[id.0][row * cols..(row + 1) * cols].fill(0.0);
        self.v[id.0][row * cols..(row + 1) * cols].fill(0.0);
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let sq: f64 = params
                    .iter()
                    .filter(|(id, _)| !self.frozen[id.0])
                    .map(|(id, _)| params.grad(id).iter().map(|g| g * g).sum::<f64>())
                    .sum();
                let n = sq.sqrt();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let grad = p.value.grad.as_ref().expect("parameter grad buffer").clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn minimises_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::row_vector(vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&params, id);
            let sq = tape.square(x);
            let l = tape.sum(sq);
            tape.backward(l, &mut params).unwrap();
            opt.step(&mut params);
        }
        assert!(params.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
