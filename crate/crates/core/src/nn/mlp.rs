//! Small fully connected network over a [`ParamStore`]: ReLU hidden layers,
//! raw logits out. Callers own the loss; the binary heads here go through
//! [`sigmoid`](super::sigmoid) at the call site.

use rand::Rng;

use super::{affine, affine_backward, Matrix, NnError, ParamStore};

/// Layer-shape descriptor plus the parameter-name prefix. The parameters
/// themselves live in a store so several components can share one optimizer.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

/// Everything the backward pass needs: the input actually fed to each affine
/// layer (post-activation of the previous one).
pub struct MlpCache {
    layer_inputs: Vec<Matrix>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an mlp needs an input and an output dim");
        assert!(dims.iter().all(|&d| d > 0), "zero-width layer");
        Mlp { prefix: prefix.to_string(), dims: dims.to_vec() }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn weight_name(&self, l: usize) -> String {
        format!("{}.w{}", self.prefix, l)
    }

    fn bias_name(&self, l: usize) -> String {
        format!("{}.b{}", self.prefix, l)
    }

    /// Inserts glorot weights and zero biases into the store.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.dims.len() - 1 {
            store.insert(&self.weight_name(l), Matrix::glorot(self.dims[l], self.dims[l + 1], rng));
            store.insert(&self.bias_name(l), Matrix::zeros(1, self.dims[l + 1]));
        }
    }

    /// Smallest |pre-activation| over all hidden units, infinity when there
    /// are none. Finite-difference checks are only valid when the probe step
    /// cannot cross a ReLU kink, so they skip draws where this is tiny.
    pub fn hidden_kink_margin(&self, store: &ParamStore, x: &Matrix) -> Result<f64, NnError> {
        let n_affines = self.dims.len() - 1;
        let mut margin = f64::INFINITY;
        let mut a = x.clone();
        for l in 0..n_affines {
            let z = affine(&a, store.get(&self.weight_name(l)), store.get(&self.bias_name(l)).row(0))?;
            if l + 1 < n_affines {
                for &v in &z.data {
                    margin = margin.min(v.abs());
                }
                a = z;
                for v in a.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(margin)
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, MlpCache), NnError> {
        let n_affines = self.dims.len() - 1;
        let mut layer_inputs = Vec::with_capacity(n_affines);
        let mut a = x.clone();
        for l in 0..n_affines {
            layer_inputs.push(a.clone());
            let mut z = affine(&a, store.get(&self.weight_name(l)), store.get(&self.bias_name(l)).row(0))?;
            if l + 1 < n_affines {
                for v in z.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        Ok((a, MlpCache { layer_inputs }))
    }

    /// Accumulates parameter gradients into the store and returns d(loss)/d(x).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        dlogits: &Matrix,
    ) -> Result<Matrix, NnError> {
        let n_affines = self.dims.len() - 1;
        let mut dz = dlogits.clone();
        for l in (0..n_affines).rev() {
            let (mut dx, dw, db) =
                affine_backward(&cache.layer_inputs[l], store.get(&self.weight_name(l)), &dz)?;
            store.accumulate(&self.weight_name(l), &dw);
            store.accumulate(&self.bias_name(l), &Matrix::from_vec(1, db.len(), db));
            if l == 0 {
                return Ok(dx);
            }
            // ReLU: post > 0 iff pre > 0, so the stored post-activation is its
            // own gradient mask.
            for (g, a) in dx.data.iter_mut().zip(&cache.layer_inputs[l].data) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            dz = dx;
        }
        unreachable!("loop always returns at l == 0")
    }
}
