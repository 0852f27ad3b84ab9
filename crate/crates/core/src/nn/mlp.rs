use ndarray::{Array2, ArrayView2};

use super::{sigmoid, Activation, Grads, Initializer, Linear, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Stack of linear layers with an activation between consecutive layers.
/// Layers are named `<prefix>.l0`, `<prefix>.l1`, ...
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub output: OutputActivation,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    /// Input of each layer.
    inputs: Vec<Array2<F>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Array2<F>>,
    output: Array2<F>,
}

impl Mlp {
    /// `dims` lists the widths from input to output; `dims.len() - 1` layers.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("MLP `{prefix}` needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{prefix}.l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation,
            output,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView2<'_, F>) -> Result<(Array2<F>, MlpCache<F>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(store, h.view())?;
            inputs.push(h);
            h = if i < last {
                let act = y.mapv(|v| self.activation.apply(v));
                pre.push(y);
                act
            } else {
                match self.output {
                    OutputActivation::Identity => y,
                    OutputActivation::Sigmoid => y.mapv(sigmoid),
                }
            };
        }
        Ok((h.clone(), MlpCache { inputs, pre, output: h }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &MlpCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let mut g = match self.output {
            OutputActivation::Identity => dy.to_owned(),
            OutputActivation::Sigmoid => {
                let mut g = dy.to_owned();
                g.zip_mut_with(&cache.output, |d, &s| *d *= s * (F::one() - s));
                g
            }
        };
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g.zip_mut_with(&cache.pre[i], |d, &z| *d *= self.activation.derivative(z));
            }
            g = self.layers[i].backward(store, grads, cache.inputs[i].view(), g.view());
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn names_and_dims() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(0);
        let mlp = Mlp::new(
            &mut store,
            &mut init,
            "decoder",
            &[6, 4, 3],
            Activation::Gelu,
            OutputActivation::Sigmoid,
        )
        .unwrap();
        assert_eq!(mlp.depth(), 2);
        assert!(store.find("decoder.l0.weight").is_some());
        assert!(store.find("decoder.l1.bias").is_some());
        assert_eq!(store.get(store.find("decoder.l1.weight").unwrap()).shape, vec![3, 4]);
    }

    #[test]
    fn sigmoid_output_in_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(1);
        init.std = 3.0;
        let mlp = Mlp::new(
            &mut store,
            &mut init,
            "m",
            &[3, 8, 2],
            Activation::Gelu,
            OutputActivation::Sigmoid,
        )
        .unwrap();
        let (y, _) = mlp
            .forward(&store, array![[100.0, -50.0, 3.0], [-7.0, 0.0, 1e3]].view())
            .unwrap();
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        init.std = 0.6;
        let mlp = Mlp::new(
            &mut store,
            &mut init,
            "m",
            &[3, 5, 4, 2],
            Activation::Gelu,
            OutputActivation::Sigmoid,
        )
        .unwrap();
        let x = array![[0.5, -0.2, 1.0], [-1.5, 0.7, 0.1]];
        let w = array![[1.0, -0.5], [0.25, 2.0]];
        let loss = |s: &ParamStore<f64>| (mlp.forward(s, x.view()).unwrap().0 * &w).sum();
        let (_, cache) = mlp.forward(&store, x.view()).unwrap();
        let mut grads = Grads::zeros_like(&store);
        mlp.backward(&store, &mut grads, &cache, w.view());
        let h = 1e-5;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).values[k];
                store.get_mut(id).values[k] = orig + h;
                let up = loss(&store);
                store.get_mut(id).values[k] = orig - h;
                let down = loss(&store);
                store.get_mut(id).values[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id)[k];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "{fd} vs {an}");
            }
        }
    }
}
