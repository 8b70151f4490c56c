use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Feed-forward stack of layers with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Activations recorded during a forward pass: the input of every layer plus
/// the final output. Owned by the caller so frozen networks can be shared.
#[derive(Debug, Clone, Default)]
pub struct Trace<T = f32> {
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> Option<&Tensor<T>> {
        self.activations.last()
    }

    /// Input to layer `index` (index == layer count yields the output).
    pub fn activation(&self, index: usize) -> Option<&Tensor<T>> {
        self.activations.get(index)
    }
}

/// Gradients for every parameter tensor (declaration order) and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub params: Vec<Vec<T>>,
    pub input: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with freshly initialised parameters.
    pub fn build(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| Layer::init(spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(input_shape, layers)
    }

    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid network input shape {input_shape:?}")));
        }
        let net = Self { input_shape, layers };
        net.shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| *l.spec()).collect()
    }

    /// Shapes of every activation, starting with the input.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.spec().output_shape(shapes.last().unwrap(), i)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().expect("validated at construction").pop().unwrap()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Parameter names in declaration order, e.g. `layer3.dense.weight`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, _) in layer.params().iter().enumerate() {
                let role = if j == 0 { "weight" } else { "bias" };
                names.push(format!("layer{i}.{}.{role}", layer.spec().kind_name()));
            }
        }
        names
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let expected: usize = self.input_shape.iter().product();
        if input.len() != expected {
            let first = self.layers.first().map(|l| l.spec().kind_name()).unwrap_or("input");
            return Err(Error::Dimension(format!(
                "layer 0 ({first}): expected input of shape {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        if input.shape() == self.input_shape.as_slice() {
            Ok(input.clone())
        } else {
            input.clone().reshape(self.input_shape.clone())
        }
    }

    /// Forward pass without recording activations.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let shapes = self.shapes()?;
        let mut x = self.check_input(input)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, shapes[i + 1].clone());
        }
        Ok(x)
    }

    /// Forward pass that records every activation for a later [`Network::backward`].
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let shapes = self.shapes()?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.check_input(input)?);
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(activations.last().unwrap(), shapes[i + 1].clone());
            activations.push(next);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, Trace { activations }))
    }

    /// Reverse pass over a recorded trace.
    pub fn backward(&self, trace: &Trace<T>, upstream: &[T]) -> Result<Gradients<T>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::State(
                "backward called without a matching forward trace".into(),
            ));
        }
        let shapes = self.shapes()?;
        for (a, s) in trace.activations.iter().zip(&shapes) {
            if a.shape() != s.as_slice() {
                return Err(Error::State(format!(
                    "trace activation of shape {:?} does not belong to this network (expected {s:?})",
                    a.shape()
                )));
            }
        }
        let out_len = trace.activations.last().unwrap().len();
        if upstream.len() != out_len {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} values, network output has {out_len}",
                upstream.len()
            )));
        }
        let mut per_layer: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (pg, dx) = layer.backward(&trace.activations[i], &trace.activations[i + 1], &g);
            per_layer[i] = pg;
            g = dx;
        }
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: g,
        })
    }

    /// Adds `scale * grads` into every parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) -> Result<()> {
        let n = self.params().count();
        if grads.params.len() != n {
            return Err(Error::Dimension(format!(
                "gradient set has {} tensors, network has {n}",
                grads.params.len()
            )));
        }
        for (p, g) in self.params_mut().zip(&grads.params) {
            p.accumulate_grad(g, scale)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(|p| p.clear_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense_layer() {
        let w = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = Layer::from_parts(LayerSpec::dense(3, 3), vec![w, Tensor::zeros(vec![3])]).unwrap();
        let net = Network::<f32>::from_layers(vec![3], vec![layer]).unwrap();
        let y = net.forward(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn box_filter_with_zero_padding() {
        let spec = LayerSpec::conv1d(1, 1, 3, 1);
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let layer = Layer::from_parts(spec, vec![w, Tensor::zeros(vec![1])]).unwrap();
        let net = Network::<f32>::from_layers(vec![1, 4], vec![layer]).unwrap();
        let y = net.forward(&Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let specs = [LayerSpec::dense(4, 3), LayerSpec::Relu, LayerSpec::dense(2, 1)];
        let err = Network::<f32>::build(vec![4], &specs, 0).unwrap_err();
        assert!(err.to_string().contains("layer 2 (dense)"), "{err}");

        let net = Network::<f32>::build(vec![4], &specs[..2], 0).unwrap();
        let err = net.forward(&Tensor::from_vec(vec![1.0; 5])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn backward_requires_trace() {
        let net = Network::<f32>::build(vec![2], &[LayerSpec::dense(2, 2)], 0).unwrap();
        let err = net.backward(&Trace::default(), &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let specs = [
            LayerSpec::conv1d(1, 3, 4, 2),
            LayerSpec::LeakyRelu { slope: 0.1 },
            LayerSpec::dense(3 * 8, 2),
        ];
        let net = Network::<f32>::build(vec![1, 16], &specs, 3).unwrap();
        let x = Tensor::from_vec((0..16).map(|i| (i as f32 * 0.37).sin()).collect());
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let (c, _) = net.forward_trace(&x).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn same_seed_same_parameters() {
        let specs = [LayerSpec::dense(5, 4), LayerSpec::Relu, LayerSpec::dense(4, 2)];
        let a = Network::<f32>::build(vec![5], &specs, 11).unwrap();
        let b = Network::<f32>::build(vec![5], &specs, 11).unwrap();
        let c = Network::<f32>::build(vec![5], &specs, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
