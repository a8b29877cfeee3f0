use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParameterVector, Tape, Tensor, Var};
use crate::{seed, Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize },
    Relu,
    MaxPool { size: usize },
    Dense { units: usize },
    /// Final dense layer plus output activation.
    Head { outputs: usize, activation: HeadActivation },
}

impl LayerSpec {
    fn token(&self) -> String {
        match self {
            LayerSpec::Conv { filters, kernel } => format!("conv{kernel}x{kernel}x{filters}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool { size } => format!("maxpool{size}"),
            LayerSpec::Dense { units } => format!("dense{units}"),
            LayerSpec::Head {
                outputs,
                activation,
            } => format!(
                "head{outputs}-{}",
                match activation {
                    HeadActivation::Sigmoid => "sigmoid",
                    HeadActivation::Softmax => "softmax",
                }
            ),
        }
    }
}

/// Declared shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_head: bool,
}

/// Layer stack over square `(channels, size, size)` inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub image_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv3x3(8) relu pool2 conv3x3(16) relu pool2 dense(32) relu head.
    ///
    /// `num_classes == 2` builds a single sigmoid output, anything larger a
    /// softmax over `num_classes`.
    pub fn reference(image_size: usize, num_classes: usize) -> Self {
        let head = if num_classes <= 2 {
            LayerSpec::Head {
                outputs: 1,
                activation: HeadActivation::Sigmoid,
            }
        } else {
            LayerSpec::Head {
                outputs: num_classes,
                activation: HeadActivation::Softmax,
            }
        };
        Self {
            channels: 3,
            image_size,
            layers: vec![
                LayerSpec::Conv { filters: 8, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { filters: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { units: 32 },
                LayerSpec::Relu,
                head,
            ],
        }
    }

    /// Same body with a different head.
    pub fn with_head(&self, outputs: usize, activation: HeadActivation) -> Result<Self> {
        let mut arch = self.clone();
        match arch.layers.last_mut() {
            Some(LayerSpec::Head { .. }) => {
                *arch.layers.last_mut().unwrap() = LayerSpec::Head {
                    outputs,
                    activation,
                };
                Ok(arch)
            }
            _ => Err(Error::InvalidArgument("architecture has no head layer".into())),
        }
    }

    pub fn head(&self) -> Option<(usize, HeadActivation)> {
        match self.layers.last() {
            Some(LayerSpec::Head {
                outputs,
                activation,
            }) => Some((*outputs, *activation)),
            _ => None,
        }
    }

    pub fn body_spec_string(&self) -> String {
        let mut parts = vec![format!("in{}x{}x{}", self.channels, self.image_size, self.image_size)];
        parts.extend(
            self.layers
                .iter()
                .filter(|l| !matches!(l, LayerSpec::Head { .. }))
                .map(LayerSpec::token),
        );
        parts.join("|")
    }

    pub fn spec_string(&self) -> String {
        let mut parts = vec![format!("in{}x{}x{}", self.channels, self.image_size, self.image_size)];
        parts.extend(self.layers.iter().map(LayerSpec::token));
        parts.join("|")
    }

    /// `"<body hash>-<full hash>"`, FNV-1a over the layer-spec strings.
    pub fn fingerprint(&self) -> String {
        format!(
            "{:016x}-{:016x}",
            seed::str_key(&self.body_spec_string()),
            seed::str_key(&self.spec_string())
        )
    }

    /// Walks the layer stack, checking shape compatibility, and lists every
    /// parameter tensor.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let heads = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Head { .. }))
            .count();
        if heads != 1 || !matches!(self.layers.last(), Some(LayerSpec::Head { .. })) {
            return Err(Error::InvalidArgument(
                "architecture needs exactly one head, as the last layer".into(),
            ));
        }
        let mut out = Vec::new();
        // Spatial shape (c, h, w) until the first dense layer, then flat width.
        let mut spatial = Some((self.channels, self.image_size, self.image_size));
        let mut flat = 0usize;
        let (mut conv_i, mut dense_i) = (0, 0);
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { filters, kernel } => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::InvalidArgument("conv layer after dense layer".into())
                    })?;
                    if kernel == 0 || kernel > h || kernel > w || filters == 0 {
                        return Err(Error::Shape(format!(
                            "conv{kernel}x{kernel}x{filters} on {c}x{h}x{w}"
                        )));
                    }
                    conv_i += 1;
                    out.push(ParamShape {
                        name: format!("conv{conv_i}.weight"),
                        shape: vec![filters, c, kernel, kernel],
                        fan_in: c * kernel * kernel,
                        fan_out: filters * kernel * kernel,
                        is_head: false,
                    });
                    out.push(ParamShape {
                        name: format!("conv{conv_i}.bias"),
                        shape: vec![filters],
                        fan_in: c * kernel * kernel,
                        fan_out: filters * kernel * kernel,
                        is_head: false,
                    });
                    spatial = Some((filters, h - kernel + 1, w - kernel + 1));
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = spatial.ok_or_else(|| {
                        Error::InvalidArgument("pool layer after dense layer".into())
                    })?;
                    if size == 0 || size > h || size > w {
                        return Err(Error::Shape(format!("maxpool{size} on {c}x{h}x{w}")));
                    }
                    spatial = Some((c, h / size, w / size));
                }
                LayerSpec::Dense { units: outputs }
                | LayerSpec::Head { outputs, .. } => {
                    if let Some((c, h, w)) = spatial.take() {
                        flat = c * h * w;
                    }
                    let is_head = matches!(layer, LayerSpec::Head { .. });
                    let prefix = if is_head {
                        "head".to_string()
                    } else {
                        dense_i += 1;
                        format!("fc{dense_i}")
                    };
                    out.push(ParamShape {
                        name: format!("{prefix}.weight"),
                        shape: vec![outputs, flat],
                        fan_in: flat,
                        fan_out: outputs,
                        is_head,
                    });
                    out.push(ParamShape {
                        name: format!("{prefix}.bias"),
                        shape: vec![outputs],
                        fan_in: flat,
                        fan_out: outputs,
                        is_head,
                    });
                    flat = outputs;
                }
            }
        }
        Ok(out)
    }

    pub fn head_param_names(&self) -> Result<Vec<String>> {
        Ok(self
            .param_shapes()?
            .into_iter()
            .filter(|p| p.is_head)
            .map(|p| p.name)
            .collect())
    }

    /// Glorot-uniform weights, zero biases. Each tensor draws from its own
    /// stream keyed by `(seed, name)`, so re-initializing a single tensor
    /// reproduces what a full initialization would have produced for it.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterVector<T>> {
        let mut params = ParameterVector::new();
        for p in self.param_shapes()? {
            params.push(p.name.clone(), init_tensor(&p, seed))?;
        }
        Ok(params)
    }

    /// Fresh values for the head tensors only.
    pub fn reinit_head<T: Scalar>(&self, params: &mut ParameterVector<T>, seed: u64) -> Result<()> {
        for p in self.param_shapes()?.into_iter().filter(|p| p.is_head) {
            let fresh = init_tensor(&p, seed);
            match params.get_mut(&p.name) {
                Some(t) => *t = fresh,
                None => {
                    return Err(Error::IncompatibleArchitecture(format!(
                        "missing head tensor {}",
                        p.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Records the network on a fresh tape. Returns the output node
    /// (probabilities) and the tape.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterVector<T>,
        batch: Tensor<T>,
    ) -> Result<(Var, Tape<T>)> {
        let shapes = self.param_shapes()?;
        let expected = [self.channels, self.image_size, self.image_size];
        if batch.rank() != 4 || batch.shape()[1..] != expected {
            return Err(Error::Shape(format!(
                "batch {:?} does not match input (N, {}, {}, {})",
                batch.shape(),
                expected[0],
                expected[1],
                expected[2]
            )));
        }
        let mut tape = Tape::new();
        let mut x = tape.input(batch);
        let mut vars = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let t = params.get(&s.name).ok_or_else(|| {
                Error::IncompatibleArchitecture(format!("missing parameter {}", s.name))
            })?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            vars.push(tape.param(s.name.clone(), t.clone()));
        }
        let mut pi = 0;
        let mut flat = false;
        for (li, layer) in self.layers.iter().enumerate() {
            let name;
            match layer {
                LayerSpec::Conv { .. } => {
                    name = shapes[pi].name.trim_end_matches(".weight").to_string();
                    x = tape.conv2d(x, vars[pi], vars[pi + 1])?;
                    pi += 2;
                }
                LayerSpec::Relu => {
                    name = format!("relu@{li}");
                    x = tape.relu(x);
                }
                LayerSpec::MaxPool { size } => {
                    name = format!("maxpool@{li}");
                    x = tape.maxpool(x, *size)?;
                }
                LayerSpec::Dense { .. } | LayerSpec::Head { .. } => {
                    if !flat {
                        x = tape.flatten(x)?;
                        flat = true;
                    }
                    name = shapes[pi].name.trim_end_matches(".weight").to_string();
                    x = tape.dense(x, vars[pi], vars[pi + 1])?;
                    pi += 2;
                    if let LayerSpec::Head { activation, .. } = layer {
                        check_finite(&tape, x, &name)?;
                        x = match activation {
                            HeadActivation::Sigmoid => tape.sigmoid(x),
                            HeadActivation::Softmax => tape.softmax(x)?,
                        };
                    }
                }
            }
            check_finite(&tape, x, &name)?;
        }
        Ok((x, tape))
    }

    /// Forward pass without keeping gradients around; returns per-sample
    /// outputs, shape (N, outputs).
    pub fn predict<T: Scalar>(&self, params: &ParameterVector<T>, batch: Tensor<T>) -> Result<Tensor<T>> {
        let (out, tape) = self.forward(params, batch)?;
        Ok(tape.value(out).clone())
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

fn init_tensor<T: Scalar>(p: &ParamShape, seed: u64) -> Tensor<T> {
    if p.name.ends_with(".bias") {
        return Tensor::zeros(&p.shape);
    }
    let a = (6.0 / (p.fan_in + p.fan_out) as f64).sqrt();
    let mut rng = seed::rng(&[seed, seed::str_key(&p.name)]);
    let mut t = Tensor::zeros(&p.shape);
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.gen_range(-a..=a));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes() {
        let arch = Architecture::reference(32, 2);
        let shapes = arch.param_shapes().unwrap();
        let names: Vec<_> = shapes.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight",
                "fc1.bias", "head.weight", "head.bias"
            ]
        );
        // 32 -> 30 -> 15 -> 13 -> 6
        assert_eq!(shapes[4].shape, vec![32, 16 * 6 * 6]);
        assert_eq!(shapes[6].shape, vec![1, 32]);
        assert!(shapes[6].is_head && !shapes[4].is_head);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let arch = Architecture::reference(12, 2);
        let mut params: ParameterVector<f32> = arch.init_params(3).unwrap();
        for name in ["head.weight", "head.bias"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let batch = Tensor::full(&[4, 3, 12, 12], 0.7);
        let out = arch.predict(&params, batch).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn body_fingerprint_ignores_head() {
        let a = Architecture::reference(32, 2);
        let b = Architecture::reference(32, 8);
        let (fa, fb) = (a.fingerprint(), b.fingerprint());
        assert_eq!(fa.split('-').next(), fb.split('-').next());
        assert_ne!(fa, fb);
    }

    #[test]
    fn wrong_input_shape() {
        let arch = Architecture::reference(12, 2);
        let params: ParameterVector<f32> = arch.init_params(0).unwrap();
        let err = arch.forward(&params, Tensor::zeros(&[1, 3, 10, 10])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let arch = Architecture::reference(12, 2);
        let params: ParameterVector<f32> = arch.init_params(0).unwrap();
        let mut batch = Tensor::zeros(&[1, 3, 12, 12]);
        batch.data_mut()[0] = f32::NAN;
        match arch.forward(&params, batch) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn glorot_bounds() {
        let arch = Architecture::reference(32, 2);
        let params: ParameterVector<f32> = arch.init_params(11).unwrap();
        let a = (6.0f32 / (27.0 + 72.0)).sqrt();
        let w = params.get("conv1.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= a));
        assert!(params.get("conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
