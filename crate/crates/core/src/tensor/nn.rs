//! Named parameter storage and the layer building blocks shared by the models.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use super::{ConvSpec, ConvTransposeSpec, Graph, PadMode, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Order is registration order and is the
/// order checkpoints are written in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g`, tracked or as constants.
    pub fn bind(&self, g: &mut Graph<T>, tracked: bool) -> Bound {
        Bound(self.values.iter().map(|v| if tracked { g.leaf(v.clone()) } else { g.constant(v.clone()) }).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces values from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        if other.names != self.names {
            return Err(TensorError::Shape {
                op: "load_params",
                detail: format!("parameter names differ: {:?} vs {:?}", other.names, self.names),
            });
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.values).zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(TensorError::Shape {
                    op: "load_params",
                    detail: format!("{name}: {:?} vs {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Parameters recorded on one graph, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform `±sqrt(6 / fan_in) * gain` initialization; zeros when `gain` is 0.
pub fn init_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    if bound == 0.0 {
        return Tensor::zeros(shape.to_vec());
    }
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

/// `x @ w + b` for `x: [N, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[inputs, outputs], inputs, gain))?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.bias_add(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec<T>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec<T>,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let fan_in = cin * kernel * kernel;
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[cout, cin, kernel, kernel], fan_in, gain))?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([cout]))?) } else { None };
        Ok(Self { w, b, spec })
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d { w: self.w, b: self.b, spec: self.spec.cast() }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.conv2d(x, p[self.w], &self.spec)?;
        match self.b {
            Some(b) => g.bias_add(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvTransposeSpec,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvTransposeSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        // Each output sees about cin * (kernel / stride)^2 inputs.
        let fan_in = (cin * kernel * kernel / (spec.stride * spec.stride)).max(1);
        let w = store.add(format!("{name}.weight"), init_uniform(rng, &[cin, cout, kernel, kernel], fan_in, 1.0))?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([cout]))?) } else { None };
        Ok(Self { w, b, spec })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.conv_transpose2d(x, p[self.w], self.spec)?;
        match self.b {
            Some(b) => g.bias_add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Zero padded, stride-one "same" convolution spec for odd kernels.
pub fn same_conv<T>(kernel: usize) -> ConvSpec<T> {
    ConvSpec::new(1, kernel / 2, PadMode::Zero)
}
