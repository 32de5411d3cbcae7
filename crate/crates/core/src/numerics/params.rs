//! Named parameter storage, graph binding and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub grad: Vec<f64>,
}

/// Every learnable weight, keyed by a stable path such as
/// `stage1.gl1.bu.w_s`. Iteration order is the lexicographic path order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<()> {
        let path = path.into();
        if value.len() != shape.iter().product::<usize>() {
            return Err(NumericsError::Dimension {
                op: "param",
                lhs: vec![value.len()],
                rhs: shape.to_vec(),
            });
        }
        let grad = vec![0.0; value.len()];
        self.entries.insert(
            path,
            Param {
                shape: shape.to_vec(),
                value: Arc::new(value),
                grad,
            },
        );
        Ok(())
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn insert_uniform(&mut self, path: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<()> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(path, shape, v)
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Multiplies every stored gradient by `c`.
    pub fn scale_grad(&mut self, c: f64) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Adds the gradients of `other` (same layout) into `self`.
    pub fn add_grad_from(&mut self, other: &ModelParams) {
        for (k, p) in self.entries.iter_mut() {
            if let Some(o) = other.entries.get(k) {
                for (a, b) in p.grad.iter_mut().zip(&o.grad) {
                    *a += b;
                }
            }
        }
    }
}

/// Binds parameters into one computation graph. Each path becomes a single
/// leaf tensor sharing the stored buffer; after `backward` the leaf
/// gradients are moved back with [`ParamBinder::collect_grads`].
pub struct ParamBinder {
    params: BTreeMap<String, (Vec<usize>, Arc<Vec<f64>>)>,
    bound: RefCell<BTreeMap<String, Tensor>>,
    track: bool,
}

impl ParamBinder {
    pub fn new(params: &ModelParams) -> Self {
        ParamBinder {
            params: Self::snapshot(params),
            bound: RefCell::new(BTreeMap::new()),
            track: true,
        }
    }

    /// Binder producing constants (inference only).
    pub fn frozen(params: &ModelParams) -> Self {
        ParamBinder {
            params: Self::snapshot(params),
            bound: RefCell::new(BTreeMap::new()),
            track: false,
        }
    }

    fn snapshot(params: &ModelParams) -> BTreeMap<String, (Vec<usize>, Arc<Vec<f64>>)> {
        params
            .iter()
            .map(|(k, p)| (k.clone(), (p.shape.clone(), Arc::clone(&p.value))))
            .collect()
    }

    pub fn get(&self, path: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(path) {
            return Ok(t.clone());
        }
        let (shape, value) = self
            .params
            .get(path)
            .ok_or_else(|| NumericsError::Usage(format!("unknown parameter `{path}`")))?;
        let t = Tensor::from_shared(Arc::clone(value), shape, self.track)?;
        self.bound.borrow_mut().insert(path.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every bound leaf, keyed by path.
    pub fn leaf_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound.borrow().iter().map(|(k, t)| (k.clone(), t.grad())).collect()
    }

    /// Adds the gradients of every bound leaf into `target`.
    pub fn collect_grads(&self, target: &mut ModelParams) {
        for (path, t) in self.bound.borrow().iter() {
            if let Some(p) = target.get_mut(path) {
                let g = t.grad();
                for (a, b) in p.grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update from the stored gradients, which are
    /// zeroed afterwards. A non-finite gradient aborts before any parameter
    /// is touched.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        for (path, p) in params.iter() {
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(NumericsError::Training {
                    path: path.clone(),
                    detail: format!("non-finite gradient {bad}"),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, p) in params.iter_mut() {
            let n = p.grad.len();
            let m = self.first_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let value = Arc::make_mut(&mut p.value);
            for i in 0..n {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState) -> Result<()> {
    state.step(params)
}
