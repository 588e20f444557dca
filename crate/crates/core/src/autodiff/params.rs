use std::collections::HashMap;

use crate::scalar::Real;

use super::{AutodiffError, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which update group a parameter belongs to. The training schedule decides
/// which groups move at each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Static branch networks and encodings.
    Static,
    /// Dynamic branch networks and encodings.
    Dynamic,
    /// Encoding band gates.
    Gates,
    /// Camera rotation and translation.
    Pose,
    /// Focal lengths and principal point.
    Focal,
    /// Skew coefficient.
    Skew,
    /// Anything not driven by the training schedule.
    Other,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Dynamic => "dynamic",
            Self::Gates => "gates",
            Self::Pose => "pose",
            Self::Focal => "focal",
            Self::Skew => "skew",
            Self::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "static" => Self::Static,
            "dynamic" => Self::Dynamic,
            "gates" => Self::Gates,
            "pose" => Self::Pose,
            "focal" => Self::Focal,
            "skew" => Self::Skew,
            "other" => Self::Other,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Owns every learnable tensor together with its gradient slot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor<T>,
    ) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            group,
            value,
            grad,
            requires_grad: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), AutodiffError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds `grad` into the gradient slot of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let slot = &mut self.params[id.0].grad;
        debug_assert_eq!(slot.shape(), grad.shape());
        for (g, &d) in slot.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
    }

    /// Euclidean norm of every parameter value, by name.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.norm().as_f64()))
            .collect()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
