use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::Result;

/// A trainable matrix together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding named parameters in a fixed declaration order.
///
/// The order is load-bearing: checkpoints store parameter blocks in it.
pub trait ParamSet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn num_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    fn values(&self) -> Vec<Matrix> {
        self.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
    }

    fn grads(&self) -> Vec<Matrix> {
        self.named_params().into_iter().map(|(_, p)| p.grad.clone()).collect()
    }

    /// Overwrites parameter values in declaration order. Shapes must match.
    fn set_values(&mut self, values: &[Matrix]) -> Result<()> {
        let mut params = self.named_params_mut();
        if params.len() != values.len() {
            return Err(crate::Error::InvalidArgument(format!(
                "expected {} parameter blocks, got {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, p), v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(crate::Error::InvalidArgument(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Param {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((prefix.to_string(), self));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`ParamSet`] by visiting the listed fields in order.
macro_rules! impl_param_set {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::numerics::ParamSet for $ty {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::numerics::Param)>,
            ) {
                $( self.$field.collect(&$crate::numerics::param::join(prefix, stringify!($field)), out); )+
            }
            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::numerics::Param)>,
            ) {
                $( self.$field.collect_mut(&$crate::numerics::param::join(prefix, stringify!($field)), out); )+
            }
        }
    };
}
pub(crate) use impl_param_set;
