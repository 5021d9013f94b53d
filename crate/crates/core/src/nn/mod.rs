//! Minimal CPU neural-network kernel: parameter tensors, SGD, and the layer
//! zoo the encoder/decoder architectures are built from.
//!
//! Everything is single-threaded and deterministic: weight initialization
//! draws from a caller-supplied ChaCha stream, and forward/backward touch
//! elements in a fixed order. Models expose their tensors through
//! [`VisitTensors`], which backs SGD updates, checkpointing, transplant and
//! parameter counting.

pub mod layers;
pub mod loss;

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One trainable tensor with its gradient and (lazily created) momentum
/// buffer.
#[derive(Clone, Debug)]
pub struct PTensor<F> {
    pub data: ArrayD<F>,
    pub grad: ArrayD<F>,
    vel: Option<ArrayD<F>>,
}

impl<F: Scalar> PTensor<F> {
    pub fn new(data: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        PTensor {
            data,
            grad,
            vel: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Plain SGD with optional momentum: `v = mu*v + g; p -= lr*v`.
    pub fn step(&mut self, lr: F, momentum: F) {
        if momentum == F::zero() {
            self.data.zip_mut_with(&self.grad, |p, &g| *p -= lr * g);
        } else {
            let vel = self
                .vel
                .get_or_insert_with(|| ArrayD::zeros(self.grad.raw_dim()));
            vel.zip_mut_with(&self.grad, |v, &g| *v = momentum * *v + g);
            self.data.zip_mut_with(vel, |p, &v| *p -= lr * v);
        }
    }
}

/// A named tensor exposed by a model: trainable parameter or running buffer.
pub enum TensorSlot<'a, F> {
    Param(&'a mut PTensor<F>),
    Buffer(&'a mut ArrayD<F>),
}

/// Walk every tensor of a model in a fixed order with hierarchical names.
pub trait VisitTensors<F: Scalar> {
    fn visit_tensors(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorSlot<'_, F>));
}

/// Walk every batch-norm layer of a model (statistics calibration).
pub trait VisitBn<F: Scalar> {
    fn visit_bn(&mut self, f: &mut dyn FnMut(&mut layers::BatchNorm2d<F>));
}

pub fn zero_grads<F: Scalar>(model: &mut impl VisitTensors<F>) {
    model.visit_tensors("", &mut |_, slot| {
        if let TensorSlot::Param(p) = slot {
            p.zero_grad();
        }
    });
}

pub fn sgd_step<F: Scalar>(model: &mut impl VisitTensors<F>, lr: F, momentum: F) {
    model.visit_tensors("", &mut |_, slot| {
        if let TensorSlot::Param(p) = slot {
            p.step(lr, momentum);
        }
    });
}

/// Number of trainable parameters (buffers excluded).
pub fn param_count<F: Scalar>(model: &mut impl VisitTensors<F>) -> usize {
    let mut count = 0;
    model.visit_tensors("", &mut |_, slot| {
        if let TensorSlot::Param(p) = slot {
            count += p.data.len();
        }
    });
    count
}

/// Name, shape and kind of every tensor, in visit order.
pub fn tensor_table<F: Scalar>(
    model: &mut impl VisitTensors<F>,
) -> Vec<(String, Vec<usize>, bool)> {
    let mut table = Vec::new();
    model.visit_tensors("", &mut |name, slot| {
        let (shape, trainable) = match slot {
            TensorSlot::Param(p) => (p.data.shape().to_vec(), true),
            TensorSlot::Buffer(b) => (b.shape().to_vec(), false),
        };
        table.push((name.to_string(), shape, trainable));
    });
    table
}

/// Snapshot all tensors (parameters and buffers) as f64 arrays.
pub fn export_tensors<F: Scalar>(
    model: &mut impl VisitTensors<F>,
) -> BTreeMap<String, ArrayD<f64>> {
    let mut map = BTreeMap::new();
    model.visit_tensors("", &mut |name, slot| {
        let data = match slot {
            TensorSlot::Param(p) => &p.data,
            TensorSlot::Buffer(b) => &*b,
        };
        map.insert(name.to_string(), data.mapv(|v| v.to_f64().unwrap()));
    });
    map
}

/// Load a full snapshot: every model tensor must be present with a matching
/// shape, and every map entry must be consumed.
pub fn import_tensors<F: Scalar>(
    model: &mut impl VisitTensors<F>,
    map: &BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    let used = import_subset(model, map)?;
    if used != map.len() {
        return Err(Error::Checkpoint(format!(
            "{} checkpoint tensors were not consumed by the model",
            map.len() - used
        )));
    }
    Ok(())
}

/// Overwrite only the tensors named in `map` (all of which must match a model
/// tensor); returns how many map entries were applied.
pub fn import_subset<F: Scalar>(
    model: &mut impl VisitTensors<F>,
    map: &BTreeMap<String, ArrayD<f64>>,
) -> Result<usize> {
    let mut used = 0usize;
    let mut mismatch: Option<String> = None;
    model.visit_tensors("", &mut |name, slot| {
        if let Some(src) = map.get(name) {
            let dst = match slot {
                TensorSlot::Param(p) => &mut p.data,
                TensorSlot::Buffer(b) => b,
            };
            if src.shape() != dst.shape() {
                mismatch.get_or_insert_with(|| {
                    format!(
                        "tensor '{}' has shape {:?} in checkpoint but {:?} in model",
                        name,
                        src.shape(),
                        dst.shape()
                    )
                });
                return;
            }
            dst.assign(&src.mapv(|v| F::from(v).unwrap()));
            used += 1;
        }
    });
    if let Some(msg) = mismatch {
        return Err(Error::Checkpoint(msg));
    }
    Ok(used)
}

/// He-normal initialization via Box-Muller over a ChaCha stream.
pub fn he_normal<F: Scalar>(rng: &mut ChaCha20Rng, fan_in: usize) -> impl FnMut() -> F + '_ {
    let std = (2.0 / fan_in as f64).sqrt();
    move || {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        F::from(z * std).unwrap()
    }
}

/// Join a prefix and a component with a dot, skipping empty prefixes.
pub(crate) fn scope(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
