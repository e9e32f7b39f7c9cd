//! Reproducible parameter initialization.
//!
//! candle's stock `VarMap` draws initial weights from a thread-local RNG. The
//! builder here draws each tensor from a ChaCha stream keyed by the run seed
//! and the tensor's dotted name, so initialization does not depend on
//! construction order or on the process.

use std::collections::HashMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// FNV-1a over the name, mixed with the seed.
fn stream_key(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct SeededVars {
    vars: VarMap,
    seed: u64,
}

fn draw(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| (0..n).map(|_| rng.random_range(lo..up)).collect();
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
            }
        }
    }
}

impl SimpleBackend for SeededVars {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.vars.data().lock().expect("varmap lock poisoned");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: stored {:?}, requested {:?}", var.shape(), s);
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(self.seed, name));
        let values = draw(h, &s, &mut rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("{name}: seeded variables need a shape and an initializer")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars
            .data()
            .lock()
            .expect("varmap lock poisoned")
            .contains_key(name)
    }
}

/// A builder that creates trainable variables in `vars`, initialized from `seed`.
pub fn seeded_builder(vars: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(
        Box::new(SeededVars {
            vars: vars.clone(),
            seed,
        }),
        dtype,
        device.clone(),
    )
}

/// Adds `N(0, std²)` noise to every tensor, drawn per name from `seed`.
///
/// Useful for probing a network away from its initialization, where
/// zero-initialized output layers would make every forward pass return zeros.
pub fn jitter(tensors: &HashMap<String, Tensor>, seed: u64, std: f64) -> Result<HashMap<String, Tensor>> {
    tensors
        .iter()
        .map(|(name, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, name));
            let noise: Vec<f64> = (0..t.elem_count())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = Tensor::from_vec(noise, t.shape(), t.device())?.to_dtype(t.dtype())?;
            Ok((name.clone(), (t + noise)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::linear;

    fn build(seed: u64, order_flip: bool) -> Vec<f32> {
        let vm = VarMap::new();
        let vb = seeded_builder(&vm, seed, DType::F32, &Device::Cpu);
        if order_flip {
            linear(3, 2, vb.pp("b")).unwrap();
            linear(4, 5, vb.pp("a")).unwrap();
        } else {
            linear(4, 5, vb.pp("a")).unwrap();
            linear(3, 2, vb.pp("b")).unwrap();
        }
        let data = vm.data().lock().unwrap();
        data["a.weight"].as_tensor().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn init_is_keyed_by_seed_and_name() {
        assert_eq!(build(3, false), build(3, true));
        assert_ne!(build(3, false), build(4, false));
    }

    #[test]
    fn existing_vars_are_reused() {
        let vm = VarMap::new();
        let vb = seeded_builder(&vm, 1, DType::F64, &Device::Cpu);
        let a = vb.get_with_hints(3, "w", Init::Const(2.0)).unwrap();
        let b = vb.get_with_hints(3, "w", Init::Const(5.0)).unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        assert!(vb.get_with_hints(4, "w", Init::Const(0.0)).is_err());
    }
}
