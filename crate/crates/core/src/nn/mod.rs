//! Parameter registry, reference architectures, He-uniform initialization and Adam.

mod adam;
mod arch;
mod params;

use rand::Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{ArchSpec, ConvLayer, DatasetKind, ModelKind, ParamSpec};
pub use params::{count_params, Bound, ModelParams, Param};

use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Draws kernels from `U(−√(6/fan_in), √(6/fan_in))` on the seed's init
/// stream and zeroes every bias.
///
/// Fails if the resulting parameter total is not within ±15% of
/// `arch.target_params`.
pub fn init_params(arch: &ArchSpec, kind: ModelKind, seed: u64) -> Result<ModelParams> {
    let layout = arch.param_layout(kind)?;
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = ModelParams::new();
    for spec in layout {
        let tensor = if spec.prunable {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            Tensor::from_fn(spec.shape, |_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
        } else {
            Tensor::zeros(spec.shape)
        };
        params.insert(spec.name, tensor, spec.prunable)?;
    }
    let actual = count_params(&params);
    if !arch.within_target(actual) {
        return Err(Error::ParamCount {
            actual,
            target: arch.target_params,
        });
    }
    Ok(params)
}
