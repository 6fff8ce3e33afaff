use candle_core::{DType, Device, Tensor};

use super::checkpoint::Checkpoint;
use super::schedule::NoiseSchedule;
use super::unet::{stack_grids, Conditioning, Denoiser};
use super::DiffusionError;
use crate::geometry::{BinaryCell, SdfGrid};
use crate::rng::{standard_normal, stream, GustRng};

/// Noise prediction for a batch of states sharing one nominal and timestep.
pub trait NoisePredictor {
    /// `x_t` holds `batch` row-major grids back to back; returns the same layout.
    fn predict(&self, x_t: &[f64], batch: usize, t: usize) -> Result<Vec<f64>, DiffusionError>;
}

/// A denoiser bound to one nominal geometry; the conditioning branch is
/// evaluated once and reused across every timestep.
pub struct BoundDenoiser<'m> {
    model: &'m Denoiser,
    cond: Conditioning,
    height: usize,
    width: usize,
}

impl<'m> BoundDenoiser<'m> {
    pub fn new(model: &'m Denoiser, x_nom: &BinaryCell) -> Result<Self, DiffusionError> {
        let (h, w) = (x_nom.height(), x_nom.width());
        model.config().check_resolution(h, w).map_err(DiffusionError::ShapeMismatch)?;
        let signal: Vec<f32> = x_nom.to_signal().into_iter().map(|v| v as f32).collect();
        let nominal = stack_grids(&[&signal], h, w, model.dtype())?;
        Ok(Self {
            model,
            cond: model.condition(&nominal)?,
            height: h,
            width: w,
        })
    }
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, x_t: &[f64], batch: usize, t: usize) -> Result<Vec<f64>, DiffusionError> {
        let x = Tensor::from_slice(x_t, (batch, 1, self.height, self.width), &Device::Cpu)?.to_dtype(self.model.dtype())?;
        let out = self.model.forward_with(&x, &vec![t as f64; batch], &self.cond)?;
        Ok(out.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// Largest batch pushed through the network at once.
pub const SAMPLE_CHUNK: usize = 64;

/// Ancestral sampling of `count` final states `x_0` as real grids.
/// Sample `i` draws all of its noise from the stream `(seed, i)`.
pub fn sample_fields<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    (h, w): (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<SdfGrid>, DiffusionError> {
    let n = h * w;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let b = SAMPLE_CHUNK.min(count - start);
        let mut rngs: Vec<GustRng> = (start..start + b).map(|i| stream(seed, &[i as u64])).collect();
        let mut x: Vec<f64> = rngs
            .iter_mut()
            .flat_map(|rng| (0..n).map(|_| standard_normal(rng)).collect::<Vec<_>>())
            .collect();
        for t in (1..=schedule.timesteps()).rev() {
            let eps = predictor.predict(&x, b, t)?;
            if eps.len() != x.len() {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "predictor returned {} values for {} inputs",
                    eps.len(),
                    x.len()
                )));
            }
            let alpha = schedule.alpha(t);
            let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
            let inv = 1.0 / alpha.sqrt();
            let sigma = schedule.sigma(t);
            for (k, rng) in rngs.iter_mut().enumerate() {
                for j in k * n..(k + 1) * n {
                    let mean = inv * (x[j] - coef * eps[j]);
                    x[j] = if t > 1 { mean + sigma * standard_normal(rng) } else { mean };
                }
            }
        }
        for k in 0..b {
            out.push(SdfGrid::new(h, w, x[k * n..(k + 1) * n].to_vec())?);
        }
        start += b;
    }
    Ok(out)
}

/// Thresholds final states at zero.
pub fn fields_to_cells(fields: &[SdfGrid]) -> Vec<BinaryCell> {
    fields
        .iter()
        .map(|f| BinaryCell::from_signal(f.height(), f.width(), f.values()).expect("valid field"))
        .collect()
}

/// Draws `count` as-fabricated geometries for `x_nom` with a given predictor.
pub fn sample_with<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    x_nom: &BinaryCell,
    count: usize,
    seed: u64,
) -> Result<Vec<BinaryCell>, DiffusionError> {
    let fields = sample_fields(predictor, schedule, (x_nom.height(), x_nom.width()), count, seed)?;
    Ok(fields_to_cells(&fields))
}

/// Draws `count` as-fabricated geometries for `x_nom` from a checkpoint.
pub fn sample(ckpt: &Checkpoint, x_nom: &BinaryCell, count: usize, seed: u64) -> Result<Vec<BinaryCell>, DiffusionError> {
    let model = ckpt.denoiser(DType::F32)?;
    let bound = BoundDenoiser::new(&model, x_nom)?;
    sample_with(&bound, &ckpt.schedule()?, x_nom, count, seed)
}

/// Noise predicted by a checkpoint for a single state.
pub fn denoise_predict(ckpt: &Checkpoint, x_t: &SdfGrid, t: usize, x_nom: &BinaryCell) -> Result<SdfGrid, DiffusionError> {
    if x_t.height() != x_nom.height() || x_t.width() != x_nom.width() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x_t is {}x{}, nominal is {}x{}",
            x_t.height(),
            x_t.width(),
            x_nom.height(),
            x_nom.width()
        )));
    }
    let timesteps = ckpt.meta.schedule.timesteps;
    if t == 0 || t > timesteps {
        return Err(DiffusionError::ShapeMismatch(format!("timestep {t} outside 1..={timesteps}")));
    }
    let model = ckpt.denoiser(DType::F32)?;
    let eps = BoundDenoiser::new(&model, x_nom)?.predict(x_t.values(), 1, t)?;
    Ok(SdfGrid::new(x_t.height(), x_t.width(), eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::rng::standard_normal_vec;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, x_t: &[f64], _batch: usize, _t: usize) -> Result<Vec<f64>, DiffusionError> {
            Ok(vec![0.0; x_t.len()])
        }
    }

    #[test]
    fn single_step_with_zero_predictor() {
        let s = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        let fields = sample_fields(&Zero, &s, (4, 4), 3, 11).unwrap();
        assert_eq!(fields.len(), 3);
        for (i, f) in fields.iter().enumerate() {
            let x1 = standard_normal_vec(&mut stream(11, &[i as u64]), 16);
            for (got, x) in f.values().iter().zip(&x1) {
                assert!((got - x / 0.7f64.sqrt()).abs() < 1e-12);
            }
        }
        let nom = BinaryCell::filled(4, 4, true).unwrap();
        let cells = sample_with(&Zero, &s, &nom, 3, 11).unwrap();
        for (c, f) in cells.iter().zip(&fields) {
            assert_eq!(c, &BinaryCell::from_signal(4, 4, f.values()).unwrap());
        }
    }

    #[test]
    fn chunking_keeps_per_sample_streams() {
        let s = make_schedule(3, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let many = sample_fields(&Zero, &s, (4, 4), SAMPLE_CHUNK + 5, 2).unwrap();
        let few = sample_fields(&Zero, &s, (4, 4), 2, 2).unwrap();
        assert_eq!(&many[..2], &few[..]);
        assert_eq!(many.len(), SAMPLE_CHUNK + 5);
    }
}
