use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, GatedModel, Layer, Pass};
use crate::tensor::{Scalar, Tensor};

/// Streaming per-channel mean and population variance (Chan et al. merge of
/// per-batch moments, accumulated in `f64`).
#[derive(Clone, Debug, Default)]
pub struct ChannelMoments {
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            count: vec![0.0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    /// Folds in a `[B, C, ...]` activation tensor.
    pub fn update<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<()> {
        let c = self.mean.len();
        let s = x.shape();
        if s.len() < 2 || s[1] != c {
            return Err(Error::dim("recalibrate_bn", format!("{s:?} does not have {c} channels")));
        }
        let (b, area) = (s[0], s[2..].iter().product::<usize>());
        let xd = x.data();
        for ch in 0..c {
            let n_b = (b * area) as f64;
            if n_b == 0.0 {
                continue;
            }
            let values = (0..b).flat_map(|bi| xd[(bi * c + ch) * area..][..area].iter().map(|v| v.as_f64()));
            let mean_b = values.clone().sum::<f64>() / n_b;
            let m2_b: f64 = values.map(|v| (v - mean_b) * (v - mean_b)).sum();
            let n_a = self.count[ch];
            let n = n_a + n_b;
            let delta = mean_b - self.mean[ch];
            self.mean[ch] += delta * n_b / n;
            self.m2[ch] += m2_b + delta * delta * n_a * n_b / n;
            self.count[ch] = n;
        }
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population (biased) variance.
    pub fn variance(&self) -> Vec<f64> {
        self.m2
            .iter()
            .zip(&self.count)
            .map(|(m2, n)| if *n > 0.0 { m2 / n } else { 0.0 })
            .collect()
    }
}

/// Replaces the running statistics of every BN layer with the population
/// mean and variance of its inputs over `calibration`, forwarded in `mode`.
///
/// Layers are processed front to back, each in one pass that already uses
/// the recalibrated statistics of the layers before it. Learnable parameters
/// are untouched. Returns the indices of the updated layers.
pub fn recalibrate_bn<T: Scalar>(
    model: &mut GatedModel<T>,
    calibration: &Dataset,
    batch_size: usize,
    mode: ForwardMode,
) -> Result<Vec<usize>> {
    if calibration.is_empty() {
        return Err(Error::config("recalibrate_bn: empty calibration set"));
    }
    let bn_layers: Vec<usize> = (0..model.layers.len())
        .filter(|&i| matches!(model.layers[i], Layer::BatchNorm(_)))
        .collect();
    let batches = batch_indices(calibration.len(), batch_size, None);
    for &l in &bn_layers {
        let Layer::BatchNorm(state) = &model.layers[l] else { unreachable!() };
        let mut moments = ChannelMoments::new(state.channels());
        for idx in &batches {
            let (x, _) = calibration.batch(idx);
            let acts = model.trace_upto(&x.cast(), Pass::eval(mode), l)?;
            moments.update(&acts[l])?;
        }
        let var = moments.variance();
        let Layer::BatchNorm(state) = &mut model.layers[l] else { unreachable!() };
        state.running_mean = moments.mean().iter().map(|&m| T::lit(m)).collect();
        state.running_var = var.iter().map(|&v| T::lit(v)).collect();
        log::debug!("recalibrated BN layer {l} over {} samples", calibration.len());
    }
    Ok(bn_layers)
}
