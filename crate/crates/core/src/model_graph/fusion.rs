use super::Level;
use crate::error::{shape_err, Result};
use crate::nn::kernels;
use crate::tensor::Tensor;

/// One pyramid-level feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: Level,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn filled(level: Level, channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self { level, height, width, channels, values: vec![v; channels * height * width] }
    }

    fn as_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.values.clone())
    }
}

/// Fast normalized fusion of equally shaped maps:
/// `Σ relu(wᵢ)·Iᵢ / (ε + Σ relu(wⱼ))`, elementwise.
pub fn fuse_features(inputs: &[FeatureMap], weights: &[f64], epsilon: f64) -> Result<FeatureMap> {
    if inputs.len() < 2 {
        return Err(shape_err("fusion needs at least two inputs"));
    }
    if weights.len() != inputs.len() {
        return Err(shape_err(format!("{} weights for {} inputs", weights.len(), inputs.len())));
    }
    let first = &inputs[0];
    for m in inputs {
        if (m.height, m.width, m.channels) != (first.height, first.width, first.channels) {
            return Err(shape_err(format!(
                "fusion input {}x{}x{} differs from {}x{}x{}",
                m.channels, m.height, m.width, first.channels, first.height, first.width
            )));
        }
    }
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(FeatureMap::as_tensor).collect();
    let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
    let out = kernels::weighted_fusion(&refs, weights, epsilon);
    Ok(FeatureMap { values: out.data, ..first.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_weights_average_constant_maps() {
        let a = FeatureMap::filled(Level::P3, 2, 3, 3, 2.0);
        let b = FeatureMap::filled(Level::P3, 2, 3, 3, 4.0);
        let out = fuse_features(&[a, b], &[1.0, 1.0], 1e-4).unwrap();
        let expect = 6.0 / (2.0 + 1e-4);
        assert!(out.values.iter().all(|&v| (v - expect).abs() < 1e-12));
        assert!((expect - 3.0).abs() < 1e-3);
    }

    #[test]
    fn zero_weight_excludes_an_input() {
        let a = FeatureMap::filled(Level::P4, 1, 2, 2, 5.0);
        let b = FeatureMap::filled(Level::P4, 1, 2, 2, -7.0);
        let out = fuse_features(&[a, b], &[1.0, 0.0], 1e-4).unwrap();
        assert!(out.values.iter().all(|&v| (v - 5.0 / (1.0 + 1e-4)).abs() < 1e-12));
    }

    #[test]
    fn non_positive_weights_give_a_finite_zero_map() {
        let a = FeatureMap::filled(Level::P2, 1, 2, 2, 5.0);
        let b = FeatureMap::filled(Level::P2, 1, 2, 2, 3.0);
        let out = fuse_features(&[a, b], &[-1.0, 0.0], 1e-4).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = FeatureMap::filled(Level::P2, 1, 2, 2, 5.0);
        let b = FeatureMap::filled(Level::P2, 1, 4, 4, 3.0);
        assert!(fuse_features(&[a.clone(), b], &[1.0, 1.0], 1e-4).is_err());
        assert!(fuse_features(&[a.clone(), a], &[1.0], 1e-4).is_err());
    }
}
