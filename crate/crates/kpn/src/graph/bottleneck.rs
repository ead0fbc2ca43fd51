//! Bottleneck convolution blocks: squeeze-then-expand (Type A) and
//! squeeze-expand-squeeze (Type B), with their computation-reduction
//! arithmetic relative to a standard KxK convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LayerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BottleneckVariant {
    A,
    B,
}

/// A bottleneck block: input channels `C`, squeezed width `X`, output
/// channels `C'`, spatial kernel `K`. The width multiplier is `X / C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub variant: BottleneckVariant,
    pub in_channels: usize,
    pub squeezed: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.squeezed == 0 || self.squeezed > self.in_channels {
            return Err(Error::Config(format!(
                "invalid squeeze: X = {} must satisfy 1 <= X <= C = {}",
                self.squeezed, self.in_channels
            )));
        }
        if self.out_channels < self.in_channels || self.out_channels > 2 * self.in_channels {
            return Err(Error::Config(format!(
                "output channels {} outside [C, 2C] = [{}, {}]",
                self.out_channels,
                self.in_channels,
                2 * self.in_channels
            )));
        }
        if self.kernel == 0 {
            return Err(Error::Config("kernel must be positive".into()));
        }
        Ok(())
    }

    /// Width multiplier alpha = X / C.
    pub fn alpha(&self) -> f64 {
        self.squeezed as f64 / self.in_channels as f64
    }
}

/// Expand a bottleneck spec into its layer sequence. Every convolution is
/// followed by batch norm and activation. The KxK convolution carries the
/// block stride and `K/2` padding, so the block matches the spatial size
/// and receptive field of a standard KxK convolution of equal stride;
/// the 1x1 stages run at stride 1 and contribute nothing to either.
/// `X = C` still emits the leading 1x1 stage.
pub fn build_bottleneck(spec: &BottleneckSpec, stride: usize) -> Result<Vec<LayerKind>> {
    spec.validate()?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let act = LayerKind::Act { slope: 0.0 };
    let pad = spec.kernel / 2;
    let mut layers = vec![
        LayerKind::conv(spec.squeezed, 1, 1, 0),
        LayerKind::Bn,
        act.clone(),
    ];
    match spec.variant {
        BottleneckVariant::A => {
            layers.extend([
                LayerKind::conv(spec.out_channels, spec.kernel, stride, pad),
                LayerKind::Bn,
                act,
            ]);
        }
        BottleneckVariant::B => {
            layers.extend([
                LayerKind::conv(spec.squeezed, spec.kernel, stride, pad),
                LayerKind::Bn,
                act.clone(),
                LayerKind::conv(spec.out_channels, 1, 1, 0),
                LayerKind::Bn,
                act,
            ]);
        }
    }
    Ok(layers)
}

/// Computation of a bottleneck block relative to the standard KxK
/// convolution it replaces, at equal feature-map size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionRatio {
    /// Exact ratio of multiply-adds.
    pub exact: f64,
    /// The coarse approximation: `X/C` for Type A, `X^2/(C*C')` for Type B.
    pub approx: f64,
}

/// Exact and approximate multiply-add reduction of a bottleneck block.
/// The spatial size cancels, so the ratio depends only on channel counts
/// and the kernel.
pub fn reduction_ratio(spec: &BottleneckSpec) -> Result<ReductionRatio> {
    spec.validate()?;
    let c = spec.in_channels as f64;
    let cp = spec.out_channels as f64;
    let x = spec.squeezed as f64;
    let k2 = (spec.kernel * spec.kernel) as f64;
    let (exact, approx) = match spec.variant {
        BottleneckVariant::A => (x / (cp * k2) + x / c, x / c),
        BottleneckVariant::B => (
            x / (cp * k2) + x * x / (c * cp) + x / (c * k2),
            x * x / (c * cp),
        ),
    };
    Ok(ReductionRatio { exact, approx })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: BottleneckVariant, c: usize, x: usize, cp: usize, k: usize) -> BottleneckSpec {
        BottleneckSpec {
            variant,
            in_channels: c,
            squeezed: x,
            out_channels: cp,
            kernel: k,
        }
    }

    fn conv_shape(layers: &[LayerKind]) -> Vec<(usize, usize)> {
        layers
            .iter()
            .filter_map(|l| match l {
                LayerKind::Conv { channels, kernel, .. } => Some((*channels, *kernel)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn type_a_layer_shapes() {
        let layers = build_bottleneck(&spec(BottleneckVariant::A, 64, 32, 64, 3), 1).unwrap();
        // 1x1: 64 -> 32, then 3x3: 32 -> 64.
        assert_eq!(conv_shape(&layers), vec![(32, 1), (64, 3)]);
    }

    #[test]
    fn type_b_layer_shapes() {
        let layers = build_bottleneck(&spec(BottleneckVariant::B, 64, 32, 128, 3), 1).unwrap();
        assert_eq!(conv_shape(&layers), vec![(32, 1), (32, 3), (128, 1)]);
    }

    #[test]
    fn x_equal_c_still_emits_squeeze() {
        let layers = build_bottleneck(&spec(BottleneckVariant::A, 64, 64, 64, 3), 1).unwrap();
        assert_eq!(conv_shape(&layers), vec![(64, 1), (64, 3)]);
    }

    #[test]
    fn over_squeeze_rejected() {
        let r = build_bottleneck(&spec(BottleneckVariant::A, 32, 64, 32, 3), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn reduction_type_a_matches_hand_values() {
        // C = C' = 64, X = 32, K = 3: 32/576 + 32/64 = 0.555556; approx 0.5
        let r = reduction_ratio(&spec(BottleneckVariant::A, 64, 32, 64, 3)).unwrap();
        assert!((r.exact - 0.5555555555).abs() < 1e-5);
        assert!((r.approx - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reduction_type_b_matches_hand_values() {
        // 32/576 + 1024/4096 + 32/576 = 0.361111; approx 0.25
        let r = reduction_ratio(&spec(BottleneckVariant::B, 64, 32, 64, 3)).unwrap();
        assert!((r.exact - 0.3611111111).abs() < 1e-5);
        assert!((r.approx - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_squeeze_large_kernel_ratio_approaches_one() {
        // X = C, C' = C: exact = 1/K^2 + 1 -> 1 as K grows.
        let r = reduction_ratio(&spec(BottleneckVariant::A, 64, 64, 64, 101)).unwrap();
        assert!((r.exact - 1.0).abs() < 1e-3);
    }
}
