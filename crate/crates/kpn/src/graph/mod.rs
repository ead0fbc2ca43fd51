//! Architecture descriptions, bottleneck blocks, and the complexity /
//! receptive-field arithmetic used for route selection and reporting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod bottleneck;
mod complexity;
mod presets;
mod receptive;

pub use bottleneck::{build_bottleneck, reduction_ratio, BottleneckSpec, BottleneckVariant, ReductionRatio};
pub use complexity::{count_complexity, ComplexityReport, LayerCost};
pub use presets::{preset, PRESET_NAMES};
pub use receptive::{receptive_field, receptive_profile};

/// Pooling flavor for `LayerKind::Pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Max,
    GlobalAvg,
}

/// One layer of an architecture. Channel counts chain along the graph and
/// are validated by `propagate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Bn,
    Act {
        /// Leaky-ReLU slope for negative inputs; 0 is plain ReLU.
        #[serde(default)]
        slope: f64,
    },
    Pool {
        pool: PoolKind,
        #[serde(default)]
        kernel: usize,
        #[serde(default)]
        stride: usize,
    },
    Dense {
        units: usize,
    },
    ResidualAdd {
        /// Index of the earlier layer whose output joins here. A 1x1
        /// adapter convolution is inserted automatically when channels
        /// or spatial size differ.
        residual_source: usize,
    },
}

impl LayerKind {
    pub fn conv(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerKind::Conv {
            channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        LayerKind::Pool {
            pool: PoolKind::Max,
            kernel,
            stride,
        }
    }

    pub fn global_avg_pool() -> Self {
        LayerKind::Pool {
            pool: PoolKind::GlobalAvg,
            kernel: 0,
            stride: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Bn => "bn",
            LayerKind::Act { .. } => "act",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ResidualAdd { .. } => "residual-add",
        }
    }
}

/// Ordered layer graph with a fixed input shape (C, H, W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    /// Input feature-map shape as `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerKind>,
}

/// Shape of one layer's output while propagating through the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Convolutional feature map: channels x height x width.
    Map { c: usize, h: usize, w: usize },
    /// Flat feature vector.
    Vec { d: usize },
}

impl Feature {
    pub fn spatial(&self) -> Option<(usize, usize)> {
        match self {
            Feature::Map { h, w, .. } => Some((*h, *w)),
            Feature::Vec { .. } => None,
        }
    }

    pub fn channels(&self) -> Option<usize> {
        match self {
            Feature::Map { c, .. } => Some(*c),
            Feature::Vec { .. } => None,
        }
    }
}

/// Adapter convolution implied by a residual connection, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Per-layer shape information derived from an architecture.
#[derive(Debug, Clone)]
pub struct ShapeTrace {
    /// Output feature of each layer.
    pub outputs: Vec<Feature>,
    /// For each residual-add layer index, the adapter it needs (if any).
    pub adapters: Vec<(usize, Option<AdapterSpec>)>,
}

impl ShapeTrace {
    pub fn adapter_for(&self, layer: usize) -> Option<AdapterSpec> {
        self.adapters
            .iter()
            .find(|(idx, _)| *idx == layer)
            .and_then(|(_, a)| *a)
    }
}

fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} does not fit padded extent {padded}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out == 0 {
        return Err(Error::Config(format!(
            "nonpositive output extent for kernel {kernel}, stride {stride}, pad {pad}, extent {extent}"
        )));
    }
    Ok(out)
}

impl Architecture {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerKind>) -> Self {
        Architecture {
            name: name.into(),
            input_shape,
            layers,
        }
    }

    /// Walk the graph, computing every layer's output shape and the
    /// residual adapters implied by channel or stride mismatches.
    /// Fails on any inconsistency (channel chaining, kernel fit,
    /// unresolvable residual join, dense before the end, ...).
    pub fn propagate(&self) -> Result<ShapeTrace> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        let mut outputs: Vec<Feature> = Vec::with_capacity(self.layers.len());
        let mut adapters = Vec::new();
        let mut cur = Feature::Map {
            c: c0,
            h: h0,
            w: w0,
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Config(format!("layer {idx} ({}): {msg}", layer.name()));
            cur = match *layer {
                LayerKind::Conv {
                    channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let Feature::Map { c: _, h, w } = cur else {
                        return Err(err("conv requires a feature map input".into()));
                    };
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(err("channels, kernel, stride must be positive".into()));
                    }
                    Feature::Map {
                        c: channels,
                        h: conv_out_extent(h, kernel, stride, pad)?,
                        w: conv_out_extent(w, kernel, stride, pad)?,
                    }
                }
                LayerKind::Bn | LayerKind::Act { .. } => match cur {
                    Feature::Map { .. } => cur,
                    Feature::Vec { .. } => {
                        return Err(err("requires a feature map input".into()))
                    }
                },
                LayerKind::Pool { pool, kernel, stride } => {
                    let Feature::Map { c, h, w } = cur else {
                        return Err(err("pool requires a feature map input".into()));
                    };
                    match pool {
                        PoolKind::Max => {
                            if kernel == 0 || stride == 0 {
                                return Err(err("max pool needs kernel and stride".into()));
                            }
                            Feature::Map {
                                c,
                                h: conv_out_extent(h, kernel, stride, 0)?,
                                w: conv_out_extent(w, kernel, stride, 0)?,
                            }
                        }
                        PoolKind::GlobalAvg => Feature::Vec { d: c },
                    }
                }
                LayerKind::Dense { units } => {
                    if units == 0 {
                        return Err(err("dense needs at least one unit".into()));
                    }
                    let _d = match cur {
                        Feature::Vec { d } => d,
                        // A map input is implicitly flattened.
                        Feature::Map { c, h, w } => c * h * w,
                    };
                    Feature::Vec { d: units }
                }
                LayerKind::ResidualAdd { residual_source } => {
                    if residual_source >= idx {
                        return Err(err(format!(
                            "residual source {residual_source} is not an earlier layer"
                        )));
                    }
                    let Feature::Map { c, h, w } = cur else {
                        return Err(err("residual add requires a feature map".into()));
                    };
                    let Feature::Map {
                        c: sc,
                        h: sh,
                        w: sw,
                    } = outputs[residual_source]
                    else {
                        return Err(err("residual source must be a feature map".into()));
                    };
                    if sc == c && sh == h && sw == w {
                        adapters.push((idx, None));
                    } else {
                        // 1x1 adapter; stride must reproduce the target size.
                        let stride = sh.div_ceil(h.max(1)).max(1);
                        let ah = (sh - 1) / stride + 1;
                        let aw = (sw - 1) / stride + 1;
                        if ah != h || aw != w {
                            return Err(Error::Shape(format!(
                                "layer {idx}: residual source {sh}x{sw} cannot adapt to {h}x{w}"
                            )));
                        }
                        adapters.push((
                            idx,
                            Some(AdapterSpec {
                                in_channels: sc,
                                out_channels: c,
                                stride,
                            }),
                        ));
                    }
                    cur
                }
            };
            outputs.push(cur);
        }
        Ok(ShapeTrace { outputs, adapters })
    }

    pub fn validate(&self) -> Result<()> {
        self.propagate().map(|_| ())
    }

    /// Indices of the main-chain convolution layers, in order. Residual
    /// adapters are not part of the chain and are excluded.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerKind::Conv { .. }).then_some(i))
            .collect()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.conv_layers().len()
    }
}

/// Write an architecture as pretty JSON.
pub fn save_arch(arch: &Architecture, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(arch)
        .map_err(|e| Error::Config(format!("serialize architecture: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Load an architecture from JSON and validate it.
pub fn load_arch(path: &Path) -> Result<Architecture> {
    let text = std::fs::read_to_string(path)?;
    let arch: Architecture = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parse architecture {}: {e}", path.display())))?;
    arch.validate()?;
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_chain() -> Architecture {
        Architecture::new(
            "chain",
            [1, 8, 8],
            vec![
                LayerKind::conv(4, 3, 1, 1),
                LayerKind::Bn,
                LayerKind::Act { slope: 0.0 },
                LayerKind::conv(8, 3, 2, 1),
                LayerKind::global_avg_pool(),
                LayerKind::Dense { units: 10 },
            ],
        )
    }

    #[test]
    fn propagate_tracks_shapes() {
        let trace = plain_chain().propagate().unwrap();
        assert_eq!(trace.outputs[0], Feature::Map { c: 4, h: 8, w: 8 });
        assert_eq!(trace.outputs[3], Feature::Map { c: 8, h: 4, w: 4 });
        assert_eq!(trace.outputs[4], Feature::Vec { d: 8 });
        assert_eq!(trace.outputs[5], Feature::Vec { d: 10 });
    }

    #[test]
    fn residual_adapter_inserted_on_channel_change() {
        let arch = Architecture::new(
            "res",
            [4, 8, 8],
            vec![
                LayerKind::conv(8, 3, 2, 1),
                LayerKind::ResidualAdd { residual_source: 0 },
            ],
        );
        // source is layer 0's output, same shape: no adapter
        let trace = arch.propagate().unwrap();
        assert_eq!(trace.adapter_for(1), None);

        let arch = Architecture::new(
            "res2",
            [4, 8, 8],
            vec![
                LayerKind::conv(4, 3, 1, 1),
                LayerKind::conv(8, 3, 2, 1),
                LayerKind::ResidualAdd { residual_source: 0 },
            ],
        );
        let trace = arch.propagate().unwrap();
        assert_eq!(
            trace.adapter_for(2),
            Some(AdapterSpec {
                in_channels: 4,
                out_channels: 8,
                stride: 2
            })
        );
    }

    #[test]
    fn forward_residual_source_rejected() {
        let arch = Architecture::new(
            "bad",
            [4, 8, 8],
            vec![LayerKind::ResidualAdd { residual_source: 0 }],
        );
        assert!(arch.propagate().is_err());
    }

    #[test]
    fn kernel_too_large_rejected() {
        let arch = Architecture::new("bad", [1, 2, 2], vec![LayerKind::conv(1, 5, 1, 0)]);
        assert!(matches!(arch.propagate(), Err(Error::Config(_))));
    }

    #[test]
    fn arch_json_round_trip() {
        let arch = plain_chain();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        save_arch(&arch, &path).unwrap();
        let loaded = load_arch(&path).unwrap();
        assert_eq!(arch, loaded);
        // Saving again produces identical bytes.
        let path2 = dir.path().join("b.json");
        save_arch(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn conv_layer_indices() {
        let arch = plain_chain();
        assert_eq!(arch.conv_layers(), vec![0, 3]);
        assert_eq!(arch.conv_layer_count(), 2);
    }
}
