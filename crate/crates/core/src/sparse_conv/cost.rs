use serde::{Deserialize, Serialize};

/// Shape of one convolution layer, enough to count its parameters and work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Standard {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default)]
        bias: bool,
    },
    Depthwise {
        channels: usize,
        kernel_size: usize,
        #[serde(default)]
        bias: bool,
    },
    Pointwise {
        in_channels: usize,
        out_channels: usize,
        #[serde(default)]
        bias: bool,
    },
    /// Depthwise `M x D^3` followed by pointwise `M -> N`.
    Sdsc {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default)]
        depthwise_bias: bool,
        #[serde(default)]
        pointwise_bias: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub trainable_params: u64,
    pub mult_adds: u64,
}

impl std::ops::Add for CostReport {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            trainable_params: self.trainable_params + rhs.trainable_params,
            mult_adds: self.mult_adds + rhs.mult_adds,
        }
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

impl LayerSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            LayerSpec::Standard { in_channels, .. }
            | LayerSpec::Pointwise { in_channels, .. }
            | LayerSpec::Sdsc { in_channels, .. } => in_channels,
            LayerSpec::Depthwise { channels, .. } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerSpec::Standard { out_channels, .. }
            | LayerSpec::Pointwise { out_channels, .. }
            | LayerSpec::Sdsc { out_channels, .. } => out_channels,
            LayerSpec::Depthwise { channels, .. } => channels,
        }
    }

    pub fn kernel_size(&self) -> usize {
        match *self {
            LayerSpec::Standard { kernel_size, .. }
            | LayerSpec::Depthwise { kernel_size, .. }
            | LayerSpec::Sdsc { kernel_size, .. } => kernel_size,
            LayerSpec::Pointwise { .. } => 1,
        }
    }

    pub fn trainable_params(&self) -> u64 {
        let taps = self.kernel_size().pow(3) as u64;
        let b = |on: bool, n: usize| if on { n as u64 } else { 0 };
        match *self {
            LayerSpec::Standard {
                in_channels: m,
                out_channels: n,
                bias,
                ..
            } => (m * n) as u64 * taps + b(bias, n),
            LayerSpec::Depthwise {
                channels: m, bias, ..
            } => m as u64 * taps + b(bias, m),
            LayerSpec::Pointwise {
                in_channels: m,
                out_channels: n,
                bias,
            } => (m * n) as u64 + b(bias, n),
            LayerSpec::Sdsc {
                in_channels: m,
                out_channels: n,
                depthwise_bias,
                pointwise_bias,
                ..
            } => m as u64 * taps + (m * n) as u64 + b(depthwise_bias, m) + b(pointwise_bias, n),
        }
    }

    /// Standard spatial convolution with the same channels, kernel and output bias.
    /// `None` for pointwise layers, which have no spatial extent to separate.
    pub fn standard_equivalent(&self) -> Option<LayerSpec> {
        match *self {
            LayerSpec::Standard { .. } => Some(*self),
            LayerSpec::Sdsc {
                in_channels,
                out_channels,
                kernel_size,
                pointwise_bias,
                ..
            } => Some(LayerSpec::Standard {
                in_channels,
                out_channels,
                kernel_size,
                bias: pointwise_bias,
            }),
            LayerSpec::Depthwise { .. } | LayerSpec::Pointwise { .. } => None,
        }
    }

    /// Separable replacement of a spatial layer: bias moves to the pointwise half.
    pub fn sdsc_equivalent(&self) -> Option<LayerSpec> {
        match *self {
            LayerSpec::Sdsc { .. } => Some(*self),
            LayerSpec::Standard {
                in_channels,
                out_channels,
                kernel_size,
                bias,
            } if kernel_size > 1 => Some(LayerSpec::Sdsc {
                in_channels,
                out_channels,
                kernel_size,
                depthwise_bias: false,
                pointwise_bias: bias,
            }),
            _ => None,
        }
    }

    /// Parameter ratio standard / separable for layers that have both forms.
    pub fn separable_ratio(&self) -> Option<f64> {
        let std = self.standard_equivalent()?;
        let sep = self.sdsc_equivalent()?;
        Some(std.trainable_params() as f64 / sep.trainable_params() as f64)
    }
}

/// Parameters and multiply-adds of one layer on a concrete active set.
///
/// `neighbor_pairs` is the number of (site, tap) pairs with an active neighbor,
/// as counted by a rulebook; `None` assumes every tap of every site is active.
pub fn cost(layer: &LayerSpec, active_sites: u64, neighbor_pairs: Option<u64>) -> CostReport {
    let taps = layer.kernel_size().pow(3) as u64;
    let pairs = if active_sites == 0 {
        0
    } else {
        neighbor_pairs.unwrap_or(active_sites * taps)
    };
    let mult_adds = match *layer {
        LayerSpec::Standard {
            in_channels: m,
            out_channels: n,
            ..
        } => pairs * (m * n) as u64,
        LayerSpec::Depthwise { channels: m, .. } => pairs * m as u64,
        LayerSpec::Pointwise {
            in_channels: m,
            out_channels: n,
            ..
        } => active_sites * (m * n) as u64,
        LayerSpec::Sdsc {
            in_channels: m,
            out_channels: n,
            ..
        } => pairs * m as u64 + active_sites * (m * n) as u64,
    };
    CostReport {
        trainable_params: layer.trainable_params(),
        mult_adds,
    }
}
