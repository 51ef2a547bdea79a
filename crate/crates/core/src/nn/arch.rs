use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::out_extent;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet,
    Mlp,
}

/// Spatial reduction in front of a residual network's classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Penultimate {
    /// Global average pooling to 1x1.
    #[default]
    #[serde(rename = "gap")]
    Gap,
    /// 4x4 average pool with stride 3.
    #[serde(rename = "avgpool4x4s3")]
    AvgPool4x4S3,
    /// Adaptive average pooling to 2x2.
    #[serde(rename = "gap2x2")]
    Gap2x2,
}

/// Declarative architecture description.
///
/// For `resnet`, `depth` counts the stem conv, two convs per residual block
/// and the classifier, so `depth = 8 * blocks_per_stage + 2`; `width` is the
/// first stage's channel count and stages use `width * {1, 2, 4, 8}`.
/// For `mlp`, `depth` is the number of fully connected layers including the
/// output layer and `width` the hidden size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub penultimate: Penultimate,
    #[serde(default)]
    pub small_image_stem: bool,
    pub num_classes: usize,
    /// Per-sample input shape: `[features]` for MLPs, `[C, H, W]` for
    /// residual networks.
    pub input_shape: Vec<usize>,
}

impl ArchSpec {
    pub fn resnet(depth: usize, width: usize, num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Resnet,
            depth,
            width,
            penultimate: Penultimate::Gap,
            small_image_stem: false,
            num_classes,
            input_shape: vec![3, 224, 224],
        }
    }

    /// 32x32 inputs through a single 3x3 stride-1 stem conv.
    pub fn small_stem(mut self) -> Self {
        self.small_image_stem = true;
        self.input_shape = vec![3, 32, 32];
        self
    }

    pub fn with_penultimate(mut self, p: Penultimate) -> Self {
        self.penultimate = p;
        self
    }

    pub fn with_input(mut self, shape: &[usize]) -> Self {
        self.input_shape = shape.to_vec();
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn mlp(depth: usize, width: usize, input_dim: usize, num_classes: usize) -> Self {
        ArchSpec {
            family: Family::Mlp,
            depth,
            width,
            penultimate: Penultimate::Gap,
            small_image_stem: false,
            num_classes,
            input_shape: vec![input_dim],
        }
    }

    pub fn resnet18(num_classes: usize) -> Self {
        ArchSpec::resnet(18, 64, num_classes).small_stem()
    }

    pub fn sta_net(num_classes: usize) -> Self {
        ArchSpec::resnet(10, 64, num_classes).small_stem().with_penultimate(Penultimate::Gap2x2)
    }

    pub fn pla_net(num_classes: usize) -> Self {
        ArchSpec::resnet(18, 42, num_classes).small_stem()
    }

    /// Named presets: `sta_net`, `pla_net`, `resnet18`, `mlp:<depth>,<width>`
    /// (MLPs take their input size from `input_dim`).
    pub fn preset(name: &str, num_classes: usize, input_dim: usize) -> Result<Self> {
        match name {
            "sta_net" => Ok(ArchSpec::sta_net(num_classes)),
            "pla_net" => Ok(ArchSpec::pla_net(num_classes)),
            "resnet18" => Ok(ArchSpec::resnet18(num_classes)),
            _ => {
                let rest = name
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture preset `{}`", name)))?;
                let (d, w) = rest
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidArgument(format!("expected mlp:<depth>,<width>, got `{}`", name)))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number `{}` in preset `{}`", s, name)))
                };
                Ok(ArchSpec::mlp(parse(d)?, parse(w)?, input_dim, num_classes))
            }
        }
    }

    /// Short human-readable label, e.g. `resnet10w64-gap2x2` or `mlp4w800`.
    pub fn label(&self) -> String {
        match self.family {
            Family::Mlp => format!("mlp{}w{}", self.depth, self.width),
            Family::Resnet => {
                let pool = match self.penultimate {
                    Penultimate::Gap => "gap",
                    Penultimate::AvgPool4x4S3 => "avgpool4x4s3",
                    Penultimate::Gap2x2 => "gap2x2",
                };
                format!("resnet{}w{}-{}", self.depth, self.width, pool)
            }
        }
    }

    pub fn blocks_per_stage(&self) -> Option<usize> {
        if self.family == Family::Resnet && self.depth >= 10 && (self.depth - 2).is_multiple_of(8) {
            Some((self.depth - 2) / 8)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidArgument("width must be positive".into()));
        }
        match self.family {
            Family::Resnet => {
                if self.blocks_per_stage().is_none() {
                    return Err(Error::UnsupportedDepth { depth: self.depth });
                }
                if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
                    return Err(Error::InvalidArgument(format!(
                        "resnet input_shape must be [C,H,W], got {:?}",
                        self.input_shape
                    )));
                }
                self.final_spatial()?;
                self.feature_dim()?;
            }
            Family::Mlp => {
                if self.depth < 2 {
                    return Err(Error::InvalidArgument(format!("mlp depth must be >= 2, got {}", self.depth)));
                }
                if self.input_shape.iter().product::<usize>() == 0 {
                    return Err(Error::InvalidArgument("mlp input_shape must be non-empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Spatial size entering the penultimate pooling.
    pub(crate) fn final_spatial(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let too_small = || Error::InvalidArgument(format!("input {:?} too small for this network", self.input_shape));
        if !self.small_image_stem {
            h = out_extent(h, 7, 2, 3).ok_or_else(too_small)?;
            w = out_extent(w, 7, 2, 3).ok_or_else(too_small)?;
            h = out_extent(h, 3, 2, 1).ok_or_else(too_small)?;
            w = out_extent(w, 3, 2, 1).ok_or_else(too_small)?;
        }
        for _ in 1..4 {
            h = out_extent(h, 3, 2, 1).ok_or_else(too_small)?;
            w = out_extent(w, 3, 2, 1).ok_or_else(too_small)?;
        }
        Ok((h, w))
    }

    /// Width of the classifier input.
    pub fn feature_dim(&self) -> Result<usize> {
        match self.family {
            Family::Mlp => Ok(if self.depth >= 2 { self.width } else { self.input_shape.iter().product() }),
            Family::Resnet => {
                let channels = self.width * 8;
                let cells = match self.penultimate {
                    Penultimate::Gap => 1,
                    Penultimate::Gap2x2 => 4,
                    Penultimate::AvgPool4x4S3 => {
                        let (h, w) = self.final_spatial()?;
                        let oh = out_extent(h, 4, 3, 0);
                        let ow = out_extent(w, 4, 3, 0);
                        match (oh, ow) {
                            (Some(a), Some(b)) => a * b,
                            _ => {
                                return Err(Error::InvalidArgument(format!(
                                    "4x4 pooling does not fit the {}x{} final feature map",
                                    h, w
                                )))
                            }
                        }
                    }
                };
                Ok(channels * cells)
            }
        }
    }

    /// Closed-form count of trainable scalars (weights, biases, batchnorm
    /// affine terms), computed from the description alone.
    pub fn analytic_param_count(&self) -> Result<usize> {
        self.validate()?;
        let classes = self.num_classes;
        match self.family {
            Family::Mlp => {
                let input: usize = self.input_shape.iter().product();
                let w = self.width;
                let hidden = (input * w + w) + (self.depth - 2) * (w * w + w);
                Ok(hidden + w * classes + classes)
            }
            Family::Resnet => {
                let blocks = self.blocks_per_stage().unwrap_or(0);
                let in_ch = self.input_shape[0];
                let w = self.width;
                let k = if self.small_image_stem { 3 } else { 7 };
                let mut total = in_ch * w * k * k + 2 * w;
                let mut cin = w;
                for stage in 0..4 {
                    let cout = w << stage;
                    for b in 0..blocks {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        total += 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
                        if stride != 1 || cin != cout {
                            total += cin * cout + 2 * cout;
                        }
                        cin = cout;
                    }
                }
                let f = self.feature_dim()?;
                Ok(total + f * classes + classes)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_accounting() {
        assert_eq!(ArchSpec::resnet(10, 64, 10).blocks_per_stage(), Some(1));
        assert_eq!(ArchSpec::resnet(18, 64, 10).blocks_per_stage(), Some(2));
        assert_eq!(ArchSpec::resnet(26, 64, 10).blocks_per_stage(), Some(3));
        for bad in [0, 2, 6, 12, 19] {
            let err = ArchSpec::resnet(bad, 64, 10).validate().unwrap_err();
            assert_eq!(err, Error::UnsupportedDepth { depth: bad });
            assert!(alloc::format!("{}", err).contains("10, 18, 26"));
        }
        assert!(ArchSpec::mlp(1, 10, 784, 10).validate().is_err());
    }

    #[test]
    fn presets_parse() {
        assert_eq!(ArchSpec::preset("mlp:4,800", 10, 784).unwrap(), ArchSpec::mlp(4, 800, 784, 10));
        assert_eq!(ArchSpec::preset("sta_net", 100, 0).unwrap(), ArchSpec::sta_net(100));
        assert!(ArchSpec::preset("vit", 10, 0).is_err());
        assert!(ArchSpec::preset("mlp:4", 10, 784).is_err());
    }

    #[test]
    fn sta_net_feature_width_is_four_times_resnet18() {
        let s = ArchSpec::sta_net(10).feature_dim().unwrap();
        let r = ArchSpec::resnet18(10).feature_dim().unwrap();
        assert_eq!(s, 4 * r);
    }

    #[test]
    fn avgpool4x4s3_on_small_images_collapses_to_one_cell() {
        let imagenet = ArchSpec::resnet(18, 64, 100).with_penultimate(Penultimate::AvgPool4x4S3);
        assert_eq!(imagenet.final_spatial().unwrap(), (7, 7));
        assert_eq!(imagenet.feature_dim().unwrap(), 512 * 4);
        let cifar = imagenet.small_stem();
        assert_eq!(cifar.final_spatial().unwrap(), (4, 4));
        assert_eq!(cifar.feature_dim().unwrap(), 512);
    }
}
