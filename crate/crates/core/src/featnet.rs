//! Convolutional backbone and the stride-4/stride-8 feature fusion.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{resize_taps, ConvSpec, Graph, ParamId, Var};
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Channel count of the fused recognition features.
pub const REC_CHANNELS: usize = 128;
/// Stride of the recognition features.
pub const REC_STRIDE: usize = 4;
/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 32;

/// Backbone layout: one convolution block per entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128],
            strides: vec![2, 2, 2, 1],
            dilations: vec![1, 1, 1, 2],
            kernels: vec![3, 3, 3, 3],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.strides.len() != n || self.dilations.len() != n || self.kernels.len() != n
        {
            return Err(Error::Config(
                "backbone channels, strides, dilations and kernels must have equal nonzero length"
                    .into(),
            ));
        }
        if self.kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config("backbone kernels must be odd".into()));
        }
        if self
            .strides
            .iter()
            .chain(&self.dilations)
            .chain(&self.channels)
            .any(|&v| v == 0)
        {
            return Err(Error::Config(
                "backbone strides, dilations and channels must be positive".into(),
            ));
        }
        self.taps()?;
        Ok(())
    }

    /// Cumulative stride after each block.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    /// Block indices of the stride-4 tap (last block at stride 4) and the stride-8 tap (final block).
    pub fn taps(&self) -> Result<(usize, usize)> {
        let cum = self.cumulative_strides();
        let last = cum.len() - 1;
        if cum[last] != 8 {
            return Err(Error::Config(format!(
                "backbone output stride must be 8, got {}",
                cum[last]
            )));
        }
        let s4 = cum
            .iter()
            .rposition(|&s| s == 4)
            .ok_or_else(|| Error::Config("backbone has no stride-4 block".into()))?;
        Ok((s4, last))
    }

    pub fn det_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

/// Receptive field after each layer of `(kernel, stride, dilation)` triples.
pub fn layer_receptive_fields(layers: &[(usize, usize, usize)]) -> Vec<usize> {
    let (mut rf, mut jump) = (1, 1);
    layers
        .iter()
        .map(|&(k, s, d)| {
            rf += d * (k - 1) * jump;
            jump *= s;
            rf
        })
        .collect()
}

/// Receptive fields, in pixels, of the stride-4 and stride-8 taps.
pub fn receptive_field(cfg: &BackboneConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let layers: Vec<_> = (0..cfg.channels.len())
        .map(|i| (cfg.kernels[i], cfg.strides[i], cfg.dilations[i]))
        .collect();
    let rfs = layer_receptive_fields(&layers);
    let (s4, s8) = cfg.taps()?;
    Ok((rfs[s4], rfs[s8]))
}

/// Feature maps of one image, as graph nodes of shape `[1, C, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    /// Stride-8 features used by the detector.
    pub det: Var,
    pub det_hw: (usize, usize),
    /// Fused stride-4 features with [`REC_CHANNELS`] channels used by the recognizer.
    pub rec: Var,
    pub rec_hw: (usize, usize),
    /// Projected stride-4 branch of the fusion (before the addition).
    pub p4: Var,
    /// Projected and upsampled stride-8 branch of the fusion.
    pub p8_up: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<(ParamId, ParamId)>,
    p4: (ParamId, ParamId),
    p8: ParamId,
}

/// Adds the projected stride-4 map and the bilinearly upsampled projected stride-8 map.
/// Returns the fused map and the upsampled stride-8 term.
pub fn fuse<T: Real>(g: &mut Graph<T>, p4: Var, p8: Var) -> (Var, Var) {
    let s4 = g.shape(p4).to_vec();
    let s8 = g.shape(p8).to_vec();
    assert_eq!(
        s4[..2],
        s8[..2],
        "fusion inputs differ in batch or channels"
    );
    let taps = Rc::new(resize_taps::<T>(s8[2], s8[3], s4[2], s4[3]));
    let up = g.resample(p8, taps, &s4);
    (g.add(p4, up), up)
}

/// Converts an `[H, W, 3]` image into a centred `[1, 3, H, W]` tensor.
pub fn image_tensor<T: Real>(img: &Image) -> Tensor<T> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::from_f64(px[c] as f64 - 0.5);
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, &co) in cfg.channels.iter().enumerate() {
            let k = cfg.kernels[i];
            let w = store.add_he(
                rng,
                &format!("backbone.b{i}.w"),
                &[co, cin, k, k],
                cin * k * k,
            );
            let b = store.add_const(&format!("backbone.b{i}.b"), &[co], 0.0);
            blocks.push((w, b));
            cin = co;
        }
        let (s4, s8) = cfg.taps()?;
        let (c4, c8) = (cfg.channels[s4], cfg.channels[s8]);
        let p4w = store.add_glorot(
            rng,
            "fuse.p4.w",
            &[REC_CHANNELS, c4, 1, 1],
            c4,
            REC_CHANNELS,
        );
        let p4b = store.add_const("fuse.p4.b", &[REC_CHANNELS], 0.0);
        let p8 = store.add_glorot(
            rng,
            "fuse.p8.w",
            &[REC_CHANNELS, c8, 1, 1],
            c8,
            REC_CHANNELS,
        );
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            p4: (p4w, p4b),
            p8,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the backbone and fusion on an image whose sides are at least 32 and divisible by 4.
    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: &Image,
    ) -> Result<FeatureBundle> {
        let (h, w) = (img.height(), img.width());
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE} pixels"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} sides must be divisible by 4"
            )));
        }
        let x = g.constant(image_tensor(img));
        self.extract_from(g, store, x)
    }

    /// As [`Backbone::extract`], from a `[1, 3, H, W]` node.
    pub fn extract_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<FeatureBundle> {
        let (s4, s8) = self.cfg.taps()?;
        let mut cur = x;
        let mut tap4 = None;
        for (i, &(wid, bid)) in self.blocks.iter().enumerate() {
            let (wv, bv) = (store.var(g, wid), store.var(g, bid));
            let spec = ConvSpec {
                stride: self.cfg.strides[i],
                pad: self.cfg.dilations[i] * (self.cfg.kernels[i] / 2),
                dilation: self.cfg.dilations[i],
            };
            let y = g.conv2d(cur, wv, Some(bv), spec);
            cur = g.relu(y);
            if i == s4 {
                tap4 = Some(cur);
            }
        }
        debug_assert_eq!(s8, self.blocks.len() - 1);
        let tap4 = tap4.expect("stride-4 tap");
        let shape4 = g.shape(tap4).to_vec();
        let shape8 = g.shape(cur).to_vec();
        let (h4, w4) = (shape4[2], shape4[3]);
        let (h8, w8) = (shape8[2], shape8[3]);
        debug_assert_eq!(shape4[1], self.cfg.channels[s4]);
        let (pw, pb) = (store.var(g, self.p4.0), store.var(g, self.p4.1));
        let p4 = g.conv2d(tap4, pw, Some(pb), ConvSpec::pointwise());
        let qw = store.var(g, self.p8);
        let p8 = g.conv2d(cur, qw, None, ConvSpec::pointwise());
        let (rec, p8_up) = fuse(g, p4, p8);
        Ok(FeatureBundle {
            det: cur,
            det_hw: (h8, w8),
            rec,
            rec_hw: (h4, w4),
            p4,
            p8_up,
        })
    }
}
