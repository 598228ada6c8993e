//! Audio and visual frontends and their fusion into frame-synchronous
//! audio-visual features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 1-D waveform-like signal of `k_a · T` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSeq<F> {
    pub samples: Tensor<F>,
}

impl<F: Scalar> AudioSeq<F> {
    pub fn from_samples(samples: &[f32]) -> Self {
        let data = samples.iter().map(|&x| F::of(f64::from(x))).collect();
        Self {
            samples: Tensor::new(vec![samples.len()], data).expect("1-D"),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Frame stack of shape `L×H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSeq<F> {
    pub frames: Tensor<F>,
}

impl<F: Scalar> VideoSeq<F> {
    pub fn from_frames(frames: usize, geom: FrameGeom, data: &[f32]) -> Result<Self> {
        let v = data.iter().map(|&x| F::of(f64::from(x))).collect();
        Ok(Self {
            frames: Tensor::new(vec![frames, geom.height, geom.width, geom.channels], v)?,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameGeom {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Model width `D`.
    pub d: usize,
    /// Audio samples per feature frame (`k_a`).
    pub audio_downsample: usize,
    pub audio_channels: usize,
    pub frame: FrameGeom,
    pub visual_channels: [usize; 2],
}

const VISUAL_KERNEL: usize = 3;

/// Strided two-layer 1-D conv stack: a `k_a`-wide, `k_a`-strided patch
/// convolution followed by a length-preserving width-3 convolution.
#[derive(Clone, Debug)]
pub struct AudioFront {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
    downsample: usize,
}

impl AudioFront {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &FrontendConfig, rng: &mut R) -> Self {
        let (k, c1, d) = (cfg.audio_downsample, cfg.audio_channels, cfg.d);
        Self {
            conv1: store.add_randn("frontend.audio.conv1.kernel", &[c1, 1, k], (k as f64).powf(-0.5), rng),
            bias1: store.add("frontend.audio.conv1.bias", Tensor::zeros(&[c1])),
            conv2: store.add_randn(
                "frontend.audio.conv2.kernel",
                &[d, c1, 3],
                (3.0 * c1 as f64).powf(-0.5),
                rng,
            ),
            bias2: store.add("frontend.audio.conv2.bias", Tensor::zeros(&[d])),
            downsample: k,
        }
    }

    /// `S` samples (a `[S]` or `[1×S]` node) to `T×D` features, `T = S / k_a`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x_a: NodeId) -> Result<NodeId> {
        let s = g.value(x_a).len();
        if s == 0 || !s.is_multiple_of(self.downsample) {
            return Err(Error::Alignment(format!(
                "audio length {s} is not a positive multiple of the downsample factor {}",
                self.downsample
            )));
        }
        let x = g.reshape(x_a, &[1, s])?;
        let k1 = g.param(self.conv1);
        let h = g.conv1d(x, k1, self.downsample, 0)?;
        let b1 = g.param(self.bias1);
        let h = g.add_col(h, b1)?;
        let h = g.relu(h);
        let k2 = g.param(self.conv2);
        let h = g.conv1d(h, k2, 1, 1)?;
        let b2 = g.param(self.bias2);
        let h = g.add_col(h, b2)?;
        g.transpose(h)
    }
}

/// Per-frame two-layer 2-D conv (second layer stride 2), flattened and
/// projected to `D`.
#[derive(Clone, Debug)]
pub struct VisualFront {
    w1: Linear,
    w2: Linear,
    proj: Linear,
    frame: FrameGeom,
    channels: [usize; 2],
}

impl VisualFront {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &FrontendConfig, rng: &mut R) -> Self {
        let k2 = VISUAL_KERNEL * VISUAL_KERNEL;
        let [c1, c2] = cfg.visual_channels;
        let (h2, w2) = Self::second_extent(cfg.frame);
        Self {
            w1: Linear::new(store, "frontend.visual.conv1", k2 * cfg.frame.channels, c1, rng),
            w2: Linear::new(store, "frontend.visual.conv2", k2 * c1, c2, rng),
            proj: Linear::new(store, "frontend.visual.proj", h2 * w2 * c2, cfg.d, rng),
            frame: cfg.frame,
            channels: cfg.visual_channels,
        }
    }

    fn second_extent(f: FrameGeom) -> (usize, usize) {
        ((f.height + 2 - VISUAL_KERNEL) / 2 + 1, (f.width + 2 - VISUAL_KERNEL) / 2 + 1)
    }

    /// `L×H×W×C` frames to `L×D` features, one row per frame.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x_v: NodeId) -> Result<NodeId> {
        let shape = g.shape(x_v).to_vec();
        let [l, h, w, c] = shape[..] else {
            return Err(Error::dim("visual_front", format!("expected L×H×W×C, got {shape:?}")));
        };
        if h < VISUAL_KERNEL || w < VISUAL_KERNEL {
            return Err(Error::dim(
                "visual_front",
                format!("frame {h}×{w} smaller than the {VISUAL_KERNEL}×{VISUAL_KERNEL} kernel"),
            ));
        }
        if (h, w, c) != (self.frame.height, self.frame.width, self.frame.channels) {
            return Err(Error::dim(
                "visual_front",
                format!("frames are {h}×{w}×{c}, model expects {:?}", self.frame),
            ));
        }
        let [c1, c2] = self.channels;
        let p = g.im2col(x_v, VISUAL_KERNEL, 1, 1)?;
        let y = self.w1.forward(g, p)?;
        let y = g.relu(y);
        let y = g.reshape(y, &[l, h, w, c1])?;
        let p = g.im2col(y, VISUAL_KERNEL, 2, 1)?;
        let y = self.w2.forward(g, p)?;
        let y = g.relu(y);
        let (h2, w2) = Self::second_extent(self.frame);
        let y = g.reshape(y, &[l, h2 * w2 * c2])?;
        self.proj.forward(g, y)
    }
}

/// Feature-axis concatenation, layer norm and `2D → D` projection.
#[derive(Clone, Debug)]
pub struct Fusion {
    norm: LayerNorm,
    proj: Linear,
}

impl Fusion {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, "frontend.fuse.norm", 2 * d),
            proj: Linear::new(store, "frontend.fuse.proj", 2 * d, d, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, f_a: NodeId, f_v: NodeId) -> Result<NodeId> {
        let (ta, da) = (g.shape(f_a)[0], g.shape(f_a)[1]);
        let (tv, dv) = (g.shape(f_v)[0], g.shape(f_v)[1]);
        if ta != tv {
            return Err(Error::ModalityAlignment { audio: ta, video: tv });
        }
        if da != dv {
            return Err(Error::dim("fuse", format!("feature widths {da} and {dv} differ")));
        }
        let cat = g.concat(&[f_a, f_v], 1)?;
        let n = self.norm.forward(g, cat)?;
        self.proj.forward(g, n)
    }
}
