//! Feature augmentation through two dropout channels.
//!
//! A single hidden vector per image is pushed through two dropout
//! channels with independent masks, producing the two views that form the
//! contrastive positive pair. Output rows `0..N` are channel-1 views and
//! rows `N..2N` channel-2 views, in the same image order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// How the two views of an image are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Dropout channels between the trunk and the embedding layer.
    #[default]
    Feature,
    /// Noise and coordinate masking on the raw inputs; both views pass
    /// through the whole encoder. Baseline analog of image augmentation.
    Input,
    /// Single view, no augmentation (plain classification training).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mode: ViewMode,
    pub p1: f64,
    pub p2: f64,
    /// Inverted-dropout rescaling of kept coordinates by `1 / (1 - p)`.
    pub rescale: bool,
    pub per_sample_masks: bool,
    /// Mask RNG seed; falls back to the run seed when absent.
    pub seed: Option<u64>,
    /// Std-dev of additive Gaussian noise in [`ViewMode::Input`].
    pub input_noise: f64,
    /// Coordinate drop probability in [`ViewMode::Input`].
    pub input_mask: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mode: ViewMode::Feature,
            p1: 0.2,
            p2: 0.5,
            rescale: true,
            per_sample_masks: false,
            seed: None,
            input_noise: 0.3,
            input_mask: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Symmetric fallback for larger encoders.
    pub fn symmetric() -> Self {
        AugmentConfig {
            p1: 0.2,
            p2: 0.2,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutChannel {
    pub p: f64,
    /// `true` where the coordinate is kept.
    pub mask: Vec<bool>,
    pub rescale: bool,
}

impl DropoutChannel {
    pub fn all_keep(p: f64, dim: usize, rescale: bool) -> Self {
        DropoutChannel {
            p,
            mask: vec![true; dim],
            rescale,
        }
    }

    /// Multiplier applied to kept coordinates.
    pub fn scale(&self) -> f64 {
        if self.rescale {
            1.0 / (1.0 - self.p)
        } else {
            1.0
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }

    fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        let scale = self.scale();
        for ((d, s), &keep) in dst.iter_mut().zip(src).zip(&self.mask) {
            *d = if keep { s * scale } else { 0.0 };
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

fn sample_channel<R: Rng + ?Sized>(p: f64, dim: usize, rescale: bool, rng: &mut R) -> DropoutChannel {
    let mask = (0..dim).map(|_| rng.random::<f64>() >= p).collect();
    DropoutChannel { p, mask, rescale }
}

/// Draw the two channel masks for one mini-batch.
pub fn sample_masks<R: Rng + ?Sized>(
    p1: f64,
    p2: f64,
    dim: usize,
    rescale: bool,
    rng: &mut R,
) -> Result<(DropoutChannel, DropoutChannel)> {
    check_probability(p1)?;
    check_probability(p2)?;
    let a = sample_channel(p1, dim, rescale, rng);
    let b = sample_channel(p2, dim, rescale, rng);
    Ok((a, b))
}

/// Apply one pair of channels to every row of `hidden` (N x dim),
/// returning the 2N x dim view matrix.
pub fn apply_channels(hidden: &Mat, channels: &(DropoutChannel, DropoutChannel)) -> Result<Mat> {
    let masks = AugmentMasks {
        first: vec![channels.0.clone()],
        second: vec![channels.1.clone()],
    };
    masks.apply(hidden)
}

/// Masks for one mini-batch: a single shared pair, or one pair per image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentMasks {
    pub first: Vec<DropoutChannel>,
    pub second: Vec<DropoutChannel>,
}

impl AugmentMasks {
    pub fn sample<R: Rng + ?Sized>(
        cfg: &AugmentConfig,
        images: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if cfg.per_sample_masks { images } else { 1 };
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for _ in 0..count {
            let (a, b) = sample_masks(cfg.p1, cfg.p2, dim, cfg.rescale, rng)?;
            first.push(a);
            second.push(b);
        }
        Ok(AugmentMasks { first, second })
    }

    /// Channel used for `image` in view 0 (first) or 1 (second).
    pub fn channel(&self, view: usize, image: usize) -> &DropoutChannel {
        let set = if view == 0 { &self.first } else { &self.second };
        if set.len() == 1 {
            &set[0]
        } else {
            &set[image]
        }
    }

    fn check(&self, hidden: &Mat) -> Result<()> {
        for ch in self.first.iter().chain(&self.second) {
            if ch.dim() != hidden.cols() {
                return Err(Error::DimensionMismatch {
                    expected: ch.dim(),
                    actual: hidden.cols(),
                });
            }
        }
        for set in [&self.first, &self.second] {
            if set.len() != 1 && set.len() != hidden.rows() {
                return Err(Error::DimensionMismatch {
                    expected: hidden.rows(),
                    actual: set.len(),
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, hidden: &Mat) -> Result<Mat> {
        self.check(hidden)?;
        let n = hidden.rows();
        let mut out = Mat::zeros(2 * n, hidden.cols());
        for view in 0..2 {
            for i in 0..n {
                self.channel(view, i)
                    .apply_row(hidden.row(i), out.row_mut(view * n + i));
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the hidden matrix given the gradient w.r.t. the views.
    /// Masked coordinates receive exactly zero.
    pub fn backward(&self, grad_views: &Mat) -> Mat {
        let n = grad_views.rows() / 2;
        let mut out = Mat::zeros(n, grad_views.cols());
        for i in 0..n {
            let row = out.row_mut(i);
            for view in 0..2 {
                let ch = self.channel(view, i);
                let scale = ch.scale();
                for ((o, g), &keep) in row.iter_mut().zip(grad_views.row(view * n + i)).zip(&ch.mask) {
                    if keep {
                        *o += g * scale;
                    }
                }
            }
        }
        out
    }
}
