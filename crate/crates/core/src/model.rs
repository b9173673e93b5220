//! One branch of the dual-branch architecture: a strided convolutional
//! encoder shared by a depth decoder and a log-uncertainty decoder, both
//! U-Net style with skip connections and 4 output scales.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3, ConvCache, Tensor};
use crate::types::{DepthMap, DepthRange, ImageTensor, LogUncertaintyMap};

/// Number of output scales (1, 1/2, 1/4, 1/8).
pub const NUM_SCALES: usize = 4;
/// Encoder depth; inputs must be divisible by `2^ENCODER_STAGES`.
pub const ENCODER_STAGES: usize = 5;
pub const INPUT_MULTIPLE: usize = 1 << ENCODER_STAGES;

const INPUT_MEAN: f32 = 0.45;
const INPUT_STD: f32 = 0.225;
const UNCERTAINTY_HEAD_GAIN: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder channel widths, one per stage.
    pub widths: [usize; ENCODER_STAGES],
    pub range: DepthRange,
    /// Depth every pixel starts at, realised through the depth-head bias.
    /// `None` leaves the bias at zero (disparity 0.5).
    pub init_depth: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128, 256],
            range: DepthRange::default(),
            init_depth: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w < 2) {
            return Err(Error::Config(format!("model widths must be >= 2, got {:?}", self.widths)));
        }
        DepthRange::new(self.range.min, self.range.max)?;
        if let Some(d) = self.init_depth {
            if !(d > self.range.min && d < self.range.max) {
                return Err(Error::Config(format!(
                    "model.init_depth {d} must lie strictly inside [{}, {}]",
                    self.range.min, self.range.max
                )));
            }
        }
        Ok(())
    }

    fn decoder_widths(&self) -> [usize; ENCODER_STAGES] {
        self.widths.map(|w| (w / 2).max(2))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    up0: [Conv3x3; ENCODER_STAGES],
    up1: [Conv3x3; ENCODER_STAGES],
    head: [Conv3x3; NUM_SCALES],
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: [Conv3x3; ENCODER_STAGES],
    depth: Decoder,
    uncertainty: Decoder,
    num_params: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut conv = |cin, cout, stride| {
            let c = Conv3x3::new(cin, cout, stride, offset);
            offset = c.end();
            c
        };
        let w = config.widths;
        let encoder = std::array::from_fn(|i| conv(if i == 0 { 3 } else { w[i - 1] }, w[i], 2));
        let dw = config.decoder_widths();
        let mut decoder = || {
            let mut up0 = Vec::new();
            let mut up1 = Vec::new();
            let mut head = Vec::new();
            for i in (0..ENCODER_STAGES).rev() {
                let cin = if i == ENCODER_STAGES - 1 { w[i] } else { dw[i + 1] };
                up0.push(conv(cin, dw[i], 1));
                let skip = if i > 0 { w[i - 1] } else { 0 };
                up1.push(conv(dw[i] + skip, dw[i], 1));
                if i < NUM_SCALES {
                    head.push(conv(dw[i], 1, 1));
                }
            }
            up0.reverse();
            up1.reverse();
            head.reverse();
            Decoder {
                up0: up0.try_into().expect("stage count"),
                up1: up1.try_into().expect("stage count"),
                head: head.try_into().expect("scale count"),
            }
        };
        let depth = decoder();
        let uncertainty = decoder();
        Self {
            encoder,
            depth,
            uncertainty,
            num_params: offset,
        }
    }
}

/// Parameters and layout of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNetwork {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<f32>,
}

/// Multi-scale predictions of one branch for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// Scale `s` has shape `(H / 2^s, W / 2^s)`.
    pub depths: Vec<DepthMap>,
    pub log_sigmas: Vec<LogUncertaintyMap>,
}

/// Raw batched network outputs: squashed disparities and log-scales.
#[derive(Clone, Debug)]
pub struct RawOutput {
    pub disparity: Vec<Tensor>,
    /// Empty when the uncertainty decoder was skipped.
    pub log_sigma: Vec<Tensor>,
}

struct DecoderCache {
    pre: Vec<(ConvCache, Tensor)>,
    post: Vec<(ConvCache, Tensor)>,
    heads: Vec<(ConvCache, Tensor)>,
}

/// Activations kept by [`BranchNetwork::forward`] for the backward pass.
pub struct Activations {
    encoder: Vec<(ConvCache, Tensor)>,
    depth: DecoderCache,
    uncertainty: Option<DecoderCache>,
}

impl BranchNetwork {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; layout.num_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &layout.encoder {
            c.init(&mut params, 1.0, &mut rng);
        }
        for (dec, head_gain) in [(&layout.depth, 1.0), (&layout.uncertainty, UNCERTAINTY_HEAD_GAIN)] {
            for c in dec.up0.iter().chain(&dec.up1) {
                c.init(&mut params, 1.0, &mut rng);
            }
            for c in &dec.head {
                c.init(&mut params, head_gain, &mut rng);
            }
        }
        if let Some(d) = config.init_depth {
            let r = config.range;
            let disp = (1.0 / d - 1.0 / r.max) / (1.0 / r.min - 1.0 / r.max);
            let logit = (disp / (1.0 - disp)).ln() as f32;
            for c in &layout.depth.head {
                c.bias_mut(&mut params).fill(logit);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params
    }

    /// Replaces the parameter buffer, e.g. when restoring a checkpoint.
    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.layout.num_params {
            return Err(Error::ShapeMismatch {
                expected: vec![self.layout.num_params],
                actual: vec![params.len()],
            });
        }
        self.params = params;
        Ok(())
    }

    /// Batched forward pass. `x` holds raw `[0, 1]` RGB; its height and
    /// width must be multiples of [`INPUT_MULTIPLE`].
    pub fn forward(&self, x: &Tensor, with_uncertainty: bool) -> Result<(RawOutput, Activations)> {
        if x.c != 3 || x.h % INPUT_MULTIPLE != 0 || x.w % INPUT_MULTIPLE != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Validation(format!(
                "network input must be 3 x H x W with H, W multiples of {INPUT_MULTIPLE}, got {} x {} x {}",
                x.c, x.h, x.w
            )));
        }
        let p = &self.params;
        let mut h = x.clone();
        h.data.iter_mut().for_each(|v| *v = (*v - INPUT_MEAN) / INPUT_STD);
        let mut encoder = Vec::with_capacity(ENCODER_STAGES);
        for conv in &self.layout.encoder {
            let (mut y, cache) = conv.forward(p, &h);
            nn::elu(&mut y);
            h = y.clone();
            encoder.push((cache, y));
        }
        let features: Vec<&Tensor> = encoder.iter().map(|(_, t)| t).collect();
        let (disparity, depth) = self.decode(&self.layout.depth, &features, true);
        let (log_sigma, uncertainty) = if with_uncertainty {
            let (o, c) = self.decode(&self.layout.uncertainty, &features, false);
            (o, Some(c))
        } else {
            (Vec::new(), None)
        };
        let out = RawOutput { disparity, log_sigma };
        if !out.disparity.iter().chain(&out.log_sigma).all(Tensor::is_finite) {
            return Err(Error::NonFiniteOutput("branch network"));
        }
        Ok((out, Activations {
            encoder,
            depth,
            uncertainty,
        }))
    }

    fn decode(&self, dec: &Decoder, features: &[&Tensor], squash: bool) -> (Vec<Tensor>, DecoderCache) {
        let p = &self.params;
        let mut pre = Vec::with_capacity(ENCODER_STAGES);
        let mut post = Vec::with_capacity(ENCODER_STAGES);
        let mut heads = Vec::with_capacity(NUM_SCALES);
        let mut x = features[ENCODER_STAGES - 1].clone();
        for i in (0..ENCODER_STAGES).rev() {
            let (mut a, c0) = dec.up0[i].forward(p, &x);
            nn::elu(&mut a);
            let mut u = nn::upsample2(&a);
            pre.push((c0, a));
            if i > 0 {
                u = nn::concat(&u, features[i - 1]);
            }
            let (mut b, c1) = dec.up1[i].forward(p, &u);
            nn::elu(&mut b);
            if i < NUM_SCALES {
                let (mut o, ch) = dec.head[i].forward(p, &b);
                if squash {
                    nn::sigmoid(&mut o);
                }
                heads.push((ch, o));
            }
            x = b.clone();
            post.push((c1, b));
        }
        // Stored coarse to fine; flip so index = level / scale.
        pre.reverse();
        post.reverse();
        heads.reverse();
        let outputs = heads.iter().map(|(_, o)| o.clone()).collect();
        (outputs, DecoderCache { pre, post, heads })
    }

    /// Backpropagates output gradients, accumulating into `grads` (same
    /// layout as [`Self::params`]). `d_log_sigma` must be given exactly when
    /// the forward pass ran the uncertainty decoder.
    pub fn backward(
        &self,
        acts: &Activations,
        d_disparity: &[Tensor],
        d_log_sigma: Option<&[Tensor]>,
        grads: &mut [f32],
    ) {
        assert_eq!(grads.len(), self.layout.num_params);
        let mut d_enc: Vec<Option<Tensor>> = vec![None; ENCODER_STAGES];
        self.decode_backward(&self.layout.depth, &acts.depth, d_disparity, true, grads, &mut d_enc);
        match (&acts.uncertainty, d_log_sigma) {
            (Some(cache), Some(d)) => {
                self.decode_backward(&self.layout.uncertainty, cache, d, false, grads, &mut d_enc)
            }
            (None, None) => {}
            _ => panic!("uncertainty gradient supplied inconsistently with the forward pass"),
        }
        for i in (0..ENCODER_STAGES).rev() {
            let Some(mut d) = d_enc[i].take() else { continue };
            let (cache, y) = &acts.encoder[i];
            nn::elu_backward(y, &mut d);
            if let Some(dx) = self.layout.encoder[i].backward(&self.params, cache, &d, grads, i > 0) {
                accumulate(&mut d_enc[i - 1], dx);
            }
        }
    }

    fn decode_backward(
        &self,
        dec: &Decoder,
        cache: &DecoderCache,
        d_out: &[Tensor],
        squash: bool,
        grads: &mut [f32],
        d_enc: &mut [Option<Tensor>],
    ) {
        assert_eq!(d_out.len(), NUM_SCALES);
        let p = &self.params;
        let mut carry: Option<Tensor> = None;
        for i in 0..ENCODER_STAGES {
            let (c1, b) = &cache.post[i];
            let mut db = carry.take().unwrap_or_else(|| Tensor::zeros(b.n, b.c, b.h, b.w));
            if i < NUM_SCALES {
                let (ch, o) = &cache.heads[i];
                let mut dh = d_out[i].clone();
                if squash {
                    nn::sigmoid_backward(o, &mut dh);
                }
                let from_head = dec.head[i].backward(p, ch, &dh, grads, true).expect("input grad");
                db.add_assign(&from_head);
            }
            nn::elu_backward(b, &mut db);
            let mut du = dec.up1[i].backward(p, c1, &db, grads, true).expect("input grad");
            if i > 0 {
                let (main, skip) = nn::split_channels(&du, dec.up0[i].cout);
                accumulate(&mut d_enc[i - 1], skip);
                du = main;
            }
            let (c0, a) = &cache.pre[i];
            let mut da = nn::upsample2_backward(&du);
            nn::elu_backward(a, &mut da);
            let dx = dec.up0[i].backward(p, c0, &da, grads, true).expect("input grad");
            if i == ENCODER_STAGES - 1 {
                accumulate(&mut d_enc[i], dx);
            } else {
                carry = Some(dx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Stacks images into a batch tensor.
pub fn images_to_tensor(images: &[&ImageTensor]) -> Tensor {
    let (h, w) = images[0].shape();
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), (h, w), "batch images must share a shape");
        for (d, s) in t.sample_mut(b).iter_mut().zip(img.data().iter()) {
            *d = *s as f32;
        }
    }
    t
}

/// Extracts one single-channel plane of a batch tensor as an `f64` grid.
pub fn tensor_plane(t: &Tensor, b: usize) -> Array2<f64> {
    assert_eq!(t.c, 1);
    Array2::from_shape_fn((t.h, t.w), |(y, x)| t.at(b, 0, y, x) as f64)
}

impl RawOutput {
    /// Converts sample `b` to metric depth and log-scale maps.
    pub fn branch_output(&self, b: usize, range: &DepthRange) -> Result<BranchOutput> {
        let depths = self
            .disparity
            .iter()
            .map(|t| DepthMap::within(tensor_plane(t, b).mapv(|r| range.clamp(range.depth_from_disparity(r))), range))
            .collect::<Result<_>>()?;
        let log_sigmas = if self.log_sigma.is_empty() {
            self.disparity.iter().map(|t| LogUncertaintyMap::zeros(t.h, t.w)).collect()
        } else {
            self.log_sigma
                .iter()
                .map(|t| LogUncertaintyMap::new(tensor_plane(t, b)))
                .collect::<Result<_>>()?
        };
        Ok(BranchOutput { depths, log_sigmas })
    }
}

/// Evaluation-mode prediction for a single image of any size `>= 2 x 2`.
///
/// Inputs whose sides are not multiples of [`INPUT_MULTIPLE`] are
/// reflection-padded before the network and the outputs cropped back, so
/// scale `s` has shape `(ceil(H / 2^s), ceil(W / 2^s))`.
pub fn forward_branch(net: &BranchNetwork, image: &ImageTensor) -> Result<BranchOutput> {
    let (h, w) = image.shape();
    let ph = h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    let pw = w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    let padded;
    let input = if (ph, pw) == (h, w) {
        image
    } else {
        let src = image.data();
        padded = ImageTensor::new(Array3::from_shape_fn((3, ph, pw), |(c, y, x)| {
            src[[c, reflect(y, h), reflect(x, w)]]
        }))?;
        &padded
    };
    let (raw, _) = net.forward(&images_to_tensor(&[input]), true)?;
    let full = raw.branch_output(0, &net.config.range)?;
    if (ph, pw) == (h, w) {
        return Ok(full);
    }
    let crop = |s: usize| (h.div_ceil(1 << s), w.div_ceil(1 << s));
    let depths = full
        .depths
        .iter()
        .enumerate()
        .map(|(s, d)| {
            let (hs, ws) = crop(s);
            DepthMap::new(d.data().slice(ndarray::s![..hs, ..ws]).to_owned())
        })
        .collect::<Result<_>>()?;
    let log_sigmas = full
        .log_sigmas
        .iter()
        .enumerate()
        .map(|(s, l)| {
            let (hs, ws) = crop(s);
            LogUncertaintyMap::new(l.data().slice(ndarray::s![..hs, ..ws]).to_owned())
        })
        .collect::<Result<_>>()?;
    Ok(BranchOutput { depths, log_sigmas })
}

/// Reflection index without edge repetition (`-1 -> 1`, `n -> n-2`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Bilinear resize of a grid to `(h, w)` with half-pixel alignment and edge
/// clamping.
pub fn resize_bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let taps_y = taps(src.nrows(), h);
    let taps_x = taps(src.ncols(), w);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = taps_y[y];
        let (x0, x1, fx) = taps_x[x];
        (1.0 - fy) * ((1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]])
            + fy * ((1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]])
    })
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the resized grid back
/// to the source grid of shape `(h, w)`.
pub fn resize_bilinear_adjoint(grad: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let taps_y = taps(h, grad.nrows());
    let taps_x = taps(w, grad.ncols());
    let mut out = Array2::zeros((h, w));
    for ((y, x), &g) in grad.indexed_iter() {
        let (y0, y1, fy) = taps_y[y];
        let (x0, x1, fx) = taps_x[x];
        out[[y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
        out[[y0, x1]] += g * (1.0 - fy) * fx;
        out[[y1, x0]] += g * fy * (1.0 - fx);
        out[[y1, x1]] += g * fy * fx;
    }
    out
}

fn taps(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
