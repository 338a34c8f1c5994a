//! Convolutional feature extractor with three tap points and 1×1
//! localization score heads.
//!
//! The trunk is a stack of rectified convolutions ending at the first tap
//! (the map whose pooled vector feeds the comparer and the ranker). Two
//! further rectified convolutions produce the second and third taps. Each
//! tap gets a 1×1 head emitting one score per anchor slot and cell.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{flat_index, FeatureGrid};
use crate::nn::{join, relu_backward, relu_inplace, Conv2d, ConvCache, Param, Parameters};
use crate::tensor::Tensor3;

/// One rectified convolution stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn output_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

impl std::fmt::Display for ConvStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.out_channels, self.kernel, self.stride, self.padding
        )
    }
}

impl std::str::FromStr for ConvStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let nums: std::result::Result<Vec<usize>, _> =
            parts.iter().map(|p| p.trim().parse::<usize>()).collect();
        match nums.as_deref() {
            Ok([o, k, st, p]) => Ok(ConvStage::new(*o, *k, *st, *p)),
            _ => Err(Error::Config(format!(
                "conv stage `{s}` must be out:kernel:stride:padding"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Stages up to and including the first tap.
    pub trunk: Vec<ConvStage>,
    /// Exactly two stages, producing the second and third taps.
    pub extra: Vec<ConvStage>,
    /// Anchor slots per cell (`R`), the width of each score head.
    pub anchors_per_cell: usize,
}

impl Default for BackboneConfig {
    /// 224 input; a stride-4 patch stage and three stride-2 stages reach 7×7,
    /// a 1×1 expansion gives 512 channels, then two stride-2 3×3 stages give
    /// 4×4×128 and 2×2×128.
    fn default() -> Self {
        Self {
            input_size: 224,
            trunk: vec![
                ConvStage::new(8, 4, 4, 0),
                ConvStage::new(16, 3, 2, 1),
                ConvStage::new(32, 3, 2, 1),
                ConvStage::new(64, 3, 2, 1),
                ConvStage::new(512, 1, 1, 0),
            ],
            extra: vec![ConvStage::new(128, 3, 2, 1), ConvStage::new(128, 3, 2, 1)],
            anchors_per_cell: 9,
        }
    }
}

impl BackboneConfig {
    /// A 32-pixel configuration for tests: taps at 4×4, 2×2 and 1×1.
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            trunk: vec![ConvStage::new(8, 4, 4, 0), ConvStage::new(8, 3, 2, 1)],
            extra: vec![ConvStage::new(8, 3, 2, 1), ConvStage::new(8, 3, 2, 1)],
            anchors_per_cell: 9,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map_or(0, |s| s.out_channels)
    }

    /// `(height, width, channels)` of the three taps.
    pub fn tap_shapes(&self) -> Result<[(usize, usize, usize); 3]> {
        if self.trunk.is_empty() {
            return Err(Error::Config("backbone trunk is empty".into()));
        }
        if self.extra.len() != 2 {
            return Err(Error::Config(format!(
                "backbone needs exactly two extra stages, got {}",
                self.extra.len()
            )));
        }
        let mut n = self.input_size;
        for s in &self.trunk {
            n = s
                .output_size(n)
                .ok_or_else(|| Error::Config(format!("stage {s} does not fit a {n}-pixel map")))?;
        }
        let t1 = (n, n, self.feature_dim());
        let n2 = self.extra[0]
            .output_size(n)
            .ok_or_else(|| Error::Config("extra stage 1 does not fit".into()))?;
        let n3 = self.extra[1]
            .output_size(n2)
            .ok_or_else(|| Error::Config("extra stage 2 does not fit".into()))?;
        Ok([
            t1,
            (n2, n2, self.extra[0].out_channels),
            (n3, n3, self.extra[1].out_channels),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let taps = self.tap_shapes()?;
        if !(taps[0].0 > taps[1].0 && taps[1].0 > taps[2].0 && taps[2].0 >= 1) {
            return Err(Error::Config(format!(
                "tap sizes must strictly decrease, got {}, {}, {}",
                taps[0].0, taps[1].0, taps[2].0
            )));
        }
        if self.anchors_per_cell == 0 {
            return Err(Error::Config("anchors_per_cell must be positive".into()));
        }
        Ok(())
    }

    /// The feature grids of the three taps.
    pub fn grids(&self) -> Result<Vec<FeatureGrid>> {
        let taps = self.tap_shapes()?;
        Ok(taps
            .iter()
            .enumerate()
            .map(|(i, t)| FeatureGrid::new(i + 1, t.0, t.1, self.input_size))
            .collect())
    }
}

/// The three tap maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub taps: [Tensor3; 3],
}

/// Localization scores `A(h, w, r)` for one tap, stored as `R × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    pub layer_id: usize,
    pub values: Tensor3,
}

impl ScoreTensor {
    pub fn new(layer_id: usize, values: Tensor3) -> Self {
        Self { layer_id, values }
    }

    pub fn height(&self) -> usize {
        self.values.height
    }

    pub fn width(&self) -> usize {
        self.values.width
    }

    pub fn anchors(&self) -> usize {
        self.values.channels
    }

    pub fn len(&self) -> usize {
        self.values.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.data.is_empty()
    }

    /// `(H, W, R)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.anchors())
    }

    /// 1-based accessor.
    pub fn get(&self, h: usize, w: usize, r: usize) -> f64 {
        self.values.get(r - 1, h - 1, w - 1)
    }

    /// Storage offset of flat index `c` (1-based).
    pub fn offset_of_flat(&self, c: usize) -> usize {
        let (hh, ww, _) = self.dims();
        let c0 = c - 1;
        let r0 = c0 / (hh * ww);
        let rem = c0 % (hh * ww);
        let w0 = rem / hh;
        let h0 = rem % hh;
        self.values.idx(r0, h0, w0)
    }

    pub fn get_flat(&self, c: usize) -> f64 {
        self.values.data[self.offset_of_flat(c)]
    }

    /// Scores in flat-index order (`result[c - 1] = A` at flat index `c`).
    pub fn flat_values(&self) -> Vec<f64> {
        let (hh, ww, rr) = self.dims();
        let mut out = vec![0.0; hh * ww * rr];
        for r in 1..=rr {
            for w in 1..=ww {
                for h in 1..=hh {
                    out[flat_index(h, w, r, hh, ww) - 1] = self.get(h, w, r);
                }
            }
        }
        out
    }
}

/// Channel-wise spatial mean.
pub fn gap(map: &Tensor3) -> Vec<f64> {
    let n = (map.height * map.width) as f64;
    (0..map.channels)
        .map(|c| map.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Spread `dL/df` back over the pooled map.
pub fn gap_backward(grad: &[f64], shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = shape;
    let n = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for (ch, g) in grad.iter().enumerate() {
        let v = g / n as f64;
        out.data[ch * n..(ch + 1) * n].iter_mut().for_each(|x| *x = v);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub trunk: Vec<Conv2d>,
    pub extra: Vec<Conv2d>,
    pub heads: Vec<Conv2d>,
}

/// Saved activations of a stack of rectified convolutions.
#[derive(Clone, Debug)]
pub struct StackTrace {
    caches: Vec<ConvCache>,
    outputs: Vec<Tensor3>,
}

impl StackTrace {
    pub fn output(&self) -> &Tensor3 {
        self.outputs.last().expect("non-empty stack")
    }
}

/// Everything needed to backpropagate a full localization pass.
#[derive(Clone, Debug)]
pub struct FullTrace {
    pub trunk: StackTrace,
    extra: StackTrace,
    head_caches: Vec<ConvCache>,
    pub scores: [ScoreTensor; 3],
}

impl FullTrace {
    pub fn taps(&self) -> [&Tensor3; 3] {
        [
            self.trunk.output(),
            &self.extra.outputs[0],
            &self.extra.outputs[1],
        ]
    }
}

fn build_stack<R: Rng>(
    in_channels: usize,
    stages: &[ConvStage],
    rng: Option<&mut R>,
) -> Vec<Conv2d> {
    let mut convs = Vec::with_capacity(stages.len());
    let mut c_in = in_channels;
    let mut rng = rng;
    for s in stages {
        let conv = match rng.as_deref_mut() {
            Some(r) => Conv2d::init(c_in, s.out_channels, s.kernel, s.stride, s.padding, 2f64.sqrt(), r),
            None => Conv2d::zeros(c_in, s.out_channels, s.kernel, s.stride, s.padding),
        };
        convs.push(conv);
        c_in = s.out_channels;
    }
    convs
}

fn stack_forward(convs: &[Conv2d], input: &Tensor3) -> StackTrace {
    let mut caches = Vec::with_capacity(convs.len());
    let mut outputs: Vec<Tensor3> = Vec::with_capacity(convs.len());
    for conv in convs {
        let x = outputs.last().unwrap_or(input);
        let (mut y, cache) = conv.forward(x);
        relu_inplace(&mut y);
        caches.push(cache);
        outputs.push(y);
    }
    StackTrace { caches, outputs }
}

fn stack_infer(convs: &[Conv2d], input: &Tensor3) -> Tensor3 {
    let mut x = convs[0].infer(input);
    relu_inplace(&mut x);
    for conv in &convs[1..] {
        x = conv.infer(&x);
        relu_inplace(&mut x);
    }
    x
}

fn stack_backward(
    convs: &mut [Conv2d],
    trace: &StackTrace,
    grad: Tensor3,
    input_grad: bool,
) -> Option<Tensor3> {
    let mut g = grad;
    for i in (0..convs.len()).rev() {
        relu_backward(&trace.outputs[i], &mut g);
        let need = i > 0 || input_grad;
        match convs[i].backward(&trace.caches[i], &g, need) {
            Some(next) => g = next,
            None => return None,
        }
    }
    Some(g)
}

impl Backbone {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// All weights and biases zero.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng>(config: BackboneConfig, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let trunk = build_stack(3, &config.trunk, rng.as_deref_mut());
        let extra = build_stack(config.feature_dim(), &config.extra, rng.as_deref_mut());
        let tap_channels = [
            config.feature_dim(),
            config.extra[0].out_channels,
            config.extra[1].out_channels,
        ];
        let heads = tap_channels
            .iter()
            .map(|&c| match rng.as_deref_mut() {
                Some(r) => Conv2d::init(c, config.anchors_per_cell, 1, 1, 0, 1.0, r),
                None => Conv2d::zeros(c, config.anchors_per_cell, 1, 1, 0),
            })
            .collect();
        Ok(Self {
            config,
            trunk,
            extra,
            heads,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        let n = self.config.input_size;
        if image.channels != 3 || image.height != n || image.width != n {
            return Err(Error::Config(format!(
                "backbone expects a 3×{n}×{n} input, got {}×{}×{}",
                image.channels, image.height, image.width
            )));
        }
        Ok(())
    }

    /// All three tap maps.
    pub fn extract_features(&self, image: &Tensor3) -> Result<FeatureMaps> {
        self.check_input(image)?;
        let t1 = stack_infer(&self.trunk, image);
        let mut t2 = self.extra[0].infer(&t1);
        relu_inplace(&mut t2);
        let mut t3 = self.extra[1].infer(&t2);
        relu_inplace(&mut t3);
        Ok(FeatureMaps { taps: [t1, t2, t3] })
    }

    /// Only the first tap, which is all the pooled feature vector needs.
    pub fn trunk_features(&self, image: &Tensor3) -> Result<Tensor3> {
        self.check_input(image)?;
        Ok(stack_infer(&self.trunk, image))
    }

    pub fn localization_scores(&self, maps: &FeatureMaps) -> [ScoreTensor; 3] {
        std::array::from_fn(|i| ScoreTensor::new(i + 1, self.heads[i].infer(&maps.taps[i])))
    }

    pub fn forward_trunk_traced(&self, image: &Tensor3) -> Result<StackTrace> {
        self.check_input(image)?;
        Ok(stack_forward(&self.trunk, image))
    }

    pub fn forward_full_traced(&self, image: &Tensor3) -> Result<FullTrace> {
        let trunk = self.forward_trunk_traced(image)?;
        let extra = stack_forward(&self.extra, trunk.output());
        let taps = [trunk.output(), &extra.outputs[0], &extra.outputs[1]];
        let mut head_caches = Vec::with_capacity(3);
        let mut scores = Vec::with_capacity(3);
        for (i, tap) in taps.iter().enumerate() {
            let (s, c) = self.heads[i].forward(tap);
            head_caches.push(c);
            scores.push(ScoreTensor::new(i + 1, s));
        }
        let scores: [ScoreTensor; 3] = scores.try_into().expect("three heads");
        Ok(FullTrace {
            trunk,
            extra,
            head_caches,
            scores,
        })
    }

    /// Backpropagate `dL/d(tap 1)` through the trunk.
    pub fn backward_trunk(
        &mut self,
        trace: &StackTrace,
        d_tap: Tensor3,
        input_grad: bool,
    ) -> Option<Tensor3> {
        stack_backward(&mut self.trunk, trace, d_tap, input_grad)
    }

    /// Backpropagate a full pass. `d_scores` are gradients on the three
    /// score tensors (skipped entirely when `None`); `d_tap1` is any extra
    /// gradient arriving directly on the first tap.
    pub fn backward_full(
        &mut self,
        trace: &FullTrace,
        d_tap1: Option<Tensor3>,
        d_scores: Option<&[Tensor3; 3]>,
        input_grad: bool,
    ) -> Option<Tensor3> {
        let t1_shape = trace.trunk.output().shape();
        let mut g1 = d_tap1.unwrap_or_else(|| Tensor3::zeros(t1_shape.0, t1_shape.1, t1_shape.2));
        if let Some(ds) = d_scores {
            let mut g3 = self.heads[2]
                .backward(&trace.head_caches[2], &ds[2], true)
                .expect("input grad");
            relu_backward(&trace.extra.outputs[1], &mut g3);
            let mut g2 = self.extra[1]
                .backward(&trace.extra.caches[1], &g3, true)
                .expect("input grad");
            g2.add_assign(
                &self.heads[1]
                    .backward(&trace.head_caches[1], &ds[1], true)
                    .expect("input grad"),
            );
            relu_backward(&trace.extra.outputs[0], &mut g2);
            let g1_extra = self.extra[0]
                .backward(&trace.extra.caches[0], &g2, true)
                .expect("input grad");
            g1.add_assign(&g1_extra);
            g1.add_assign(
                &self.heads[0]
                    .backward(&trace.head_caches[0], &ds[0], true)
                    .expect("input grad"),
            );
        }
        self.backward_trunk(&trace.trunk, g1, input_grad)
    }

    /// Names of the score-head parameters.
    pub fn is_head_param(name: &str) -> bool {
        name.contains(".heads.") || name.starts_with("heads.")
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.trunk.iter().enumerate() {
            c.visit(&join(prefix, &format!("trunk.{i}")), f);
        }
        for (i, c) in self.extra.iter().enumerate() {
            c.visit(&join(prefix, &format!("extra.{i}")), f);
        }
        for (i, c) in self.heads.iter().enumerate() {
            c.visit(&join(prefix, &format!("heads.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.trunk.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("trunk.{i}")), f);
        }
        for (i, c) in self.extra.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("extra.{i}")), f);
        }
        for (i, c) in self.heads.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("heads.{i}")), f);
        }
    }
}
