//! Victim classifier zoo and checkpoint persistence.
//!
//! Per-dataset pixel normalization lives inside the classifier wrapper so
//! that trigger generation sees raw `[0, 1]` pixels and the perturbation cap
//! stays meaningful. Each architecture exposes one designated "final conv"
//! activation point used by the pruning defense: a channel mask applied
//! there, and an activation capture for ranking channels.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, NormalizationConfig};
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::norm::BatchNorm2d;
use crate::nn::pool::{GlobalAvgPool, MaxPool2};
use crate::nn::{Param, Relu, ReluFlat};
use crate::targets::TargetSpec;
use crate::trigger::TriggerGenerator;

/// Supported classifier architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    SimpleCnn,
    ResNet18,
    PreActResNet18,
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ArchId::SimpleCnn => "simple_cnn",
            ArchId::ResNet18 => "resnet18",
            ArchId::PreActResNet18 => "preact_resnet18",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_cnn" => Ok(ArchId::SimpleCnn),
            "resnet18" => Ok(ArchId::ResNet18),
            "preact_resnet18" => Ok(ArchId::PreActResNet18),
            other => Err(Error::InvalidInput(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Input tensor contract (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

// ---------------------------------------------------------------------------
// SimpleCNN: two conv layers, three fully connected layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SimpleCnn {
    conv1: Conv2d,
    r1: Relu,
    p1: MaxPool2,
    conv2: Conv2d,
    r2: Relu,
    p2: MaxPool2,
    fc1: Linear,
    fr1: ReluFlat,
    fc2: Linear,
    fr2: ReluFlat,
    fc3: Linear,
    flat_dims: (usize, usize, usize),
    captured: Option<Array4<f32>>,
}

impl SimpleCnn {
    fn new(input: InputSpec, k: usize, rng: &mut ChaCha12Rng) -> Self {
        let conv1 = Conv2d::new(input.channels, 32, 3, 1, 0, rng);
        let conv2 = Conv2d::new(32, 64, 3, 1, 0, rng);
        let (h1, w1) = conv1.out_hw(input.height, input.width);
        let (h1, w1) = (h1 / 2, w1 / 2);
        let (h2, w2) = conv2.out_hw(h1, w1);
        let (h2, w2) = (h2 / 2, w2 / 2);
        let flat = 64 * h2 * w2;
        Self {
            conv1,
            r1: Relu::new(),
            p1: MaxPool2::new(),
            conv2,
            r2: Relu::new(),
            p2: MaxPool2::new(),
            fc1: Linear::new(flat, 256, rng),
            fr1: ReluFlat::new(),
            fc2: Linear::new(256, 128, rng),
            fr2: ReluFlat::new(),
            fc3: Linear::new(128, k, rng),
            flat_dims: (64, h2, w2),
            captured: None,
        }
    }

    fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
        mask: Option<&[f32]>,
        capture: bool,
    ) -> Array2<f32> {
        let x = self.p1.forward(&self.r1.forward(&self.conv1.forward(x, train), train), train);
        let mut a = self.r2.forward(&self.conv2.forward(&x, train), train);
        if capture {
            self.captured = Some(a.clone());
        }
        if let Some(m) = mask {
            apply_channel_mask(&mut a, m);
        }
        let x = self.p2.forward(&a, train);
        let n = x.dim().0;
        let flat = x.into_shape_with_order((n, self.fc1.in_features())).unwrap();
        let x = self.fr1.forward(&self.fc1.forward(&flat, train), train);
        let x = self.fr2.forward(&self.fc2.forward(&x, train), train);
        self.fc3.forward(&x, train)
    }

    fn backward(&mut self, dy: &Array2<f32>, mask: Option<&[f32]>) -> Array4<f32> {
        let d = self.fc3.backward(dy);
        let d = self.fc2.backward(&self.fr2.backward(&d));
        let d = self.fc1.backward(&self.fr1.backward(&d));
        let n = d.dim().0;
        let (c, h, w) = self.flat_dims;
        let d = d.into_shape_with_order((n, c, h, w)).unwrap();
        let mut d = self.p2.backward(&d);
        if let Some(m) = mask {
            apply_channel_mask(&mut d, m);
        }
        let d = self.conv2.backward(&self.r2.backward(&d));
        let d = self.conv1.backward(&self.r1.backward(&self.p1.backward(&d)));
        d
    }

    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{p}.conv1"), f);
        self.conv2.visit_params(&format!("{p}.conv2"), f);
        self.fc1.visit_params(&format!("{p}.fc1"), f);
        self.fc2.visit_params(&format!("{p}.fc2"), f);
        self.fc3.visit_params(&format!("{p}.fc3"), f);
    }

    fn final_conv_channels(&self) -> usize {
        64
    }
}

fn apply_channel_mask(x: &mut Array4<f32>, mask: &[f32]) {
    for (ci, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
        let m = mask[ci];
        if m != 1.0 {
            plane.mapv_inplace(|v| v * m);
        }
    }
}

// ---------------------------------------------------------------------------
// ResNet18 (post-activation) for 32x32 inputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    r1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
    r_out: Relu,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let down = if stride != 1 || cin != cout {
            Some((Conv2d::new(cin, cout, 1, stride, 0, rng), BatchNorm2d::new(cout)))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(cout),
            r1: Relu::new(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(cout),
            down,
            r_out: Relu::new(),
        }
    }

    fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
        mask: Option<&[f32]>,
        capture: &mut Option<Array4<f32>>,
        want_capture: bool,
    ) -> Array4<f32> {
        let m = self.r1.forward(&self.bn1.forward(&self.conv1.forward(x, train), train), train);
        let mut m = self.bn2.forward(&self.conv2.forward(&m, train), train);
        if want_capture {
            *capture = Some(m.clone());
        }
        if let Some(mk) = mask {
            apply_channel_mask(&mut m, mk);
        }
        let s = match &mut self.down {
            Some((c, b)) => b.forward(&c.forward(x, train), train),
            None => x.clone(),
        };
        self.r_out.forward(&(m + s), train)
    }

    fn backward(&mut self, dy: &Array4<f32>, mask: Option<&[f32]>) -> Array4<f32> {
        let d = self.r_out.backward(dy);
        let mut dm = d.clone();
        if let Some(mk) = mask {
            apply_channel_mask(&mut dm, mk);
        }
        let dmain = self.conv1.backward(&self.r1.backward(&self.bn1.backward(
            &self.conv2.backward(&self.bn2.backward(&dm)),
        )));
        let dshort = match &mut self.down {
            Some((c, b)) => c.backward(&b.backward(&d)),
            None => d,
        };
        dmain + dshort
    }

    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{p}.conv1"), f);
        self.bn1.visit_params(&format!("{p}.bn1"), f);
        self.conv2.visit_params(&format!("{p}.conv2"), f);
        self.bn2.visit_params(&format!("{p}.bn2"), f);
        if let Some((c, b)) = &mut self.down {
            c.visit_params(&format!("{p}.down.conv"), f);
            b.visit_params(&format!("{p}.down.bn"), f);
        }
    }

    fn visit_buffers(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        self.bn1.visit_buffers(&format!("{p}.bn1"), f);
        self.bn2.visit_buffers(&format!("{p}.bn2"), f);
        if let Some((_, b)) = &mut self.down {
            b.visit_buffers(&format!("{p}.down.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct ResNet18 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    r1: Relu,
    blocks: Vec<BasicBlock>, // 8 blocks, widths 64,64,128,128,256,256,512,512
    gap: GlobalAvgPool,
    fc: Linear,
    captured: Option<Array4<f32>>,
}

impl ResNet18 {
    fn new(input: InputSpec, k: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut blocks = Vec::new();
        let widths = [(64, 64, 1), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1), (256, 512, 2), (512, 512, 1)];
        for (cin, cout, stride) in widths {
            blocks.push(BasicBlock::new(cin, cout, stride, rng));
        }
        Self {
            conv1: Conv2d::new(input.channels, 64, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(64),
            r1: Relu::new(),
            blocks,
            gap: GlobalAvgPool::new(),
            fc: Linear::new(512, k, rng),
            captured: None,
        }
    }

    fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
        mask: Option<&[f32]>,
        capture: bool,
    ) -> Array2<f32> {
        let mut h = self.r1.forward(&self.bn1.forward(&self.conv1.forward(x, train), train), train);
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let is_last = i == last;
            h = b.forward(
                &h,
                train,
                if is_last { mask } else { None },
                &mut self.captured,
                capture && is_last,
            );
        }
        let pooled = self.gap.forward(&h, train);
        self.fc.forward(&pooled, train)
    }

    fn backward(&mut self, dy: &Array2<f32>, mask: Option<&[f32]>) -> Array4<f32> {
        let d = self.fc.backward(dy);
        let mut d = self.gap.backward(&d);
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            d = b.backward(&d, if i == last { mask } else { None });
        }
        self.conv1.backward(&self.r1.backward(&self.bn1.backward(&d)))
    }

    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{p}.conv1"), f);
        self.bn1.visit_params(&format!("{p}.bn1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{p}.block{i}"), f);
        }
        self.fc.visit_params(&format!("{p}.fc"), f);
    }

    fn visit_buffers(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        self.bn1.visit_buffers(&format!("{p}.bn1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&format!("{p}.block{i}"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// PreActResNet18: batch norm and activation before each convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct PreActBlock {
    bn1: BatchNorm2d,
    r1: Relu,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    r2: Relu,
    conv2: Conv2d,
    down: Option<Conv2d>,
}

impl PreActBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let down = if stride != 1 || cin != cout {
            Some(Conv2d::new(cin, cout, 1, stride, 0, rng))
        } else {
            None
        };
        Self {
            bn1: BatchNorm2d::new(cin),
            r1: Relu::new(),
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(cout),
            r2: Relu::new(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            down,
        }
    }

    fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
        mask: Option<&[f32]>,
        capture: &mut Option<Array4<f32>>,
        want_capture: bool,
    ) -> Array4<f32> {
        let p = self.r1.forward(&self.bn1.forward(x, train), train);
        let s = match &mut self.down {
            Some(c) => c.forward(&p, train),
            None => x.clone(),
        };
        let m = self.r2.forward(&self.bn2.forward(&self.conv1.forward(&p, train), train), train);
        let mut m = self.conv2.forward(&m, train);
        if want_capture {
            *capture = Some(m.clone());
        }
        if let Some(mk) = mask {
            apply_channel_mask(&mut m, mk);
        }
        m + s
    }

    fn backward(&mut self, dy: &Array4<f32>, mask: Option<&[f32]>) -> Array4<f32> {
        let mut dm = dy.clone();
        if let Some(mk) = mask {
            apply_channel_mask(&mut dm, mk);
        }
        let d = self.conv2.backward(&dm);
        let dp_main = self.conv1.backward(&self.bn2.backward(&self.r2.backward(&d)));
        match &mut self.down {
            Some(c) => {
                let dp = dp_main + c.backward(dy);
                self.bn1.backward(&self.r1.backward(&dp))
            }
            None => self.bn1.backward(&self.r1.backward(&dp_main)) + dy,
        }
    }

    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.bn1.visit_params(&format!("{p}.bn1"), f);
        self.conv1.visit_params(&format!("{p}.conv1"), f);
        self.bn2.visit_params(&format!("{p}.bn2"), f);
        self.conv2.visit_params(&format!("{p}.conv2"), f);
        if let Some(c) = &mut self.down {
            c.visit_params(&format!("{p}.down"), f);
        }
    }

    fn visit_buffers(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        self.bn1.visit_buffers(&format!("{p}.bn1"), f);
        self.bn2.visit_buffers(&format!("{p}.bn2"), f);
    }
}

#[derive(Debug, Clone)]
struct PreActResNet18 {
    conv1: Conv2d,
    blocks: Vec<PreActBlock>,
    bn_final: BatchNorm2d,
    r_final: Relu,
    gap: GlobalAvgPool,
    fc: Linear,
    captured: Option<Array4<f32>>,
}

impl PreActResNet18 {
    fn new(input: InputSpec, k: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut blocks = Vec::new();
        let widths = [(64, 64, 1), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1), (256, 512, 2), (512, 512, 1)];
        for (cin, cout, stride) in widths {
            blocks.push(PreActBlock::new(cin, cout, stride, rng));
        }
        Self {
            conv1: Conv2d::new(input.channels, 64, 3, 1, 1, rng),
            blocks,
            bn_final: BatchNorm2d::new(512),
            r_final: Relu::new(),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(512, k, rng),
            captured: None,
        }
    }

    fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
        mask: Option<&[f32]>,
        capture: bool,
    ) -> Array2<f32> {
        let mut h = self.conv1.forward(x, train);
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let is_last = i == last;
            h = b.forward(
                &h,
                train,
                if is_last { mask } else { None },
                &mut self.captured,
                capture && is_last,
            );
        }
        let h = self.r_final.forward(&self.bn_final.forward(&h, train), train);
        let pooled = self.gap.forward(&h, train);
        self.fc.forward(&pooled, train)
    }

    fn backward(&mut self, dy: &Array2<f32>, mask: Option<&[f32]>) -> Array4<f32> {
        let d = self.fc.backward(dy);
        let d = self.gap.backward(&d);
        let mut d = self.bn_final.backward(&self.r_final.backward(&d));
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            d = b.backward(&d, if i == last { mask } else { None });
        }
        self.conv1.backward(&d)
    }

    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{p}.conv1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{p}.block{i}"), f);
        }
        self.bn_final.visit_params(&format!("{p}.bn_final"), f);
        self.fc.visit_params(&format!("{p}.fc"), f);
    }

    fn visit_buffers(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&format!("{p}.block{i}"), f);
        }
        self.bn_final.visit_buffers(&format!("{p}.bn_final"), f);
    }
}

#[derive(Debug, Clone)]
enum Net {
    Simple(SimpleCnn),
    Res(ResNet18),
    PreAct(PreActResNet18),
}

/// A classifier with its input normalization and optional channel mask at
/// the designated final-conv activation.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ArchId,
    k: usize,
    input: InputSpec,
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
    net: Net,
    prune_mask: Option<Vec<f32>>,
}

impl Classifier {
    /// Build an initialized classifier; all weights come from `rng`.
    pub fn build(
        arch: ArchId,
        k: usize,
        input: InputSpec,
        norm_mean: Vec<f32>,
        norm_std: Vec<f32>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
        }
        if norm_mean.len() != input.channels || norm_std.len() != input.channels {
            return Err(Error::InvalidInput(
                "normalization stats must have one entry per channel".into(),
            ));
        }
        match arch {
            ArchId::SimpleCnn => {
                if input.height < 12 || input.width < 12 {
                    return Err(Error::InvalidInput(format!(
                        "simple_cnn needs inputs of at least 12x12, got {}x{}",
                        input.height, input.width
                    )));
                }
            }
            ArchId::ResNet18 | ArchId::PreActResNet18 => {
                if input.height % 8 != 0 || input.width % 8 != 0 {
                    return Err(Error::InvalidInput(format!(
                        "residual nets need sides divisible by 8, got {}x{}",
                        input.height, input.width
                    )));
                }
            }
        }
        let net = match arch {
            ArchId::SimpleCnn => Net::Simple(SimpleCnn::new(input, k, rng)),
            ArchId::ResNet18 => Net::Res(ResNet18::new(input, k, rng)),
            ArchId::PreActResNet18 => Net::PreAct(PreActResNet18::new(input, k, rng)),
        };
        Ok(Self { arch, k, input, norm_mean, norm_std, net, prune_mask: None })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    fn normalize(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut out = x.clone();
        for (ci, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.norm_mean[ci], self.norm_std[ci]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    /// Raw-pixel forward pass producing logits `[N, k]`.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        self.forward_inner(x, train, false)
    }

    fn forward_inner(&mut self, x: &Array4<f32>, train: bool, capture: bool) -> Array2<f32> {
        assert_eq!(x.dim().1, self.input.channels, "channel mismatch");
        let xn = self.normalize(x);
        let mask = self.prune_mask.as_deref();
        match &mut self.net {
            Net::Simple(n) => n.forward(&xn, train, mask, capture),
            Net::Res(n) => n.forward(&xn, train, mask, capture),
            Net::PreAct(n) => n.forward(&xn, train, mask, capture),
        }
    }

    /// Backprop from logit gradients to raw-pixel gradients; accumulates
    /// parameter gradients along the way.
    pub fn backward(&mut self, dlogits: &Array2<f32>) -> Array4<f32> {
        let mask = self.prune_mask.as_deref();
        let mut dx = match &mut self.net {
            Net::Simple(n) => n.backward(dlogits, mask),
            Net::Res(n) => n.backward(dlogits, mask),
            Net::PreAct(n) => n.backward(dlogits, mask),
        };
        // undo the input normalization scaling
        for (ci, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let s = self.norm_std[ci];
            plane.mapv_inplace(|v| v / s);
        }
        dx
    }

    /// Predicted class per sample (argmax over logits), evaluation mode.
    pub fn predict(&mut self, x: &Array4<f32>) -> Vec<usize> {
        let logits = self.forward(x, false);
        logits
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Number of channels at the final-conv activation (the pruning point).
    pub fn final_conv_channels(&self) -> usize {
        match &self.net {
            Net::Simple(n) => n.final_conv_channels(),
            Net::Res(_) | Net::PreAct(_) => 512,
        }
    }

    /// Forward pass that also captures the final-conv activation, before any
    /// mask is applied; used to rank channels for pruning.
    pub fn forward_capturing(&mut self, x: &Array4<f32>) -> (Array2<f32>, Array4<f32>) {
        let logits = self.forward_inner(x, false, true);
        let captured = match &mut self.net {
            Net::Simple(n) => n.captured.take(),
            Net::Res(n) => n.captured.take(),
            Net::PreAct(n) => n.captured.take(),
        };
        (logits, captured.expect("capture requested"))
    }

    /// Install a per-channel mask at the final-conv activation; `None` clears.
    pub fn set_prune_mask(&mut self, mask: Option<Vec<f32>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.final_conv_channels() {
                return Err(Error::InvalidInput(format!(
                    "mask length {} != channel count {}",
                    m.len(),
                    self.final_conv_channels()
                )));
            }
        }
        self.prune_mask = mask;
        Ok(())
    }

    pub fn prune_mask(&self) -> Option<&[f32]> {
        self.prune_mask.as_deref()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match &mut self.net {
            Net::Simple(n) => n.visit_params(prefix, f),
            Net::Res(n) => n.visit_params(prefix, f),
            Net::PreAct(n) => n.visit_params(prefix, f),
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array1<f32>)) {
        match &mut self.net {
            Net::Simple(_) => {}
            Net::Res(n) => n.visit_buffers(prefix, f),
            Net::PreAct(n) => n.visit_buffers(prefix, f),
        }
    }
}

/// Spec-level constructor mirroring the module contract.
pub fn build_classifier(
    arch: ArchId,
    k: usize,
    input: InputSpec,
    norm_mean: Vec<f32>,
    norm_std: Vec<f32>,
    rng: &mut ChaCha12Rng,
) -> Result<Classifier> {
    Classifier::build(arch, k, input, norm_mean, norm_std, rng)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Generator hyperparameters needed to rebuild it at load time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub in_channels: usize,
    pub base_channels: usize,
    pub residual_scale: f32,
}

/// Human-readable sidecar persisted next to the weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub arch: ArchId,
    pub class_count: usize,
    pub input: InputSpec,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub dataset: String,
    /// "clean", "attack_lognorm_flip", or "attack_naive_flip".
    pub train_mode: String,
    pub target: Option<TargetSpec>,
    pub loss_weights: LossWeights,
    pub normalization: NormalizationConfig,
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps_completed: u64,
    pub config_hash: String,
    pub generator: Option<GeneratorMeta>,
}

impl CheckpointMeta {
    /// Typed compatibility check for resuming or evaluating against a
    /// different configuration.
    pub fn require(&self, arch: ArchId, class_count: usize) -> Result<()> {
        if self.arch != arch {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint arch {} != requested {arch}",
                self.arch
            )));
        }
        if self.class_count != class_count {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} classes, requested {class_count}",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// A deserialized checkpoint: classifier, optional generator, metadata.
pub struct Checkpoint {
    pub classifier: Classifier,
    pub generator: Option<TriggerGenerator>,
    pub meta: CheckpointMeta,
}

fn tensor_entries(
    clf: &mut Classifier,
    generator: Option<&mut TriggerGenerator>,
) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    clf.visit_params("clf", &mut |name, p| {
        entries.push((name, p.value.shape().to_vec(), p.value.iter().copied().collect()));
    });
    clf.visit_buffers("clf", &mut |name, b| {
        entries.push((name, vec![b.len()], b.to_vec()));
    });
    if let Some(g) = generator {
        g.visit_params("gen", &mut |name, p| {
            entries.push((name, p.value.shape().to_vec(), p.value.iter().copied().collect()));
        });
        g.visit_buffers("gen", &mut |name, b| {
            entries.push((name, vec![b.len()], b.to_vec()));
        });
    }
    entries
}

/// Write `<base>.safetensors` and `<base>.json`.
pub fn save_checkpoint(
    base: &Path,
    clf: &mut Classifier,
    generator: Option<&mut TriggerGenerator>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let entries = tensor_entries(clf, generator);
    let byte_blobs: Vec<Vec<u8>> = entries
        .iter()
        .map(|(_, _, data)| data.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views: Vec<(String, safetensors::tensor::TensorView)> = entries
        .iter()
        .zip(&byte_blobs)
        .map(|((name, shape, _), bytes)| {
            let view =
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::Serde(format!("tensor view: {e:?}")))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<_>>()?;
    let blob = safetensors::serialize(views, None)
        .map_err(|e| Error::Serde(format!("safetensors: {e:?}")))?;
    std::fs::write(weights_path(base), blob)?;
    std::fs::write(meta_path(base), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn weights_path(base: &Path) -> PathBuf {
    base.with_extension("safetensors")
}

pub fn meta_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

/// Load a checkpoint written by [`save_checkpoint`]; weights must cover the
/// rebuilt models exactly.
pub fn load_checkpoint(base: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(base))?)?;
    if meta.schema_version != 1 {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint schema {}",
            meta.schema_version
        )));
    }
    let blob = std::fs::read(weights_path(base))?;
    let st = safetensors::SafeTensors::deserialize(&blob)
        .map_err(|e| Error::Serde(format!("safetensors: {e:?}")))?;

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut clf = Classifier::build(
        meta.arch,
        meta.class_count,
        meta.input,
        meta.norm_mean.clone(),
        meta.norm_std.clone(),
        &mut rng,
    )?;
    let mut generator = match &meta.generator {
        Some(g) => Some(TriggerGenerator::new(
            g.in_channels,
            g.base_channels,
            g.residual_scale,
            &mut rng,
        )?),
        None => None,
    };

    let mut used = 0usize;
    let mut load_err: Option<Error> = None;
    {
        let mut load = |name: String, dst: &mut [f32], shape: &[usize]| {
            if load_err.is_some() {
                return;
            }
            match st.tensor(&name) {
                Ok(view) => {
                    let file_shape: Vec<usize> = view.shape().to_vec();
                    if file_shape != shape {
                        load_err = Some(Error::CheckpointMismatch(format!(
                            "tensor {name}: shape {file_shape:?} != expected {shape:?}"
                        )));
                        return;
                    }
                    for (dv, chunk) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
                        *dv = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                    }
                    used += 1;
                }
                Err(_) => {
                    load_err = Some(Error::CheckpointMismatch(format!("missing tensor {name}")));
                }
            }
        };
        clf.visit_params("clf", &mut |name, p| {
            let shape = p.value.shape().to_vec();
            load(name, p.value.as_slice_mut().unwrap(), &shape);
        });
        clf.visit_buffers("clf", &mut |name, b| {
            let shape = vec![b.len()];
            load(name, b.as_slice_mut().unwrap(), &shape);
        });
        if let Some(g) = &mut generator {
            g.visit_params("gen", &mut |name, p| {
                let shape = p.value.shape().to_vec();
                load(name, p.value.as_slice_mut().unwrap(), &shape);
            });
            g.visit_buffers("gen", &mut |name, b| {
                let shape = vec![b.len()];
                load(name, b.as_slice_mut().unwrap(), &shape);
            });
        }
    }
    if let Some(e) = load_err {
        return Err(e);
    }
    if used != st.names().len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, model consumed {used}",
            st.names().len()
        )));
    }
    Ok(Checkpoint { classifier: clf, generator, meta })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{AttackMode, VicinityPolicy};
    use ndarray::Array4;
    use rand::Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(7)
    }

    fn mnist_input() -> InputSpec {
        InputSpec { channels: 1, height: 28, width: 28 }
    }

    fn simple(k: usize) -> Classifier {
        Classifier::build(ArchId::SimpleCnn, k, mnist_input(), vec![0.1307], vec![0.3081], &mut rng())
            .unwrap()
    }

    #[test]
    fn simple_cnn_shape_contract() {
        let mut c = simple(10);
        let x = Array4::zeros((4, 1, 28, 28));
        let y = c.forward(&x, false);
        assert_eq!(y.dim(), (4, 10));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn resnet_shape_contracts() {
        let input = InputSpec { channels: 3, height: 32, width: 32 };
        for arch in [ArchId::ResNet18, ArchId::PreActResNet18] {
            let mut c = Classifier::build(arch, 10, input, vec![0.5; 3], vec![0.25; 3], &mut rng())
                .unwrap();
            let x = Array4::from_elem((2, 3, 32, 32), 0.4);
            let y = c.forward(&x, false);
            assert_eq!(y.dim(), (2, 10), "{arch}");
            assert!(y.iter().all(|v| v.is_finite()), "{arch}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_equivariant() {
        let mut c = simple(10);
        let mut r = rng();
        let x = Array4::from_shape_fn((6, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let y1 = c.forward(&x, false);
        let y2 = c.forward(&x, false);
        assert_eq!(y1, y2);

        // permuting the batch permutes the outputs
        let mut xr = x.clone();
        for i in 0..3 {
            let tmp = xr.index_axis(Axis(0), i).to_owned();
            let other = xr.index_axis(Axis(0), 5 - i).to_owned();
            xr.index_axis_mut(Axis(0), i).assign(&other);
            xr.index_axis_mut(Axis(0), 5 - i).assign(&tmp);
        }
        let yr = c.forward(&xr, false);
        for i in 0..6 {
            let a = y1.row(5 - i);
            let b = yr.row(i);
            assert_eq!(a, b, "row {i}");
        }
    }

    #[test]
    fn untrained_accuracy_is_chance_level() {
        let mut c = simple(10);
        let mut r = rng();
        let x = Array4::from_shape_fn((2000, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let labels: Vec<usize> = (0..2000).map(|_| r.random_range(0..10)).collect();
        let preds = c.predict(&x);
        let acc =
            preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
        assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn backward_produces_input_and_param_gradients() {
        let mut c = simple(4);
        let mut r = rng();
        let x = Array4::from_shape_fn((2, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let y = c.forward(&x, true);
        let dy = y.mapv(|_| 1.0);
        let dx = c.backward(&dy);
        assert_eq!(dx.dim(), x.dim());
        let mut any = false;
        c.visit_params("clf", &mut |_, p| {
            any |= p.grad.iter().any(|g| *g != 0.0);
        });
        assert!(any);
    }

    #[test]
    fn prune_mask_zeroes_channels() {
        let mut c = simple(10);
        let mut r = rng();
        let x = Array4::from_shape_fn((2, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let base = c.forward(&x, false);
        // rate-zero mask: all ones is the identity
        c.set_prune_mask(Some(vec![1.0; 64])).unwrap();
        let same = c.forward(&x, false);
        assert_eq!(base, same);
        // all-zero mask destroys the signal
        c.set_prune_mask(Some(vec![0.0; 64])).unwrap();
        let dead = c.forward(&x, false);
        assert_ne!(base, dead);
        c.set_prune_mask(None).unwrap();
        assert_eq!(c.forward(&x, false), base);
        assert!(c.set_prune_mask(Some(vec![1.0; 3])).is_err());
    }

    #[test]
    fn capture_returns_final_conv_activation() {
        let mut c = simple(10);
        let mut r = rng();
        let x = Array4::from_shape_fn((3, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let (logits, act) = c.forward_capturing(&x);
        assert_eq!(logits.dim(), (3, 10));
        assert_eq!(act.dim().0, 3);
        assert_eq!(act.dim().1, 64);
        // post-relu activations are nonnegative
        assert!(act.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let mut c = simple(10);
        let mut g = TriggerGenerator::new(1, 4, 0.3, &mut rng()).unwrap();
        let spec =
            TargetSpec::new(AttackMode::FullRange, VicinityPolicy::CyclicSuccessor, 10).unwrap();
        let meta = CheckpointMeta {
            schema_version: 1,
            arch: ArchId::SimpleCnn,
            class_count: 10,
            input: mnist_input(),
            norm_mean: vec![0.1307],
            norm_std: vec![0.3081],
            dataset: "mnist".into(),
            train_mode: "attack_lognorm_flip".into(),
            target: Some(spec),
            loss_weights: LossWeights::default(),
            normalization: NormalizationConfig::default(),
            seed: 42,
            epochs_completed: 3,
            steps_completed: 1407,
            config_hash: "cafebabe".into(),
            generator: Some(GeneratorMeta { in_channels: 1, base_channels: 4, residual_scale: 0.3 }),
        };
        save_checkpoint(&base, &mut c, Some(&mut g), &meta).unwrap();

        let mut loaded = load_checkpoint(&base).unwrap();
        assert_eq!(loaded.meta, meta);
        // the sidecar carries the exact loss weights from the config
        let sidecar = std::fs::read_to_string(meta_path(&base)).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(parsed["loss_weights"]["gamma"].as_f64().unwrap(), 5.0);

        let mut r = rng();
        let x = Array4::from_shape_fn((3, 1, 28, 28), |_| r.random_range(0.0f32..1.0));
        let y_orig = c.forward(&x, false);
        let y_load = loaded.classifier.forward(&x, false);
        assert_eq!(y_orig, y_load);

        let gx = g.forward(&x, false);
        let gx_load = loaded.generator.as_mut().unwrap().forward(&x, false);
        assert_eq!(gx, gx_load);
    }

    #[test]
    fn checkpoint_mismatch_is_typed() {
        let meta = CheckpointMeta {
            schema_version: 1,
            arch: ArchId::SimpleCnn,
            class_count: 10,
            input: mnist_input(),
            norm_mean: vec![0.0],
            norm_std: vec![1.0],
            dataset: "mnist".into(),
            train_mode: "clean".into(),
            target: None,
            loss_weights: LossWeights::default(),
            normalization: NormalizationConfig::default(),
            seed: 0,
            epochs_completed: 0,
            steps_completed: 0,
            config_hash: String::new(),
            generator: None,
        };
        assert!(meta.require(ArchId::SimpleCnn, 10).is_ok());
        assert!(matches!(
            meta.require(ArchId::SimpleCnn, 43),
            Err(Error::CheckpointMismatch(_))
        ));
        assert!(matches!(
            meta.require(ArchId::ResNet18, 10),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn unsupported_input_rejected() {
        let bad = InputSpec { channels: 1, height: 8, width: 8 };
        assert!(Classifier::build(ArchId::SimpleCnn, 10, bad, vec![0.0], vec![1.0], &mut rng())
            .is_err());
        let bad = InputSpec { channels: 3, height: 30, width: 30 };
        assert!(Classifier::build(ArchId::ResNet18, 10, bad, vec![0.0; 3], vec![1.0; 3], &mut rng())
            .is_err());
    }
}
