//! Layer plans and the forward-pass runner.
//!
//! The dense network follows the reference encoder-decoder layout: a 3x3
//! input conv; per down stage a dense block (each layer BN -> ReLU -> 3x3
//! conv -> dropout, concatenated onto the running stack) and a transition
//! down (BN -> ReLU -> 1x1 conv -> dropout -> 2x2 max-pool); a bottleneck
//! dense block; per up stage a 3x3 stride-2 transposed conv over the
//! previous block's new features, center-cropped and concatenated with the
//! matching skip, then a dense block; finally a 1x1 conv to class logits.

use crate::dropout::{regular_mask, standard_normal, targeted_mask};
use crate::error::{Error, Result};
use crate::nets::builder::{BnDesc, Builder, ConvDesc, DropoutSite};
use crate::nets::{Bindings, ModelConfig};
use crate::tensor::{BnStats, Mode, Parameter, Tape, TensorId};
use crate::Rng;

pub(crate) struct DenseLayer {
    pub bn: BnDesc,
    pub conv: ConvDesc,
    pub dropout: DropoutSite,
}

pub(crate) struct DenseBlock {
    pub layers: Vec<DenseLayer>,
}

pub(crate) struct TransitionDown {
    pub bn: BnDesc,
    pub conv: ConvDesc,
    pub dropout: DropoutSite,
}

pub(crate) struct UpStage {
    pub tconv: usize,
    pub block: DenseBlock,
}

pub(crate) struct TiramisuPlan {
    pub conv_in: ConvDesc,
    pub down: Vec<(DenseBlock, TransitionDown)>,
    pub bottleneck: DenseBlock,
    pub up: Vec<UpStage>,
    pub final_conv: ConvDesc,
}

pub(crate) struct DoubleConv {
    pub conv1: ConvDesc,
    pub bn1: BnDesc,
    pub drop1: DropoutSite,
    pub conv2: ConvDesc,
    pub bn2: BnDesc,
    pub drop2: DropoutSite,
}

pub(crate) struct UnetPlan {
    pub inc: DoubleConv,
    pub downs: Vec<DoubleConv>,
    pub ups: Vec<(usize, DoubleConv)>,
    pub final_conv: ConvDesc,
}

pub(crate) enum Plan {
    Tiramisu(TiramisuPlan),
    Unet(UnetPlan),
}

impl Plan {
    pub fn variational_sites(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut visit = |site: &DropoutSite| {
            if let DropoutSite::Variational { log_alpha } = site {
                out.push(*log_alpha);
            }
        };
        match self {
            Plan::Tiramisu(p) => {
                for (block, td) in &p.down {
                    block.layers.iter().for_each(|l| visit(&l.dropout));
                    visit(&td.dropout);
                }
                p.bottleneck.layers.iter().for_each(|l| visit(&l.dropout));
                for up in &p.up {
                    up.block.layers.iter().for_each(|l| visit(&l.dropout));
                }
            }
            Plan::Unet(p) => {
                let mut dc = |d: &DoubleConv| {
                    visit(&d.drop1);
                    visit(&d.drop2);
                };
                dc(&p.inc);
                p.downs.iter().for_each(&mut dc);
                p.ups.iter().for_each(|(_, d)| dc(d));
            }
        }
        out
    }
}

fn dense_block(
    b: &mut Builder,
    name: &str,
    in_channels: usize,
    layers: usize,
    growth: usize,
) -> DenseBlock {
    let mut block = DenseBlock { layers: Vec::with_capacity(layers) };
    for j in 0..layers {
        let cin = in_channels + j * growth;
        let lname = format!("{name}.layer{j}");
        block.layers.push(DenseLayer {
            bn: b.bn(&format!("{lname}.bn"), cin),
            conv: b.conv(&format!("{lname}.conv"), growth, cin, 3, 1, 1, true),
            dropout: b.dropout_site(&format!("{lname}.dropout")),
        });
    }
    block
}

pub(crate) fn build_tiramisu(config: &ModelConfig, b: &mut Builder) -> Result<TiramisuPlan> {
    let growth = config.growth_rate;
    let conv_in =
        b.conv("conv_in", config.first_conv_channels, config.input_channels, 3, 1, 1, true);

    let mut stack_ch = config.first_conv_channels;
    let mut skip_channels = Vec::new();
    let mut down = Vec::new();
    for (i, &layers) in config.layers_per_block.iter().enumerate() {
        let block = dense_block(b, &format!("down{i}"), stack_ch, layers, growth);
        stack_ch += layers * growth;
        skip_channels.push(stack_ch);
        let td = TransitionDown {
            bn: b.bn(&format!("down{i}.trans.bn"), stack_ch),
            conv: b.conv(&format!("down{i}.trans.conv"), stack_ch, stack_ch, 1, 1, 0, true),
            dropout: b.dropout_site(&format!("down{i}.trans.dropout")),
        };
        down.push((block, td));
    }

    let bottleneck = dense_block(b, "bottleneck", stack_ch, config.bottleneck_layers, growth);
    let mut new_ch = config.bottleneck_layers * growth;

    let mut up = Vec::new();
    let up_blocks: Vec<usize> = config.layers_per_block.iter().rev().copied().collect();
    let mut last_in = 0usize;
    for (i, &layers) in up_blocks.iter().enumerate() {
        let tconv = b.tconv(&format!("up{i}.trans"), new_ch, new_ch, 3);
        let skip_ch = skip_channels[skip_channels.len() - 1 - i];
        let in_ch = new_ch + skip_ch;
        let block = dense_block(b, &format!("up{i}"), in_ch, layers, growth);
        // Skip bookkeeping: the up-stage dense block must consume exactly
        // the transposed-conv output plus the matching skip.
        assert_eq!(
            b.param_shape(block.layers[0].conv.kernel)[1],
            b.param_shape(tconv)[1] + skip_ch,
            "up stage {i}: dense-block input channels disagree with tconv + skip"
        );
        up.push(UpStage { tconv, block });
        last_in = in_ch;
        new_ch = layers * growth;
    }

    // The last up stage contributes its full concatenation to the classifier.
    let final_in = last_in + up_blocks.last().unwrap() * growth;
    let final_conv = b.conv("classifier", config.num_classes, final_in, 1, 1, 0, true);

    Ok(TiramisuPlan { conv_in, down, bottleneck, up, final_conv })
}

fn double_conv(b: &mut Builder, name: &str, cin: usize, cout: usize) -> DoubleConv {
    DoubleConv {
        conv1: b.conv(&format!("{name}.conv1"), cout, cin, 3, 1, 1, true),
        bn1: b.bn(&format!("{name}.bn1"), cout),
        drop1: b.dropout_site(&format!("{name}.dropout1")),
        conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, true),
        bn2: b.bn(&format!("{name}.bn2"), cout),
        drop2: b.dropout_site(&format!("{name}.dropout2")),
    }
}

pub(crate) fn build_unet(config: &ModelConfig, b: &mut Builder) -> Result<UnetPlan> {
    let base = config.unet_base_channels;
    let inc = double_conv(b, "inc", config.input_channels, base);
    let mut downs = Vec::new();
    let mut ch = base;
    for i in 0..4 {
        downs.push(double_conv(b, &format!("down{i}"), ch, ch * 2));
        ch *= 2;
    }
    let mut ups = Vec::new();
    for i in 0..4 {
        let tconv = b.tconv(&format!("up{i}.trans"), ch, ch / 2, 2);
        ups.push((tconv, double_conv(b, &format!("up{i}"), ch, ch / 2)));
        ch /= 2;
    }
    let final_conv = b.conv("classifier", config.num_classes, base, 1, 1, 0, true);
    Ok(UnetPlan { inc, downs, ups, final_conv })
}

// ── Forward runner ──────────────────────────────────────────────────

struct RunCtx<'a> {
    params: &'a [Parameter],
    stats: &'a mut [BnStats],
    tape: &'a mut Tape,
    mode: Mode,
    rng: Option<&'a mut Rng>,
    bound: Vec<Option<TensorId>>,
    bindings: Bindings,
    bn_momentum: f32,
    bn_eps: f32,
}

impl RunCtx<'_> {
    fn bind(&mut self, idx: usize) -> TensorId {
        if let Some(tid) = self.bound[idx] {
            return tid;
        }
        let p = &self.params[idx];
        let tid = self.tape.leaf(
            p.value.shape.clone(),
            p.value.data.clone(),
            self.mode == Mode::Train,
        );
        self.bound[idx] = Some(tid);
        self.bindings.push((idx, tid));
        tid
    }

    fn rng(&mut self) -> &mut Rng {
        self.rng.as_deref_mut().expect("train-mode forward requires an rng")
    }

    /// Conv with the site's weight-level dropout applied in train mode.
    fn conv(&mut self, x: TensorId, desc: &ConvDesc, site: DropoutSite) -> Result<TensorId> {
        let mut kernel = self.bind(desc.kernel);
        if let DropoutSite::Targeted { gamma, p } = site {
            if self.mode == Mode::Train {
                let values = &self.params[desc.kernel].value.data;
                let mask = targeted_mask(values, gamma, p, self.rng());
                kernel = self.tape.mul_mask(kernel, mask)?;
            }
        }
        let bias = desc.bias.map(|b| self.bind(b));
        self.tape.conv2d(x, kernel, bias, desc.stride, desc.pad)
    }

    /// Activation-level dropout for regular/variational sites.
    fn act_dropout(&mut self, x: TensorId, site: DropoutSite) -> Result<TensorId> {
        if self.mode == Mode::Eval {
            return Ok(x);
        }
        match site {
            DropoutSite::Regular { p } => {
                let mask = regular_mask(self.tape.value(x).len(), p, self.rng());
                self.tape.mul_mask(x, mask)
            }
            DropoutSite::Variational { log_alpha } => {
                let noise = standard_normal(self.tape.value(x).len(), self.rng());
                let la = self.bind(log_alpha);
                self.tape.gauss_noise_mul(x, la, noise)
            }
            DropoutSite::None | DropoutSite::Targeted { .. } => Ok(x),
        }
    }

    fn bn(&mut self, x: TensorId, desc: &BnDesc) -> Result<TensorId> {
        let gamma = self.bind(desc.gamma);
        let beta = self.bind(desc.beta);
        let (momentum, eps) = (self.bn_momentum, self.bn_eps);
        self.tape.batch_norm(x, gamma, beta, &mut self.stats[desc.stats], self.mode, momentum, eps)
    }

    /// BN -> ReLU -> conv -> dropout.
    fn dense_layer(&mut self, x: TensorId, layer: &DenseLayer) -> Result<TensorId> {
        let y = self.bn(x, &layer.bn)?;
        let y = self.tape.relu(y);
        let y = self.conv(y, &layer.conv, layer.dropout)?;
        self.act_dropout(y, layer.dropout)
    }

    /// Returns (full stack, concatenated new features).
    fn dense_block(&mut self, block: &DenseBlock, input: TensorId) -> Result<(TensorId, TensorId)> {
        let mut stack = input;
        let mut news = Vec::with_capacity(block.layers.len());
        for layer in &block.layers {
            let y = self.dense_layer(stack, layer)?;
            stack = self.tape.concat_channels(stack, y)?;
            news.push(y);
        }
        let mut newcat = news[0];
        for &y in &news[1..] {
            newcat = self.tape.concat_channels(newcat, y)?;
        }
        Ok((stack, newcat))
    }

    /// Conv -> BN -> ReLU -> dropout, twice.
    fn double_conv(&mut self, x: TensorId, dc: &DoubleConv) -> Result<TensorId> {
        let y = self.conv(x, &dc.conv1, dc.drop1)?;
        let y = self.bn(y, &dc.bn1)?;
        let y = self.tape.relu(y);
        let y = self.act_dropout(y, dc.drop1)?;
        let y = self.conv(y, &dc.conv2, dc.drop2)?;
        let y = self.bn(y, &dc.bn2)?;
        let y = self.tape.relu(y);
        self.act_dropout(y, dc.drop2)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_forward(
    plan: &Plan,
    config: &ModelConfig,
    params: &[Parameter],
    stats: &mut [BnStats],
    tape: &mut Tape,
    input: TensorId,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(TensorId, Bindings)> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: shape,
            right: vec![0, config.input_channels, 0, 0],
        });
    }
    let divisor = 1usize << config.down_stages();
    if shape[2] % divisor != 0 || shape[3] % divisor != 0 {
        return Err(Error::Config(format!(
            "input {}x{} must be divisible by {divisor} ({} down-sampling stages)",
            shape[2],
            shape[3],
            config.down_stages()
        )));
    }

    let mut ctx = RunCtx {
        params,
        stats,
        tape,
        mode,
        rng,
        bound: vec![None; params.len()],
        bindings: Vec::new(),
        bn_momentum: config.bn_momentum,
        bn_eps: config.bn_eps,
    };

    let logits = match plan {
        Plan::Tiramisu(p) => {
            let mut stack = ctx.conv(input, &p.conv_in, DropoutSite::None)?;
            let mut skips = Vec::with_capacity(p.down.len());
            for (block, td) in &p.down {
                let (full, _) = ctx.dense_block(block, stack)?;
                skips.push(full);
                let y = ctx.bn(full, &td.bn)?;
                let y = ctx.tape.relu(y);
                let y = ctx.conv(y, &td.conv, td.dropout)?;
                let y = ctx.act_dropout(y, td.dropout)?;
                stack = ctx.tape.max_pool2d(y)?;
            }
            let (_, mut new_feats) = ctx.dense_block(&p.bottleneck, stack)?;
            let mut full = new_feats;
            for (i, stage) in p.up.iter().enumerate() {
                let skip = skips[skips.len() - 1 - i];
                let kernel = ctx.bind(stage.tconv);
                let y = ctx.tape.transposed_conv2d(new_feats, kernel, 2)?;
                let (sh, sw) = {
                    let s = ctx.tape.shape(skip);
                    (s[2], s[3])
                };
                let y = ctx.tape.crop2d(y, sh, sw)?;
                let joined = ctx.tape.concat_channels(y, skip)?;
                let (stack_full, news) = ctx.dense_block(&stage.block, joined)?;
                full = stack_full;
                new_feats = news;
            }
            ctx.conv(full, &p.final_conv, DropoutSite::None)?
        }
        Plan::Unet(p) => {
            let mut x = ctx.double_conv(input, &p.inc)?;
            let mut skips = vec![x];
            for dc in &p.downs {
                let pooled = ctx.tape.max_pool2d(x)?;
                x = ctx.double_conv(pooled, dc)?;
                skips.push(x);
            }
            skips.pop(); // the deepest output is the working tensor itself
            for (tconv, dc) in &p.ups {
                let kernel = ctx.bind(*tconv);
                let up = ctx.tape.transposed_conv2d(x, kernel, 2)?;
                let skip = skips.pop().expect("one skip per up stage");
                let joined = ctx.tape.concat_channels(up, skip)?;
                x = ctx.double_conv(joined, dc)?;
            }
            ctx.conv(x, &p.final_conv, DropoutSite::None)?
        }
    };
    Ok((logits, ctx.bindings))
}
