//! Layer building blocks and the encoder-decoder assembled from them.

use rand_chacha::ChaCha8Rng;

use super::config::{Layout, ModelConfig};
use crate::derive_seed;
use crate::tensor::{
    he_init, ConvGeometry, ConvKind, GradTape, NormBuffers, NormMode, ParamId, PoolWindow, Tensor, Var,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub name: String,
    pub buffers: NormBuffers,
}

/// Named trainable tensors plus batch-norm running statistics. Parameter
/// order is creation order and doubles as the optimizer slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    norms: Vec<NormState>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            norms: Vec::new(),
            seed,
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// HE-normal weights; each tensor gets its own stream derived from the
    /// store seed and its index.
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let stream = derive_seed(self.seed, self.params.len() as u64);
        let value = he_init(shape, fan_in, stream)?;
        Ok(self.push(name, value))
    }

    fn constant(&mut self, name: String, len: usize, v: f32) -> usize {
        self.push(name, Tensor::full(&[len], v))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormState] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormState] {
        &mut self.norms
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }
}

/// Total element count of the trainable tensors. Batch-norm running
/// statistics are not trainable and are not counted.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.params.iter().map(|p| p.value.len()).sum()
}

/// Per-forward state: the tape, the tape handles of every parameter and
/// the running statistics being read or updated.
pub struct Ctx<'a> {
    pub tape: &'a mut GradTape,
    vars: Vec<Var>,
    norms: &'a mut [NormState],
    pub mode: NormMode,
}

impl<'a> Ctx<'a> {
    /// Registers every parameter of `store` on `tape`. In training mode they
    /// become differentiable with `ParamId(i)` for the i-th parameter.
    pub fn new(tape: &'a mut GradTape, params: &[Param], norms: &'a mut [NormState], mode: NormMode) -> Self {
        let vars = params
            .iter()
            .enumerate()
            .map(|(i, p)| match mode {
                NormMode::Train => tape.param(ParamId(i), p.value.clone()),
                NormMode::Inference => tape.input(p.value.clone()),
            })
            .collect();
        Ctx {
            tape,
            vars,
            norms,
            mode,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

/// A convolution optionally followed by batch norm and ReLU6.
#[derive(Debug, Clone)]
pub struct Conv {
    kind: ConvKind,
    weight: usize,
    bias: Option<usize>,
    norm: Option<Norm>,
    geom: ConvGeometry,
    relu: bool,
}

/// Shape and trailing layers of a [`Conv`].
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
    pub norm: bool,
    pub relu: bool,
}

impl ConvSpec {
    /// 1×1, batch norm, ReLU6.
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Pointwise,
            cin,
            cout,
            k: 1,
            stride: 1,
            dilation: 1,
            bias: false,
            norm: true,
            relu: true,
        }
    }

    /// 3×3 per-channel, batch norm, ReLU6.
    pub fn depthwise(channels: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Depthwise,
            cin: channels,
            cout: channels,
            k: 3,
            stride,
            dilation,
            bias: false,
            norm: true,
            relu: true,
        }
    }

    /// Dense `k×k`, batch norm, ReLU6.
    pub fn standard(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Standard,
            cin,
            cout,
            k,
            stride,
            dilation: 1,
            bias: false,
            norm: true,
            relu: true,
        }
    }

    pub fn linear(self) -> Self {
        ConvSpec { relu: false, ..self }
    }
}

impl Conv {
    pub fn build(store: &mut ParamStore, name: &str, s: ConvSpec) -> Result<Self> {
        let (shape, fan_in) = match s.kind {
            ConvKind::Depthwise => ([s.cin, 1, s.k, s.k], s.k * s.k),
            ConvKind::Standard | ConvKind::Pointwise => ([s.cout, s.cin, s.k, s.k], s.cin * s.k * s.k),
        };
        let weight = store.he(format!("{name}.weight"), &shape, fan_in)?;
        let bias = s.bias.then(|| store.constant(format!("{name}.bias"), s.cout, 0.0));
        let norm = if s.norm {
            let gamma = store.constant(format!("{name}.bn.gamma"), s.cout, 1.0);
            let beta = store.constant(format!("{name}.bn.beta"), s.cout, 0.0);
            store.norms.push(NormState {
                name: format!("{name}.bn"),
                buffers: NormBuffers::new(s.cout),
            });
            Some(Norm {
                gamma,
                beta,
                state: store.norms.len() - 1,
            })
        } else {
            None
        };
        Ok(Conv {
            kind: s.kind,
            weight,
            bias,
            norm,
            geom: ConvGeometry::same(s.k, s.stride, s.dilation),
            relu: s.relu,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.vars[self.weight];
        let b = self.bias.map(|i| ctx.vars[i]);
        let mut y = match self.kind {
            ConvKind::Standard => ctx.tape.conv2d(x, w, b, self.geom)?,
            ConvKind::Depthwise => ctx.tape.depthwise_conv2d(x, w, b, self.geom)?,
            ConvKind::Pointwise => ctx.tape.pointwise_conv2d(x, w, b)?,
        };
        if let Some(n) = self.norm {
            let (g, be) = (ctx.vars[n.gamma], ctx.vars[n.beta]);
            y = ctx
                .tape
                .batch_norm(y, g, be, &mut ctx.norms[n.state].buffers, ctx.mode)?;
        }
        Ok(if self.relu { ctx.tape.relu6(y) } else { y })
    }
}

/// Depthwise 3×3 then pointwise 1×1, each with batch norm and ReLU6.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
}

impl SeparableConv {
    pub fn build(store: &mut ParamStore, name: &str, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: Conv::build(store, &format!("{name}.dw"), ConvSpec::depthwise(cin, 1, dilation))?,
            pointwise: Conv::build(store, &format!("{name}.pw"), ConvSpec::pointwise(cin, cout))?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(ctx, x)?;
        self.pointwise.forward(ctx, h)
    }
}

/// Expand 1×1 → depthwise 3×3 → linear project 1×1, with a skip connection
/// when the block keeps both resolution and width.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub expand: Option<Conv>,
    pub depthwise: Conv,
    pub project: Conv,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let expand = if hidden != cin {
            Some(Conv::build(
                store,
                &format!("{name}.expand"),
                ConvSpec::pointwise(cin, hidden),
            )?)
        } else {
            None
        };
        Ok(InvertedResidual {
            expand,
            depthwise: Conv::build(
                store,
                &format!("{name}.dw"),
                ConvSpec::depthwise(hidden, stride, dilation),
            )?,
            project: Conv::build(
                store,
                &format!("{name}.project"),
                ConvSpec::pointwise(hidden, cout).linear(),
            )?,
            residual: stride == 1 && cin == cout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(ctx, h)?;
        }
        h = self.depthwise.forward(ctx, h)?;
        h = self.project.forward(ctx, h)?;
        if self.residual {
            h = ctx.tape.add(x, h)?;
        }
        Ok(h)
    }
}

/// Context block: a global-average branch plus one dilated separable branch
/// per rate, concatenated along channels.
#[derive(Debug, Clone)]
pub struct SpatialPyramid {
    pub pool: Conv,
    pub branches: Vec<SeparableConv>,
}

impl SpatialPyramid {
    pub fn build(store: &mut ParamStore, name: &str, cin: usize, width: usize, rates: &[usize]) -> Result<Self> {
        // Batch statistics of a 1×1 map over a minibatch of two are
        // degenerate, so the pooled branch uses a bias instead of batch norm.
        let pool_spec = ConvSpec {
            bias: true,
            norm: false,
            ..ConvSpec::pointwise(cin, width)
        };
        Ok(SpatialPyramid {
            pool: Conv::build(store, &format!("{name}.pool"), pool_spec)?,
            branches: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| SeparableConv::build(store, &format!("{name}.branch{i}"), cin, width, r))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.tape.value(x).dims4()?;
        if h != w {
            return Err(Error::dim(format!("context block expects square maps, got {h}x{w}")));
        }
        let pooled = ctx.tape.avg_pool(x, PoolWindow::Global)?;
        let pooled = self.pool.forward(ctx, pooled)?;
        let mut parts = vec![ctx.tape.upsample(pooled, h)?];
        for b in &self.branches {
            parts.push(b.forward(ctx, x)?);
        }
        ctx.tape.concat(&parts)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub low_level: Conv,
    pub refine: Vec<SeparableConv>,
    pub head: Conv,
}

/// Layer structure without the parameter values.
#[derive(Debug, Clone)]
struct Net {
    config: ModelConfig,
    layout: Layout,
    stem: Conv,
    blocks: Vec<InvertedResidual>,
    spp: SpatialPyramid,
    decoder: Decoder,
}

impl Net {
    fn run(&self, ctx: &mut Ctx, x: Var, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut h = self.stem.forward(ctx, x)?;
        let mut low = None;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(ctx, h)?;
            if i == self.layout.low_level_block {
                low = Some(h);
            }
        }
        let low = low.expect("skip block lies inside the encoder");
        let context = self.spp.forward(ctx, h)?;
        let context = ctx.tape.upsample(context, self.config.output_stride / 4)?;
        let low = self.decoder.low_level.forward(ctx, low)?;
        let mut h = ctx.tape.concat(&[context, low])?;
        for r in &self.decoder.refine {
            h = r.forward(ctx, h)?;
        }
        if let Some(rng) = dropout {
            if self.config.dropout_rate > 0.0 {
                h = ctx.tape.dropout(h, self.config.dropout_rate, rng)?;
            }
        }
        let logits = self.decoder.head.forward(ctx, h)?;
        let logits = ctx.tape.upsample(logits, 4)?;
        Ok(ctx.tape.sigmoid(logits))
    }
}

/// MobileNetV2-style encoder with a context block and a light decoder.
/// Maps `N×3×S×S` to per-pixel foreground probabilities `N×1×S×S`.
#[derive(Debug, Clone)]
pub struct Model {
    net: Net,
    store: ParamStore,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        let layout = config.layout()?;
        let mut store = ParamStore::new(seed);
        let stem = Conv::build(&mut store, "encoder.stem", ConvSpec::standard(3, layout.stem, 3, 2))?;
        let blocks = layout
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                InvertedResidual::build(
                    &mut store,
                    &format!("encoder.block{i}"),
                    b.in_channels,
                    b.hidden,
                    b.out_channels,
                    b.stride,
                    b.dilation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_out = layout.blocks.last().expect("validated non-empty").out_channels;
        let spp = SpatialPyramid::build(&mut store, "context", enc_out, layout.spp_branch, &config.spp_rates)?;
        let spp_out = layout.spp_branch * (config.spp_rates.len() + 1);
        let low_in = layout.blocks[layout.low_level_block].out_channels;
        let low_level = Conv::build(
            &mut store,
            "decoder.low_level",
            ConvSpec::pointwise(low_in, layout.low_level),
        )?;
        let refine = vec![
            SeparableConv::build(
                &mut store,
                "decoder.refine0",
                spp_out + layout.low_level,
                layout.refine,
                1,
            )?,
            SeparableConv::build(&mut store, "decoder.refine1", layout.refine, layout.refine, 1)?,
        ];
        let head = Conv::build(
            &mut store,
            "decoder.head",
            ConvSpec {
                bias: true,
                norm: false,
                relu: false,
                ..ConvSpec::pointwise(layout.refine, 1)
            },
        )?;
        Ok(Model {
            net: Net {
                config: config.clone(),
                layout,
                stem,
                blocks,
                spp,
                decoder: Decoder {
                    low_level,
                    refine,
                    head,
                },
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn layout(&self) -> &Layout {
        &self.net.layout
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.store)
    }

    pub fn blocks(&self) -> &[InvertedResidual] {
        &self.net.blocks
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.net.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::dim(format!(
                "model expects Nx3x{s}x{s} input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward: batch statistics (running statistics are
    /// updated), dropout active, parameters registered as `ParamId(i)` in
    /// store order. Returns the probability map.
    pub fn forward_train(&mut self, tape: &mut GradTape, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Var> {
        self.check_input(x)?;
        let Model { net, store } = self;
        let mut ctx = Ctx::new(tape, &store.params, &mut store.norms, NormMode::Train);
        let xv = ctx.tape.input(x.clone());
        net.run(&mut ctx, xv, Some(rng))
    }

    /// Inference-mode forward: running statistics, no dropout. Does not
    /// modify the model.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut norms = self.store.norms.clone();
        let mut tape = GradTape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store.params, &mut norms, NormMode::Inference);
        let xv = ctx.tape.input(x.clone());
        let p = self.net.run(&mut ctx, xv, None)?;
        Ok(tape.value(p).clone())
    }
}
