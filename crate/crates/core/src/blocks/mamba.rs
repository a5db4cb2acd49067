use rand::Rng;

use crate::blocks::attention::CrossAttention;
use crate::blocks::conv::conv_on_tape;
use crate::blocks::{batched, unbatch, BlockConfig, BlockVariant};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::ssm::{init_delta_bias, init_s4d_real, ssm_on_tape, SsmVars};

pub const NORM_EPS: f64 = 1e-5;

/// Layer-norm scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[width]), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct SsmParamIds {
    pub a_diag: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
}

/// The original Mamba block: pre-norm, gated SSM branch, residual.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub config: BlockConfig,
    pub norm: Norm,
    /// `[D_in, 2·E·D_in]`, emits the SSM input and the gate.
    pub in_proj: ParamId,
    /// `[K, E·D_in]`
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SsmParamIds,
    /// `[E·D_in, D_in]`
    pub out_proj: ParamId,
}

impl MambaBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, c, n, k) = (config.d_in, config.inner(), config.n_state, config.conv_width);
        let s = config.selection.source_width(c);
        let name = |p: &str| format!("{prefix}.{p}");
        let b_in = 1.0 / (d as f64).sqrt();
        let b_inner = 1.0 / (c as f64).sqrt();
        let b_sel = 1.0 / (s as f64).sqrt();
        let b_conv = 1.0 / (k as f64).sqrt();

        let norm = Norm::new(store, &name("norm"), d);
        let in_proj = store.add(name("in_proj"), Tensor::uniform(&[d, 2 * c], -b_in, b_in, rng), true);
        let conv_w = store.add(name("conv.w"), Tensor::uniform(&[k, c], -b_conv, b_conv, rng), true);
        let conv_b = store.add(name("conv.b"), Tensor::uniform(&[c], -b_conv, b_conv, rng), false);
        let ssm = SsmParamIds {
            a_diag: store.add(name("ssm.a_diag"), init_s4d_real(n)?, false),
            w_b: store.add(name("ssm.w_b"), Tensor::uniform(&[n, s], -b_sel, b_sel, rng), true),
            w_c: store.add(name("ssm.w_c"), Tensor::uniform(&[n, s], -b_sel, b_sel, rng), true),
            w_delta: store.add(name("ssm.w_delta"), Tensor::uniform(&[1, s], -b_sel, b_sel, rng), true),
            delta_bias: store.add(name("ssm.delta_bias"), Tensor::from_vec(vec![init_delta_bias(rng)]), false),
        };
        let out_proj = store.add(name("out_proj"), Tensor::uniform(&[c, d], -b_inner, b_inner, rng), true);
        Ok(Self {
            config: config.clone(),
            norm,
            in_proj,
            conv_w,
            conv_b,
            ssm,
            out_proj,
        })
    }

    /// Residual branch only: `out_proj(dropout(ssm(silu(conv(u))) ⊙ silu(z)))`.
    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let c = cfg.inner();
        let xn = self.norm.forward(tape, store, x)?;
        let w_in = tape.param(store, self.in_proj);
        let uz = tape.matmul(xn, w_in)?;
        let uz = tape.dropout(uz, cfg.dropout_p)?;
        let u = tape.slice_last(uz, 0, c)?;
        let z = tape.slice_last(uz, c, c)?;

        let cw = tape.param(store, self.conv_w);
        let cb = tape.param(store, self.conv_b);
        let u = conv_on_tape(tape, u, cw, cb)?;
        let u = tape.silu(u)?;

        let vars = SsmVars {
            a_diag: tape.param(store, self.ssm.a_diag),
            w_b: tape.param(store, self.ssm.w_b),
            w_c: tape.param(store, self.ssm.w_c),
            w_delta: tape.param(store, self.ssm.w_delta),
            delta_bias: tape.param(store, self.ssm.delta_bias),
        };
        let y = ssm_on_tape(tape, u, vars, cfg.selection, cfg.scan)?;
        let gate = tape.silu(z)?;
        let gated = tape.mul(y, gate)?;
        let gated = tape.dropout(gated, cfg.dropout_p)?;
        let w_out = tape.param(store, self.out_proj);
        tape.matmul(gated, w_out)
    }

    /// `x + branch(x)` over `x: [B, L, D_in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let b = self.branch(tape, store, x)?;
        tape.add(x, b)
    }
}

/// One encoder layer: a plain block, or a forward/backward pair whose branch
/// outputs are summed before the shared residual.
#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Unidirectional(MambaBlock),
    Bidirectional { fwd: MambaBlock, bwd: MambaBlock },
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &BlockConfig, rng: &mut R) -> Result<Self> {
        match config.variant {
            BlockVariant::Unidirectional => Ok(Self::Unidirectional(MambaBlock::new(store, prefix, config, rng)?)),
            BlockVariant::Bidirectional => Ok(Self::Bidirectional {
                fwd: MambaBlock::new(store, &format!("{prefix}.fwd"), config, rng)?,
                bwd: MambaBlock::new(store, &format!("{prefix}.bwd"), config, rng)?,
            }),
            BlockVariant::Decoder => Err(Error::Config("decoder variant is not an encoder layer".into())),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::Unidirectional(b) => b.forward(tape, store, x),
            Self::Bidirectional { fwd, bwd } => bidirectional(tape, store, fwd, bwd, x),
        }
    }
}

fn bidirectional(tape: &mut Tape, store: &ParamStore, fwd: &MambaBlock, bwd: &MambaBlock, x: Var) -> Result<Var> {
    let f = fwd.branch(tape, store, x)?;
    let xr = tape.reverse_time(x)?;
    let br = bwd.branch(tape, store, xr)?;
    let b = tape.reverse_time(br)?;
    let sum = tape.add(f, b)?;
    tape.add(x, sum)
}

/// Mamba block followed by pre-normed cross-attention over encoder states.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub block: MambaBlock,
    pub cross_norm: Norm,
    pub cross: CrossAttention,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &BlockConfig, rng: &mut R) -> Result<Self> {
        let config = BlockConfig {
            variant: BlockVariant::Decoder,
            ..config.clone()
        };
        config.validate()?;
        let block = MambaBlock::new(store, &format!("{prefix}.mamba"), &config, rng)?;
        let cross_norm = Norm::new(store, &format!("{prefix}.cross_norm"), config.d_in);
        let cross = CrossAttention::new(store, &format!("{prefix}.cross"), config.d_in, config.n_heads, rng);
        Ok(Self { block, cross_norm, cross })
    }

    /// `z = block(y); z + dropout(cross(norm(z), enc))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, enc: Var) -> Result<Var> {
        let z = self.block.forward(tape, store, y)?;
        let zn = self.cross_norm.forward(tape, store, z)?;
        let a = self.cross.forward(tape, store, zn, enc)?;
        let a = tape.dropout(a, self.block.config.dropout_p)?;
        tape.add(z, a)
    }
}

/// Deterministic-mode forward of one block over `[L, D]` or `[B, L, D]`.
pub fn mamba_block_forward(x: &Tensor, blk: &MambaBlock, store: &ParamStore) -> Result<Tensor> {
    let (x3, squeeze) = batched(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x3)?;
    let y = blk.forward(&mut tape, store, xv)?;
    unbatch(tape.value(y), squeeze)
}

pub fn bimamba_encoder_forward(x: &Tensor, fwd: &MambaBlock, bwd: &MambaBlock, store: &ParamStore) -> Result<Tensor> {
    if fwd.config != bwd.config {
        return Err(Error::contract("forward and backward branches must share one BlockConfig"));
    }
    let (x3, squeeze) = batched(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x3)?;
    let y = bidirectional(&mut tape, store, fwd, bwd, xv)?;
    unbatch(tape.value(y), squeeze)
}

pub fn decoder_block_forward(y_in: &Tensor, enc: &Tensor, layer: &DecoderLayer, store: &ParamStore) -> Result<Tensor> {
    let (y3, squeeze) = batched(y_in)?;
    let (e3, _) = batched(enc)?;
    let mut tape = Tape::new();
    let yv = tape.leaf(y3)?;
    let ev = tape.leaf(e3)?;
    let out = layer.forward(&mut tape, store, yv, ev)?;
    unbatch(tape.value(out), squeeze)
}
