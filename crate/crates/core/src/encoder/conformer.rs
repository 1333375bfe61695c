use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{block_prefix, EncoderConfig, FeatureSequence, Mode};
use crate::error::{shape_err, Result};
use crate::numerics::{dropout, Init, ParamSpec, Tape, Var};

/// Hidden states at every layer boundary plus the projected output `C`.
///
/// `taps[0]` is the conformer-stack input; `taps[l]` is the output of block
/// `l` and the input of block `l + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSequence {
    pub taps: Vec<Var>,
    pub output: Var,
    /// Which blocks layerdrop skipped on this pass.
    pub skipped: Vec<bool>,
}

impl ContextSequence {
    pub fn tap(&self, layer: usize) -> Option<Var> {
        self.taps.get(layer).copied()
    }
}

/// Hook invoked at each layer boundary, used to inject language conditioning.
pub trait LayerHook {
    fn at_layer(&self, tape: &mut Tape<'_>, layer: usize, hidden: Var) -> Result<Var>;
}

pub(super) fn block_param_specs(cfg: &EncoderConfig, b: usize, out: &mut Vec<ParamSpec>) {
    let p = block_prefix(b);
    let d = cfg.model_dim;
    let ln = |out: &mut Vec<ParamSpec>, name: &str| {
        out.push(ParamSpec::new(format!("{p}.{name}.g"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.{name}.b"), &[d], Init::Zeros));
    };
    let lin = |out: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize| {
        out.push(ParamSpec::new(
            format!("{p}.{name}.w"),
            &[i, o],
            Init::LeCun,
        ));
        out.push(ParamSpec::new(format!("{p}.{name}.b"), &[o], Init::Zeros));
    };
    for ff in ["ff1", "ff2"] {
        ln(out, &format!("{ff}.ln"));
        lin(out, &format!("{ff}.up"), d, cfg.ffn_dim);
        lin(out, &format!("{ff}.down"), cfg.ffn_dim, d);
    }
    ln(out, "mhsa.ln");
    for m in ["q", "k", "v", "o"] {
        lin(out, &format!("mhsa.{m}"), d, d);
    }
    ln(out, "conv.ln");
    lin(out, "conv.pw1", d, 2 * d);
    out.push(ParamSpec::new(
        format!("{p}.conv.dw.w"),
        &[cfg.conv_kernel_size, d],
        Init::Normal(1.0 / libm::sqrt(cfg.conv_kernel_size as f64)),
    ));
    out.push(ParamSpec::new(format!("{p}.conv.dw.b"), &[d], Init::Zeros));
    ln(out, "conv.norm");
    lin(out, "conv.pw2", d, d);
    ln(out, "final_ln");
}

struct Block<'a> {
    cfg: &'a EncoderConfig,
    prefix: alloc::string::String,
    mode: Mode,
}

impl Block<'_> {
    fn p(&self, tape: &mut Tape<'_>, name: &str) -> Result<Var> {
        tape.param_named(&format!("{}.{name}", self.prefix))
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{name}.g"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{name}.w"))?;
        let b = self.p(tape, &format!("{name}.b"))?;
        tape.linear(x, w, Some(b))
    }

    fn drop<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, rng: &mut R) -> Result<Var> {
        match self.mode {
            Mode::Train => dropout(tape, x, self.cfg.dropout, rng),
            Mode::Eval => Ok(x),
        }
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
        let h = self.layer_norm(tape, x, &format!("{name}.ln"))?;
        let h = self.linear(tape, h, &format!("{name}.up"))?;
        let h = tape.silu(h)?;
        self.linear(tape, h, &format!("{name}.down"))
    }

    fn self_attention(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.layer_norm(tape, x, "mhsa.ln")?;
        let q = self.linear(tape, h, "mhsa.q")?;
        let k = self.linear(tape, h, "mhsa.k")?;
        let v = self.linear(tape, h, "mhsa.v")?;
        let heads = self.cfg.attention_heads;
        let dh = self.cfg.model_dim / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (s, e) = (i * dh, (i + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax(scores)?;
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.linear(tape, cat, "mhsa.o")
    }

    fn convolution(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let d = self.cfg.model_dim;
        let h = self.layer_norm(tape, x, "conv.ln")?;
        let h = self.linear(tape, h, "conv.pw1")?;
        let a = tape.slice_cols(h, 0, d)?;
        let gate = tape.slice_cols(h, d, 2 * d)?;
        let gate = tape.sigmoid(gate)?;
        let h = tape.mul(a, gate)?;
        let w = self.p(tape, "conv.dw.w")?;
        let b = self.p(tape, "conv.dw.b")?;
        let h = tape.depthwise_conv1d(h, w)?;
        let h = tape.add_row(h, b)?;
        let h = self.layer_norm(tape, h, "conv.norm")?;
        let h = tape.silu(h)?;
        self.linear(tape, h, "conv.pw2")
    }

    /// Pre-norm macaron block: ½FFN, MHSA, conv, ½FFN, final norm.
    fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, rng: &mut R) -> Result<Var> {
        let f = self.feed_forward(tape, x, "ff1")?;
        let f = self.drop(tape, f, rng)?;
        let f = tape.scale(f, 0.5)?;
        let x = tape.add(x, f)?;

        let a = self.self_attention(tape, x)?;
        let a = self.drop(tape, a, rng)?;
        let x = tape.add(x, a)?;

        let c = self.convolution(tape, x)?;
        let c = self.drop(tape, c, rng)?;
        let x = tape.add(x, c)?;

        let f = self.feed_forward(tape, x, "ff2")?;
        let f = self.drop(tape, f, rng)?;
        let f = tape.scale(f, 0.5)?;
        let x = tape.add(x, f)?;

        self.layer_norm(tape, x, "final_ln")
    }
}

/// Runs the conformer stack over (masked) features.
///
/// The positional table is added first; `hook` then sees the stack input as
/// layer 0 and every block output as layers `1..=num_blocks`. In train mode
/// each block is skipped independently with probability `layerdrop`.
pub fn context_encode<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    cfg: &EncoderConfig,
    corrupted: FeatureSequence,
    hook: Option<&dyn LayerHook>,
    mode: Mode,
    rng: &mut R,
) -> Result<ContextSequence> {
    let len = corrupted.len;
    if tape.shape(corrupted.values) != [len, cfg.model_dim] {
        return Err(shape_err(
            "context_encode",
            format!(
                "expected [{len}, {}], got {:?}",
                cfg.model_dim,
                tape.shape(corrupted.values)
            ),
        ));
    }
    if len > cfg.max_positions {
        return Err(shape_err(
            "context_encode",
            format!(
                "sequence length {len} exceeds max_positions {}",
                cfg.max_positions
            ),
        ));
    }
    let pos = tape.param_named("enc.pos")?;
    let idx: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(pos, &idx)?;
    let mut h = tape.add(corrupted.values, pos)?;
    if let Some(hook) = hook {
        h = hook.at_layer(tape, 0, h)?;
    }
    let mut taps = Vec::with_capacity(cfg.num_blocks + 1);
    let mut skipped = Vec::with_capacity(cfg.num_blocks);
    taps.push(h);
    for b in 0..cfg.num_blocks {
        let skip = match mode {
            Mode::Train => cfg.layerdrop > 0.0 && rng.random::<f64>() < cfg.layerdrop,
            Mode::Eval => false,
        };
        skipped.push(skip);
        if !skip {
            let block = Block {
                cfg,
                prefix: block_prefix(b),
                mode,
            };
            h = block.forward(tape, h, rng)?;
        }
        if let Some(hook) = hook {
            h = hook.at_layer(tape, b + 1, h)?;
        }
        taps.push(h);
    }
    let w = tape.param_named("enc.proj.w")?;
    let bias = tape.param_named("enc.proj.b")?;
    let output = tape.linear(h, w, Some(bias))?;
    Ok(ContextSequence {
        taps,
        output,
        skipped,
    })
}
