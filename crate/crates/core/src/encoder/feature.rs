use rand::Rng;

use super::{EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::numerics::{dropout, Tape, Var};

/// Encoder-rate features `Z`, shape `[T', model_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSequence {
    pub values: Var,
    pub len: usize,
}

/// Two stride-2 "same"-padded 2-D convolutions over `[T, F]` frames, then a
/// linear projection of the flattened `(F'' x channels)` map to `model_dim`.
pub fn feature_encode<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    cfg: &EncoderConfig,
    frames: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<FeatureSequence> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_feature_dim {
        return Err(crate::error::shape_err(
            "feature_encode",
            alloc::format!("expected [T, {}], got {shape:?}", cfg.input_feature_dim),
        ));
    }
    let t = shape[0];
    if t < cfg.min_frames() {
        return Err(Error::InputTooShort {
            min: cfg.min_frames(),
            got: t,
        });
    }
    let [c1, c2] = cfg.conv_channels;
    let [(t1, f1), (t2, f2)] = cfg.conv_output_dims(t);
    let kernel = (cfg.conv_filter[0], cfg.conv_filter[1]);
    let s1 = (cfg.conv_strides[0][0], cfg.conv_strides[0][1]);
    let s2 = (cfg.conv_strides[1][0], cfg.conv_strides[1][1]);

    let w1 = tape.param_named("fe.conv1.w")?;
    let b1 = tape.param_named("fe.conv1.b")?;
    let w2 = tape.param_named("fe.conv2.w")?;
    let b2 = tape.param_named("fe.conv2.b")?;
    let wp = tape.param_named("fe.proj.w")?;
    let bp = tape.param_named("fe.proj.b")?;

    let cols1 = tape.im2col(frames, (t, cfg.input_feature_dim, 1), kernel, s1)?;
    let h1 = tape.linear(cols1, w1, Some(b1))?;
    let h1 = tape.silu(h1)?;
    let cols2 = tape.im2col(h1, (t1, f1, c1), kernel, s2)?;
    let h2 = tape.linear(cols2, w2, Some(b2))?;
    let h2 = tape.silu(h2)?;
    let flat = tape.reshape(h2, &[t2, f2 * c2])?;
    let z = tape.linear(flat, wp, Some(bp))?;
    let z = match mode {
        Mode::Train => dropout(tape, z, cfg.dropout, rng)?,
        Mode::Eval => z,
    };
    Ok(FeatureSequence { values: z, len: t2 })
}

/// Replaces the listed timesteps with the shared learned mask embedding.
pub fn apply_mask(
    tape: &mut Tape<'_>,
    features: FeatureSequence,
    mask_indices: &[usize],
) -> Result<FeatureSequence> {
    if let Some(&bad) = mask_indices.iter().find(|&&i| i >= features.len) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: features.len,
        });
    }
    if mask_indices.is_empty() {
        return Ok(features);
    }
    let emb = tape.param_named("enc.mask_emb")?;
    let values = tape.replace_rows(features.values, emb, mask_indices)?;
    Ok(FeatureSequence {
        values,
        len: features.len,
    })
}
