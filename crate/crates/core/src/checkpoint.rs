//! Binary model checkpoints.
//!
//! Self-contained little-endian format (magic `CVRM`, version 1) holding the
//! base network and every attached adapter, including gate states. Encoding
//! is deterministic: adapters serialize in id order.

use alloc::vec::Vec;

use crate::bytes::{Reader, WriteBytes};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{Activation, AdaptedModel, AdapterLayer, BaseModel, Layer, LoraAdapter};

const MAGIC: &[u8; 4] = b"CVRM";
const VERSION: u8 = 1;

pub fn encode_model(model: &AdaptedModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.put_u8(VERSION);
    buf.put_u8(model.base().is_frozen() as u8);
    let layers = model.base().layers();
    buf.put_u32(layers.len() as u32);
    for layer in layers {
        buf.put_u32(layer.output_dim() as u32);
        buf.put_u32(layer.input_dim() as u32);
        buf.put_u8(layer.activation().id_byte());
    }
    for layer in layers {
        for v in layer.weight().values() {
            buf.put_f64(*v);
        }
        for v in layer.bias() {
            buf.put_f64(*v);
        }
    }
    buf.put_u32(model.adapters.len() as u32);
    for adapter in model.adapters.values() {
        buf.put_string(adapter.id());
        buf.put_u32(adapter.layers().len() as u32);
        for al in adapter.layers() {
            buf.put_u32(al.layer_index() as u32);
            buf.put_u32(al.rank() as u32);
            buf.put_f64(al.alpha());
            buf.put_u8(al.gate() as u8);
            for v in al.down().values() {
                buf.put_f64(*v);
            }
            for v in al.up().values() {
                buf.put_f64(*v);
            }
        }
    }
    buf
}

pub fn decode_model(bytes: &[u8]) -> Result<AdaptedModel> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let frozen = flag(r.u8()?)?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::MalformedPayload("implausible layer count"));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let d_out = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let activation = Activation::from_byte(r.u8()?)?;
        shapes.push((d_out, d_in, activation));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(d_out, d_in, activation) in &shapes {
        let values = r.f64_vec(d_out.checked_mul(d_in).ok_or(Error::LengthOverflow(u64::MAX))?)?;
        let weight = DenseMatrix::new(d_out, d_in, values)?;
        let bias = r.f64_vec(d_out)?;
        layers.push(Layer::new(weight, bias, activation)?);
    }
    let mut base = BaseModel::new(layers)?;
    base.set_frozen(frozen);
    let mut model = AdaptedModel::new(base);

    let n_adapters = r.u32()? as usize;
    if n_adapters > 4096 {
        return Err(Error::MalformedPayload("implausible adapter count"));
    }
    for _ in 0..n_adapters {
        let id = r.string()?;
        if id.is_empty() {
            return Err(Error::MalformedPayload("empty adapter id"));
        }
        let n_attach = r.u32()? as usize;
        if n_attach == 0 || n_attach > 1024 {
            return Err(Error::MalformedPayload("implausible attachment count"));
        }
        let mut attach = Vec::with_capacity(n_attach);
        for _ in 0..n_attach {
            let layer_index = r.u32()? as usize;
            let rank = r.u32()? as usize;
            let alpha = r.f64()?;
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::MalformedPayload("non-positive alpha"));
            }
            let gate = flag(r.u8()?)?;
            let (d_out, d_in) = match shapes.get(layer_index) {
                Some(&(o, i, _)) => (o, i),
                None => return Err(Error::UnknownLayer(layer_index)),
            };
            if rank == 0 || rank > d_in.min(d_out) {
                return Err(Error::MalformedPayload("adapter rank out of range"));
            }
            let down = DenseMatrix::new(rank, d_in, r.f64_vec(rank * d_in)?)?;
            let up = DenseMatrix::new(d_out, rank, r.f64_vec(d_out * rank)?)?;
            attach.push(AdapterLayer {
                layer_index,
                rank,
                alpha,
                gate,
                down,
                up,
            });
        }
        model.insert_adapter(LoraAdapter { id, layers: attach })?;
    }
    r.finish()?;
    Ok(model)
}

fn flag(b: u8) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::MalformedPayload("flag byte must be 0 or 1")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AdapterConfig;

    fn sample_model() -> AdaptedModel {
        let mut base = BaseModel::random(&[6, 8, 4, 1], 5).unwrap();
        base.freeze();
        let mut model = AdaptedModel::new(base);
        for (id, rank, layers) in [("adv_a", 2, vec![0, 1]), ("adv_b", 1, vec![1, 2])] {
            model
                .attach_adapter(
                    &AdapterConfig {
                        id: id.into(),
                        rank,
                        alpha: Some(3.0),
                        layers,
                    },
                    9,
                )
                .unwrap();
        }
        model.set_gate("adv_b", 1, false).unwrap();
        let n = model.param_count("adv_a").unwrap();
        let delta: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
        model.apply_update("adv_a", &delta).unwrap();
        model
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let model = sample_model();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(model, back);
        // Deterministic encoding.
        assert_eq!(bytes, encode_model(&back));
    }

    #[test]
    fn roundtrip_model_behaves_identically() {
        let model = sample_model();
        let back = decode_model(&encode_model(&model)).unwrap();
        let x = DenseMatrix::new(2, 6, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(
            model.forward(Some("adv_a"), &x).unwrap(),
            back.forward(Some("adv_a"), &x).unwrap()
        );
        assert_eq!(
            model.signature("adv_b").unwrap(),
            back.signature("adv_b").unwrap()
        );
        assert!(back.base().is_frozen());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = sample_model();
        let bytes = encode_model(&model);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::BadVersion(9))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode_model(truncated).is_err());

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(decode_model(&extended), Err(Error::TrailingBytes)));

        // NaN weight is caught by matrix validation.
        let mut bad = bytes;
        // First weight value sits after magic(4) + ver(1) + frozen(1) +
        // n_layers(4) + 3 shape records of 9 bytes each.
        let off = 4 + 1 + 1 + 4 + 3 * 9;
        bad[off..off + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_model(&bad), Err(Error::NonFinite(_))));
    }
}
