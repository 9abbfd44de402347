//! Encoder checkpoint format.
//!
//! Layout (little-endian): magic `UENC`, u32 version, the configuration
//! (u32 stage count; per stage u32 channels, heads, blocks, window; u32 input
//! and output channels; f64 canonical grid; f64 rope base, jitter and scaling
//! degrees; u8 rope enabled and perturb flags), u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u32 rank, u32 dims and f32 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EncoderConfig, Params, StageConfig, Tensor};
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::rope::RopeConfig;

pub const ENCODER_MAGIC: &[u8; 4] = b"UENC";
pub const ENCODER_VERSION: u32 = 1;

pub fn write_encoder(cfg: &EncoderConfig, params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_encoder_to(cfg, params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_encoder_to(cfg: &EncoderConfig, params: &Params, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ENCODER_MAGIC);
    buf.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
    let u32s = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32s(&mut buf, cfg.stages.len());
    for st in &cfg.stages {
        for v in [st.channels, st.heads, st.blocks, st.window] {
            u32s(&mut buf, v);
        }
    }
    u32s(&mut buf, cfg.in_channels);
    u32s(&mut buf, cfg.out_channels);
    for v in [cfg.canonical_grid, cfg.rope.base, cfg.rope.jitter_degree, cfg.rope.scaling_degree] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(cfg.rope.enabled as u8);
    buf.push(cfg.rope.perturb as u8);
    write_tensors(&mut buf, params)?;
    out.write_all(&buf)?;
    Ok(())
}

/// Tensor count followed by every tensor's name, shape and f32 data.
pub(crate) fn write_tensors(buf: &mut Vec<u8>, params: &Params) -> Result<()> {
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(())
}

pub(crate) fn read_tensors(r: &mut Reader) -> Result<Params> {
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(Error::parse(r.pos - 4, "implausible tensor rank"));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        tensors.push(Tensor { name, shape, data });
    }
    Ok(Params { tensors })
}

pub fn read_encoder(path: impl AsRef<Path>) -> Result<(EncoderConfig, Params)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, 0);
    let out = read_section(&mut r)?;
    r.finish()?;
    Ok(out)
}

pub fn read_encoder_from(bytes: &[u8]) -> Result<(EncoderConfig, Params)> {
    let mut r = Reader::new(bytes, 0);
    let out = read_section(&mut r)?;
    r.finish()?;
    Ok(out)
}

/// Reads one encoder section starting at the reader's position.
pub(crate) fn read_section(r: &mut Reader) -> Result<(EncoderConfig, Params)> {
    if r.bytes.len() < r.pos + 4 || &r.bytes[r.pos..r.pos + 4] != ENCODER_MAGIC {
        return Err(Error::BadMagic { expected: "UENC" });
    }
    r.pos += 4;
    let version = r.u32()?;
    if version != ENCODER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ENCODER_VERSION,
        });
    }
    let n_stages = r.u32()? as usize;
    if n_stages > 64 {
        return Err(Error::parse(r.pos - 4, "implausible stage count"));
    }
    let mut stages = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stages.push(StageConfig {
            channels: r.u32()? as usize,
            heads: r.u32()? as usize,
            blocks: r.u32()? as usize,
            window: r.u32()? as usize,
        });
    }
    let in_channels = r.u32()? as usize;
    let out_channels = r.u32()? as usize;
    let canonical_grid = r.f64()?;
    let base = r.f64()?;
    let jitter_degree = r.f64()?;
    let scaling_degree = r.f64()?;
    let enabled = r.u8()? != 0;
    let perturb = r.u8()? != 0;
    let cfg = EncoderConfig {
        rope: RopeConfig {
            base,
            head_dim: stages.first().map_or(6, |s| s.head_dim()),
            jitter_degree,
            scaling_degree,
            enabled,
            perturb,
        },
        stages,
        in_channels,
        out_channels,
        canonical_grid,
    };
    let params = read_tensors(r)?;
    let enc = super::Encoder::new(cfg.clone())?;
    enc.check_params(&params)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::rng::rng_for;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let mut params = enc.init_params(&mut rng_for(&[3]));
        params.scalars_mut().for_each(|v| *v = *v as f32 as f64);
        let mut buf = Vec::new();
        write_encoder_to(&cfg, &params, &mut buf).unwrap();
        let (cfg2, back) = read_encoder_from(&buf).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, params);
    }

    #[test]
    fn rejects_other_magic_and_truncation() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let params = enc.init_params(&mut rng_for(&[3]));
        let mut buf = Vec::new();
        write_encoder_to(&cfg, &params, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_encoder_from(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(read_encoder_from(&buf[..buf.len() - 3]), Err(Error::Parse { .. })));
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(read_encoder_from(&v2), Err(Error::Version { found: 2, .. })));
    }
}
