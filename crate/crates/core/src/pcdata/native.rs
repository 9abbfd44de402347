//! Fixed-layout binary container that keeps modality masks, labels and the
//! domain tag.
//!
//! Layout (all little-endian): magic `UPCF`, u32 version, u8 domain,
//! f64 native grid, u64 point count N, then N×3 f32 coords, N×3 f32 colors,
//! N×3 f32 normals, N u8 mask, u8 labels-present flag and, when the flag is
//! 1, N i32 labels.
//!
//! Channels are stored as f32. A cloud whose values are all representable in
//! f32 survives a write/read round trip bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Domain, PointCloud};
use crate::bytes::Reader;
use crate::error::{Error, Result};

pub const NATIVE_MAGIC: &[u8; 4] = b"UPCF";
pub const NATIVE_VERSION: u32 = 1;

pub fn write_native(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_native_to(pc, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_native_to(pc: &PointCloud, out: &mut impl Write) -> Result<()> {
    pc.check()?;
    let mut buf = Vec::with_capacity(25 + pc.len() * 41);
    buf.extend_from_slice(NATIVE_MAGIC);
    buf.extend_from_slice(&NATIVE_VERSION.to_le_bytes());
    buf.push(pc.domain.to_u8());
    buf.extend_from_slice(&pc.native_grid.to_le_bytes());
    buf.extend_from_slice(&(pc.len() as u64).to_le_bytes());
    for rows in [&pc.coords, &pc.colors, &pc.normals] {
        for row in rows.iter() {
            for v in row {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&pc.mask);
    match &pc.labels {
        Some(labels) => {
            buf.push(1);
            for l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_native(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_native_from(&fs::read(path)?)
}

fn rows(cur: &mut Reader, n: usize) -> Result<Vec<[f64; 3]>> {
    let at = cur.pos;
    let flat = cur.f32s(n.checked_mul(3).ok_or_else(|| Error::parse(at, "count overflows"))?)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn read_native_from(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != NATIVE_MAGIC {
        return Err(Error::BadMagic { expected: "UPCF" });
    }
    let mut cur = Reader::new(bytes, 4);
    let version = cur.u32()?;
    if version != NATIVE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: NATIVE_VERSION,
        });
    }
    let at = cur.pos;
    let domain = Domain::from_u8(cur.u8()?)
        .ok_or_else(|| Error::parse(at, "unknown domain tag"))?;
    let native_grid = cur.f64()?;
    let at = cur.pos;
    let n = usize::try_from(cur.u64()?).map_err(|_| Error::parse(at, "point count overflows"))?;
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let coords = rows(&mut cur, n)?;
    let colors = rows(&mut cur, n)?;
    let normals = rows(&mut cur, n)?;
    let mask = cur.take(n)?.to_vec();
    let at = cur.pos;
    let labels = match cur.u8()? {
        0 => None,
        1 => Some(
            cur.take(n.checked_mul(4).ok_or_else(|| Error::parse(at, "count overflows"))?)?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => return Err(Error::parse(at, "bad labels flag")),
    };
    cur.finish()?;
    Ok(PointCloud {
        coords,
        colors,
        normals,
        mask,
        labels,
        domain,
        native_grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcdata::{COLOR_BIT, NORMAL_BIT};
    use proptest::prelude::*;

    fn sample() -> PointCloud {
        let mut pc = PointCloud::new(
            vec![[0.5, -1.25, 3.0], [10.0, 0.0, -0.125], [1.0, 1.0, 1.0]],
            Domain::Outdoor,
            0.05,
        )
        .with_colors(vec![[0.25, 0.5, 1.0], [0.0, 0.0, 0.0], [1.0, 0.75, 0.5]])
        .with_normals(vec![[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
        .with_labels(vec![3, -1, 7]);
        pc.clear_color(1);
        pc.clear_normal(2);
        pc
    }

    #[test]
    fn roundtrip_with_labels() {
        let pc = sample();
        let mut buf = Vec::new();
        write_native_to(&pc, &mut buf).unwrap();
        let back = read_native_from(&buf).unwrap();
        assert_eq!(back, pc);
        assert_eq!(back.labels, Some(vec![3, -1, 7]));
        let mut again = Vec::new();
        write_native_to(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn wrong_magic() {
        let mut buf = Vec::new();
        write_native_to(&sample(), &mut buf).unwrap();
        buf[0] = b'X';
        let err = read_native_from(&buf).unwrap_err();
        assert_eq!(err.to_string(), "bad magic: expected \"UPCF\"");
    }

    #[test]
    fn wrong_version_and_truncation() {
        let mut buf = Vec::new();
        write_native_to(&sample(), &mut buf).unwrap();
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(read_native_from(&v2), Err(Error::Version { found: 2, .. })));
        assert!(matches!(read_native_from(&buf[..buf.len() - 1]), Err(Error::Parse { .. })));
        let mut longer = buf.clone();
        longer.push(0);
        assert!(matches!(read_native_from(&longer), Err(Error::Parse { .. })));
    }

    fn f32_row() -> impl Strategy<Value = [f64; 3]> {
        prop::array::uniform3(-1e4f32..1e4f32).prop_map(|r| r.map(|v| v as f64))
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(
            rows in prop::collection::vec((f32_row(), any::<u8>(), prop::array::uniform3(0u8..=255), any::<i32>()), 1..40),
            with_labels in any::<bool>(),
            domain in 0u8..3,
            grid in 1e-4f64..10.0,
        ) {
            let n = rows.len();
            let mut pc = PointCloud::new(rows.iter().map(|r| r.0).collect(), Domain::from_u8(domain).unwrap(), grid);
            for (i, (_, bits, rgb, _)) in rows.iter().enumerate() {
                if bits & COLOR_BIT != 0 {
                    pc.colors[i] = rgb.map(|c| (c as f32 / 255.0) as f64);
                    pc.mask[i] |= COLOR_BIT;
                }
                if bits & NORMAL_BIT != 0 {
                    pc.normals[i] = [0.0, 1.0, 0.0];
                    pc.mask[i] |= NORMAL_BIT;
                }
            }
            if with_labels {
                pc.labels = Some(rows.iter().map(|r| r.3).collect());
            }
            prop_assert_eq!(pc.len(), n);
            let mut buf = Vec::new();
            write_native_to(&pc, &mut buf).unwrap();
            let back = read_native_from(&buf).unwrap();
            prop_assert_eq!(&back, &pc);
            let mut again = Vec::new();
            write_native_to(&back, &mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
