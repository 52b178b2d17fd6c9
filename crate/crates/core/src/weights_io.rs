//! Binary weight archive.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SWPL" | version u32 | entry count u32
//! per entry: name len u16 | name utf-8 | dtype u8 (1 = f32) | rank u8 | extents u64 × rank | payload
//! CRC32 of every preceding byte (u32)
//! ```
//!
//! Entries are written in the map's order, which for weights built from a
//! network definition is layer order, so saving the same weights twice gives
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netdef::ParamKind;
use crate::network::Weights;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWPL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Bytes taken by the fixed header and trailer.
pub const FRAME_OVERHEAD: usize = 4 + 4 + 4 + 4;

pub fn encode(weights: &Weights) -> Result<Vec<u8>> {
    let payload: usize = weights.iter().map(|(n, t)| 2 + n.len() + 2 + 8 * t.rank() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(weights.len()).map_err(|_| Error::invalid("too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in weights.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("{name}: rank too large")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Weights> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(Error::Integrity("archive shorter than its header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("archive version {version}")));
    }
    let count = r.u32()?;
    let mut weights = Weights::new();
    for _ in 0..count {
        let len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Integrity("entry name is not utf-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Unsupported(format!("{name}: dtype code {dtype}")));
        }
        let rank = usize::from(r.u8()?);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Integrity(format!("{name}: extent overflow")))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("{name}: extents overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if weights.insert(name.clone(), Tensor::new(&dims, data)?).is_some() {
            return Err(Error::Integrity(format!("duplicate entry {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(weights)
}

pub fn save(weights: &Weights, path: &Path) -> Result<()> {
    fs::write(path, encode(weights)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Weights> {
    decode(&fs::read(path)?)
}

/// Human-readable listing: `name<TAB>shape<TAB>trainable` per entry.
pub fn manifest_text(weights: &Weights) -> String {
    let mut s = String::from("# name\tshape\ttrainable\n");
    for (name, t) in weights.iter() {
        let shape: Vec<String> = t.dims().iter().map(ToString::to_string).collect();
        let trainable = ParamKind::from_name(name).map_or("-", |k| if k.is_trainable() { "yes" } else { "no" });
        s.push_str(&format!("{name}\t{}\t{trainable}\n", shape.join("x")));
    }
    s
}

/// Writes the archive plus a `<path>.txt` listing next to it.
pub fn save_with_manifest(weights: &Weights, path: &Path) -> Result<()> {
    save(weights, path)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(side, manifest_text(weights))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Weights {
        let mut w = Weights::new();
        w.insert("net.0.kernel", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * -0.37 + f32::EPSILON));
        w.insert("net.0.bias", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        w.insert("single", Tensor::new(&[1], vec![7.5]).unwrap());
        w
    }

    fn bits(w: &Weights) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        w.iter()
            .map(|(n, t)| (n.to_string(), t.dims().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_and_canonical() {
        let w = sample();
        let bytes = encode(&w).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(bits(&back), bits(&w));
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = encode(&sample()).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(matches!(decode(&bad), Err(Error::Integrity(_))), "byte {i}");
        }
    }

    #[test]
    fn unknown_dtype_and_version_are_unsupported() {
        let mut bytes = encode(&sample()).unwrap();
        let name_len = "net.0.kernel".len();
        let dtype_at = 12 + 2 + name_len;
        bytes[dtype_at] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));

        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sidecar_lists_trainability() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Weights::new();
        w.insert("n.1.gamma", Tensor::zeros(&[4]));
        w.insert("n.1.moving_mean", Tensor::zeros(&[4]));
        let p = dir.path().join("w.swpl");
        save_with_manifest(&w, &p).unwrap();
        let text = fs::read_to_string(dir.path().join("w.swpl.txt")).unwrap();
        assert!(text.contains("n.1.gamma\t4\tyes"));
        assert!(text.contains("n.1.moving_mean\t4\tno"));
        assert_eq!(bits(&load(&p).unwrap()), bits(&w));
    }
}
