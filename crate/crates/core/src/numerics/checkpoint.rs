//! Flat binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   b"BIMAMBA\0"
//! version    u8        1
//! header     u32 LE length, then UTF-8 text (key=value lines, may be empty)
//! records    until EOF, each:
//!              u32 LE name length, UTF-8 name,
//!              u32 LE rank, rank × u64 LE extents,
//!              product(extents) × f64 LE values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"BIMAMBA\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write<'a, W: Write>(
    mut w: W,
    header: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&len_u32(header.len())?.to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for (name, t) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let header_len = read_u32(&mut r)? as usize;
    let header = read_string(&mut r, header_len)?;

    let mut tensors = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name = read_string(&mut r, u32::from_le_bytes(len) as usize)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated record `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { header, tensors })
}

/// Writes every parameter of `store`, in store order.
pub fn save(path: impl AsRef<Path>, header: &str, store: &ParamStore) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write(file, header, store.iter().map(|(_, e)| (e.name.as_str(), &e.value)))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read(BufReader::new(File::open(path)?))
}

impl Checkpoint {
    /// Copies every record into the parameter of the same name. Missing,
    /// extra or mis-shaped records are errors.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} records for {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian_and_fixed() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, "k=v", [("w", &t)]).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"BIMAMBA\0");
        expect.push(1);
        expect.extend_from_slice(&3u32.to_le_bytes());
        expect.extend_from_slice(b"k=v");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(b"w");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read(&b"NOTMAMBA\x01\0\0\0\0"[..]).is_err());
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        write(&mut buf, "", [("w", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read(&buf[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            header in "[a-z_.=0-9\n]{0,40}",
            records in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..3), any::<u64>()), 0..5),
        ) {
            let tensors: Vec<(String, Tensor)> = records
                .iter()
                .enumerate()
                .map(|(i, (shape, bits))| {
                    let t = Tensor::from_fn(shape, |j| f64::from_bits(bits.wrapping_add(j as u64 * 7919)));
                    (format!("p{i}.ü"), t)
                })
                .collect();
            let mut buf = Vec::new();
            write(&mut buf, &header, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            let back = read(&buf[..]).unwrap();
            prop_assert_eq!(&back.header, &header);
            prop_assert_eq!(back.tensors.len(), tensors.len());
            for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.shape(), t1.shape());
                let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b0, b1);
            }
        }
    }
}
