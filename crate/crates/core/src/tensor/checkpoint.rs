//! Binary checkpoint format.
//!
//! ```text
//! "TODN" | version: u16 LE | records...
//! record = name_len: u32 LE | name: UTF-8 | rank: u8 | extents: u32 LE × rank | values: f32 LE × Π extents
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TODN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<'a, T: Real>(
    mut out: impl Write,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_byte_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut expected = b"TODN".to_vec();
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"XXXX\x01\x00"[..]).is_err());
        let t = Tensor::<f32>::zeros(vec![3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        buf.pop();
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            records in prop::collection::vec(
                ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = records
                .iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) * 0.37 - 100.0).collect();
                    (name.clone(), Tensor::new(shape.clone(), data).unwrap())
                })
                .collect();
            let mut first = Vec::new();
            write_checkpoint(&mut first, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            let back = read_checkpoint(&first[..]).unwrap();
            prop_assert_eq!(&back, &tensors);
            let mut second = Vec::new();
            write_checkpoint(&mut second, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
