//! Little-endian binary helpers shared by the video and checkpoint formats.

use std::io::Write;

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write>(pub W);

impl<W: Write> Writer<W> {
    pub fn raw(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.raw(&[v])
    }
    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }
    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }
    pub fn u128(&mut self, v: u128) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }
    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.raw(&v.to_le_bytes())
    }
    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.raw(s.as_bytes())
    }
    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.raw(&bytes)
    }
    pub fn f32s(&mut self, v: &[f64]) -> Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        self.raw(&bytes)
    }
}

pub(crate) struct Reader<'a>(pub &'a [u8]);

impl Reader<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format(format!("truncated file: wanted {n} more bytes, {} left", self.0.len())));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        b.copy_from_slice(self.take(N)?);
        Ok(b)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("bad utf-8: {e}")))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
