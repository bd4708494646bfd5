// SPDX-License-Identifier: Apache-2.0

//! Little-endian byte codec shared by the frozen-graph and checkpoint
//! formats. Readers never trust declared lengths: every take is bounded
//! by the bytes actually present.

use super::{Tensor, TensorError};

fn corrupt(what: &str) -> TensorError {
    TensorError::CorruptFile(what.to_string())
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
}

pub(crate) struct Reader<'a> {
    raw: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub fn new(raw: &'a [u8]) -> Reader<'a> {
        Reader { raw, at: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.raw.len() - self.at < n {
            return Err(corrupt("unexpected end of data"));
        }
        let out = &self.raw[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, TensorError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, TensorError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("string not utf-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor, TensorError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt("tensor rank out of range"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            shape.push(d);
        }
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| corrupt("tensor size overflow"))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|_| corrupt("tensor shape"))
    }

    /// Fails unless every byte has been consumed.
    pub fn done(&self) -> Result<(), TensorError> {
        if self.at != self.raw.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(())
    }
}
