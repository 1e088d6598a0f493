//! Binary frames exchanged with an external denoiser process.
//!
//! ```text
//! request:  "UADN" | version u32 | t u32 | F u32 | L u32 | F·L × (re f32, im f32)
//! response: "UADR" | version u32 |         F u32 | L u32 | F·L × (re f32, im f32)
//! ```
//!
//! All integers and floats are little-endian; the payload is row-major over
//! frequency, then frame.

use std::io::{self, Read, Write};

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const REQUEST_MAGIC: [u8; 4] = *b"UADN";
pub const RESPONSE_MAGIC: [u8; 4] = *b"UADR";
pub const VERSION: u32 = 1;
/// Upper bound on `F·L` accepted from a peer, to reject garbage headers.
pub const MAX_BINS: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub t: u32,
    pub data: Array2<Complex64>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_payload(buf: &mut Vec<u8>, data: &Array2<Complex64>) {
    for z in data.iter() {
        buf.extend_from_slice(&(z.re as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
}

fn dims(data: &Array2<Complex64>) -> Result<(u32, u32)> {
    let (f, l) = data.dim();
    match (u32::try_from(f), u32::try_from(l)) {
        (Ok(f), Ok(l)) => Ok((f, l)),
        _ => Err(Error::DenoiserProtocol(format!("tensor {f}x{l} too large for a frame"))),
    }
}

pub fn encode_request(t: u32, data: &Array2<Complex64>) -> Result<Vec<u8>> {
    let (f, l) = dims(data)?;
    let mut buf = Vec::with_capacity(20 + data.len() * 8);
    buf.extend_from_slice(&REQUEST_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, t);
    put_u32(&mut buf, f);
    put_u32(&mut buf, l);
    put_payload(&mut buf, data);
    Ok(buf)
}

pub fn encode_response(data: &Array2<Complex64>) -> Result<Vec<u8>> {
    let (f, l) = dims(data)?;
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(&RESPONSE_MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, f);
    put_u32(&mut buf, l);
    put_payload(&mut buf, data);
    Ok(buf)
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::DenoiserProtocol(format!("stream ended inside {what}")),
        _ => Error::DenoiserProtocol(format!("reading {what}: {e}")),
    })
}

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(reader, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the magic. `Ok(None)` on a clean end of stream before any byte.
fn read_magic(reader: &mut impl Read, expected: [u8; 4]) -> Result<Option<()>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::DenoiserProtocol(format!("stream ended after {got} magic bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::DenoiserProtocol(format!("reading magic: {e}"))),
        }
    }
    if magic != expected {
        return Err(Error::DenoiserProtocol(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&expected)
        )));
    }
    Ok(Some(()))
}

fn read_header_dims(reader: &mut impl Read) -> Result<(usize, usize)> {
    let f = read_u32(reader, "frequency count")?;
    let l = read_u32(reader, "frame count")?;
    if u64::from(f) * u64::from(l) > MAX_BINS {
        return Err(Error::DenoiserProtocol(format!("frame declares {f}x{l} bins, above the limit")));
    }
    Ok((f as usize, l as usize))
}

fn read_version(reader: &mut impl Read) -> Result<()> {
    let v = read_u32(reader, "version")?;
    if v != VERSION {
        return Err(Error::DenoiserProtocol(format!("unsupported protocol version {v}")));
    }
    Ok(())
}

fn read_payload(reader: &mut impl Read, f: usize, l: usize) -> Result<Array2<Complex64>> {
    let mut raw = vec![0u8; f * l * 8];
    read_exact_or(reader, &mut raw, &format!("{f}x{l} payload"))?;
    let vals: Vec<Complex64> = raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(f64::from(re), f64::from(im))
        })
        .collect();
    Ok(Array2::from_shape_vec((f, l), vals).expect("payload length matches header"))
}

/// Next request, or `None` when the peer closed the stream between frames.
pub fn read_request(reader: &mut impl Read) -> Result<Option<Request>> {
    if read_magic(reader, REQUEST_MAGIC)?.is_none() {
        return Ok(None);
    }
    read_version(reader)?;
    let t = read_u32(reader, "step")?;
    let (f, l) = read_header_dims(reader)?;
    Ok(Some(Request { t, data: read_payload(reader, f, l)? }))
}

/// Next response; end of stream is an error.
pub fn read_response(reader: &mut impl Read) -> Result<Array2<Complex64>> {
    if read_magic(reader, RESPONSE_MAGIC)?.is_none() {
        return Err(Error::DenoiserProtocol("denoiser closed its output".into()));
    }
    read_version(reader)?;
    let (f, l) = read_header_dims(reader)?;
    read_payload(reader, f, l)
}

pub fn write_frame(writer: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    writer.write_all(frame)?;
    writer.flush()
}
