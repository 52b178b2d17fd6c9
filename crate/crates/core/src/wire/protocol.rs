//! Frame encoding.
//!
//! ```text
//! request:  "SWPR" | version u8 | type u8 (1 infer, 2 ping) | rank u8 | extents u32 × rank | f32 × Π extents
//! response: "SWPS" | version u8 | status u8 | class count u32 | f32 × class count
//! ```
//!
//! Everything is little-endian. Pings carry rank 0 and no payload.

use std::io::{self, Read, Write};

use crate::tensor::Tensor;

pub const REQUEST_MAGIC: &[u8; 4] = b"SWPR";
pub const RESPONSE_MAGIC: &[u8; 4] = b"SWPS";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;
/// Largest payload either side will read.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

const TYPE_INFER: u8 = 1;
const TYPE_PING: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Infer(Tensor),
    Ping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    BadShape = 1,
    Unavailable = 2,
    Malformed = 3,
}

impl Status {
    fn from_byte(b: u8) -> Option<Self> {
        [Status::Ok, Status::BadShape, Status::Unavailable, Status::Malformed].into_iter().find(|s| *s as u8 == b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub status: Status,
    pub probs: Vec<f32>,
}

impl Response {
    pub fn status(status: Status) -> Self {
        Response { status, probs: Vec::new() }
    }
}

/// Why a frame could not be read.
#[derive(Debug)]
pub enum FrameError {
    /// The peer closed the connection before the first byte of a frame.
    Closed,
    Io(io::Error),
    Malformed(String),
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e)
    }
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Closed => f.write_str("connection closed"),
            FrameError::Io(e) => write!(f, "{e}"),
            FrameError::Malformed(m) => write!(f, "malformed frame: {m}"),
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>, FrameError> {
    let bytes = count
        .checked_mul(4)
        .filter(|&n| n <= MAX_FRAME_BYTES)
        .ok_or_else(|| FrameError::Malformed(format!("payload of {count} values exceeds the frame cap")))?;
    let mut buf = vec![0u8; bytes];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

/// Reads the 4-byte magic, telling a clean close apart from a torn frame.
fn read_magic<R: Read>(r: &mut R, want: &[u8; 4]) -> Result<(), FrameError> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &magic != want {
        return Err(FrameError::Malformed(format!("bad magic {magic:02x?}")));
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, FrameError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FrameError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::new();
    out.extend_from_slice(REQUEST_MAGIC);
    out.push(VERSION);
    match req {
        Request::Ping => {
            out.push(TYPE_PING);
            out.push(0);
        }
        Request::Infer(t) => {
            if t.rank() > MAX_RANK || t.len() * 4 > MAX_FRAME_BYTES {
                return Err(FrameError::Malformed(format!("tensor {:?} does not fit a frame", t.dims())));
            }
            out.push(TYPE_INFER);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                let d = u32::try_from(d).map_err(|_| FrameError::Malformed("extent exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
    }
    Ok(out)
}

pub fn read_request<R: Read>(r: &mut R) -> Result<Request, FrameError> {
    read_magic(r, REQUEST_MAGIC)?;
    let version = read_u8(r)?;
    if version != VERSION {
        return Err(FrameError::Malformed(format!("version {version}")));
    }
    let kind = read_u8(r)?;
    let rank = usize::from(read_u8(r)?);
    if rank > MAX_RANK {
        return Err(FrameError::Malformed(format!("rank {rank} above {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    match kind {
        TYPE_PING if rank == 0 => Ok(Request::Ping),
        TYPE_PING => Err(FrameError::Malformed("ping with a payload".into())),
        TYPE_INFER => {
            if rank == 0 || dims.contains(&0) {
                return Err(FrameError::Malformed(format!("empty tensor {dims:?}")));
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| FrameError::Malformed("extent product overflows".into()))?;
            let data = read_f32s(r, count)?;
            let t = Tensor::new(&dims, data).map_err(|e| FrameError::Malformed(e.to_string()))?;
            Ok(Request::Infer(t))
        }
        other => Err(FrameError::Malformed(format!("message type {other}"))),
    }
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * resp.probs.len());
    out.extend_from_slice(RESPONSE_MAGIC);
    out.push(VERSION);
    out.push(resp.status as u8);
    out.extend_from_slice(&(resp.probs.len() as u32).to_le_bytes());
    put_f32s(&mut out, &resp.probs);
    out
}

pub fn read_response<R: Read>(r: &mut R) -> Result<Response, FrameError> {
    read_magic(r, RESPONSE_MAGIC)?;
    let version = read_u8(r)?;
    if version != VERSION {
        return Err(FrameError::Malformed(format!("version {version}")));
    }
    let status_byte = read_u8(r)?;
    let status = Status::from_byte(status_byte).ok_or_else(|| FrameError::Malformed(format!("status {status_byte}")))?;
    let count = read_u32(r)? as usize;
    let probs = read_f32s(r, count)?;
    Ok(Response { status, probs })
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(bytes)?;
    w.flush()
}
