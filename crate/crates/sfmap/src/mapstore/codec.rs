//! Map file serialization. Little-endian throughout; a CRC32 trailer covers
//! every preceding byte so truncation and corruption are both caught before
//! any record parsing happens.

use super::{
    InsertPolicy, MapError, QuantizedDepth, StructureFrameMap, VisualStructureFrame,
};
use crate::geom::{CameraIntrinsics, Pose};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SFM1";
const VERSION: u32 = 1;

/// CRC32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MapError> {
        if self.pos + n > self.data.len() {
            return Err(MapError::ChecksumMismatch);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, MapError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, MapError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, MapError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, MapError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, MapError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize the map to bytes: header, records in id order, CRC32 trailer.
pub fn to_bytes(map: &StructureFrameMap) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(map.len() as u64);
    w.f64(map.route_length_m);
    w.bytes(&[0u8; 8]);
    for f in map.frames() {
        w.u64(f.id);
        w.f64(f.timestamp);
        for v in f.pose.to_array() {
            w.f64(v);
        }
        w.u32(f.session);
        w.f32(f.score);
        w.u32(f.descriptor.len() as u32);
        for &d in &f.descriptor {
            w.f32(d);
        }
        w.u16(f.depth.rows);
        w.u16(f.depth.cols);
        w.f32(f.depth.scale);
        w.f32(f.depth.offset);
        for &c in &f.depth.codes {
            w.u16(c);
        }
        w.u32(f.image_payload.len() as u32);
        w.bytes(&f.image_payload);
    }
    let crc = crc32(&w.buf);
    w.u32(crc);
    w.buf
}

/// Parse map bytes. The spatial index is rebuilt; the camera model, threshold
/// and policy are not part of the file and must be supplied by the caller.
pub fn from_bytes(
    data: &[u8],
    camera: CameraIntrinsics,
    covis_threshold: f64,
    policy: InsertPolicy,
) -> Result<StructureFrameMap, MapError> {
    if data.len() < 4 {
        return Err(MapError::BadMagic);
    }
    if &data[0..4] != MAGIC {
        return Err(MapError::BadMagic);
    }
    if data.len() < super::HEADER_BYTES + 4 {
        return Err(MapError::ChecksumMismatch);
    }
    let (body, trailer) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32(body) != stored {
        return Err(MapError::ChecksumMismatch);
    }
    let mut r = Reader { data: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(MapError::UnsupportedVersion(version));
    }
    let frame_count = r.u64()?;
    let route_length_m = r.f64()?;
    r.take(8)?; // reserved
    let mut map = StructureFrameMap::new(camera, covis_threshold, policy);
    map.route_length_m = route_length_m;
    for _ in 0..frame_count {
        let id = r.u64()?;
        let timestamp = r.f64()?;
        let mut pose_a = [0.0; 7];
        for v in pose_a.iter_mut() {
            *v = r.f64()?;
        }
        let session = r.u32()?;
        let score = r.f32()?;
        let dim = r.u32()? as usize;
        let mut descriptor = Vec::with_capacity(dim);
        for _ in 0..dim {
            descriptor.push(r.f32()?);
        }
        let rows = r.u16()?;
        let cols = r.u16()?;
        let scale = r.f32()?;
        let offset = r.f32()?;
        let n = rows as usize * cols as usize;
        let mut codes = Vec::with_capacity(n);
        for _ in 0..n {
            codes.push(r.u16()?);
        }
        let payload_len = r.u32()? as usize;
        let image_payload = r.take(payload_len)?.to_vec();
        map.insert_unchecked(VisualStructureFrame {
            id,
            timestamp,
            pose: Pose::from_array(&pose_a),
            image_payload,
            depth: QuantizedDepth {
                rows,
                cols,
                scale,
                offset,
                codes,
            },
            descriptor,
            score,
            session,
        });
    }
    if r.pos != body.len() {
        return Err(MapError::ChecksumMismatch);
    }
    Ok(map)
}

pub fn serialize(map: &StructureFrameMap, path: &Path) -> Result<(), MapError> {
    std::fs::write(path, to_bytes(map))?;
    Ok(())
}

pub fn deserialize(
    path: &Path,
    camera: CameraIntrinsics,
    covis_threshold: f64,
    policy: InsertPolicy,
) -> Result<StructureFrameMap, MapError> {
    let data = std::fs::read(path)?;
    from_bytes(&data, camera, covis_threshold, policy)
}
