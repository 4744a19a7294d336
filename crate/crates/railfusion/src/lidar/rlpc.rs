//! Point-cloud container format: little-endian binary, magic `RLPC1`,
//! u32 count, then per point f32 x, y, z, intensity, f32 time_offset,
//! u16 ring, u16 padding.

use super::{RawScan, ScanPoint};
use std::io::{self, Read, Write};

const MAGIC: &[u8; 5] = b"RLPC1";
const POINT_BYTES: usize = 24;

pub fn write_rlpc<W: Write>(mut w: W, points: &[ScanPoint]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    let mut buf = [0u8; POINT_BYTES];
    for p in points {
        buf[0..4].copy_from_slice(&(p.x as f32).to_le_bytes());
        buf[4..8].copy_from_slice(&(p.y as f32).to_le_bytes());
        buf[8..12].copy_from_slice(&(p.z as f32).to_le_bytes());
        buf[12..16].copy_from_slice(&(p.intensity as f32).to_le_bytes());
        buf[16..20].copy_from_slice(&(p.time_offset as f32).to_le_bytes());
        buf[20..22].copy_from_slice(&p.ring.to_le_bytes());
        buf[22..24].copy_from_slice(&0u16.to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_rlpc<R: Read>(mut r: R) -> io::Result<Vec<ScanPoint>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "bad RLPC1 magic",
        ));
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt) as usize;
    let mut points = Vec::with_capacity(count);
    let mut buf = [0u8; POINT_BYTES];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
        points.push(ScanPoint {
            x: f(0),
            y: f(4),
            z: f(8),
            intensity: f(12),
            time_offset: f(16),
            ring: u16::from_le_bytes(buf[20..22].try_into().unwrap()),
        });
    }
    Ok(points)
}

pub fn write_rlpc_file(path: &std::path::Path, points: &[ScanPoint]) -> io::Result<()> {
    let f = std::fs::File::create(path)?;
    write_rlpc(io::BufWriter::new(f), points)
}

pub fn read_rlpc_file(path: &std::path::Path) -> io::Result<Vec<ScanPoint>> {
    let f = std::fs::File::open(path)?;
    read_rlpc(io::BufReader::new(f))
}

/// Convenience wrapper producing a scan with metadata supplied by the caller.
pub fn scan_from_points(t_start: f64, scan_period: f64, points: Vec<ScanPoint>) -> RawScan {
    RawScan {
        t_start,
        scan_period,
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let pts = vec![
            ScanPoint {
                x: 1.5,
                y: -2.25,
                z: 0.125,
                intensity: 0.5,
                time_offset: 0.05,
                ring: 3,
            },
            ScanPoint {
                x: -10.0,
                y: 4.0,
                z: 2.0,
                intensity: 1.0,
                time_offset: 0.0999,
                ring: 5,
            },
        ];
        let mut buf = Vec::new();
        write_rlpc(&mut buf, &pts).unwrap();
        assert_eq!(buf.len(), 5 + 4 + 2 * 24);
        let back = read_rlpc(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].ring, 3);
        assert!((back[1].x - -10.0).abs() < 1e-6);
        // Serialization is deterministic.
        let mut buf2 = Vec::new();
        write_rlpc(&mut buf2, &pts).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE1\x00\x00\x00\x00".to_vec();
        assert!(read_rlpc(std::io::Cursor::new(&buf)).is_err());
    }
}
