//! On-disk formats for CSI tensors.
//!
//! Binary container layout (all little-endian):
//!
//! | bytes | content                      |
//! |-------|------------------------------|
//! | 4     | magic `CSIT`                 |
//! | 1     | version (currently 1)        |
//! | 24    | `M`, `G`, `N` as `u64`       |
//! | 16·MGN| `(re, im)` `f64` pairs, packet-major, then subcarrier, then antenna |
//!
//! The [`SystemConfig`] travels in a JSON sidecar next to the container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{CsiTensor, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::C64;

pub const MAGIC: &[u8; 4] = b"CSIT";
pub const VERSION: u8 = 1;

pub fn write_container<W: Write>(tensor: &CsiTensor, mut w: W) -> Result<()> {
    let (m, g, n) = tensor.dims();
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for d in [m, g, n] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in tensor.as_slice() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the raw container: dims and samples.
pub fn read_container_raw<R: Read>(mut r: R) -> Result<((usize, usize, usize), Vec<C64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected \"CSIT\"")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)
        .map_err(|_| Error::Format("missing version byte".into()))?;
    if version[0] != VERSION {
        return Err(Error::Format(format!("unsupported container version {}", version[0])));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated dimension header".into()))?;
        *d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("dimension does not fit in memory".into()))?;
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
    let mut data = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 16];
    for _ in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated sample payload".into()))?;
        let re = f64::from_le_bytes(buf[..8].try_into().unwrap());
        let im = f64::from_le_bytes(buf[8..].try_into().unwrap());
        data.push(C64::new(re, im));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after sample payload".into()));
    }
    Ok(((dims[0], dims[1], dims[2]), data))
}

/// Reads a container and binds it to `config`, checking dimensions.
pub fn read_container<R: Read>(r: R, config: SystemConfig) -> Result<CsiTensor> {
    let (dims, data) = read_container_raw(r)?;
    if dims != config.dims() {
        return Err(Error::InvalidConfig(format!(
            "container dims {dims:?} do not match config dims {:?}",
            config.dims()
        )));
    }
    CsiTensor::from_raw(config, data)
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut name = container.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `path` (binary) and `path.json` (config sidecar).
pub fn save_tensor(tensor: &CsiTensor, path: &Path) -> Result<()> {
    write_container(tensor, BufWriter::new(File::create(path)?))?;
    let sidecar = serde_json::to_string_pretty(tensor.config())?;
    std::fs::write(sidecar_path(path), sidecar + "\n")?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<CsiTensor> {
    let cfg_text = std::fs::read_to_string(sidecar_path(path))?;
    let config: SystemConfig = serde_json::from_str(&cfg_text)?;
    read_container(BufReader::new(File::open(path)?), config)
}

/// CSV export with columns `m,g,n,re,im`.
pub fn write_csv<W: Write>(tensor: &CsiTensor, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "m,g,n,re,im")?;
    let (mc, gc, nc) = tensor.dims();
    for m in 0..mc {
        for g in 0..gc {
            for n in 0..nc {
                let v = tensor.get(m, g, n);
                writeln!(w, "{m},{g},{n},{:e},{:e}", v.re, v.im)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize_csi, OffsetTrace, ScenarioSpec};

    fn sample() -> CsiTensor {
        let cfg = SystemConfig::reference().with_packets(32).with_antennas(3);
        let paths = ScenarioSpec::new(1, 2).draw(&cfg, 1).unwrap();
        synthesize_csi(&cfg, &paths, &OffsetTrace::zero(32), None).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let t = sample();
        let mut buf = Vec::new();
        write_container(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSIT");
        assert_eq!(buf[4], 1);
        assert_eq!(u64::from_le_bytes(buf[5..13].try_into().unwrap()), 32);
        assert_eq!(u64::from_le_bytes(buf[13..21].try_into().unwrap()), 64);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 29 + 16 * 32 * 64 * 3);
        // second sample is (m=0, g=0, n=1)
        let re = f64::from_le_bytes(buf[45..53].try_into().unwrap());
        assert_eq!(re, t.get(0, 0, 1).re);
    }

    #[test]
    fn round_trip_through_files() {
        let t = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csit");
        save_tensor(&t, &p).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn corrupted_inputs_rejected() {
        let t = sample();
        let mut buf = Vec::new();
        write_container(&t, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad[..], t.config().clone()), Err(Error::Format(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_container(truncated, t.config().clone()), Err(Error::Format(_))));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_container(&trailing[..], t.config().clone()), Err(Error::Format(_))));

        let other = t.config().clone().with_antennas(4);
        assert!(matches!(read_container(&buf[..], other), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn csv_has_expected_rows() {
        let t = sample();
        let mut out = Vec::new();
        write_csv(&t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("m,g,n,re,im"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..3], &["0", "0", "0"]);
        assert_eq!(first[3].parse::<f64>().unwrap(), t.get(0, 0, 0).re);
        assert_eq!(text.lines().count(), 1 + 32 * 64 * 3);
    }
}
