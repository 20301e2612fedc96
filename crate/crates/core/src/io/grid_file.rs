//! RLUF grid files: a little-endian header followed by f32 values.
//!
//! ```text
//! "RLUF" | version u16 | ndim u16 | dims ndim*u32 | channels u32 |
//! aabb min ndim*f64, max ndim*f64 | values f32...
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Aabb, FieldGrid};

pub const MAGIC: &[u8; 4] = b"RLUF";
pub const VERSION: u16 = 1;

/// Everything in a grid file except the values.
#[derive(Clone, Debug, PartialEq)]
pub struct GridHeader {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub aabb: Aabb,
}

impl GridHeader {
    pub fn byte_len(&self) -> u64 {
        let m = self.dims.len() as u64;
        4 + 2 + 2 + 4 * m + 4 + 16 * m
    }

    pub fn value_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product::<u64>() * self.channels as u64
    }

    /// Total size of a file with this header.
    pub fn file_len(&self) -> u64 {
        self.byte_len() + 4 * self.value_count()
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let m = self.dims.len();
        if !(1..=3).contains(&m) || self.aabb.ndim() != m {
            return Err(Error::invalid("grid header needs 1 to 3 axes matching the box"));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(m as u16).to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::invalid("grid dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for v in self.aabb.min().iter().chain(self.aabb.max()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected RLUF")));
        }
        let version = u16::from_le_bytes(read_array(r, "version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported grid file version {version}")));
        }
        let m = u16::from_le_bytes(read_array(r, "axis count")?) as usize;
        if !(1..=3).contains(&m) {
            return Err(Error::Format(format!("unsupported axis count {m}")));
        }
        let mut dims = Vec::with_capacity(m);
        for _ in 0..m {
            dims.push(u32::from_le_bytes(read_array(r, "dims")?) as usize);
        }
        let channels = u32::from_le_bytes(read_array(r, "channels")?) as usize;
        let mut bounds = Vec::with_capacity(2 * m);
        for _ in 0..2 * m {
            bounds.push(f64::from_le_bytes(read_array(r, "aabb")?));
        }
        let max = bounds.split_off(m);
        let aabb = Aabb::new(bounds, max).map_err(|e| Error::Format(format!("bad box: {e}")))?;
        Ok(GridHeader { dims, channels, aabb })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

/// Writes a grid file from a value stream without materializing the grid.
/// Fails if the stream does not yield exactly `header.value_count()` values.
pub fn write_grid_stream(path: &Path, header: &GridHeader, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
    header.write_to(&mut w)?;
    let mut n = 0u64;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
        n += 1;
    }
    if n != header.value_count() {
        return Err(Error::invalid(format!(
            "value stream yielded {n} values, header declares {}",
            header.value_count()
        )));
    }
    w.flush()?;
    Ok(())
}

/// Saves `grid` with values narrowed to f32.
pub fn save_grid(grid: &FieldGrid, path: &Path) -> Result<()> {
    let header = GridHeader {
        dims: grid.dims().to_vec(),
        channels: grid.channels(),
        aabb: grid.aabb().clone(),
    };
    write_grid_stream(path, &header, grid.values().iter().map(|&v| v as f32))
}

pub fn read_grid_header(path: &Path) -> Result<GridHeader> {
    GridHeader::read_from(&mut BufReader::new(File::open(path)?))
}

pub fn load_grid(path: &Path) -> Result<FieldGrid> {
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let header = GridHeader::read_from(&mut r)?;
    if actual != header.file_len() {
        return Err(Error::Format(format!(
            "file is {actual} bytes, header implies {}",
            header.file_len()
        )));
    }
    let n = header.value_count() as usize;
    let mut values = Vec::with_capacity(n);
    let mut buf = vec![0u8; 4 * 65536];
    let mut left = n;
    while left > 0 {
        let take = left.min(65536);
        read_exact(&mut r, &mut buf[..4 * take], "values")?;
        values.extend(buf[..4 * take].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
        left -= take;
    }
    FieldGrid::from_values(&header.dims, header.channels, header.aabb, values)
        .map_err(|e| Error::Format(format!("inconsistent grid file: {e}")))
}
