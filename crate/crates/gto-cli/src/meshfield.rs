//! Mesh/field container: one mesh plus T frames of per-node fields and a
//! global-parameter record per frame.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      4 bytes  "GTMF"
//! version    u32      (1)
//! dim        u32
//! n_nodes    u64
//! cell_arity u32
//! n_cells    u64
//! coords     n_nodes * dim        f64
//! cells      n_cells * cell_arity u32
//! node_type  n_nodes              u8
//! n_fields   u32      (c)
//! n_frames   u64      (T, may be 0 for a mesh-only container)
//! n_globals  u32      (l)
//! frames     T * [n_nodes * c f32]
//! globals    T * [l f32, time f64]
//! ```
//!
//! Round trips are bit-exact; truncation reports the failing byte offset.

use crate::error::{CliError, Result};
use gto_core::mesh::{Mesh, NodeType};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GTMF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MeshFieldFile {
    pub mesh: Mesh,
    /// T frames, each n_nodes * c values, row-major.
    pub frames: Vec<Vec<f32>>,
    pub n_fields: u32,
    /// Per frame: l global parameters plus the frame time.
    pub globals: Vec<(Vec<f32>, f64)>,
}

impl MeshFieldFile {
    pub fn n_globals(&self) -> u32 {
        self.globals.first().map(|(g, _)| g.len() as u32).unwrap_or(0)
    }
}

struct Counter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for Counter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_meshfield(path: &Path, file: &MeshFieldFile) -> Result<u64> {
    let n = file.mesh.n_nodes();
    let c = file.n_fields as usize;
    for (k, frame) in file.frames.iter().enumerate() {
        if frame.len() != n * c {
            return Err(CliError::Config(format!(
                "frame {k} has {} values, expected {}",
                frame.len(),
                n * c
            )));
        }
    }
    if file.frames.len() != file.globals.len() {
        return Err(CliError::Config(
            "frames and globals must have the same length".into(),
        ));
    }
    let l = file.n_globals() as usize;
    if file.globals.iter().any(|(g, _)| g.len() != l) {
        return Err(CliError::Config("ragged globals records".into()));
    }

    let handle = std::fs::File::create(path).map_err(CliError::io(path.display().to_string()))?;
    let mut w = Counter {
        inner: std::io::BufWriter::new(handle),
        written: 0,
    };
    let ioerr = CliError::io(path.display().to_string());
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(file.mesh.dim() as u32).to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&(file.mesh.cell_arity() as u32).to_le_bytes())?;
        w.write_all(&(file.mesh.n_cells() as u64).to_le_bytes())?;
        for &x in file.mesh.coords() {
            w.write_all(&x.to_le_bytes())?;
        }
        for &v in file.mesh.cells() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &t in file.mesh.node_types() {
            w.write_all(&[t as u8])?;
        }
        w.write_all(&file.n_fields.to_le_bytes())?;
        w.write_all(&(file.frames.len() as u64).to_le_bytes())?;
        w.write_all(&(l as u32).to_le_bytes())?;
        for frame in &file.frames {
            for &x in frame {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for (g, time) in &file.globals {
            for &x in g {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&time.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(ioerr)?;
    Ok(w.written)
}

struct Reader<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(CliError::Parse {
                path: self.path.clone(),
                offset: at,
                what: "truncated file".into(),
            }),
            Err(e) => Err(CliError::Io {
                path: self.path.clone(),
                source: e,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn fail(&self, what: impl Into<String>) -> CliError {
        CliError::Parse {
            path: self.path.clone(),
            offset: self.offset,
            what: what.into(),
        }
    }
}

pub fn read_meshfield(path: &Path) -> Result<MeshFieldFile> {
    let handle = std::fs::File::open(path).map_err(CliError::io(path.display().to_string()))?;
    let mut r = Reader {
        inner: std::io::BufReader::new(handle),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != MAGIC {
        return Err(CliError::Parse {
            path: r.path,
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let n = r.u64()? as usize;
    let arity = r.u32()? as usize;
    let n_cells = r.u64()? as usize;
    if dim < 2 || dim > 3 || arity < 3 || arity > 8 || n > (1 << 32) {
        return Err(r.fail("implausible header counts"));
    }
    let mut coords = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        coords.push(r.f64()?);
    }
    let mut cells = Vec::with_capacity(n_cells * arity);
    for _ in 0..n_cells * arity {
        cells.push(r.u32()?);
    }
    let mut types = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 1];
        r.take(&mut b)?;
        types.push(NodeType::from_u8(b[0]).map_err(|e| r.fail(e.to_string()))?);
    }
    let n_fields = r.u32()?;
    let n_frames = r.u64()? as usize;
    let n_globals = r.u32()? as usize;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let mut frame = Vec::with_capacity(n * n_fields as usize);
        for _ in 0..n * n_fields as usize {
            frame.push(r.f32()?);
        }
        frames.push(frame);
    }
    let mut globals = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let mut g = Vec::with_capacity(n_globals);
        for _ in 0..n_globals {
            g.push(r.f32()?);
        }
        let time = r.f64()?;
        globals.push((g, time));
    }
    let mesh = Mesh::new(coords, dim, cells, arity, types).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        offset: 0,
        what: e.to_string(),
    })?;
    Ok(MeshFieldFile {
        mesh,
        frames,
        n_fields,
        globals,
    })
}
