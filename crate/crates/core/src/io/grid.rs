use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GridGeometry, ModelGrid};
use crate::geophysics::SeismicCube;
use crate::tensor::Tensor;

pub const GRID_MAGIC: &[u8; 8] = b"FLVGRID\0";
const GRID_VERSION: u32 = 1;

/// JSON header of a grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub version: u32,
    /// `[nx, ny, nz]`
    pub extents: [usize; 3],
    /// `[dx, dy, dz]` in meters.
    pub cell_size: [f64; 3],
    pub channels: Vec<String>,
    pub dtype: String,
}

/// Multi-channel grid; each channel is `[nz, ny, nx]`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub geometry: GridGeometry,
    pub channels: Vec<(String, Tensor)>,
}

impl GridFile {
    pub fn new(geometry: GridGeometry, channels: Vec<(String, Tensor)>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("grid file needs at least one channel"));
        }
        for (name, t) in &channels {
            if t.shape() != geometry.shape() {
                return Err(Error::Format(format!(
                    "channel {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    geometry.shape()
                )));
            }
        }
        Ok(GridFile { geometry, channels })
    }

    pub fn from_model(grid: &ModelGrid) -> Self {
        GridFile {
            geometry: grid.geometry,
            channels: vec![
                ("coarse_fraction".into(), grid.coarse_fraction.clone()),
                ("depo_time".into(), grid.depo_time.clone()),
            ],
        }
    }

    pub fn from_seismic(cube: &SeismicCube) -> Self {
        GridFile {
            geometry: cube.geometry,
            channels: vec![("amplitude".into(), cube.amplitudes.clone())],
        }
    }

    pub fn channel(&self, name: &str) -> Option<&Tensor> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_model(&self) -> Result<ModelGrid> {
        let get = |n: &str| {
            self.channel(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("grid file has no channel {n}")))
        };
        ModelGrid::new(self.geometry, get("coarse_fraction")?, get("depo_time")?)
    }

    pub fn to_seismic(&self) -> Result<SeismicCube> {
        let a = self
            .channel("amplitude")
            .cloned()
            .ok_or_else(|| Error::Format("grid file has no amplitude channel".into()))?;
        Ok(SeismicCube {
            geometry: self.geometry,
            amplitudes: a,
        })
    }

    pub fn header(&self) -> GridHeader {
        let g = self.geometry;
        GridHeader {
            version: GRID_VERSION,
            extents: [g.nx, g.ny, g.nz],
            cell_size: [g.dx, g.dy, g.dz],
            channels: self.channels.iter().map(|(n, _)| n.clone()).collect(),
            dtype: "f32".into(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_grid(self, &mut w)?;
        w.flush().map_err(|e| Error::io(p, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
        read_grid(std::io::BufReader::new(f))
    }
}

pub fn write_grid(grid: &GridFile, mut out: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&grid.header())?;
    let err = |e| Error::io("<grid stream>", e);
    out.write_all(GRID_MAGIC).map_err(err)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(err)?;
    out.write_all(&header).map_err(err)?;
    let mut buf = Vec::with_capacity(4 * grid.geometry.cells() * grid.channels.len());
    for (_, t) in &grid.channels {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(err)
}

pub fn read_grid(mut input: impl Read) -> Result<GridFile> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("grid file shorter than its magic".into()))?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format("not a grid file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::Format("truncated grid header length".into()))?;
    let mut hbytes = vec![0u8; u32::from_le_bytes(len) as usize];
    input
        .read_exact(&mut hbytes)
        .map_err(|_| Error::Format("truncated grid header".into()))?;
    let h: GridHeader = serde_json::from_slice(&hbytes).map_err(|e| Error::Format(format!("grid header: {e}")))?;
    if h.version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {}", h.version)));
    }
    if h.dtype != "f32" {
        return Err(Error::Format(format!("unsupported grid dtype {}", h.dtype)));
    }
    if h.channels.is_empty() || h.extents.iter().any(|&e| e == 0) {
        return Err(Error::Format("grid header needs channels and non-zero extents".into()));
    }
    let [nx, ny, nz] = h.extents;
    let [dx, dy, dz] = h.cell_size;
    let geometry = GridGeometry { nx, ny, nz, dx, dy, dz };
    let n = geometry.cells();
    let mut payload = Vec::new();
    input
        .read_to_end(&mut payload)
        .map_err(|e| Error::io("<grid stream>", e))?;
    if payload.len() != 4 * n * h.channels.len() {
        return Err(Error::Format(format!(
            "grid payload has {} bytes, header implies {}",
            payload.len(),
            4 * n * h.channels.len()
        )));
    }
    let channels = h
        .channels
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let data = payload[4 * n * c..4 * n * (c + 1)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok((name.clone(), Tensor::new(vec![nz, ny, nx], data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    GridFile::new(geometry, channels)
}
