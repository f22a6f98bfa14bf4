use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{CornerIndex, Shape, Tensor, NO_ROW};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::synthscene::{default_bounds, PointCloud};

/// Dense voxel lattice over a world box. Cell `(ix, iy, iz)` is row
/// `(ix·ny + iy)·nz + iz` of every `[cells, C]` feature tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub bounds: Aabb,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dims: [16, 16, 8],
            bounds: default_bounds(),
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], bounds: Aabb) -> Result<Self> {
        let spec = GridSpec { dims, bounds };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("grid extents {:?} contain zero", self.dims)));
        }
        let s = self.bounds.size();
        if s.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("grid box has zero volume"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_size(&self) -> Vec3 {
        let s = self.bounds.size();
        std::array::from_fn(|i| s[i] / self.dims[i] as f64)
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [idx / (ny * nz), (idx / nz) % ny, idx % nz]
    }

    pub fn centre(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        let h = self.voxel_size();
        std::array::from_fn(|i| self.bounds.min[i] + (c[i] as f64 + 0.5) * h[i])
    }

    /// Cell containing `p`; the upper box faces belong to the last cell.
    pub fn locate(&self, p: Vec3) -> Option<usize> {
        if !self.bounds.contains(p) {
            return None;
        }
        let h = self.voxel_size();
        let c = std::array::from_fn(|i| {
            (((p[i] - self.bounds.min[i]) / h[i]).floor() as usize).min(self.dims[i] - 1)
        });
        Some(self.index(c))
    }

    /// Neighbour rows for a 3×3×3 stencil as a `[cells, 27]` index
    /// (cell-major, offsets in x, y, z order), `NO_ROW` past the border.
    pub fn stencil(&self) -> Arc<CornerIndex> {
        let n = self.cells();
        let mut idx = Vec::with_capacity(n * 27);
        for cell in 0..n {
            let c = self.coords(cell);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        let inside = (0..3).all(|i| q[i] >= 0 && q[i] < self.dims[i] as i64);
                        idx.push(if inside {
                            self.index(q.map(|x| x as usize)) as u32
                        } else {
                            NO_ROW
                        });
                    }
                }
            }
        }
        Arc::new(CornerIndex::new(n, 27, idx).expect("stencil size"))
    }
}

/// Dense `cells × C` feature volume plus the cells that received input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelFeatureGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
    pub occupancy: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dims: [usize; 3],
    channels: usize,
    bounds: Aabb,
    dtype: String,
    layout: String,
}

impl VoxelFeatureGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        VoxelFeatureGrid {
            spec,
            channels,
            data: vec![0.0; spec.cells() * channels],
            occupancy: vec![false; spec.cells()],
        }
    }

    pub fn from_tensor(spec: GridSpec, t: &Tensor, occupancy: Vec<bool>) -> Result<Self> {
        if t.rows() != spec.cells() || occupancy.len() != spec.cells() {
            return Err(Error::Shape(format!(
                "{} rows / {} occupancy flags for a {}-cell grid",
                t.rows(),
                occupancy.len(),
                spec.cells()
            )));
        }
        Ok(VoxelFeatureGrid {
            spec,
            channels: t.cols(),
            data: t.data().to_vec(),
            occupancy,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(self.spec.cells(), self.channels), self.data.clone())
            .expect("grid layout")
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// `<stem>.bin` (little-endian f64, row-major cells × C) and `<stem>.json` header.
    pub fn dump(&self, stem: &Path) -> Result<()> {
        let header = DumpHeader {
            dims: self.spec.dims,
            channels: self.channels,
            bounds: self.spec.bounds,
            dtype: "f64-le".into(),
            layout: "((ix*ny+iy)*nz+iz)*C+c".into(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(stem.with_extension("bin"), bytes)?;
        Ok(())
    }

    pub fn load_dump(stem: &Path) -> Result<Self> {
        let h: DumpHeader = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let spec = GridSpec::new(h.dims, h.bounds)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        if bytes.len() != spec.cells() * h.channels * 8 {
            return Err(Error::invalid("grid dump size does not match header"));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let occupancy = (0..spec.cells())
            .map(|i| data[i * h.channels..(i + 1) * h.channels].iter().any(|&x| x != 0.0))
            .collect();
        Ok(VoxelFeatureGrid {
            spec,
            channels: h.channels,
            data,
            occupancy,
        })
    }
}

/// Mean-pooled raw point features per cell.
#[derive(Clone, Debug)]
pub struct Voxelized {
    /// Channels: xyz offset from the cell centre in cell units, then the extra channels.
    pub grid: VoxelFeatureGrid,
    /// Cell of each input point (`None` when outside the box).
    pub point_cell: Vec<Option<usize>>,
    pub dropped: usize,
}

pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Result<Voxelized> {
    spec.validate()?;
    let ch = 3 + cloud.extra_channels;
    let mut grid = VoxelFeatureGrid::zeros(*spec, ch);
    let mut counts = vec![0usize; spec.cells()];
    let mut point_cell = Vec::with_capacity(cloud.len());
    let h = spec.voxel_size();
    for i in 0..cloud.len() {
        let p = cloud.xyz[i];
        let Some(cell) = spec.locate(p) else {
            point_cell.push(None);
            continue;
        };
        point_cell.push(Some(cell));
        counts[cell] += 1;
        let c = spec.centre(cell);
        let row = &mut grid.data[cell * ch..(cell + 1) * ch];
        for k in 0..3 {
            row[k] += (p[k] - c[k]) / h[k];
        }
        for (k, e) in cloud.extra_of(i).iter().enumerate() {
            row[3 + k] += e;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            grid.occupancy[cell] = true;
            for x in &mut grid.data[cell * ch..(cell + 1) * ch] {
                *x /= n as f64;
            }
        }
    }
    let dropped = point_cell.iter().filter(|c| c.is_none()).count();
    if dropped > 0 {
        log::debug!("voxelize: {dropped} points outside the grid box");
    }
    Ok(Voxelized {
        grid,
        point_cell,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("masking rate {rate} outside [0, 1)")));
        }
        Ok(MaskSpec { rate, seed })
    }
}

/// Zero the input features of `⌊rate·occupied⌋` occupied cells chosen by a
/// seeded uniform draw. Returns the masked grid and the per-cell mask.
pub fn apply_mask(grid: &VoxelFeatureGrid, spec: &MaskSpec) -> Result<(VoxelFeatureGrid, Vec<bool>)> {
    MaskSpec::new(spec.rate, spec.seed)?;
    let occupied: Vec<usize> = (0..grid.occupancy.len()).filter(|&i| grid.occupancy[i]).collect();
    let n_mask = (spec.rate * occupied.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; grid.occupancy.len()];
    let mut out = grid.clone();
    for j in sample(&mut rng, occupied.len(), n_mask) {
        let cell = occupied[j];
        mask[cell] = true;
        out.data[cell * grid.channels..(cell + 1) * grid.channels].fill(0.0);
    }
    Ok((out, mask))
}
