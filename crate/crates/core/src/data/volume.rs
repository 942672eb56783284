use std::path::Path;

use crate::error::{Error, Result};

use super::nifti;

/// A 3-D scalar volume stored as `[depth, height, width]` (axial slices
/// outermost), with voxel spacing in mm along (x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub id: String,
    dims: [usize; 3],
    pub spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl CtVolume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if dims[0] == 0 || dims[1] == 0 || dims[2] == 0 {
            return Err(Error::Shape(format!("volume {id} has an empty axis: {dims:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("volume {id}: {} voxels for dims {dims:?}", voxels.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("volume {id}: spacing must be positive, got {spacing:?}")));
        }
        Ok(CtVolume { id, dims, spacing, voxels })
    }

    /// `[depth, height, width]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

/// Reads a single-file NIfTI-1 volume (`.nii` or `.nii.gz`).
pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    let raw = nifti::read(path)?;
    CtVolume::new(id, raw.dims, raw.spacing, raw.data)
}

/// Writes a volume as float32 NIfTI-1, gzip-compressed when the path ends in
/// `.gz`.
pub fn save_volume(vol: &CtVolume, path: &Path) -> Result<()> {
    nifti::write(path, vol.dims, vol.spacing, &vol.voxels)
}
