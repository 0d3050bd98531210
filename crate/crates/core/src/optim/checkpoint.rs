//! Per-frame parameter checkpoints: one raster container per frame holding
//! `[a, b, mesh.., pose twist..]` as a single row.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector6;

use crate::error::{Error, Result};
use crate::geometry::{se3_exp, se3_log, Pose, Twist};
use crate::io::raster_file::{read_raster, write_raster};
use crate::optim::params::FrameParams;
use crate::raster::Raster;

pub fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("params_{t:06}.gcvdr"))
}

/// Writes every frame's parameters. The realized pose is stored as a twist
/// from the identity, so values are single precision.
pub fn write_checkpoint(dir: &Path, params: &[FrameParams]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, p) in params.iter().enumerate() {
        let mut q = p.clone();
        q.twist = se3_log(&p.pose())?.0;
        let row: Vec<f32> = q.flatten().into_iter().map(|v| v as f32).collect();
        let r = Raster::from_vec(row.len(), 1, 1, row)?;
        write_raster(&r, &checkpoint_path(dir, t))?;
    }
    Ok(())
}

/// Reads `frames` checkpoints with meshes of `mesh_len` vertices.
pub fn read_checkpoint(dir: &Path, frames: usize, mesh_len: usize) -> Result<Vec<FrameParams>> {
    (0..frames)
        .map(|t| {
            let path = checkpoint_path(dir, t);
            let r = read_raster(&path)?;
            if r.len() != 8 + mesh_len || r.height() != 1 {
                return Err(Error::Dimension(format!(
                    "{}: expected {} values, found {}",
                    path.display(),
                    8 + mesh_len,
                    r.len()
                )));
            }
            let v: Vec<f64> = r.data().iter().map(|&x| x as f64).collect();
            let mut p = FrameParams::new(0.0, 0.0, mesh_len, Pose::identity());
            p.unflatten(&v);
            p.base = se3_exp(&Twist(p.twist));
            p.twist = Vector6::zeros();
            Ok(p)
        })
        .collect()
}
