//! Joint depth and pose refinement.

pub mod check;
pub mod checkpoint;
pub mod init;
pub mod loss;
pub mod params;
pub mod stages;
