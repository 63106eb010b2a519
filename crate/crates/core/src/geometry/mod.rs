//! Surface meshes, signed distance sampling, cortex condition fusion,
//! thickness/atrophy and surface-distance metrics.

pub mod assd;
pub mod bvh;
pub mod cortical;
pub mod fusion;
pub mod isosurface;
pub mod mesh;
pub mod sdf;

pub use assd::{assd, assd_seeded, sample_surface};
pub use bvh::Bvh;
pub use cortical::{
    cortical_thickness, midthickness, ribbon_from_midthickness, ribbon_sample, simulate_atrophy,
    simulate_atrophy_with_step, AtrophyOutcome, ATROPHY_STEP,
};
pub use fusion::{
    default_edge_tau, edge_map, fuse_cortex_sdf, fuse_voxel, AuxChannels, ConditionSet,
    PrimaryCondition,
};
pub use isosurface::{components_by_size, enclosed_isosurface, extract_isosurface};
pub use mesh::{load_closed_mesh, load_mesh, save_mesh, TriMesh};
pub use sdf::{sample_sdf_grid, signed_distance, SignedDistanceField};
