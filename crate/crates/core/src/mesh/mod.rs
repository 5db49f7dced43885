//! Fine and coarse structured grids, embedded fractures and local domains.

mod coarse;
mod fracture;
mod grid;
mod local;

pub use coarse::{build_coarse_grid, CoarseFractureCell, CoarseFractureLink, CoarseGrid};
pub use fracture::{
    embed_fractures, mean_distance_to_line, parse_segments, read_segments, ConnectivityIndex,
    FractureCell, FractureLink, FractureMesh, Segment,
};
pub use grid::{build_fine_grid, Face, FaceOrientation, FineGrid, StructuredGrid};
pub use local::{enumerate_local_domains, CoarseWindow, DomainKind, LocalDomain};
