//! Dataset loading, synthesis and concept label functions for the three
//! modalities.

pub mod boards;
pub mod images;
pub mod tabular;
