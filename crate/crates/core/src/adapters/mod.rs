//! Modality adapters: how a perturbation combines with a sample and what
//! counts as its size, per input domain.

pub mod board;
pub mod image;
pub mod tabular;

pub use board::{
    board_combine, board_distance, effective_masks, train_legality_classifier, BoardAdapter,
};
pub use image::{image_combine, image_distance, ImageAdapter};
pub use tabular::{tabular_combine, tabular_distance, TabularAdapter};
