//! Procedural slicing simulator: vegetable state, parameterized cuts with
//! exact material bookkeeping, raster observations with bounding boxes,
//! thickness-class labels and dataset generation.

pub mod dataset;
pub mod render;
pub mod veg;

pub use dataset::{
    generate_dataset, read_index, read_pgm, write_index, write_pgm, Dataset, GenConfig,
    GenSummary, Transition, DEFAULT_NOISE_SIGMA, DESK_EPISODES, PAPER_EPISODES_CUCUMBER,
    PAPER_EPISODES_TOMATO,
};
pub use render::{render, render_slice, render_state, render_with_noise, BBox, Observation, IMG_SIZE};
pub use veg::{
    apply_cut, classify_thickness, new_vegetable, CutAction, CutOutcome, ObsRole, ShapeTag,
    VegKind, VegProfile, VegetableState, MIN_HOLD_FRACTION, MIN_SLICE_CM, REMAINING_CLASSES,
    REMAINING_CLASS_NAMES, SLICE_CLASSES, SLICE_CLASS_NAMES, THICKNESS_FRACTIONS,
};
