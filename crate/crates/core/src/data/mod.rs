//! Synthetic shapes, augmentations, labelled datasets and plain-text point
//! file formats.

mod formats;
mod shapes;

pub use formats::{parse_by_extension, parse_off, parse_ply, parse_xyz, to_ply};
pub use shapes::{
    augment_rotate, augment_rotate_with, augment_scale_translate, augment_scale_translate_with,
    generate_named, generate_shape, generate_shape_with, rotate_z, synthetic_datasets,
    Augmentation, Dataset, Sample, ShapeKind, Split, SyntheticConfig, CUBE_HALF,
    CYLINDER_HALF_HEIGHT, CYLINDER_RADIUS, TORUS_MAJOR, TORUS_MINOR,
};
