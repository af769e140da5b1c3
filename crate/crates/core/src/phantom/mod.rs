//! Synthetic aging phantoms, their parcellation and dataset IO.

mod dataset;
mod generate;
mod volume;

pub use dataset::{
    decade_bins, generate_cohort, generate_dataset, label_path, validate_manifest, write_dataset, Dataset, DatasetInfo,
    LabeledSample, Split, SplitRatios, ACCELERATED_GROUP, CONTROL_GROUP, INFO_FILE, MANIFEST_FILE,
};
pub use generate::{
    generate_phantom, phantom_labels, ParcellationAtlas, PhantomConfig, Sex, FIRST_DISTRACTOR, LABEL_BACKGROUND,
    LABEL_BLOB_LEFT, LABEL_BLOB_RIGHT, LABEL_SHELL, LABEL_VENTRICLE,
};
pub use volume::{read_volume, write_volume, Volume};
