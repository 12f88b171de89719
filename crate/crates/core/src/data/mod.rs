//! Data formats, the phantom generator and dataset assembly.

mod dataset;
mod dsc;
mod phantom;
mod split;
mod tensor_io;

pub use dataset::{
    generate_dataset, load_subject, prepare_image, stack_batch, Dataset, DatasetManifest, GenerateConfig,
    Normalization, Sample, SubjectEntry, MANIFEST_FILE,
};
pub use dsc::{generate_series, minmax_normalize, select_timepoint, DscSeries, SELECTED_TIMEPOINT};
pub use phantom::{generate_phantom, render_phantom, Phantom, PhantomParams, BACKGROUND, BRAIN, GAP, SKULL};
pub use split::{split_sizes, subject_split, Split, SubjectSplit, DEFAULT_RATIOS};
pub use tensor_io::{
    decode_tensor, encode_tensor, load_tensor, read_tensor, save_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION,
};
