//! Clip files, manifests, the synthetic generator, temporal sampling and augmentation.
//!
//! On disk a dataset split is a directory holding `manifest.json` and one
//! single-channel `CLP1` clip per (sample, source). Clips are stored at the
//! full frame rate; [`temporal_downsample`] halves them on load and
//! [`sample_window`] picks 8 equally spaced frames out of a 32-frame window.

mod clip;
mod manifest;
mod pipeline;
mod source;
mod synth;

pub use clip::{
    decode_clip, encode_clip, load_clip, temporal_downsample, write_clip, Clip, CLIP_MAGIC,
};
pub use manifest::{ClipSet, Manifest, SampleEntry, MANIFEST_FILE};
pub use pipeline::{
    augment, augment_views, eval_inputs, eval_window, flip_horizontal, load_sample,
    resize_bilinear, sample_window, select_windows, window_indices, SpatialAug, CLIP_FRAMES,
    CROP_AREA_RANGE, EVAL_CROP_AREA, FRAME_STRIDE, WINDOW,
};
pub use source::{validate_sources, Modality, SourceTag, View};
pub use synth::{render_sample, stratified_counts, synth_generate, SynthConfig, SynthOutput};
