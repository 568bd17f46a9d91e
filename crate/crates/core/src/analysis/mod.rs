//! Grounding-decay metrics on recorded attention and attention-contrast
//! bounding boxes.

pub mod contrast;
pub mod csv_out;
pub mod metrics;
pub mod planted;
pub mod record;

pub use contrast::{
    attention_contrast_bbox, contrast_bbox_from_maps, crop_rect, image_attention_map, ContrastConfig, ContrastResult,
    PatchRect,
};
pub use csv_out::{analysis_columns, emit_csv, write_series_csv, SeriesColumn};
pub use metrics::{
    bbox_attention_ratio, copy_vs_input_attention, cumulative_image_attention, decay_series, CopyInputSeries,
    DecaySeries,
};
pub use record::{AttentionRecord, PositionTag};
