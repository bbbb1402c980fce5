//! Segmentation-forecast metrics and baselines.
