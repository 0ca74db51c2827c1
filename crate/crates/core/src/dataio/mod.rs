//! Series loading, standardization, calendar features, windowing and synthetic data.

mod calendar;
mod csvio;
mod frame;
mod synth;
mod window;

pub use calendar::{calendar_feature, calendar_features, scales_for_interval, CalendarFeature, Scale};
pub use csvio::{csv_columns, format_timestamp, load_csv, parse_timestamp, write_csv, Interval};
pub use frame::{destandardize, fit_stats, standardize, SeriesFrame, StandardizeStats, STD_FLOOR};
pub use synth::{synth_generate, SYNTH_EPOCH};
pub use window::{
    forecast_input, rolling_windows, split, window_at, windows_in_range, ForecastMode, SplitRanges,
    SplitSpec, WindowSample, WindowSpec,
};
