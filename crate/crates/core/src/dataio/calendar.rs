use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};

/// Calendar codes of one timestamp. `weekday` counts from Monday = 0;
/// `day` (1..=31) and `month` (1..=12) are civil values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CalendarFeature {
    pub minute: u8,
    pub hour: u8,
    pub weekday: u8,
    pub day: u8,
    pub month: u8,
}

/// A temporal resolution that contributes one embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Minute,
    Hour,
    Weekday,
    Day,
    Month,
}

impl Scale {
    pub const ALL: [Scale; 5] = [
        Scale::Minute,
        Scale::Hour,
        Scale::Weekday,
        Scale::Day,
        Scale::Month,
    ];

    pub fn cardinality(self) -> usize {
        match self {
            Scale::Minute => 60,
            Scale::Hour => 24,
            Scale::Weekday => 7,
            Scale::Day => 31,
            Scale::Month => 12,
        }
    }

    /// Zero-based lookup index of `f` at this scale.
    pub fn code(self, f: &CalendarFeature) -> usize {
        match self {
            Scale::Minute => f.minute as usize,
            Scale::Hour => f.hour as usize,
            Scale::Weekday => f.weekday as usize,
            Scale::Day => f.day as usize - 1,
            Scale::Month => f.month as usize - 1,
        }
    }
}

/// Scales active for a sampling interval: sub-hourly data adds minutes.
pub fn scales_for_interval(interval_seconds: i64) -> Vec<Scale> {
    if interval_seconds > 0 && interval_seconds < 3600 {
        Scale::ALL.to_vec()
    } else {
        vec![Scale::Hour, Scale::Weekday, Scale::Day, Scale::Month]
    }
}

pub fn calendar_feature(epoch: i64) -> CalendarFeature {
    let dt = DateTime::from_timestamp(epoch, 0).expect("timestamp within chrono range");
    CalendarFeature {
        minute: dt.minute() as u8,
        hour: dt.hour() as u8,
        weekday: dt.weekday().num_days_from_monday() as u8,
        day: dt.day() as u8,
        month: dt.month() as u8,
    }
}

pub fn calendar_features(timestamps: &[i64]) -> Vec<CalendarFeature> {
    timestamps.iter().map(|&t| calendar_feature(t)).collect()
}
