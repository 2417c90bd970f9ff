//! Corpus timeline.
//!
//! Timestamps are absolute seconds since the corpus epoch (`DAY1 00:00:00`).
//! The display form `DAYd HH:MM:SS` is what every artefact file and prompt
//! uses; [`Timestamp::END`] stands in for "no time limit".

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const DAY: u64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid timestamp {input:?}: expected \"DAYd HH:MM:SS\" or \"DAYd HH:MM\"")]
pub struct TimeParseError {
    pub input: String,
}

impl Timestamp {
    /// Sentinel for an unbounded query time.
    pub const END: Timestamp = Timestamp(u64::MAX);

    pub fn from_day_clock(day: u32, hour: u32, minute: u32, second: u32) -> Self {
        debug_assert!(day >= 1);
        Timestamp(
            u64::from(day.saturating_sub(1)) * DAY
                + u64::from(hour) * 3600
                + u64::from(minute) * 60
                + u64::from(second),
        )
    }

    pub fn secs(self) -> u64 {
        self.0
    }

    pub fn is_end(self) -> bool {
        self == Self::END
    }

    /// One-based day number.
    pub fn day(self) -> u64 {
        self.0 / DAY + 1
    }

    fn hms(self) -> (u64, u64, u64) {
        let s = self.0 % DAY;
        (s / 3600, (s % 3600) / 60, s % 60)
    }

    /// `HH:MM:SS` without the day.
    pub fn clock(self) -> String {
        let (h, m, s) = self.hms();
        format!("{h:02}:{m:02}:{s:02}")
    }

    /// `HH:MM` without the day.
    pub fn clock_minutes(self) -> String {
        let (h, m, _) = self.hms();
        format!("{h:02}:{m:02}")
    }

    /// `DAYd HH:MM`, the resolution topic-chain facts are rendered at.
    pub fn display_minutes(self) -> String {
        format!("DAY{} {}", self.day(), self.clock_minutes())
    }

    pub fn saturating_add(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }

    pub fn saturating_sub(self, secs: u64) -> Self {
        Timestamp(self.0.saturating_sub(secs))
    }

    pub fn parse(input: &str) -> Result<Self, TimeParseError> {
        let err = || TimeParseError { input: input.into() };
        let trimmed = input.trim();
        if matches!(trimmed, "END" | "+inf" | "inf") {
            return Ok(Self::END);
        }
        let rest = trimmed.strip_prefix("DAY").ok_or_else(err)?;
        let (day, clock) = rest.split_once(|c: char| c == ' ' || c == '_').ok_or_else(err)?;
        let day: u32 = day.parse().map_err(|_| err())?;
        if day == 0 {
            return Err(err());
        }
        let mut parts = clock.trim().split(':');
        let mut next = |max: u32| -> Result<Option<u32>, TimeParseError> {
            match parts.next() {
                None => Ok(None),
                Some(p) if p.len() == 2 || p.len() == 1 => {
                    let v: u32 = p.parse().map_err(|_| err())?;
                    if v > max {
                        return Err(err());
                    }
                    Ok(Some(v))
                }
                Some(_) => Err(err()),
            }
        };
        let h = next(23)?.ok_or_else(err)?;
        let m = next(59)?.ok_or_else(err)?;
        let s = next(59)?.unwrap_or(0);
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(Self::from_day_clock(day, h, m, s))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_end() {
            return f.write_str("END");
        }
        let (h, m, s) = self.hms();
        write!(f, "DAY{} {h:02}:{m:02}:{s:02}", self.day())
    }
}

impl FromStr for Timestamp {
    type Err = TimeParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Closed interval `[start, end]` on the corpus timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeSpan {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        debug_assert!(start <= end);
        TimeSpan { start, end }
    }

    pub fn midpoint(&self) -> Timestamp {
        Timestamp(self.start.0 + (self.end.0 - self.start.0) / 2)
    }

    pub fn duration(&self) -> u64 {
        self.end.0 - self.start.0
    }

    pub fn overlaps(&self, other: &TimeSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains_span(&self, other: &TimeSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// `self` widened by `margin` seconds on both sides.
    pub fn widened(&self, margin: u64) -> TimeSpan {
        TimeSpan { start: self.start.saturating_sub(margin), end: self.end.saturating_add(margin) }
    }
}

impl fmt::Display for TimeSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} - {}", self.start, self.end)
    }
}

/// Caption window granularity of an Episode node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "30s")]
    Sec30,
    #[serde(rename = "3min")]
    Min3,
    #[serde(rename = "10min")]
    Min10,
    #[serde(rename = "1h")]
    Hour1,
}

impl Granularity {
    pub const ALL: [Granularity; 4] =
        [Granularity::Sec30, Granularity::Min3, Granularity::Min10, Granularity::Hour1];

    pub fn secs(self) -> u64 {
        match self {
            Granularity::Sec30 => 30,
            Granularity::Min3 => 180,
            Granularity::Min10 => 600,
            Granularity::Hour1 => 3600,
        }
    }

    /// Short label used in node ids.
    pub fn label(self) -> &'static str {
        match self {
            Granularity::Sec30 => "30s",
            Granularity::Min3 => "3min",
            Granularity::Min10 => "10min",
            Granularity::Hour1 => "1h",
        }
    }

    /// Label used when rendering a retrieved episode for the controller.
    pub fn history_label(self) -> &'static str {
        match self {
            Granularity::Sec30 => "30sec",
            other => other.label(),
        }
    }

    /// The next coarser layer, if any.
    pub fn coarser(self) -> Option<Granularity> {
        match self {
            Granularity::Sec30 => Some(Granularity::Min3),
            Granularity::Min3 => Some(Granularity::Min10),
            Granularity::Min10 => Some(Granularity::Hour1),
            Granularity::Hour1 => None,
        }
    }

    /// The next finer layer, if any.
    pub fn finer(self) -> Option<Granularity> {
        match self {
            Granularity::Sec30 => None,
            Granularity::Min3 => Some(Granularity::Sec30),
            Granularity::Min10 => Some(Granularity::Min3),
            Granularity::Hour1 => Some(Granularity::Min10),
        }
    }

    /// Aligned bucket start of the window of this granularity containing `t`.
    pub fn bucket_start(self, t: Timestamp) -> Timestamp {
        Timestamp(t.0 - t.0 % self.secs())
    }

    pub fn parse(s: &str) -> Option<Granularity> {
        match s {
            "30s" | "30sec" => Some(Granularity::Sec30),
            "3min" => Some(Granularity::Min3),
            "10min" => Some(Granularity::Min10),
            "1h" => Some(Granularity::Hour1),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Ordinal of the 30-second window starting near `start`. Rounds to the
/// nearest boundary so caption and clip windows skewed by a second agree.
pub fn window_ordinal(start: Timestamp) -> u64 {
    (start.0 + 15) / 30
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn parse_and_display() {
        let t = Timestamp::parse("DAY1 17:42:01").unwrap();
        assert_eq!(t.0, 17 * 3600 + 42 * 60 + 1);
        assert_eq!(t.to_string(), "DAY1 17:42:01");
        let t2 = Timestamp::parse("DAY3 22:00").unwrap();
        assert_eq!(t2.to_string(), "DAY3 22:00:00");
        assert_eq!(t2.display_minutes(), "DAY3 22:00");
        assert_eq!(Timestamp::parse("DAY2_00:00:05").unwrap().0, 86_405);
        assert!(Timestamp::parse("DAY0 10:00").is_err());
        assert!(Timestamp::parse("DAY1 25:00").is_err());
        assert!(Timestamp::parse("yesterday").is_err());
        assert!(Timestamp::parse("DAY1 10:00:00:00").is_err());
        assert_eq!(Timestamp::parse("END").unwrap(), Timestamp::END);
    }

    #[test]
    fn ordinal_tolerates_one_second_skew() {
        let a = Timestamp::parse("DAY1 17:42:00").unwrap();
        let b = Timestamp::parse("DAY1 17:42:01").unwrap();
        let c = Timestamp::parse("DAY1 17:41:59").unwrap();
        assert_eq!(window_ordinal(a), window_ordinal(b));
        assert_eq!(window_ordinal(a), window_ordinal(c));
        assert_ne!(window_ordinal(a), window_ordinal(a.saturating_add(30)));
    }

    #[test]
    fn buckets() {
        let t = Timestamp::parse("DAY1 17:42:01").unwrap();
        assert_eq!(Granularity::Min3.bucket_start(t).to_string(), "DAY1 17:42:00");
        assert_eq!(Granularity::Min10.bucket_start(t).to_string(), "DAY1 17:40:00");
        assert_eq!(Granularity::Hour1.bucket_start(t).to_string(), "DAY1 17:00:00");
    }
}
