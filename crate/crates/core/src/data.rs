//! Rating logs: parsing, writing and the chronological split.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEvent {
    pub user: String,
    pub item: String,
    pub rating: f64,
    /// Unix seconds.
    pub timestamp: i64,
}

impl RatingEvent {
    pub fn new(user: impl Into<String>, item: impl Into<String>, rating: f64, timestamp: i64) -> Self {
        RatingEvent {
            user: user.into(),
            item: item.into(),
            rating,
            timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingFormat {
    /// `user::item::rating::timestamp`
    MovielensDat,
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    Tsv,
}

impl RatingFormat {
    fn separator(self) -> &'static str {
        match self {
            RatingFormat::MovielensDat => "::",
            RatingFormat::Tsv => "\t",
        }
    }
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" => Ok(RatingFormat::MovielensDat),
            "tsv" => Ok(RatingFormat::Tsv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::MovielensDat => "movielens-dat",
            RatingFormat::Tsv => "tsv",
        })
    }
}

/// Inclusive range of admissible rating values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale { min: 0.0, max: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRatings {
    pub events: Vec<RatingEvent>,
    pub lines: usize,
    pub malformed: usize,
}

/// Runs abort when more than this fraction of non-empty lines is malformed.
pub const MAX_MALFORMED_FRACTION: f64 = 0.001;

fn parse_line(line: &str, format: RatingFormat, scale: RatingScale) -> Option<RatingEvent> {
    let mut parts = line.split(format.separator());
    let user = parts.next()?.trim();
    let item = parts.next()?.trim();
    let rating: f64 = parts.next()?.trim().parse().ok()?;
    let ts = parts.next()?.trim();
    if parts.next().is_some() || user.is_empty() || item.is_empty() {
        return None;
    }
    // some exports write integral timestamps as floats
    let timestamp = ts
        .parse::<i64>()
        .ok()
        .or_else(|| ts.parse::<f64>().ok().filter(|t| t.fract() == 0.0).map(|t| t as i64))?;
    if timestamp < 0 || !rating.is_finite() || rating < scale.min || rating > scale.max {
        return None;
    }
    Some(RatingEvent::new(user, item, rating, timestamp))
}

/// Parses rating text and sorts by `(timestamp, user, item)`.
pub fn parse_ratings_str(text: &str, format: RatingFormat, scale: RatingScale, origin: &Path) -> Result<ParsedRatings> {
    let mut events = Vec::new();
    let (mut lines, mut malformed, mut first_bad) = (0usize, 0usize, 0usize);
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(line, format, scale) {
            Some(e) => events.push(e),
            None => {
                if malformed == 0 {
                    first_bad = no + 1;
                }
                malformed += 1;
            }
        }
    }
    if malformed as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(Error::Malformed {
            path: origin.to_path_buf(),
            malformed,
            total: lines,
            first_line: first_bad,
        });
    }
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed of {lines} lines", origin.display());
    }
    sort_events(&mut events);
    Ok(ParsedRatings {
        events,
        lines,
        malformed,
    })
}

pub fn parse_ratings(path: &Path, format: RatingFormat, scale: RatingScale) -> Result<ParsedRatings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings_str(&text, format, scale, path)
}

/// Stable sort by `(timestamp, user, item)`.
pub fn sort_events(events: &mut [RatingEvent]) {
    events.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.user.cmp(&b.user))
            .then_with(|| a.item.cmp(&b.item))
    });
}

pub fn check_sorted(events: &[RatingEvent]) -> Result<()> {
    match events.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        Some(i) => Err(Error::Unsorted { index: i + 1 }),
        None => Ok(()),
    }
}

/// Renders events in the given format, one per line. Ratings use the
/// shortest representation that parses back to the same `f64`.
pub fn format_ratings(events: &[RatingEvent], format: RatingFormat) -> String {
    let sep = format.separator();
    let mut out = String::with_capacity(events.len() * 24);
    for e in events {
        out.push_str(&format!(
            "{}{sep}{}{sep}{}{sep}{}\n",
            e.user, e.item, e.rating, e.timestamp
        ));
    }
    out
}

pub fn write_ratings(path: &Path, events: &[RatingEvent], format: RatingFormat) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_ratings(events, format).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Boundaries at fractions of the event count.
    Count,
    /// Boundaries at fractions of the covered wall-clock span.
    Time,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(SplitMode::Count),
            "time" => Ok(SplitMode::Time),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Count => "count",
            SplitMode::Time => "time",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<RatingEvent>,
    pub validation: Vec<RatingEvent>,
    pub test: Vec<RatingEvent>,
}

fn advance_past_ties(events: &[RatingEvent], mut cut: usize) -> usize {
    while cut > 0 && cut < events.len() && events[cut].timestamp == events[cut - 1].timestamp {
        cut += 1;
    }
    cut
}

/// Chronological three-way split. Events sharing a timestamp with the last
/// event of a segment stay in that segment.
pub fn chrono_split(events: &[RatingEvent], ratios: [f64; 3], mode: SplitMode) -> Result<Split> {
    if events.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty event list".into()));
    }
    check_sorted(events)?;
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || total <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let n = events.len();
    let (cut1, cut2) = match mode {
        SplitMode::Count => {
            let a = (ratios[0] / total * n as f64).floor() as usize;
            let b = (ratios[1] / total * n as f64).floor() as usize;
            let cut1 = advance_past_ties(events, a.min(n));
            let cut2 = advance_past_ties(events, (a + b).min(n).max(cut1));
            (cut1, cut2)
        }
        SplitMode::Time => {
            let t0 = events[0].timestamp as f64;
            let span = (events[n - 1].timestamp - events[0].timestamp) as f64;
            let b1 = t0 + ratios[0] / total * span;
            let b2 = t0 + (ratios[0] + ratios[1]) / total * span;
            let cut1 = events.partition_point(|e| (e.timestamp as f64) <= b1);
            let cut2 = events.partition_point(|e| (e.timestamp as f64) <= b2).max(cut1);
            (cut1, cut2)
        }
    };
    Ok(Split {
        train: events[..cut1].to_vec(),
        validation: events[cut1..cut2].to_vec(),
        test: events[cut2..].to_vec(),
    })
}
