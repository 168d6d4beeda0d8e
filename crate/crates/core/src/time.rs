//! UTC-second timestamps and the patient-local calendar derived from a fixed offset.

use chrono::{DateTime, Datelike, NaiveDate, Timelike};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Fixed UTC offset used to place timestamps on the patient's local clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LocalOffset(pub i32);

impl LocalOffset {
    pub const UTC: LocalOffset = LocalOffset(0);

    fn local_secs(self, ts: Timestamp) -> i64 {
        ts + self.0 as i64
    }

    pub fn hour(self, ts: Timestamp) -> usize {
        (self.local_secs(ts).rem_euclid(SECONDS_PER_DAY) / 3600) as usize
    }

    /// Seconds elapsed since local midnight.
    pub fn seconds_of_day(self, ts: Timestamp) -> i64 {
        self.local_secs(ts).rem_euclid(SECONDS_PER_DAY)
    }

    pub fn day(self, ts: Timestamp) -> NaiveDate {
        let days = self.local_secs(ts).div_euclid(SECONDS_PER_DAY);
        DateTime::from_timestamp(days * SECONDS_PER_DAY, 0)
            .expect("timestamp in chrono range")
            .date_naive()
    }

    /// UTC timestamp of local midnight starting `day`.
    pub fn midnight(self, day: NaiveDate) -> Timestamp {
        day.and_hms_opt(0, 0, 0)
            .expect("midnight exists")
            .and_utc()
            .timestamp()
            - self.0 as i64
    }

    pub fn at(self, day: NaiveDate, hour: u32, minute: u32) -> Timestamp {
        self.midnight(day) + (hour as i64) * 3600 + (minute as i64) * 60
    }

    pub fn format_hm(self, ts: Timestamp) -> String {
        let s = self.seconds_of_day(ts);
        format!("{:02}:{:02}", s / 3600, (s % 3600) / 60)
    }

    pub fn format_datetime(self, ts: Timestamp) -> String {
        let dt = DateTime::from_timestamp(self.local_secs(ts), 0).expect("timestamp in chrono range");
        format!(
            "{:04}-{:02}-{:02} {:02}:{:02}:{:02}",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour(),
            dt.minute(),
            dt.second()
        )
    }
}

/// Shared clock. Simulated clocks only move when told to, so runs are reproducible.
#[derive(Debug, Clone)]
pub struct SimClock {
    inner: std::sync::Arc<ClockInner>,
}

#[derive(Debug)]
enum ClockInner {
    Simulated(std::sync::atomic::AtomicI64),
    Wall,
}

impl SimClock {
    pub fn simulated(start: Timestamp) -> Self {
        SimClock { inner: std::sync::Arc::new(ClockInner::Simulated(start.into())) }
    }

    pub fn wall() -> Self {
        SimClock { inner: std::sync::Arc::new(ClockInner::Wall) }
    }

    pub fn now(&self) -> Timestamp {
        match &*self.inner {
            ClockInner::Simulated(t) => t.load(std::sync::atomic::Ordering::SeqCst),
            ClockInner::Wall => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs() as i64),
        }
    }

    /// Moves a simulated clock forward; never backwards. No effect on the wall clock.
    pub fn advance_to(&self, ts: Timestamp) {
        if let ClockInner::Simulated(t) = &*self.inner {
            t.fetch_max(ts, std::sync::atomic::Ordering::SeqCst);
        }
    }
}
