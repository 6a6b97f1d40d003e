//! Quarter-end and trading-day helpers.
//!
//! Trading days are approximated as Monday through Friday. Exchange holidays
//! are not modeled; price series supplied by the caller define the actual
//! trading calendar wherever one is available.

use chrono::{Datelike, Duration, NaiveDate, Weekday};

pub fn is_weekday(date: NaiveDate) -> bool {
    !matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Monday = 0 .. Sunday = 6.
pub fn day_of_week(date: NaiveDate) -> u32 {
    date.weekday().num_days_from_monday()
}

pub fn last_day_of_month(year: i32, month: u32) -> NaiveDate {
    let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
    NaiveDate::from_ymd_opt(ny, nm, 1).expect("valid month") - Duration::days(1)
}

pub fn weekday_on_or_before(date: NaiveDate) -> NaiveDate {
    let mut d = date;
    while !is_weekday(d) {
        d -= Duration::days(1);
    }
    d
}

pub fn weekday_on_or_after(date: NaiveDate) -> NaiveDate {
    let mut d = date;
    while !is_weekday(d) {
        d += Duration::days(1);
    }
    d
}

/// Last weekday of the quarter containing `year`/`quarter` (1..=4).
pub fn quarter_end(year: i32, quarter: u32) -> NaiveDate {
    weekday_on_or_before(last_day_of_month(year, quarter * 3))
}

/// `count` consecutive quarter ends starting at `year`/`quarter`.
pub fn quarter_ends(year: i32, quarter: u32, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let (mut y, mut q) = (year, quarter);
    for _ in 0..count {
        out.push(quarter_end(y, q));
        q += 1;
        if q > 4 {
            q = 1;
            y += 1;
        }
    }
    out
}

/// A plausible last trading day of a quarter: a weekday in the final week of
/// March, June, September or December. The week-long window admits
/// holiday-shortened quarter ends such as a Good Friday closure.
pub fn is_quarter_end_trading_date(date: NaiveDate) -> bool {
    if date.month() % 3 != 0 || !is_weekday(date) {
        return false;
    }
    let last = last_day_of_month(date.year(), date.month());
    (last - date).num_days() < 7
}

/// `n` weekdays after `date` (n = 0 returns `date`).
pub fn add_weekdays(date: NaiveDate, n: usize) -> NaiveDate {
    let mut d = date;
    let mut left = n;
    while left > 0 {
        d += Duration::days(1);
        if is_weekday(d) {
            left -= 1;
        }
    }
    d
}

/// `n` weekdays before `date`.
pub fn sub_weekdays(date: NaiveDate, n: usize) -> NaiveDate {
    let mut d = date;
    let mut left = n;
    while left > 0 {
        d -= Duration::days(1);
        if is_weekday(d) {
            left -= 1;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn day_of_week_monday_is_zero() {
        assert_eq!(day_of_week(d(2023, 6, 30)), 4);
        assert_eq!(day_of_week(d(2020, 3, 31)), 1);
        assert_eq!(day_of_week(d(2024, 1, 1)), 0);
    }

    #[test]
    fn quarter_end_skips_weekends() {
        // 2013-03-31 was a Sunday.
        assert_eq!(quarter_end(2013, 1), d(2013, 3, 29));
        assert_eq!(quarter_end(2023, 2), d(2023, 6, 30));
        let qs = quarter_ends(2013, 1, 42);
        assert_eq!(qs.len(), 42);
        assert_eq!(*qs.last().unwrap(), quarter_end(2023, 2));
        assert!(qs.iter().all(|q| is_quarter_end_trading_date(*q)));
    }

    #[test]
    fn quarter_end_check() {
        assert!(is_quarter_end_trading_date(d(2024, 3, 28)));
        assert!(!is_quarter_end_trading_date(d(2024, 3, 30)));
        assert!(!is_quarter_end_trading_date(d(2024, 4, 30)));
        assert!(!is_quarter_end_trading_date(d(2024, 3, 15)));
    }

    #[test]
    fn weekday_arithmetic() {
        assert_eq!(add_weekdays(d(2023, 6, 30), 1), d(2023, 7, 3));
        assert_eq!(sub_weekdays(d(2023, 7, 3), 1), d(2023, 6, 30));
        assert_eq!(add_weekdays(d(2023, 6, 28), 0), d(2023, 6, 28));
    }
}
