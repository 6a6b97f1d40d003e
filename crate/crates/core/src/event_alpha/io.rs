//! CSV formats: announcements `ticker,kind,announce_date` and prices
//! `ticker,date,close`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{compute_move, Announcement, EventError, EventRecord, PriceSeries, HORIZONS};
use crate::panel_store::TransitionKind;

const ANNOUNCEMENT_HEADER: [&str; 3] = ["ticker", "kind", "announce_date"];
const PRICE_HEADER: [&str; 3] = ["ticker", "date", "close"];

fn open(path: &Path) -> Result<File, EventError> {
    File::open(path).map_err(|source| EventError::Io { path: path.display().to_string(), source })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str], origin: &str) -> Result<(), EventError> {
    let header = rdr.headers()?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(EventError::Row {
            path: origin.into(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

pub fn load_announcements(path: &Path) -> Result<Vec<Announcement>, EventError> {
    read_announcements(open(path)?, &path.display().to_string())
}

pub fn read_announcements(input: impl Read, origin: &str) -> Result<Vec<Announcement>, EventError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(&mut rdr, &ANNOUNCEMENT_HEADER, origin)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let err = |message: String| EventError::Row { path: origin.into(), line, message };
        let ticker = rec.get(0).unwrap_or("").trim();
        if ticker.is_empty() {
            return Err(err("empty ticker".into()));
        }
        let kind_s = rec.get(1).unwrap_or("").trim();
        let kind = TransitionKind::parse(kind_s).ok_or_else(|| err(format!("unknown kind {kind_s:?}")))?;
        let date_s = rec.get(2).unwrap_or("").trim();
        let announce_date = date_s.parse().map_err(|_| err(format!("bad date {date_s:?}")))?;
        out.push(Announcement { ticker: ticker.into(), kind, announce_date });
    }
    Ok(out)
}

pub fn write_announcements(items: &[Announcement], out: impl Write) -> Result<(), EventError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ANNOUNCEMENT_HEADER)?;
    for a in items {
        w.write_record([a.ticker.as_str(), a.kind.as_str(), &a.announce_date.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn load_prices(path: &Path) -> Result<BTreeMap<String, PriceSeries>, EventError> {
    read_prices(open(path)?, &path.display().to_string())
}

/// Rows may come in any order; each ticker's dates must be distinct.
pub fn read_prices(input: impl Read, origin: &str) -> Result<BTreeMap<String, PriceSeries>, EventError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(&mut rdr, &PRICE_HEADER, origin)?;
    let mut raw: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let err = |message: String| EventError::Row { path: origin.into(), line, message };
        let ticker = rec.get(0).unwrap_or("").trim();
        if ticker.is_empty() {
            return Err(err("empty ticker".into()));
        }
        let date_s = rec.get(1).unwrap_or("").trim();
        let date: NaiveDate = date_s.parse().map_err(|_| err(format!("bad date {date_s:?}")))?;
        let close_s = rec.get(2).unwrap_or("").trim();
        let close: f64 = close_s.parse().map_err(|_| err(format!("bad close {close_s:?}")))?;
        raw.entry(ticker.to_string()).or_default().push((date, close));
    }
    raw.into_iter()
        .map(|(t, mut pts)| {
            pts.sort_by_key(|p| p.0);
            PriceSeries::new(&t, pts).map(|s| (t, s))
        })
        .collect()
}

pub fn write_prices(prices: &BTreeMap<String, PriceSeries>, out: impl Write) -> Result<(), EventError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PRICE_HEADER)?;
    for (t, s) in prices {
        for (date, close) in s.points() {
            w.write_record([t.as_str(), &date.to_string(), &close.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Plot-ready per-event moves, one row per event.
pub fn write_moves_csv(events: &[EventRecord], out: impl Write) -> Result<(), EventError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["ticker".to_string(), "kind".into(), "announce_date".into()];
    header.extend(HORIZONS.iter().map(|h| format!("move_{h}d_pct")));
    w.write_record(&header)?;
    for e in events {
        let mut row = vec![e.ticker.clone(), e.kind.as_str().into(), e.announce_date.to_string()];
        for h in HORIZONS {
            row.push(compute_move(e, h)?.move_pct.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn announcements_round_trip() {
        let text = "ticker,kind,announce_date\nUBER,addition,2023-12-01\nSEDG,removal,2024-03-01\n";
        let a = read_announcements(text.as_bytes(), "a.csv").unwrap();
        assert_eq!(a[1].kind, TransitionKind::Removal);
        let mut buf = Vec::new();
        write_announcements(&a, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn bad_rows_cite_line() {
        let text = "ticker,kind,announce_date\nA,addition,2023-12-01\nB,split,2024-03-01\n";
        let e = read_announcements(text.as_bytes(), "a.csv").unwrap_err();
        assert!(e.to_string().starts_with("a.csv:3:"), "{e}");
        assert!(read_prices("t,d,c\n".as_bytes(), "p.csv").is_err());
    }

    #[test]
    fn prices_sorted_per_ticker() {
        let text = "ticker,date,close\nA,2024-01-03,11\nB,2024-01-02,5\nA,2024-01-02,10\n";
        let p = read_prices(text.as_bytes(), "p.csv").unwrap();
        assert_eq!(p["A"].points()[0].1, 10.0);
        assert_eq!(p["A"].move_pct("A", "2024-01-02".parse().unwrap(), 1).unwrap(), 10.0);
        let dup = "ticker,date,close\nA,2024-01-02,11\nA,2024-01-02,5\n";
        assert!(read_prices(dup.as_bytes(), "p.csv").is_err());
    }
}
