use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use log::warn;

use super::{Field, FirmQuarter, Metric, Panel, PanelError, RowError, SecurityId, N_FIELDS};

/// Exact column order of the panel CSV.
pub const PANEL_HEADER: [&str; 25] = [
    "permno",
    "gvkey",
    "ticker",
    "quarter_end",
    "price",
    "market_cap",
    "volume",
    "total_assets",
    "total_liabilities",
    "net_income",
    "operating_income",
    "cash_flow_ops",
    "current_ratio",
    "debt_to_equity",
    "roa",
    "roe",
    "eps",
    "book_value_per_share",
    "num_analysts",
    "auditor_changes",
    "restatements",
    "sic_code",
    "ret_1m",
    "avg_vol_3m",
    "in_sp500",
];

const SIC_COLUMN: usize = 21;

#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: Panel,
    /// (permno, quarter_end) keys whose later occurrences were dropped.
    pub duplicates: Vec<(u32, NaiveDate)>,
}

impl LoadedPanel {
    pub fn warning_count(&self) -> usize {
        self.duplicates.len()
    }
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<LoadedPanel, PanelError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_panel(file, &path.display().to_string())
}

/// Parses panel CSV from any reader; `origin` names the source in errors.
pub fn read_panel(input: impl Read, origin: &str) -> Result<LoadedPanel, PanelError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != PANEL_HEADER {
        let detail = match got
            .iter()
            .zip(PANEL_HEADER.iter())
            .position(|(a, b)| a != b)
        {
            Some(i) => format!("column {} is {:?}, expected {:?}", i + 1, got[i], PANEL_HEADER[i]),
            None => format!("expected {} columns, found {}", PANEL_HEADER.len(), got.len()),
        };
        return Err(PanelError::Header {
            path: origin.to_string(),
            detail,
        });
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        match parse_row(&row) {
            Ok(r) => match r.validate() {
                Ok(()) => records.push(r),
                Err((column, message)) => errors.push(RowError {
                    line,
                    column: Some(column),
                    message,
                }),
            },
            Err((column, message)) => errors.push(RowError {
                line,
                column,
                message,
            }),
        }
    }
    if !errors.is_empty() {
        return Err(PanelError::Validation(errors));
    }
    let (panel, duplicates) = Panel::from_records(records);
    if !duplicates.is_empty() {
        warn!("{origin}: collapsed {} duplicate (permno, quarter_end) rows", duplicates.len());
    }
    Ok(LoadedPanel { panel, duplicates })
}

type ParseFailure = (Option<String>, String);

fn parse_row(row: &csv::StringRecord) -> Result<FirmQuarter, ParseFailure> {
    if row.len() != PANEL_HEADER.len() {
        return Err((
            None,
            format!("expected {} fields, found {}", PANEL_HEADER.len(), row.len()),
        ));
    }
    let cell = |i: usize| row.get(i).unwrap_or("").trim();
    let fail = |i: usize, msg: String| (Some(PANEL_HEADER[i].to_string()), msg);

    let permno: u32 = cell(0)
        .parse()
        .map_err(|_| fail(0, format!("invalid integer {:?}", cell(0))))?;
    let gvkey: u32 = cell(1)
        .parse()
        .map_err(|_| fail(1, format!("invalid integer {:?}", cell(1))))?;
    let id = SecurityId::new(permno, gvkey, cell(2)).map_err(|m| fail(2, m))?;
    let quarter_end = NaiveDate::parse_from_str(cell(3), "%Y-%m-%d")
        .map_err(|_| fail(3, format!("unparseable date {:?}", cell(3))))?;

    let mut metrics = [Metric::Missing; N_FIELDS];
    let mut col = 4;
    for field in Field::ALL {
        if col == SIC_COLUMN {
            col += 1;
        }
        let raw = cell(col);
        if !raw.is_empty() {
            let v: f64 = raw
                .parse()
                .map_err(|_| fail(col, format!("invalid number {raw:?}")))?;
            if !v.is_finite() {
                return Err(fail(col, format!("non-finite value {raw:?}")));
            }
            metrics[field.index()] = Metric::Present(v);
        }
        col += 1;
    }
    let sic_raw = cell(SIC_COLUMN);
    let sic_code = if sic_raw.is_empty() {
        None
    } else {
        Some(
            sic_raw
                .parse::<u16>()
                .map_err(|_| fail(SIC_COLUMN, format!("invalid SIC code {sic_raw:?}")))?,
        )
    };
    let in_sp500 = match cell(24) {
        "0" => false,
        "1" => true,
        other => return Err(fail(24, format!("label must be 0 or 1, got {other:?}"))),
    };
    Ok(FirmQuarter {
        id,
        quarter_end,
        metrics,
        sic_code,
        in_sp500,
    })
}

pub fn write_panel(panel: &Panel, out: impl Write) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_HEADER)?;
    let mut row: Vec<String> = Vec::with_capacity(PANEL_HEADER.len());
    for r in panel.records() {
        row.clear();
        row.push(r.id.permno.to_string());
        row.push(r.id.gvkey.to_string());
        row.push(r.id.ticker.clone());
        row.push(r.quarter_end.format("%Y-%m-%d").to_string());
        for field in Field::ALL {
            if row.len() == SIC_COLUMN {
                row.push(r.sic_code.map(|s| format!("{s:04}")).unwrap_or_default());
            }
            row.push(r.get(field).value().map(|v| v.to_string()).unwrap_or_default());
        }
        row.push(if r.in_sp500 { "1" } else { "0" }.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| PanelError::Csv(e.into()))?;
    Ok(())
}
