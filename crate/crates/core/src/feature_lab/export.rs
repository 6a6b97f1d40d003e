use std::io::Write;

use super::{FeatureError, FeatureMatrix};

/// `permno,quarter_end,<feature columns...>`, one line per row.
pub fn write_matrix_csv(matrix: &FeatureMatrix, out: impl Write) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["permno".to_string(), "quarter_end".to_string()];
    header.extend(matrix.column_names());
    w.write_record(&header)?;
    for (key, row) in matrix.row_keys.iter().zip(matrix.values.rows()) {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(key.permno.to_string());
        rec.push(key.quarter_end.format("%Y-%m-%d").to_string());
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
