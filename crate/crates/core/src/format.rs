//! Text output helpers shared by the CSV writers.

/// Fixed 17-significant-digit scientific notation; parses back to the same
/// `f64` bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Joins already formatted fields into one CSV line (with newline).
pub fn csv_row<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut line = String::new();
    for (i, f) in fields.into_iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(f.as_ref());
    }
    line.push('\n');
    line
}
