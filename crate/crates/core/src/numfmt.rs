//! Seventeen-significant-digit float formatting for CSV and JSON output.

use std::io;

/// Formats `x` in scientific notation with 17 significant digits.
///
/// Non-finite values are written as `nan`, `inf` and `-inf`.
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// `serde_json` formatter that writes every float with 17 significant digits.
/// Non-finite floats become `null`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Fmt17Formatter;

impl serde_json::ser::Formatter for Fmt17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serialises `value` as compact JSON using [`Fmt17Formatter`].
pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Fmt17Formatter);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}
