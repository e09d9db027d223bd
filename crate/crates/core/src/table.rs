//! Plain CSV emission shared by the solvers and the experiment runner.

use std::io::{self, Write};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn float(x: f64) -> String {
    if x == 0.0 {
        // normalize -0.0 so identical runs diff clean
        return format!("{:.16e}", 0.0);
    }
    format!("{x:.16e}")
}

/// Writes a header row followed by pre-formatted rows.
pub fn write_csv<W: Write>(out: &mut W, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, std::f64::consts::E] {
            assert_eq!(float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(float(-0.0), float(0.0));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1,2\n");
    }
}
