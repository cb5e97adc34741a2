//! Plain-text report assembly: aligned tables followed by a `key=value` block.

use std::fmt::Write;

use kronsep::Matrix;

pub const HISTOGRAM_BINS: usize = 16;

/// Magnitude histogram of a factor: exact zeros, then 16 bins with lower edges
/// `10^(-6 + i/2)`. The first bin also takes nonzero magnitudes below `1e-6`
/// and the last takes everything from `10^1.5` up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub zeros: usize,
    pub bins: [usize; HISTOGRAM_BINS],
}

impl Histogram {
    pub fn of(m: &Matrix) -> Self {
        let mut h = Histogram {
            zeros: 0,
            bins: [0; HISTOGRAM_BINS],
        };
        for &v in m.as_slice() {
            let a = v.abs();
            if a == 0.0 {
                h.zeros += 1;
                continue;
            }
            let i = ((a.log10() + 6.0) * 2.0).floor();
            let i = if i.is_nan() { HISTOGRAM_BINS - 1 } else { i.clamp(0.0, 15.0) as usize };
            h.bins[i] += 1;
        }
        h
    }

    pub fn lower_edge(bin: usize) -> f64 {
        10f64.powf(-6.0 + 0.5 * bin as f64)
    }
}

pub struct Report {
    title: String,
    timestamp: bool,
    body: String,
    kv: Vec<(String, String)>,
}

impl Report {
    pub fn new(title: &str, timestamp: bool) -> Self {
        Self {
            title: title.to_string(),
            timestamp,
            body: String::new(),
            kv: Vec::new(),
        }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    pub fn table(&mut self, header: &[&str], rows: &[Vec<String>]) {
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let fmt_row = |cells: &mut dyn Iterator<Item = &str>| {
            let mut s = String::new();
            for (i, (c, w)) in cells.zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let _ = write!(s, "{c:>w$}");
            }
            s.trim_end().to_string()
        };
        let head = fmt_row(&mut header.iter().copied());
        self.line(&head);
        self.line("-".repeat(head.chars().count()));
        for r in rows {
            let row = fmt_row(&mut r.iter().map(String::as_str));
            self.line(row);
        }
    }

    pub fn kv(&mut self, key: impl Into<String>, value: impl ToString) {
        self.kv.push((key.into(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.title);
        if self.timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            let _ = writeln!(out, "# generated_unix {secs}");
        }
        out.push('\n');
        out.push_str(&self.body);
        out.push_str("\n[metrics]\n");
        for (k, v) in &self.kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Fixed-precision cell; non-finite values print as `inf`/`nan`.
pub fn num(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        format!("{v}").to_lowercase()
    }
}

pub fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| num(v, digits))
}

pub fn shapes(factors: &[[usize; 2]]) -> String {
    factors
        .iter()
        .map(|[r, c]| format!("{r}x{c}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_by_decade_halves() {
        let m = Matrix::new(1, 7, vec![0.0, -0.0, 1e-9, 1e-6, 2e-6, 1.0, 1e5]).unwrap();
        let h = Histogram::of(&m);
        assert_eq!(h.zeros, 2);
        assert_eq!(h.bins[0], 3);
        assert_eq!(h.bins[12], 1);
        assert_eq!(h.bins[15], 1);
        assert_eq!(h.zeros + h.bins.iter().sum::<usize>(), m.len());
    }

    #[test]
    fn edges_are_half_decades() {
        assert_eq!(Histogram::lower_edge(0), 1e-6);
        assert!((Histogram::lower_edge(12) - 1.0).abs() < 1e-15);
        let just_below = Matrix::new(1, 1, vec![0.999_999]).unwrap();
        assert_eq!(Histogram::of(&just_below).bins[11], 1);
    }

    #[test]
    fn table_aligns_right() {
        let mut r = Report::new("t", false);
        r.table(&["a", "bbb"], &[vec!["10".into(), "1".into()]]);
        r.kv("x", 1.5);
        let text = r.render();
        assert!(text.contains(" a  bbb\n"));
        assert!(text.contains("10    1\n"));
        assert!(text.ends_with("[metrics]\nx=1.5\n"));
        assert!(!text.contains("generated"));
    }

    #[test]
    fn number_cells() {
        assert_eq!(num(f64::INFINITY, 2), "inf");
        assert_eq!(num(1.23456, 2), "1.23");
        assert_eq!(opt(None, 2), "-");
    }
}
