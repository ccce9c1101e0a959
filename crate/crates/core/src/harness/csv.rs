//! CSV writers. Numbers use six significant digits and `.` decimals so that
//! identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::latency::DelayDistribution;
use crate::{Error, Result};

use super::sweep::SweepResult;

/// `x` rounded to six significant digits, trailing zeros dropped.
/// Scientific notation is used below `1e-5` and from `1e15` up.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-5..15).contains(&exp) {
        return format!("{}e{exp}", trim(mantissa.to_string()));
    }
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let plain = if exp >= 5 {
        format!("{digits}{}", "0".repeat(exp as usize - 5))
    } else if exp >= 0 {
        let (int, frac) = digits.split_at(exp as usize + 1);
        format!("{int}.{frac}")
    } else {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    };
    format!("{sign}{}", trim(plain))
}

fn trim(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = format!("{},accuracy_mean,accuracy_std,delay_ms_mean\n", result.kind.column());
    for row in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_sig(row.x),
            fmt_sig(row.accuracy),
            fmt_sig(row.accuracy_std),
            fmt_sig(row.delay_ms)
        );
    }
    out
}

pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write_file(path, &sweep_csv(result))
}

/// Closed-form and Monte Carlo curves sampled on the same ε grid.
pub fn cdf_csv(closed_form: &DelayDistribution, monte_carlo: &DelayDistribution) -> Result<String> {
    if closed_form.points.len() != monte_carlo.points.len() {
        return Err(Error::shape(
            format!("{} grid points", closed_form.points.len()),
            monte_carlo.points.len(),
        ));
    }
    let mut out = String::from("epsilon_ms,prob_closed_form,prob_monte_carlo\n");
    for (&(eps, cf), &(_, mc)) in closed_form.points.iter().zip(&monte_carlo.points) {
        let _ = writeln!(out, "{},{},{}", fmt_sig(eps), fmt_sig(cf), fmt_sig(mc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(700.0), "700");
        assert_eq!(fmt_sig(0.2), "0.2");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_sig(-1234.5678), "-1234.57");
        assert_eq!(fmt_sig(9.9999996), "10");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig(0.000012345678), "0.0000123457");
        assert_eq!(fmt_sig(2.5e20), "2.5e20");
    }
}
