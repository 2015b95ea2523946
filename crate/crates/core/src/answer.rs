//! Answer normalization shared by the refine tool and grading.
//!
//! Numeric answers are parsed into exact rationals so that tolerance checks
//! at the boundary (e.g. `0.333333` vs `1/3`) are decided without rounding.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

/// Strips markdown emphasis, LaTeX wrappers and trailing punctuation.
pub fn clean(text: &str) -> String {
    let mut s = text.trim().to_string();
    if let Some(inner) = s.strip_prefix("\\boxed{").and_then(|r| r.strip_suffix('}')) {
        s = inner.to_string();
    }
    let s = s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '`' | '$'));
    let s = s.strip_suffix('.').filter(|r| !r.is_empty()).unwrap_or(s);
    s.trim().to_string()
}

/// Parses decimals, scientific notation and simple fractions `a/b`.
pub fn parse_number(text: &str) -> Option<BigRational> {
    let s = clean(text);
    let s = s.replace(' ', "");
    if let Some((n, d)) = s.split_once('/') {
        let n = parse_decimal(n)?;
        let d = parse_decimal(d)?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    parse_decimal(&s)
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    if exponent.unsigned_abs() > 400 {
        return None;
    }
    let all: String = format!("{int_part}{frac_part}");
    let mut value = BigInt::parse_bytes(all.as_bytes(), 10)?;
    if negative {
        value = -value;
    }
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let ratio = if scale >= 0 {
        BigRational::from_integer(value * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(value, num_traits::pow(ten, (-scale) as usize))
    };
    Some(ratio)
}

/// Equal within relative 1e-6 or absolute 1e-9, evaluated exactly.
pub fn numbers_equal(a: &BigRational, b: &BigRational) -> bool {
    let diff = (a - b).abs();
    let abs_tol = BigRational::new(BigInt::from(1), BigInt::from(1_000_000_000u64));
    if diff <= abs_tol {
        return true;
    }
    let scale = if a.abs() > b.abs() { a.abs() } else { b.abs() };
    diff <= scale * BigRational::new(BigInt::from(1), BigInt::from(1_000_000u64))
}

pub fn numeric_equivalent(a: &str, b: &str) -> bool {
    match (parse_number(a), parse_number(b)) {
        (Some(x), Some(y)) => numbers_equal(&x, &y),
        _ => false,
    }
}

/// Extracts a single option label from answers like `B`, `(b)`, `b)`,
/// `B. 142` or `Option C`.
pub fn choice_label(text: &str) -> Option<char> {
    let s = clean(text);
    let s = s.trim_start_matches(['(', '[', '{']);
    let s = strip_prefix_ci(s, "option").map(str::trim_start).unwrap_or(s);
    let s = strip_prefix_ci(s, "choice").map(str::trim_start).unwrap_or(s);
    let mut chars = s.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let rest = chars.as_str();
    let rest_ok = rest.is_empty() || rest.starts_with([')', '.', ':', ']', '}', ' ', ',']);
    let rest_trimmed = rest.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    if !rest_ok {
        return None;
    }
    // `B` alone, or `B` followed by a delimiter and option text.
    if rest_trimmed.is_empty() || rest.starts_with([')', '.', ':']) {
        return Some(first.to_ascii_uppercase());
    }
    None
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    (s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix)).then(|| &s[prefix.len()..])
}

pub fn choice_equivalent(a: &str, b: &str) -> bool {
    match (choice_label(a), choice_label(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Label for the `index`-th option (0-based): A, B, ...
pub fn label_for(index: usize) -> char {
    (b'A' + (index % 26) as u8) as char
}

/// Maps a predicted answer onto an option label, accepting either the label
/// itself or the option's text.
pub fn resolve_choice(predicted: &str, choices: &[String]) -> Option<char> {
    if let Some(label) = choice_label(predicted) {
        if (label as usize) < b'A' as usize + choices.len() {
            return Some(label);
        }
    }
    let p = normalize_text(predicted);
    choices.iter().enumerate().find_map(|(i, option)| {
        let label = label_for(i);
        let body = option_body(option, label);
        (normalize_text(&body) == p || normalize_text(option) == p).then_some(label)
    })
}

fn option_body(option: &str, label: char) -> String {
    let t = option.trim();
    let mut chars = t.chars();
    if chars.next().map(|c| c.to_ascii_uppercase()) == Some(label) {
        let rest = chars.as_str();
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            return r.trim().to_string();
        }
    }
    t.to_string()
}

/// Lowercase, collapsed whitespace, without surrounding punctuation.
pub fn normalize_text(text: &str) -> String {
    clean(text)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}
