use std::sync::LazyLock;

use regex::Regex;

use super::vocab;
use crate::interval::{clamp_interval, TimeInterval};

const FORMAT_PATTERN: &str =
    r"^<think>([A-Za-z0-9]*)</think><answer>([01]\.\d{2}) ([01]\.\d{2})</answer>$";

static FORMAT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(FORMAT_PATTERN).expect("format pattern compiles"));

/// The response-format regular expression.
pub fn format_regex() -> &'static Regex {
    &FORMAT
}

/// String form of a token sequence. EOS renders as nothing; adjacent
/// timestamps are separated by one space.
pub fn render(tokens: &[usize]) -> String {
    let mut out = String::with_capacity(tokens.len() * 6);
    let mut prev_was_stamp = false;
    for &t in tokens {
        let stamp = vocab::timestamp_bin(t);
        match t {
            vocab::THINK_OPEN => out.push_str("<think>"),
            vocab::THINK_CLOSE => out.push_str("</think>"),
            vocab::ANSWER_OPEN => out.push_str("<answer>"),
            vocab::ANSWER_CLOSE => out.push_str("</answer>"),
            vocab::EOS => {}
            _ if vocab::is_filler(t) => {
                out.push('F');
                out.push(char::from(b'0' + (t - vocab::FILLER_BASE) as u8));
            }
            _ => {
                let k = stamp.expect("token id inside the vocabulary");
                if prev_was_stamp {
                    out.push(' ');
                }
                out.push_str(&format!("{}.{:02}", k / 100, k % 100));
            }
        }
        prev_was_stamp = stamp.is_some();
    }
    out
}

/// Interval extracted from a well-formed response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedAnswer {
    pub interval: TimeInterval,
    /// The two answer timestamps were emitted in decreasing order.
    pub swapped: bool,
}

/// Parses the answer block; `None` when the response does not match the format.
pub fn parse_answer(rendered: &str) -> Option<ParsedAnswer> {
    let caps = FORMAT.captures(rendered)?;
    let start: f64 = caps.get(2)?.as_str().parse().ok()?;
    let end: f64 = caps.get(3)?.as_str().parse().ok()?;
    let clamped = clamp_interval(start, end).ok()?;
    Some(ParsedAnswer {
        interval: clamped.interval,
        swapped: clamped.swapped,
    })
}
