use super::{BackendError, Side};

/// Extracts the final choice from free-text judge output: the last `[1]` or
/// `[2]` marker decides, and the text before it is the justification.
pub fn parse_verdict(raw: &str) -> Result<(Side, String), BackendError> {
    let last = [("[1]", Side::First), ("[2]", Side::Second)]
        .into_iter()
        .filter_map(|(marker, side)| raw.rfind(marker).map(|pos| (pos, side)))
        .max_by_key(|(pos, _)| *pos);
    match last {
        Some((pos, side)) => Ok((side, raw[..pos].trim().to_string())),
        None => {
            let excerpt: String = raw.chars().take(80).collect();
            Err(BackendError::UnparseableVerdict(format!("no [1]/[2] marker in {excerpt:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_answer_marker() {
        let (side, why) =
            parse_verdict("…therefore the second design is better. Final answer: [2]").unwrap();
        assert_eq!(side, Side::Second);
        assert_eq!(why, "…therefore the second design is better. Final answer:");
    }

    #[test]
    fn last_marker_wins() {
        let raw = "[1] is better because [2] lacks X. Answer: [1]";
        let (side, why) = parse_verdict(raw).unwrap();
        assert_eq!(side, Side::First);
        assert_eq!(why, "[1] is better because [2] lacks X. Answer:");
    }

    #[test]
    fn no_marker() {
        let err = parse_verdict("both are fine").unwrap_err();
        assert!(err.to_string().contains("unparseable verdict"));
    }

    #[test]
    fn trailing_text_after_marker() {
        let (side, _) = parse_verdict("Final answer: [2].\n").unwrap();
        assert_eq!(side, Side::Second);
    }
}
