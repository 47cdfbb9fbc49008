const SEPARATOR: &str = "\n\n";

/// Joins context sections, dropping the oldest ones until the result fits in
/// `budget` characters. A lone section that is still too long keeps its tail.
pub fn build_context(sections: &[String], budget: usize) -> String {
    let mut total = 0usize;
    let mut first_kept = sections.len();
    for (index, section) in sections.iter().enumerate().rev() {
        let extra = section.chars().count() + if first_kept < sections.len() { SEPARATOR.len() } else { 0 };
        if total + extra > budget {
            break;
        }
        total += extra;
        first_kept = index;
    }
    if first_kept == sections.len() {
        // Not even the newest section fits whole.
        return match sections.last() {
            Some(last) => {
                let skip = last.chars().count().saturating_sub(budget);
                last.chars().skip(skip).collect()
            }
            None => String::new(),
        };
    }
    sections[first_kept..].join(SEPARATOR)
}
