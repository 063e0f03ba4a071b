//! Aligned plain-text tables.

/// Left-aligned first column, right-aligned remaining columns, a rule under
/// the header.
pub fn render<S: AsRef<str>>(headers: &[&str], rows: &[Vec<S>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (c, cell) in r.iter().enumerate().take(cols) {
            width[c] = width[c].max(cell.as_ref().chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = width[c] - cell.chars().count();
            if c > 0 {
                s.push_str("  ");
            }
            if c == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(headers.to_vec());
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols.saturating_sub(1))));
    out.push('\n');
    for r in rows {
        let mut cells: Vec<&str> = r.iter().map(|c| c.as_ref()).collect();
        cells.resize(cols, "");
        out.push_str(&line(cells));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_line_up() {
        let t = render(&["method", "dice"], &[vec!["a", "0.9"], vec!["longer", "0.85"]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "method  dice");
        assert_eq!(lines[1], "------------");
        assert_eq!(lines[2], "a        0.9");
        assert_eq!(lines[3], "longer  0.85");
    }
}
