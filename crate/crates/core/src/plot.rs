//! Recall@K curves as a plain SVG polyline with axes.

use std::fmt::Write;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlotError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no numeric k rows to plot")]
    Empty,
}

/// Reads `k,recall` curves or `protocol,k,recall` result tables; rows whose
/// `k` is not an integer (such as `1pct`) are skipped. For result tables
/// only the first protocol is kept.
pub fn parse_recall_csv(text: &str) -> Result<Vec<(usize, f64)>, PlotError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(PlotError::Empty)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let (k_col, r_col, proto_col) = match cols.as_slice() {
        ["k", "recall"] => (0, 1, None),
        ["protocol", "k", "recall"] => (1, 2, Some(0)),
        _ => {
            return Err(PlotError::Parse {
                line: 1,
                reason: format!("unexpected header `{header}`"),
            })
        }
    };
    let mut first_proto: Option<String> = None;
    let mut out = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(PlotError::Parse {
                line: i + 1,
                reason: format!("expected {} fields", cols.len()),
            });
        }
        if let Some(p) = proto_col {
            let proto = first_proto.get_or_insert_with(|| f[p].to_string());
            if proto != f[p] {
                continue;
            }
        }
        let Ok(k) = f[k_col].parse::<usize>() else { continue };
        let r = f[r_col].parse::<f64>().map_err(|e| PlotError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((k, r));
    }
    if out.is_empty() {
        return Err(PlotError::Empty);
    }
    out.sort_by_key(|p| p.0);
    Ok(out)
}

pub fn render_recall_svg(curve: &[(usize, f64)], title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let k_max = curve.iter().map(|p| p.0).max().unwrap_or(1).max(2) as f64;
    let x = |k: f64| M + (k - 1.0) / (k_max - 1.0) * (W - 2.0 * M);
    let y = |r: f64| H - M - r.clamp(0.0, 1.0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = M,
        t = M,
        b = H - M,
        r = W - M
    );
    for i in 0..=4 {
        let r = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{r:.2}</text>"#,
            M - 6.0,
            y(r) + 3.0
        );
    }
    let step = ((k_max as usize) / 5).max(1);
    for k in (1..=k_max as usize).filter(|k| k % step == 0 || *k == 1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{k}</text>"#,
            x(k as f64),
            H - M + 14.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">K</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">Recall@K</text>"#,
        H / 2.0,
        H / 2.0
    );
    let pts: Vec<String> = curve.iter().map(|&(k, r)| format!("{:.2},{:.2}", x(k as f64), y(r))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_layouts() {
        let c = parse_recall_csv("k,recall\n2,0.5\n1,0.25\n").unwrap();
        assert_eq!(c, vec![(1, 0.25), (2, 0.5)]);
        let t = parse_recall_csv("protocol,k,recall\nplain,1,0.5\nplain,1pct,0.6\northo,1,0.1\n").unwrap();
        assert_eq!(t, vec![(1, 0.5)]);
        assert!(matches!(parse_recall_csv("a,b\n"), Err(PlotError::Parse { line: 1, .. })));
    }

    #[test]
    fn svg_has_one_vertex_per_k() {
        let svg = render_recall_svg(&[(1, 0.1), (2, 0.5), (3, 0.9)], "t");
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(poly.matches(',').count(), 3);
    }
}
