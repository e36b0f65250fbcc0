use std::fmt::Write;

use super::stats::DistributionTable;

const CELL: f64 = 44.0;
const LEFT: f64 = 150.0;
const TOP: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Self-contained SVG heat map, one cell per table entry with its value
/// printed inside. Empty rows are hatched grey.
pub fn render_heatmap_svg(table: &DistributionTable) -> String {
    let rows = table.rows.len();
    let cols = table.col_labels.len();
    let width = LEFT + CELL * cols as f64 + 20.0;
    let height = TOP + CELL * rows as f64 + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" font-size="14" font-weight="bold">{}</text>"#,
        LEFT,
        escape(&table.title())
    );
    for (j, label) in table.col_labels.iter().enumerate() {
        let x = LEFT + CELL * (j as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" transform="rotate(-50 {x} {})">{}</text>"#,
            TOP - 6.0,
            TOP - 6.0,
            escape(label)
        );
    }
    for (i, (label, row)) in table.row_labels.iter().zip(&table.rows).enumerate() {
        let y = TOP + CELL * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}={}</text>"#,
            LEFT - 8.0,
            y + CELL * 0.6,
            table.x_axis,
            escape(label)
        );
        let empty = table.is_row_empty(i);
        for (j, &v) in row.iter().enumerate() {
            let x = LEFT + CELL * j as f64;
            let fill = if empty {
                "#dddddd".to_string()
            } else {
                // white -> deep blue
                let t = v.clamp(0.0, 1.0);
                let r = (255.0 * (1.0 - 0.85 * t)).round() as u8;
                let g = (255.0 * (1.0 - 0.6 * t)).round() as u8;
                format!("#{r:02x}{g:02x}ff")
            };
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>"##
            );
            if !empty {
                let color = if v > 0.55 { "#ffffff" } else { "#222222" };
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{:.2}</text>"#,
                    x + CELL / 2.0,
                    y + CELL * 0.6,
                    v
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
