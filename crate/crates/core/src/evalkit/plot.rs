//! Two-dimensional PCA view of an embedding set.

use std::fmt::Write as _;
use std::path::Path;

use super::EmbeddingSet;
use crate::corpus::io::write_text;
use crate::error::{Error, Result};
use crate::numerics::top_right_singular_vectors;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

/// Coordinates of each row on the two leading principal directions of the
/// mean-centred set.
pub fn project_2d(set: &EmbeddingSet) -> Result<Vec<[f64; 2]>> {
    let (n, d) = (set.len(), set.dim());
    if n < 3 || d < 2 {
        return Err(Error::Data(format!(
            "a 2-D projection needs n ≥ 3 and d ≥ 2, got {n}×{d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in set.rows() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred: Vec<f64> = set
        .rows()
        .flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
        .collect();
    let dirs = top_right_singular_vectors(&centred, n, d, 2).map_err(|e| match e {
        Error::Degenerate(why) => Error::Degenerate(format!("data has rank below 2: {why}")),
        other => other,
    })?;
    Ok(centred
        .chunks_exact(d)
        .map(|r| {
            let p = |c: &[f64]| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&dirs[0]), p(&dirs[1])]
        })
        .collect())
}

pub fn render_csv(set: &EmbeddingSet, points: &[[f64; 2]]) -> String {
    let mut out = String::from("id,lang,x,y\n");
    for (i, [x, y]) in points.iter().enumerate() {
        let _ = writeln!(out, "{},{},{x},{y}", set.id(i), set.language(i));
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG scatter, one colour per language, with a legend.
pub fn render_svg(set: &EmbeddingSet, points: &[[f64; 2]]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for [x, y] in points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let inner = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / span * inner;
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / span * inner;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, [x, y]) in points.iter().enumerate() {
        let colour = PALETTE[set.tag(i) % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{colour}" fill-opacity="0.75"><title>{} {}</title></circle>"#,
            sx(*x),
            sy(*y),
            escape(set.language(i)),
            set.id(i)
        );
    }
    for (t, language) in set.languages().iter().enumerate() {
        let y = MARGIN + 14.0 * t as f64;
        let colour = PALETTE[t % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{colour}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            SIZE - 70.0,
            SIZE - 62.0,
            y + 4.0,
            escape(language)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the CSV (`id,lang,x,y`) and SVG views and returns the points.
pub fn export_2d(set: &EmbeddingSet, csv: &Path, svg: &Path) -> Result<Vec<[f64; 2]>> {
    let points = project_2d(set)?;
    write_text(csv, &render_csv(set, &points))?;
    write_text(svg, &render_svg(set, &points))?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::EmbeddingRow;

    fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, v)| EmbeddingRow {
                    vector: v.clone(),
                    language: if i % 2 == 0 { "la".into() } else { "lb".into() },
                    id: i as u32,
                    label: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn planar_data_keeps_distances() {
        let rows = vec![vec![0., 0.], vec![3., 1.], vec![-1., 2.], vec![0.5, -2.]];
        let s = set(&rows);
        let p = project_2d(&s).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((rows[i][0] - rows[j][0]).powi(2) + (rows[i][1] - rows[j][1]).powi(2)).sqrt();
                let d1 = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
        let csv = render_csv(&s, &p);
        assert!(csv.starts_with("id,lang,x,y\n0,la,"));
        assert!(render_svg(&s, &p).contains("<circle"));
    }

    #[test]
    fn a_line_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        assert!(matches!(project_2d(&set(&rows)), Err(Error::Degenerate(_))));
    }
}
