//! Static SVG charts from result CSVs. Numeric x columns become line
//! charts, anything else becomes bars. Rows sharing a series and x value
//! are averaged (e.g. over seeds).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone)]
pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x: &'a str,
    pub y: &'a str,
    /// Empty for a single series.
    pub group: &'a str,
    pub log_x: bool,
}

/// Mean `y` per (series, x), series and x in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(String, f64)>,
}

pub fn aggregate(csv_text: &str, spec: &PlotSpec) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::invalid(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("column `{name}` not in CSV header {:?}", headers)))
    };
    let (xi, yi) = (col(spec.x)?, col(spec.y)?);
    let gi = if spec.group.is_empty() { None } else { Some(col(spec.group)?) };

    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, (Vec<String>, BTreeMap<String, (f64, usize)>)> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::invalid(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let ys = field(yi);
        if ys.is_empty() {
            continue;
        }
        let y: f64 = ys
            .parse()
            .map_err(|_| Error::invalid(format!("`{ys}` in column `{}` is not a number", spec.y)))?;
        let g = gi.map(field).unwrap_or_default();
        if !sums.contains_key(&g) {
            order.push(g.clone());
        }
        let (xs, acc) = sums.entry(g).or_default();
        let x = field(xi);
        if !acc.contains_key(&x) {
            xs.push(x.clone());
        }
        let e = acc.entry(x).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
    }
    if order.is_empty() {
        return Err(Error::invalid(format!("no rows with a `{}` value", spec.y)));
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let (xs, acc) = &sums[&name];
            let points = xs.iter().map(|x| (x.clone(), acc[x].0 / acc[x].1 as f64)).collect();
            Series { name, points }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// "Nice" tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let start = (lo / step).floor() * step;
    let mut out = vec![start];
    while out[out.len() - 1] < hi - step * 1e-9 {
        out.push(start + step * out.len() as f64);
    }
    out
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn render_svg(series: &[Series], spec: &PlotSpec) -> String {
    let numeric = series
        .iter()
        .flat_map(|s| &s.points)
        .all(|(x, _)| x.parse::<f64>().map(|v| v.is_finite() && (!spec.log_x || v > 0.0)).unwrap_or(false));
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (mut ylo, mut yhi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if !numeric {
        ylo = ylo.min(0.0);
    }
    if yhi - ylo < 1e-12 {
        yhi = ylo + 1.0;
    }
    let yt = ticks(ylo, yhi);
    let (ylo, yhi) = (yt[0].min(ylo), yt[yt.len() - 1].max(yhi));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let py = |y: f64| TOP + ph * (1.0 - (y - ylo) / (yhi - ylo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(spec.title)
    );
    for t in &yt {
        let y = py(*t);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            fmt_num(*t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/><line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        TOP + ph,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 15.0,
        escape(spec.x)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(spec.y)
    );

    if numeric {
        let tx = |x: f64| if spec.log_x { x.log10() } else { x };
        let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0.parse().unwrap()))).collect();
        let (mut xlo, mut xhi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if xhi - xlo < 1e-12 {
            xlo -= 0.5;
            xhi += 0.5;
        }
        let px = |x: f64| LEFT + pw * (tx(x) - xlo) / (xhi - xlo);
        let mut labels: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0.parse::<f64>().unwrap())).collect();
        labels.sort_by(f64::total_cmp);
        labels.dedup();
        if labels.len() > 8 {
            labels = ticks(labels[0], labels[labels.len() - 1]);
            labels.retain(|&v| !spec.log_x || v > 0.0);
        }
        for l in labels {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                px(l),
                TOP + ph + 18.0,
                fmt_num(l)
            );
        }
        for (si, s) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", px(x.parse().unwrap()), py(*y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (cx, cy) = p.split_once(',').unwrap();
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
    } else {
        let mut cats: Vec<&str> = Vec::new();
        for s in series {
            for (x, _) in &s.points {
                if !cats.contains(&x.as_str()) {
                    cats.push(x);
                }
            }
        }
        let slot = pw / cats.len() as f64;
        let bw = slot * 0.8 / series.len() as f64;
        for (ci, c) in cats.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                LEFT + slot * (ci as f64 + 0.5),
                TOP + ph + 18.0,
                escape(c)
            );
        }
        for (si, s) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            for (x, y) in &s.points {
                let ci = cats.iter().position(|c| c == x).unwrap();
                let x0 = LEFT + slot * ci as f64 + slot * 0.1 + bw * si as f64;
                let (y0, y1) = (py(*y), py(ylo.max(0.0).min(yhi)));
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x0:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{color}"/>"#,
                    y0.min(y1),
                    (y1 - y0).abs()
                );
            }
        }
    }
    if !spec.group.is_empty() {
        for (si, s) in series.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * si as f64;
            let x = W - RIGHT + 15.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
                y - 10.0,
                PALETTE[si % PALETTE.len()],
                x + 18.0,
                y,
                escape(&s.name)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads `input`, renders and writes `output` atomically.
pub fn plot_file(input: &Path, output: &Path, spec: &PlotSpec) -> Result<()> {
    let text = crate::io::read_to_string(input)?;
    let series = aggregate(&text, spec)?;
    crate::io::write_atomic(output, render_svg(&series, spec).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "variant,budget,seed,R@1\nmain,500,1,0.2\nmain,500,2,0.4\nmain,2000,1,0.5\nfrozen,500,1,0.1\n";

    fn spec<'a>(x: &'a str, group: &'a str) -> PlotSpec<'a> {
        PlotSpec { title: "t", x, y: "R@1", group, log_x: false }
    }

    #[test]
    fn averages_over_repeated_points() {
        let s = aggregate(CSV, &spec("budget", "variant")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].name, "main");
        assert_eq!(s[0].points[0].0, "500");
        assert!((s[0].points[0].1 - 0.3).abs() < 1e-12);
        assert_eq!(s[1].points, [("500".to_string(), 0.1)]);
    }

    #[test]
    fn unknown_column_is_an_error() {
        assert!(aggregate(CSV, &spec("nope", "")).is_err());
    }

    #[test]
    fn renders_lines_and_bars() {
        let s = aggregate(CSV, &spec("budget", "variant")).unwrap();
        let svg = render_svg(&s, &spec("budget", "variant"));
        assert!(svg.contains("<polyline") && svg.ends_with("</svg>\n"));
        let s = aggregate(CSV, &spec("variant", "")).unwrap();
        let svg = render_svg(&s, &spec("variant", ""));
        assert!(svg.contains("<rect x=") && !svg.contains("<polyline"));
        assert_eq!(svg, render_svg(&s, &spec("variant", "")));
    }

    #[test]
    fn ticks_cover_range() {
        let t = ticks(0.13, 0.71);
        assert!(t[0] <= 0.13 && *t.last().unwrap() >= 0.71 - 1e-9);
    }
}
