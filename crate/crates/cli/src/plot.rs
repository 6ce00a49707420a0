//! Log-log convergence plot written as plain SVG.

use std::collections::BTreeMap;
use std::fmt::Write;

use odeslab::harness::estimate_order;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 250.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const REQUIRED: [&str; 3] = ["M", "final_error", "slope_group"];

#[derive(Debug)]
pub enum PlotError {
    /// Malformed CSV or missing columns.
    Input(String),
}

impl std::fmt::Display for PlotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlotError::Input(m) => write!(f, "{m}"),
        }
    }
}

struct Series {
    name: String,
    /// Seed-averaged (M, error), ascending in M.
    points: Vec<(usize, f64)>,
    slope: Option<f64>,
}

fn read_series(csv_bytes: &[u8]) -> Result<Vec<Series>, PlotError> {
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    let headers = rdr.headers().map_err(|e| PlotError::Input(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(PlotError::Input(format!("missing columns: {}", missing.join(", "))));
    }
    let (im, ie, ig) = (col("M").unwrap(), col("final_error").unwrap(), col("slope_group").unwrap());

    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PlotError::Input(e.to_string()))?;
        let bad = |what: &str| PlotError::Input(format!("data row {}: bad {what}", line + 1));
        let m: usize = rec.get(im).and_then(|s| s.parse().ok()).ok_or_else(|| bad("M"))?;
        let err: f64 = rec.get(ie).and_then(|s| s.parse().ok()).ok_or_else(|| bad("final_error"))?;
        let group = rec.get(ig).ok_or_else(|| bad("slope_group"))?.to_string();
        let gi = match order.iter().position(|g| *g == group) {
            Some(i) => i,
            None => {
                order.push(group);
                order.len() - 1
            }
        };
        let e = acc.entry((gi, m)).or_insert((0.0, 0));
        e.0 += err;
        e.1 += 1;
    }
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(gi, name)| {
            let points: Vec<(usize, f64)> = acc
                .iter()
                .filter(|((g, _), _)| *g == gi)
                .map(|((_, m), (s, n))| (*m, s / *n as f64))
                .collect();
            let slope = estimate_order(&points).ok().map(|f| f.slope);
            Series { name, points, slope }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the SVG for a report CSV.
pub fn render_svg(csv_bytes: &[u8]) -> Result<String, PlotError> {
    let series = read_series(csv_bytes)?;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let plotted: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(m, e)| *m > 0 && *e > 0.0 && e.is_finite())
        .map(|(m, e)| ((*m as f64).log10(), e.log10()))
        .collect();
    if plotted.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="18">no data</text>"#,
            WIDTH / 2.0,
            HEIGHT / 2.0
        );
        svg.push_str("</svg>\n");
        return Ok(svg);
    }

    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| plotted.iter().map(sel).fold(init, f);
    let (x_lo, x_hi) = (fold(f64::min, f64::INFINITY, |p| p.0).floor(), fold(f64::max, f64::NEG_INFINITY, |p| p.0).ceil());
    let (y_lo, y_hi) = (fold(f64::min, f64::INFINITY, |p| p.1).floor(), fold(f64::max, f64::NEG_INFINITY, |p| p.1).ceil());
    let (x_hi, y_hi) = (x_hi.max(x_lo + 1.0), y_hi.max(y_lo + 1.0));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |lx: f64| LEFT + (lx - x_lo) / (x_hi - x_lo) * pw;
    let py = |ly: f64| TOP + (y_hi - ly) / (y_hi - y_lo) * ph;

    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for d in x_lo as i32..=x_hi as i32 {
        let x = px(d as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{d}</text>"##,
            TOP + ph,
            TOP + ph + 18.0
        );
    }
    for d in y_lo as i32..=y_hi as i32 {
        let y = py(d as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">steps M</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">final error</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(m, e)| *m > 0 && *e > 0.0 && e.is_finite())
            .map(|(m, e)| format!("{:.2},{:.2}", px((*m as f64).log10()), py(e.log10())))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let label = match s.slope {
            Some(v) => format!("{} (slope {v:.2})", s.name),
            None => format!("{} (slope n/a)", s.name),
        };
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
