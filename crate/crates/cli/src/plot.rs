//! SVG scatter rendering of 2-D embeddings: users as small gray dots, items
//! as shaped, colored markers keyed by category, plus a legend.
//!
//! Styling is fixed apart from canvas size and marker radius so rendered
//! output stays stable across runs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use covis_core::sampler::Embedding;

/// The only configurable styling knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotOptions {
    /// Canvas width and height in pixels.
    pub size: f64,
    /// Item marker radius in pixels; user dots use 60% of it.
    pub point_radius: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            size: 640.0,
            point_radius: 5.0,
        }
    }
}

#[derive(Debug)]
pub struct RenderedPlot {
    pub svg: String,
    /// Non-fatal problems, e.g. label rows naming unknown items.
    pub warnings: Vec<String>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const USER_COLOR: &str = "#9a9a9a";
/// Category bucket for items without a label row.
const UNLABELED: &str = "(unlabeled)";
/// Single bucket used when no label file is given at all.
const DEFAULT_CATEGORY: &str = "items";

/// World-to-screen transform: data bounding box plus a 5% margin per side,
/// fitted with one uniform scale so embedded distances keep their ratios.
#[derive(Debug, Clone, Copy)]
struct Viewport {
    scale: f64,
    x0: f64,
    y0: f64,
    off_x: f64,
    off_y: f64,
    size: f64,
}

impl Viewport {
    fn fit(points: &[(f64, f64)], size: f64) -> Self {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        let pad = |span: f64| if span > 0.0 { 0.05 * span } else { 1.0 };
        let (span_x, span_y) = (max_x - min_x, max_y - min_y);
        let (pad_x, pad_y) = (pad(span_x), pad(span_y));
        let (pspan_x, pspan_y) = (span_x + 2.0 * pad_x, span_y + 2.0 * pad_y);
        let scale = size / pspan_x.max(pspan_y);
        Self {
            scale,
            x0: min_x - pad_x,
            y0: min_y - pad_y,
            // Center the shorter axis.
            off_x: (size - pspan_x * scale) / 2.0,
            off_y: (size - pspan_y * scale) / 2.0,
            size,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x0) * self.scale + self.off_x,
            // SVG y grows downward.
            self.size - ((y - self.y0) * self.scale + self.off_y),
        )
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Append one marker glyph. Shape cycles with the style index: circle,
/// square, triangle, diamond.
fn push_marker(
    out: &mut String,
    style: usize,
    cx: f64,
    cy: f64,
    r: f64,
    color: &str,
    class: &str,
    attrs: &str,
    title: Option<&str>,
) {
    let title_el = match title {
        Some(t) => format!("<title>{}</title>", xml_escape(t)),
        None => String::new(),
    };
    match style % 4 {
        0 => {
            let _ = write!(
                out,
                r#"<circle class="{class}"{attrs} cx="{cx:.6}" cy="{cy:.6}" r="{r:.6}" fill="{color}">{title_el}</circle>"#
            );
        }
        1 => {
            let _ = write!(
                out,
                r#"<rect class="{class}"{attrs} x="{:.6}" y="{:.6}" width="{:.6}" height="{:.6}" fill="{color}">{title_el}</rect>"#,
                cx - r,
                cy - r,
                2.0 * r,
                2.0 * r
            );
        }
        2 => {
            let h = 0.866 * r;
            let _ = write!(
                out,
                r#"<polygon class="{class}"{attrs} points="{:.6},{:.6} {:.6},{:.6} {:.6},{:.6}" fill="{color}">{title_el}</polygon>"#,
                cx,
                cy - r,
                cx - h,
                cy + 0.5 * r,
                cx + h,
                cy + 0.5 * r
            );
        }
        _ => {
            let _ = write!(
                out,
                r#"<polygon class="{class}"{attrs} points="{:.6},{:.6} {:.6},{:.6} {:.6},{:.6} {:.6},{:.6}" fill="{color}">{title_el}</polygon>"#,
                cx,
                cy - r,
                cx + r,
                cy,
                cx,
                cy + r,
                cx - r,
                cy
            );
        }
    }
    out.push('\n');
}

/// Render the embedding to a standalone SVG document.
///
/// `labels` maps item ids to category names; rows naming unknown items are
/// reported as warnings and skipped. With no label file every item lands in
/// one default category.
pub fn render(
    emb: &Embedding,
    user_ids: &[String],
    item_ids: &[String],
    labels: Option<&[(String, String)]>,
    opts: &PlotOptions,
) -> Result<RenderedPlot, String> {
    if emb.dim() != 2 {
        return Err(format!(
            "embedding is {}-dimensional; plotting needs 2 (fit with --dim 2)",
            emb.dim()
        ));
    }
    if !(opts.size >= 64.0) || !opts.size.is_finite() {
        return Err(format!("canvas size must be at least 64, got {}", opts.size));
    }
    if !(opts.point_radius > 0.0) || !opts.point_radius.is_finite() {
        return Err(format!(
            "point radius must be positive, got {}",
            opts.point_radius
        ));
    }

    let mut warnings = Vec::new();
    let known: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    // Later label rows win for a repeated item id.
    let mut label_of: HashMap<usize, &str> = HashMap::new();
    if let Some(rows) = labels {
        for (id, category) in rows {
            match known.get(id.as_str()) {
                Some(&j) => {
                    label_of.insert(j, category.as_str());
                }
                None => warnings.push(format!("label row names unknown item `{id}`")),
            }
        }
    }
    let category_of = |j: usize| -> &str {
        if labels.is_some() {
            label_of.get(&j).copied().unwrap_or(UNLABELED)
        } else {
            DEFAULT_CATEGORY
        }
    };
    let categories: Vec<&str> = (0..item_ids.len())
        .map(category_of)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let style_of: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(s, &c)| (c, s))
        .collect();

    let points: Vec<(f64, f64)> = (0..emb.user_count())
        .map(|i| (emb.user(i)[0], emb.user(i)[1]))
        .chain((0..emb.item_count()).map(|j| (emb.item(j)[0], emb.item(j)[1])))
        .collect();
    let view = Viewport::fit(&points, opts.size);

    let size = opts.size;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="0 0 {size:.0} {size:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{size:.0}" height="{size:.0}" fill="white"/>"#);

    svg.push_str("<g fill-opacity=\"0.55\">\n");
    let user_r = 0.6 * opts.point_radius;
    for i in 0..emb.user_count() {
        let (cx, cy) = view.map(emb.user(i)[0], emb.user(i)[1]);
        push_marker(
            &mut svg,
            0,
            cx,
            cy,
            user_r,
            USER_COLOR,
            "pt-user",
            "",
            Some(&user_ids[i]),
        );
    }
    svg.push_str("</g>\n<g fill-opacity=\"0.85\">\n");
    for j in 0..emb.item_count() {
        let (cx, cy) = view.map(emb.item(j)[0], emb.item(j)[1]);
        let category = category_of(j);
        let style = style_of[category];
        let attrs = format!(r#" data-category="{}""#, xml_escape(category));
        push_marker(
            &mut svg,
            style,
            cx,
            cy,
            opts.point_radius,
            PALETTE[style % PALETTE.len()],
            "pt-item",
            &attrs,
            Some(&item_ids[j]),
        );
    }
    svg.push_str("</g>\n");

    // Legend: one row per category, top-right corner.
    let row_h = 18.0;
    let longest = categories.iter().map(|c| c.chars().count()).max().unwrap_or(0);
    let legend_w = (longest as f64 * 7.2 + 30.0).max(60.0);
    let legend_h = categories.len() as f64 * row_h + 8.0;
    let lx = size - legend_w - 10.0;
    let ly = 10.0;
    let _ = writeln!(
        svg,
        r##"<g font-family="sans-serif" font-size="12"><rect x="{lx:.6}" y="{ly:.6}" width="{legend_w:.6}" height="{legend_h:.6}" fill="white" fill-opacity="0.8" stroke="#cccccc"/>"##
    );
    for (style, category) in categories.iter().enumerate() {
        let cy = ly + 4.0 + row_h * style as f64 + row_h / 2.0;
        svg.push_str("<g class=\"legend-entry\">");
        push_marker(
            &mut svg,
            style,
            lx + 12.0,
            cy,
            5.0,
            PALETTE[style % PALETTE.len()],
            "legend-marker",
            "",
            None,
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.6}" y="{:.6}">{}</text></g>"#,
            lx + 24.0,
            cy + 4.0,
            xml_escape(category)
        );
    }
    svg.push_str("</g>\n</svg>\n");

    Ok(RenderedPlot { svg, warnings })
}
