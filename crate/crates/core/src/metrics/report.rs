use std::fmt::Write as _;
use std::hash::Hash;

use super::{corpus_bleu, BleuConfig, BleuReport};
use crate::error::{Error, Result};

/// Upper edges of the source-length buckets; an overflow bucket follows.
pub const DEFAULT_EDGES: [usize; 5] = [10, 20, 30, 40, 50];

/// Corpus BLEU of the pairs whose source length lies in `[low, high]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub low: usize,
    /// `None` for the open-ended last bucket.
    pub high: Option<usize>,
    pub count: usize,
    /// Absent for empty buckets.
    pub report: Option<BleuReport>,
}

/// Bucket rows of one system, for side-by-side output.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemBuckets {
    pub system: String,
    pub rows: Vec<BucketRow>,
}

pub fn bucket_label(row: &BucketRow) -> String {
    match row.high {
        Some(h) => format!("{}-{}", row.low, h),
        None => format!("{}+", row.low),
    }
}

/// Splits `(source length, candidate, reference)` triples into inclusive
/// length buckets `[0, e1], [e1+1, e2], ..., [ek+1, inf)` and scores each.
pub fn length_bucket_report<T, C, R>(
    items: &[(usize, C, R)],
    edges: &[usize],
    config: &BleuConfig,
) -> Result<Vec<BucketRow>>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("bucket edges {edges:?} are not strictly increasing")));
    }
    let mut bounds: Vec<(usize, Option<usize>)> = Vec::with_capacity(edges.len() + 1);
    let mut low = 0;
    for &e in edges {
        bounds.push((low, Some(e)));
        low = e + 1;
    }
    bounds.push((low, None));
    bounds
        .into_iter()
        .map(|(low, high)| {
            let members: Vec<(&[T], &[T])> = items
                .iter()
                .filter(|(len, _, _)| *len >= low && high.map_or(true, |h| *len <= h))
                .map(|(_, c, r)| (c.as_ref(), r.as_ref()))
                .collect();
            let report = if members.is_empty() {
                None
            } else {
                Some(corpus_bleu(&members, config)?)
            };
            Ok(BucketRow {
                low,
                high,
                count: members.len(),
                report,
            })
        })
        .collect()
}

/// CSV with one line per (system, bucket); empty buckets leave the score
/// columns blank.
pub fn render_csv(systems: &[SystemBuckets]) -> String {
    let orders = systems
        .iter()
        .flat_map(|s| &s.rows)
        .filter_map(|r| r.report.as_ref())
        .map(|r| r.precisions.len())
        .max()
        .unwrap_or(4);
    let mut out = String::from("system,bucket_low,bucket_high,pair_count,bleu");
    for n in 1..=orders {
        let _ = write!(out, ",p{n}");
    }
    out.push_str(",bp\n");
    for s in systems {
        for row in &s.rows {
            let high = row.high.map(|h| h.to_string()).unwrap_or_default();
            let _ = write!(out, "{},{},{},{}", s.system, row.low, high, row.count);
            match &row.report {
                Some(r) => {
                    let _ = write!(out, ",{:.6}", r.score);
                    for n in 0..orders {
                        match r.precisions.get(n).and_then(|p| p.value()) {
                            Some(v) => {
                                let _ = write!(out, ",{v:.6}");
                            }
                            None => out.push(','),
                        }
                    }
                    let _ = writeln!(out, ",{:.6}", r.bp);
                }
                None => {
                    out.push_str(&",".repeat(orders + 2));
                    out.push('\n');
                }
            }
        }
    }
    out
}

const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart of BLEU (x100) per length bucket, one bar per system.
pub fn render_svg(systems: &[SystemBuckets]) -> String {
    let buckets = systems.iter().map(|s| s.rows.len()).max().unwrap_or(0);
    let (left, top, plot_h, group_w) = (60.0, 30.0, 240.0, 90.0);
    let width = left + group_w * buckets.max(1) as f64 + 160.0;
    let height = top + plot_h + 60.0;
    let max_score = systems
        .iter()
        .flat_map(|s| &s.rows)
        .filter_map(|r| r.report.as_ref().map(|b| b.score * 100.0))
        .fold(0.0f64, f64::max);
    let y_max = if max_score > 0.0 { (max_score / 10.0).ceil() * 10.0 } else { 10.0 };
    let bar_w = (group_w - 20.0) / systems.len().max(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let base = top + plot_h;
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        left + group_w * buckets as f64
    );
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#);
    for tick in 0..=5 {
        let v = y_max * tick as f64 / 5.0;
        let y = base - plot_h * tick as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.0}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">BLEU</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for b in 0..buckets {
        let gx = left + group_w * b as f64 + 10.0;
        if let Some(row) = systems.iter().find_map(|s| s.rows.get(b)) {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                gx + (group_w - 20.0) / 2.0,
                base + 16.0,
                bucket_label(row)
            );
        }
        for (i, s) in systems.iter().enumerate() {
            let Some(score) = s.rows.get(b).and_then(|r| r.report.as_ref()).map(|r| r.score * 100.0) else {
                continue;
            };
            let h = plot_h * score / y_max;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {score:.2}</title></rect>"#,
                gx + bar_w * i as f64,
                base - h,
                bar_w - 2.0,
                h,
                PALETTE[i % PALETTE.len()],
                escape(&s.system),
                bucket_label(&s.rows[b])
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">source length (tokens)</text>"#,
        left + group_w * buckets as f64 / 2.0,
        base + 36.0
    );
    let lx = left + group_w * buckets as f64 + 20.0;
    for (i, s) in systems.iter().enumerate() {
        let y = top + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            PALETTE[i % PALETTE.len()],
            lx + 18.0,
            y + 10.0,
            escape(&s.system)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
