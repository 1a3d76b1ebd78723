//! Top-down SVG plots of scenarios and HTML review sheets.

use std::fmt::Write as _;

use crate::geom::Point2;
use crate::scenario::{AgentPose, Scenario, EGO_ID};

const PX_PER_M: f64 = 6.0;
const MARGIN: f64 = 15.0;
/// Outline every n-th timestep.
const BOX_STRIDE: usize = 10;

struct View {
    min: Point2,
    max: Point2,
}

impl View {
    fn px(&self, p: Point2) -> (f64, f64) {
        ((p.x - self.min.x) * PX_PER_M, (self.max.y - p.y) * PX_PER_M)
    }

    fn size(&self) -> (f64, f64) {
        ((self.max.x - self.min.x) * PX_PER_M, (self.max.y - self.min.y) * PX_PER_M)
    }
}

fn polygon(view: &View, corners: &[Point2]) -> String {
    corners
        .iter()
        .map(|c| {
            let (x, y) = view.px(*c);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Lanes, agent boxes over time and, if given, a planned ego path in world
/// coordinates. The view is cropped to the agents plus a margin.
pub fn render_svg(scenario: &Scenario, planned: Option<&[AgentPose]>, title: &str) -> String {
    let mut pts: Vec<Point2> = scenario.tracks.iter().flat_map(|t| t.poses.iter().map(|p| p.position())).collect();
    if let Some(p) = planned {
        pts.extend(p.iter().map(|p| p.position()));
    }
    if pts.is_empty() {
        pts.push(Point2::ORIGIN);
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&Point2) -> f64| pts.iter().map(g).fold(init, f);
    let view = View {
        min: Point2::new(
            fold(f64::min, f64::INFINITY, |p| p.x) - MARGIN,
            fold(f64::min, f64::INFINITY, |p| p.y) - MARGIN,
        ),
        max: Point2::new(
            fold(f64::max, f64::NEG_INFINITY, |p| p.x) + MARGIN,
            fold(f64::max, f64::NEG_INFINITY, |p| p.y) + MARGIN,
        ),
    };
    let (w, h) = view.size();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#f4f4f0"/>"##);

    let hw = scenario.map.corridor_half_width;
    for lane in &scenario.map.segments {
        let (a, b) = (lane.start, lane.end);
        let (x1, y1) = view.px(a);
        let (x2, y2) = view.px(b);
        let _ = writeln!(
            s,
            r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#d0d0c8" stroke-width="{:.2}" stroke-linecap="butt"/>"##,
            2.0 * hw * PX_PER_M
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#8a8a80" stroke-width="1" stroke-dasharray="6 6"/>"##
        );
    }

    for t in &scenario.tracks {
        let color = if t.agent_id == EGO_ID { "#1f5fbf" } else { "#c8501e" };
        let last = t.poses.len().saturating_sub(1);
        for (step, _) in t.poses.iter().enumerate().filter(|(i, _)| i % BOX_STRIDE == 0 || *i == last) {
            let Ok(b) = t.box_at(step) else { continue };
            let opacity = 0.15 + 0.6 * step as f64 / last.max(1) as f64;
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="{opacity:.2}" stroke="{color}" stroke-width="1"/>"#,
                polygon(&view, &b.corners())
            );
        }
        if let Some(p) = t.poses.first() {
            let (x, y) = view.px(p.position());
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
                y - 8.0,
                if t.agent_id == EGO_ID { "ego".to_string() } else { t.agent_id.to_string() }
            );
        }
    }

    if let Some(path) = planned {
        let pts = path
            .iter()
            .map(|p| {
                let (x, y) = view.px(p.position());
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(s, r##"<polyline points="{pts}" fill="none" stroke="#1a9a4a" stroke-width="2.5"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

/// One section per scenario: heading, caption lines and the plot.
pub fn review_html(items: &[(String, Vec<String>, String)]) -> String {
    let mut s = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Scenario review</title>\n</head>\n<body>\n",
    );
    for (id, lines, svg) in items {
        let _ = writeln!(s, "<section id=\"{}\">\n<h2>{}</h2>", escape(id), escape(id));
        for l in lines {
            let _ = writeln!(s, "<p>{}</p>", escape(l));
        }
        s.push_str(svg);
        s.push_str("</section>\n");
    }
    s.push_str("</body>\n</html>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_regular_corpus;
    use crate::synth::{bundled_map, SynthesisConfig};

    #[test]
    fn svg_has_every_agent() {
        let s = generate_regular_corpus(&bundled_map("crossroads").unwrap(), 1, 2, &SynthesisConfig::default(), 0.0)
            .unwrap()
            .remove(0)
            .scenario;
        let svg = render_svg(&s, Some(&s.tracks[0].poses), "a < b");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<text").count(), s.tracks.len());
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(render_svg(&s, None, "x"), render_svg(&s, None, "x"));
    }
}
