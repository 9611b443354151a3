//! Orthographic SVG frames of a marker skeleton.

use std::fmt::Write as _;
use std::str::FromStr;

use mdae::motion::{MotionSequence, Point};
use mdae::pose::ChainTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Looking at the front of a body that faces −y.
    Front,
    /// Looking from +x towards −x.
    Side,
    Top,
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "front" => Ok(View::Front),
            "side" => Ok(View::Side),
            "top" => Ok(View::Top),
            _ => Err(format!("unknown view `{s}` (front, side, top)")),
        }
    }
}

impl View {
    fn project(self, p: &Point) -> (f64, f64) {
        match self {
            View::Front => (p.x, p.z),
            View::Side => (-p.y, p.z),
            View::Top => (p.x, -p.y),
        }
    }
}

/// Bounds over all frames so every frame shares one scale.
fn bounds(seq: &MotionSequence, view: View) -> (f64, f64, f64, f64) {
    seq.coords().iter().map(|p| view.project(p)).fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), (x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
    )
}

pub struct Renderer<'a> {
    seq: &'a MotionSequence,
    bones: Vec<(usize, usize)>,
    view: View,
    size: f64,
    bounds: (f64, f64, f64, f64),
}

impl<'a> Renderer<'a> {
    pub fn new(seq: &'a MotionSequence, chain: Option<&ChainTopology>, view: View) -> mdae::Result<Self> {
        let bones = match chain {
            Some(c) => c
                .links()
                .iter()
                .map(|l| Ok((seq.marker_index(&l.parent)?, seq.marker_index(&l.child)?)))
                .collect::<mdae::Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Renderer {
            seq,
            bones,
            view,
            size: 400.0,
            bounds: bounds(seq, view),
        })
    }

    fn to_canvas(&self, p: &Point) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.bounds;
        let span = (x1 - x0).max(y1 - y0).max(1e-9);
        let margin = 0.05 * self.size;
        let s = (self.size - 2.0 * margin) / span;
        let (x, y) = self.view.project(p);
        (margin + (x - x0) * s, self.size - margin - (y - y0) * s)
    }

    pub fn frame_svg(&self, frame: usize) -> String {
        let pts: Vec<(f64, f64)> = self.seq.frame(frame).iter().map(|p| self.to_canvas(p)).collect();
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            s = self.size
        );
        for &(a, b) in &self.bones {
            let _ = writeln!(
                svg,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>",
                pts[a].0, pts[a].1, pts[b].0, pts[b].1
            );
        }
        for (name, (x, y)) in self.seq.markers().iter().zip(&pts) {
            let _ = writeln!(svg, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"crimson\"><title>{name}</title></circle>");
        }
        let _ = writeln!(svg, "<text x=\"8\" y=\"16\" font-size=\"12\">frame {frame}</text>\n</svg>");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdae::pose::Link;

    #[test]
    fn draws_one_line_per_bone() {
        let seq = MotionSequence::new(
            vec!["A".into(), "B".into(), "C".into()],
            vec![vec![Point::new(0.0, 0.0, 1.0), Point::new(0.0, 0.0, 0.5), Point::new(0.2, 0.0, 0.0)]],
            25.0,
        )
        .unwrap();
        let chain = ChainTopology::new("A", vec![Link::new("A", "B"), Link::new("B", "C")]).unwrap();
        let svg = Renderer::new(&seq, Some(&chain), View::Front).unwrap().frame_svg(0);
        assert_eq!(svg.matches("<line").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
