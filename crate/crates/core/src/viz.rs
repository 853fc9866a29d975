//! SVG rendering of one sample with its default, transformed and
//! ground-truth boxes.

use std::fmt::Write as _;

use crate::data::{WeakSample, SHAPE_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{BoxRole, BoxXYXY};
use crate::metrics::{xml_escape, EvalRecord};

/// Screen pixels per image pixel.
const ZOOM: f64 = 4.0;
const CAPTION_HEIGHT: f64 = 36.0;

impl BoxRole {
    pub fn color(self) -> &'static str {
        match self {
            BoxRole::Default => "blue",
            BoxRole::Transformed => "red",
            BoxRole::GroundTruth => "green",
        }
    }
}

fn class_name(c: usize) -> String {
    SHAPE_NAMES.get(c).map_or_else(|| format!("class {c}"), |s| s.to_string())
}

fn draw_box(s: &mut String, b: &BoxXYXY, role: BoxRole) {
    let _ = writeln!(
        s,
        "<rect class=\"{:?}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
        role,
        b.x1 * ZOOM,
        b.y1 * ZOOM,
        b.width() * ZOOM,
        b.height() * ZOOM,
        role.color()
    );
}

/// Renders `sample` with the MAP boxes of the two records, which must come
/// from the same forward pass (one decoded with the transform, one without).
pub fn sample_svg(sample: &WeakSample, transformed: &EvalRecord, default: &EvalRecord) -> Result<String> {
    if transformed.id != sample.id || default.id != sample.id {
        return Err(Error::InvalidArgument(format!(
            "records {} and {} do not belong to sample {}",
            transformed.id, default.id, sample.id
        )));
    }
    let [c, h, w] = match sample.image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {other:?}"))),
    };
    let (width, height) = (w as f64 * ZOOM, h as f64 * ZOOM);
    let total_h = height + CAPTION_HEIGHT;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{total_h}\" viewBox=\"0 0 {width} {total_h}\">\n\
         <rect width=\"{width}\" height=\"{total_h}\" fill=\"white\"/>\n<g shape-rendering=\"crispEdges\">\n"
    );
    let data = sample.image.data();
    let channel = |k: usize, y: usize, x: usize| data[(k.min(c - 1) * h + y) * w + x];
    for y in 0..h {
        for x in 0..w {
            let rgb: Vec<u8> = (0..3).map(|k| (channel(k, y, x).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{ZOOM}\" height=\"{ZOOM}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                x as f64 * ZOOM,
                y as f64 * ZOOM,
                rgb[0],
                rgb[1],
                rgb[2]
            );
        }
    }
    s.push_str("</g>\n");
    draw_box(&mut s, &default.pred_box.bbox, BoxRole::Default);
    draw_box(&mut s, &transformed.pred_box.bbox, BoxRole::Transformed);
    draw_box(&mut s, &sample.gt_box, BoxRole::GroundTruth);
    let caption = format!(
        "#{} pred {} p={:.3} IoU={:.2} | gt {}",
        sample.id,
        class_name(transformed.pred_class),
        transformed.pred_box.score,
        transformed.pred_iou,
        class_name(sample.label)
    );
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">{}</text>",
        height + 22.0,
        xml_escape(&caption)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScoredBox;
    use crate::tensor::Tensor;

    fn sample() -> WeakSample {
        WeakSample {
            id: 7,
            image: Tensor::zeros(&[3, 8, 8]),
            label: 1,
            gt_box: BoxXYXY::new(1.0, 1.0, 5.0, 6.0),
            area_bin: 0,
        }
    }

    fn record(b: BoxXYXY) -> EvalRecord {
        EvalRecord {
            id: 7,
            pred_class: 1,
            pred_box: ScoredBox { bbox: b, score: 0.25 },
            pred_iou: 0.5,
            pred_scale: 0,
            top5: vec![],
            top5_iou: vec![],
            gt_label: 1,
            gt_box: BoxXYXY::new(1.0, 1.0, 5.0, 6.0),
        }
    }

    #[test]
    fn boxes_use_role_colors_and_parse_as_xml() {
        let b = BoxXYXY::new(0.0, 0.0, 4.0, 4.0);
        let svg = sample_svg(&sample(), &record(b), &record(b)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let strokes: Vec<&str> = doc.descendants().filter_map(|n| n.attribute("stroke")).collect();
        assert_eq!(strokes, ["blue", "red", "green"]);
        let pixels = doc.descendants().filter(|n| n.attribute("fill").is_some_and(|f| f.starts_with('#'))).count();
        assert_eq!(pixels, 64);
        assert!(svg.contains("pred square"));
    }

    #[test]
    fn identity_boxes_coincide() {
        let b = BoxXYXY::new(2.0, 2.0, 6.0, 6.0);
        let svg = sample_svg(&sample(), &record(b), &record(b)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let geom = |cls: &str| {
            let n = doc.descendants().find(|n| n.attribute("class") == Some(cls)).unwrap();
            ["x", "y", "width", "height"].map(|a| n.attribute(a).unwrap().to_string())
        };
        assert_eq!(geom("Default"), geom("Transformed"));
    }

    #[test]
    fn mismatched_record_is_rejected() {
        let mut r = record(BoxXYXY::new(0.0, 0.0, 1.0, 1.0));
        r.id = 8;
        assert!(sample_svg(&sample(), &r, &r).is_err());
    }
}
