//! Static plot emission: hand-rolled SVG charts plus PNG image grids.

use backscatter::Result;
use ndarray::{Array4, Axis};
use std::path::Path;

const COLORS: [&str; 4] = ["#4878cf", "#d65f5f", "#6acc65", "#b47cc7"];

fn svg_header(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// Grouped bar chart; one group per label, one bar per series.
pub fn bar_chart_svg(
    title: &str,
    labels: &[String],
    series: &[(&str, Vec<f64>)],
    y_label: &str,
) -> String {
    let (w, h) = (720usize, 420usize);
    let (ml, mr, mt, mb) = (60.0, 20.0, 50.0, 60.0);
    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let groups = labels.len().max(1);
    let group_w = plot_w / groups as f64;
    let bar_w = (group_w * 0.8) / series.len().max(1) as f64;

    let mut svg = svg_header(w, h);
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        w / 2
    ));
    // y axis with 5 gridlines
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let y = mt + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            ml + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{:.2}</text>\n",
            ml - 6.0,
            y + 4.0,
            max * frac
        ));
    }
    for (gi, label) in labels.iter().enumerate() {
        let gx = ml + gi as f64 * group_w;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0);
            let bh = plot_h * (v / max);
            let x = gx + group_w * 0.1 + si as f64 * bar_w;
            let y = mt + plot_h - bh;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>\n",
                bar_w.max(1.0) - 1.0,
                COLORS[si % COLORS.len()]
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{label}</text>\n",
            gx + group_w / 2.0,
            mt + plot_h + 16.0
        ));
    }
    // legend
    for (si, (name, _)) in series.iter().enumerate() {
        let x = ml + si as f64 * 140.0;
        let y = h as f64 - 18.0;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
            y - 10.0,
            COLORS[si % COLORS.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"12\">{name}</text>\n",
            x + 16.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">{y_label}</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Two overlaid histograms on a shared binning.
pub fn histogram_overlay_svg(
    title: &str,
    a_name: &str,
    a: &[f64],
    b_name: &str,
    b: &[f64],
    bins: usize,
) -> String {
    let lo = a
        .iter()
        .chain(b.iter())
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let hi = a
        .iter()
        .chain(b.iter())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-9);
    let bin_of = |v: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut ha = vec![0usize; bins];
    let mut hb = vec![0usize; bins];
    for v in a {
        ha[bin_of(*v)] += 1;
    }
    for v in b {
        hb[bin_of(*v)] += 1;
    }
    let labels: Vec<String> = (0..bins)
        .map(|i| {
            if i % (bins / 8).max(1) == 0 {
                format!("{:.2}", lo + (hi - lo) * (i as f64 + 0.5) / bins as f64)
            } else {
                String::new()
            }
        })
        .collect();
    let na = a.len().max(1) as f64;
    let nb = b.len().max(1) as f64;
    bar_chart_svg(
        title,
        &labels,
        &[
            (a_name, ha.iter().map(|c| *c as f64 / na).collect()),
            (b_name, hb.iter().map(|c| *c as f64 / nb).collect()),
        ],
        "fraction",
    )
}

/// Per-sample softmax bars, a small multiple per image.
pub fn confidence_grid_svg(title: &str, rows: &[(String, Vec<f64>)]) -> String {
    let cols = 3usize;
    let cell_w = 220usize;
    let cell_h = 110usize;
    let n_rows = rows.len().div_ceil(cols);
    let (w, h) = (cols * cell_w + 40, n_rows * cell_h + 70);
    let mut svg = svg_header(w, h);
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"26\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        w / 2
    ));
    for (i, (label, probs)) in rows.iter().enumerate() {
        let cx = 20 + (i % cols) * cell_w;
        let cy = 44 + (i / cols) * cell_h;
        let k = probs.len().max(1);
        let bw = (cell_w as f64 - 30.0) / k as f64;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\">{label}</text>\n",
            cx,
            cy + 10
        ));
        for (j, p) in probs.iter().enumerate() {
            let bh = (cell_h as f64 - 40.0) * p;
            let x = cx as f64 + 10.0 + j as f64 * bw;
            let y = cy as f64 + cell_h as f64 - 22.0 - bh;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>\n",
                (bw - 1.0).max(1.0),
                COLORS[0]
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write a PNG grid: one row per sample, columns = clean, backdoor,
/// amplified residual.
pub fn residual_triptych_png(
    path: &Path,
    clean: &Array4<f32>,
    backdoor: &Array4<f32>,
    amplification: f32,
) -> Result<()> {
    let (n, c, h, w) = clean.dim();
    let gap = 2usize;
    let img_w = (3 * w + 2 * gap) as u32;
    let img_h = (n * h + (n.saturating_sub(1)) * gap) as u32;
    let mut out = image::RgbImage::from_pixel(img_w, img_h, image::Rgb([255, 255, 255]));

    let put = |out: &mut image::RgbImage, x0: usize, y0: usize, img: ndarray::ArrayView3<f32>| {
        for yy in 0..h {
            for xx in 0..w {
                let px = if c == 1 {
                    let v = (img[[0, yy, xx]].clamp(0.0, 1.0) * 255.0) as u8;
                    [v, v, v]
                } else {
                    [
                        (img[[0, yy, xx]].clamp(0.0, 1.0) * 255.0) as u8,
                        (img[[1, yy, xx]].clamp(0.0, 1.0) * 255.0) as u8,
                        (img[[2, yy, xx]].clamp(0.0, 1.0) * 255.0) as u8,
                    ]
                };
                out.put_pixel((x0 + xx) as u32, (y0 + yy) as u32, image::Rgb(px));
            }
        }
    };

    for i in 0..n {
        let y0 = i * (h + gap);
        let cl = clean.index_axis(Axis(0), i);
        let bd = backdoor.index_axis(Axis(0), i);
        put(&mut out, 0, y0, cl);
        put(&mut out, w + gap, y0, bd);
        // residual centered at gray, amplified
        let res = (&bd.to_owned() - &cl.to_owned()).mapv(|v| 0.5 + v * amplification);
        put(&mut out, 2 * (w + gap), y0, res.view());
    }
    out.save(path).map_err(|e| backscatter::Error::Io(std::io::Error::other(e)))?;
    Ok(())
}
