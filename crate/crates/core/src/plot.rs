//! Minimal raster plots written as PNG: element-wise conductivity maps, loss
//! curves and bar charts.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::mesh::Mesh2D;

pub type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [0, 0, 0];
const GREY: Rgb = [200, 200, 200];
/// Line and bar colours, cycled.
pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Samples of the viridis colormap at 0, 0.125, …, 1.
const VIRIDIS: [Rgb; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub fn colormap(t: f64) -> Rgb {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Image {
            width,
            height,
            pixels: fill.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let k = 3 * (y * self.width + x);
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let k = 3 * (y as usize * self.width + x as usize);
            self.pixels[k..k + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory png header");
            w.write_image_data(&self.pixels).expect("in-memory png data");
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        std::io::Write::write_all(&mut w, &self.to_png()).map_err(|e| Error::io(path, e))
    }
}

/// Element values drawn as filled triangles with a vertical colour bar on the
/// right. `range` fixes the colour limits; otherwise the data range is used.
pub fn conductivity_map(mesh: &Mesh2D, values: &[f64], range: Option<(f64, f64)>, size: usize) -> Result<Image> {
    ensure!(
        values.len() == mesh.n_elements(),
        Shape,
        "{} values for {} elements",
        values.len(),
        mesh.n_elements()
    );
    ensure!(size >= 32, InvalidArgument, "image size must be at least 32 pixels");
    let (lo, hi) = match range {
        Some(r) => r,
        None => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
    };
    ensure!(lo.is_finite() && hi.is_finite() && lo <= hi, InvalidArgument, "invalid colour range [{lo}, {hi}]");
    let span = if hi > lo { hi - lo } else { 1.0 };

    let bar = size / 10;
    let mut img = Image::new(size + 2 * bar, size, WHITE);
    let margin = 4.0;
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in mesh.nodes() {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    let extent = (max[0] - min[0]).max(max[1] - min[1]);
    let scale = (size as f64 - 2.0 * margin) / extent;
    let off = [
        margin + 0.5 * (size as f64 - 2.0 * margin - scale * (max[0] - min[0])),
        margin + 0.5 * (size as f64 - 2.0 * margin - scale * (max[1] - min[1])),
    ];
    let to_px = |p: [f64; 2]| -> [f64; 2] {
        [
            off[0] + scale * (p[0] - min[0]),
            size as f64 - (off[1] + scale * (p[1] - min[1])),
        ]
    };
    for (tri, &v) in mesh.elements().iter().zip(values) {
        let c = colormap((v - lo) / span);
        let [a, b, d] = tri.map(|n| to_px(mesh.nodes()[n]));
        fill_triangle(&mut img, a, b, d, c);
    }
    for k in 0..size {
        let c = colormap(1.0 - k as f64 / (size - 1) as f64);
        img.fill_rect((size + bar / 2) as i64, k as i64, (size + 3 * bar / 2) as i64, k as i64, c);
    }
    Ok(img)
}

fn fill_triangle(img: &mut Image, a: [f64; 2], b: [f64; 2], c: [f64; 2], color: Rgb) {
    let edge = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let area = edge(a, b, c);
    if area == 0.0 {
        return;
    }
    let x0 = a[0].min(b[0]).min(c[0]).floor().max(0.0) as i64;
    let x1 = a[0].max(b[0]).max(c[0]).ceil().min(img.width as f64 - 1.0) as i64;
    let y0 = a[1].min(b[1]).min(c[1]).floor().max(0.0) as i64;
    let y1 = a[1].max(b[1]).max(c[1]).ceil().min(img.height as f64 - 1.0) as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let (w0, w1, w2) = (edge(b, c, p), edge(c, a, p), edge(a, b, p));
            let inside = if area > 0.0 {
                w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
            } else {
                w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
            };
            if inside {
                img.set(x, y, color);
            }
        }
    }
}

/// Frame with axes for data in `[x0, x1] × [y0, y1]`.
struct Axes {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.5 };
        let fy = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.5 };
        (
            (self.margin + fx * (self.width - 2.0 * self.margin)).round() as i64,
            (self.height - self.margin - fy * (self.height - 2.0 * self.margin)).round() as i64,
        )
    }

    fn draw(&self, img: &mut Image) {
        let (l, b) = (self.margin as i64, (self.height - self.margin) as i64);
        let (r, t) = ((self.width - self.margin) as i64, self.margin as i64);
        for k in 1..5 {
            let y = b + (t - b) * k / 5;
            img.line((l, y), (r, y), GREY);
        }
        img.line((l, b), (r, b), BLACK);
        img.line((l, b), (l, t), BLACK);
    }
}

/// Polylines of (x, y) series; `log_y` plots log10 of positive values.
pub fn line_plot(series: &[Vec<(f64, f64)>], log_y: bool, width: usize, height: usize) -> Result<Image> {
    ensure!(width >= 32 && height >= 32, InvalidArgument, "plot must be at least 32x32 pixels");
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut xr, mut yr) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for &(x, y) in all {
        xr = (xr.0.min(x), xr.1.max(x));
        yr = (yr.0.min(y), yr.1.max(y));
    }
    ensure!(xr.0.is_finite(), InvalidArgument, "nothing to plot");
    let axes = Axes {
        width: width as f64,
        height: height as f64,
        margin: 12.0,
        x: xr,
        y: yr,
    };
    let mut img = Image::new(width, height, WHITE);
    axes.draw(&mut img);
    for (k, s) in pts.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for w in s.windows(2) {
            img.line(axes.px(w[0].0, w[0].1), axes.px(w[1].0, w[1].1), c);
        }
        if let [only] = s[..] {
            let (x, y) = axes.px(only.0, only.1);
            img.fill_rect(x - 1, y - 1, x + 1, y + 1, c);
        }
    }
    Ok(img)
}

/// Grouped bars: `groups[g][s]` is the value of series `s` in group `g`.
/// Bars start at zero.
pub fn bar_chart(groups: &[Vec<f64>], width: usize, height: usize) -> Result<Image> {
    ensure!(width >= 32 && height >= 32, InvalidArgument, "plot must be at least 32x32 pixels");
    ensure!(!groups.is_empty(), InvalidArgument, "nothing to plot");
    let values = groups.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let axes = Axes {
        width: width as f64,
        height: height as f64,
        margin: 12.0,
        x: (0.0, groups.len() as f64),
        y: (lo, if hi > lo { hi } else { lo + 1.0 }),
    };
    let mut img = Image::new(width, height, WHITE);
    axes.draw(&mut img);
    for (g, group) in groups.iter().enumerate() {
        let n = group.len().max(1) as f64;
        for (s, &v) in group.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x0 = g as f64 + 0.1 + 0.8 * s as f64 / n;
            let x1 = g as f64 + 0.1 + 0.8 * (s + 1) as f64 / n;
            let (px0, py0) = axes.px(x0, 0.0);
            let (px1, py1) = axes.px(x1, v);
            img.fill_rect(px0, py0, px1 - 1, py1, PALETTE[s % PALETTE.len()]);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::tests::two_triangles;

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), VIRIDIS[0]);
        assert_eq!(colormap(1.0), VIRIDIS[8]);
        assert_eq!(colormap(2.0), VIRIDIS[8]);
        assert_eq!(colormap(f64::NAN), VIRIDIS[0]);
    }

    #[test]
    fn map_is_deterministic_and_respects_range() {
        let mesh = two_triangles(1.0);
        let a = conductivity_map(&mesh, &[0.1, 0.3], None, 64).unwrap();
        let b = conductivity_map(&mesh, &[0.1, 0.3], None, 64).unwrap();
        assert_eq!(a.to_png(), b.to_png());
        let fixed = conductivity_map(&mesh, &[0.1, 0.3], Some((0.0, 1.0)), 64).unwrap();
        assert_ne!(a, fixed);
        let colours: std::collections::BTreeSet<Rgb> =
            (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).map(|(x, y)| a.get(x, y)).collect();
        assert!(colours.contains(&VIRIDIS[0]) && colours.contains(&VIRIDIS[8]));
        assert!(conductivity_map(&mesh, &[0.1], None, 64).is_err());
    }

    #[test]
    fn png_has_signature() {
        let img = line_plot(&[vec![(1.0, 1.0), (2.0, 0.1), (3.0, 0.01)]], true, 80, 60).unwrap();
        assert_eq!(&img.to_png()[..8], b"\x89PNG\r\n\x1a\n");
        assert!(bar_chart(&[vec![1.0, 2.0], vec![0.5, 0.2]], 80, 60).is_ok());
    }
}
