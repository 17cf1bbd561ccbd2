//! PNG rendering of explanation reports: horizontal probability bars per
//! descriptor class, with a small built-in 5x7 bitmap font so the figure has
//! no font-file dependency.

use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::ExplanationReport;

const GLYPH_WIDTH: usize = 5;
const GLYPH_HEIGHT: usize = 7;

fn glyph(c: char) -> [&'static str; 7] {
    match c.to_ascii_uppercase() {
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'B' => ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
        'C' => [".####", "#....", "#....", "#....", "#....", "#....", ".####"],
        'D' => ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
        'E' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'F' => ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
        'G' => [".####", "#....", "#....", "#..##", "#...#", "#...#", ".####"],
        'H' => ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'I' => [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'J' => ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
        'K' => ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
        'L' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'M' => ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
        'N' => ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
        'O' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'Q' => [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
        'R' => ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'U' => ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'V' => ["#...#", "#...#", "#...#", "#...#", ".#.#.", ".#.#.", "..#.."],
        'W' => ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"],
        'X' => ["#...#", ".#.#.", "..#..", "..#..", "..#..", ".#.#.", "#...#"],
        'Y' => ["#...#", ".#.#.", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'Z' => ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
        '0' => [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        '1' => ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        '2' => [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        '3' => [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
        '4' => ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        '5' => ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        '6' => [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
        '7' => ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        '8' => [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        '9' => [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
        '.' => [".....", ".....", ".....", ".....", ".....", "..#..", "..#.."],
        ':' => [".....", "..#..", "..#..", ".....", "..#..", "..#..", "....."],
        '%' => ["##..#", "##..#", "...#.", "..#..", ".#...", "#..##", "#..##"],
        '-' => [".....", ".....", ".....", ".###.", ".....", ".....", "....."],
        '_' => [".....", ".....", ".....", ".....", ".....", ".....", "#####"],
        '(' => ["...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."],
        ')' => [".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."],
        '/' => ["....#", "...#.", "...#.", "..#..", ".#...", ".#...", "#...."],
        '!' => ["..#..", "..#..", "..#..", "..#..", "..#..", ".....", "..#.."],
        _ => [".....", ".....", ".....", ".....", ".....", ".....", "....."],
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![245u8; width * height],
        }
    }

    fn set(&mut self, x: usize, y: usize, value: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = value;
        }
    }

    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, value: u8) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.pixels[yy * self.width + xx] = value;
            }
        }
    }

    fn outline_rect(&mut self, x: usize, y: usize, w: usize, h: usize, value: u8) {
        for xx in x..(x + w).min(self.width) {
            self.set(xx, y, value);
            self.set(xx, y + h - 1, value);
        }
        for yy in y..(y + h).min(self.height) {
            self.set(x, yy, value);
            self.set(x + w - 1, yy, value);
        }
    }

    fn draw_text(&mut self, x: usize, y: usize, text: &str, value: u8) {
        let mut cursor = x;
        for c in text.chars() {
            let pattern = glyph(c);
            for (gy, row) in pattern.iter().enumerate() {
                for (gx, cell) in row.chars().enumerate() {
                    if cell == '#' {
                        self.set(cursor + gx, y + gy, value);
                    }
                }
            }
            cursor += GLYPH_WIDTH + 1;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (x, y, pixel) in img.enumerate_pixels_mut() {
            pixel.0[0] = self.pixels[y as usize * self.width + x as usize];
        }
        img.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

const LINE_HEIGHT: usize = 13;
const LABEL_X: usize = 16;
const BAR_X: usize = 190;
const BAR_WIDTH: usize = 240;
const TEXT_INK: u8 = 20;
const BAR_INK: u8 = 110;
const WIDTH: usize = 520;

fn bar_line(canvas: &mut Canvas, y: usize, label: &str, probability: f64) {
    canvas.draw_text(LABEL_X + 8, y + 2, label, TEXT_INK);
    canvas.outline_rect(BAR_X, y, BAR_WIDTH, GLYPH_HEIGHT + 4, 150);
    let filled = ((BAR_WIDTH - 2) as f64 * probability.clamp(0.0, 1.0)).round() as usize;
    if filled > 0 {
        canvas.fill_rect(BAR_X + 1, y + 1, filled, GLYPH_HEIGHT + 2, BAR_INK);
    }
    let percent = format!("{:5.1}%", probability * 100.0);
    canvas.draw_text(BAR_X + BAR_WIDTH + 8, y + 2, &percent, TEXT_INK);
}

/// Renders the explanation report as a PNG: one titled block per descriptor
/// with a probability bar per class, the margin sub-type block, and the
/// tumor/likelihood header.
pub fn render_report_figure(report: &ExplanationReport, path: impl AsRef<Path>) -> Result<()> {
    let mut lines = 3usize; // tumor header, likelihood line, spacing
    if report.uncertainty_warning {
        lines += 1;
    }
    lines += report.tumor_probabilities.len();
    for descriptor in &report.descriptors {
        lines += 1 + descriptor.classes.len();
    }
    lines += 1 + report.margin_subtypes.len();
    let height = lines * LINE_HEIGHT + 30;

    let mut canvas = Canvas::new(WIDTH, height);
    let mut y = 10usize;

    let title = format!("TUMOR CLASS: {}", report.tumor_class.to_uppercase());
    canvas.draw_text(LABEL_X, y, &title, TEXT_INK);
    y += LINE_HEIGHT;
    for entry in &report.tumor_probabilities {
        bar_line(&mut canvas, y, &entry.class.to_uppercase(), entry.probability);
        y += LINE_HEIGHT;
    }

    let likelihood = format!(
        "LIKELIHOOD OF MALIGNANCY: {} (BI-RADS {})",
        report.likelihood_display, report.birads_category
    );
    canvas.draw_text(LABEL_X, y, &likelihood, TEXT_INK);
    y += LINE_HEIGHT;
    if report.uncertainty_warning {
        canvas.draw_text(
            LABEL_X,
            y,
            "! BRANCH DISAGREEMENT - UNCERTAIN PREDICTION",
            TEXT_INK,
        );
        y += LINE_HEIGHT;
    }
    y += LINE_HEIGHT / 2;

    for descriptor in &report.descriptors {
        let header = format!(
            "{} (PREDICTED: {})",
            descriptor.descriptor.to_uppercase(),
            descriptor.predicted_class.to_uppercase()
        );
        canvas.draw_text(LABEL_X, y, &header, TEXT_INK);
        y += LINE_HEIGHT;
        for entry in &descriptor.classes {
            bar_line(&mut canvas, y, &entry.class.to_uppercase(), entry.probability);
            y += LINE_HEIGHT;
        }
    }

    canvas.draw_text(LABEL_X, y, "MARGIN SUB-TYPES", TEXT_INK);
    y += LINE_HEIGHT;
    for entry in &report.margin_subtypes {
        bar_line(&mut canvas, y, &entry.class.to_uppercase(), entry.probability);
        y += LINE_HEIGHT;
    }

    canvas.save(path.as_ref())
}
