//! Minimal bar charts rendered straight into RGB images.

use glasseg::datakit::Image;

const WIDTH: usize = 480;
const HEIGHT: usize = 240;
const MARGIN: usize = 16;
const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
const AXIS: [f32; 3] = [0.2, 0.2, 0.2];
const BAR: [f32; 3] = [0.22, 0.45, 0.75];

/// One bar per value, heights scaled to the largest value.
pub fn bar_chart(values: &[f64]) -> Image {
    let mut img = Image::from_fn(HEIGHT, WIDTH, 3, |_, _, c| BACKGROUND[c]);
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let base = HEIGHT - MARGIN;
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if !values.is_empty() && max > 0.0 {
        let slot = plot_w as f64 / values.len() as f64;
        for (i, &v) in values.iter().enumerate() {
            let x0 = MARGIN + (i as f64 * slot + slot * 0.1).round() as usize;
            let x1 = MARGIN + ((i + 1) as f64 * slot - slot * 0.1).round() as usize;
            let h = ((v / max) * plot_h as f64).round() as usize;
            fill(&mut img, base - h..base, x0..x1.max(x0 + 1), BAR);
        }
    }
    fill(&mut img, base..base + 1, MARGIN..WIDTH - MARGIN, AXIS);
    fill(&mut img, MARGIN..base + 1, MARGIN..MARGIN + 1, AXIS);
    img
}

fn fill(img: &mut Image, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, rgb: [f32; 3]) {
    let w = img.dims().1;
    let data = img.data_mut();
    for y in rows {
        for x in cols.clone() {
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallest_bar_reaches_the_top() {
        let img = bar_chart(&[1.0, 4.0]);
        assert_eq!(img.dims(), (HEIGHT, WIDTH));
        let x = MARGIN + 3 * (WIDTH - 2 * MARGIN) / 4;
        assert_eq!(img.get(MARGIN, x, 2), BAR[2]);
        assert_eq!(img.get(MARGIN, MARGIN + (WIDTH - 2 * MARGIN) / 4, 2), BACKGROUND[2]);
    }

    #[test]
    fn empty_input_draws_axes_only() {
        let img = bar_chart(&[]);
        assert_eq!(img.get(HEIGHT - MARGIN, WIDTH / 2, 0), AXIS[0]);
    }
}
