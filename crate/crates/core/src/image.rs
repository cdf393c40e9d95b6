use std::fmt::Write as _;

/// RGB image `[3, size, size]`, channel-major, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`. `+inf` maps to 1;
    /// `-inf` and NaN map to 0.
    pub fn from_unclamped(size: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * size * size, "image data length");
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Image { size, data }
    }

    pub fn constant(size: usize, value: f32) -> Self {
        Image::from_unclamped(size, vec![value; 3 * size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let s = self.size;
        self.data[(c * s + y) * s + x] = clamp_unit(v);
    }

    /// Plain-text PPM (`P3`, 8 bits per channel), one pixel row per line.
    pub fn to_ppm(&self) -> String {
        let s = self.size;
        let mut out = format!("P3\n{s} {s}\n255\n");
        for y in 0..s {
            let row: Vec<String> = (0..s)
                .flat_map(|x| (0..3).map(move |c| (c, x)))
                .map(|(c, x)| quantize(self.get(c, y, x)).to_string())
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

#[inline]
fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_non_finite() {
        let img = Image::from_unclamped(1, vec![f32::INFINITY, f32::NEG_INFINITY, f32::NAN]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
        let img = Image::from_unclamped(1, vec![1.5, -0.5, 0.25]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.25]);
    }

    #[test]
    fn ppm_layout() {
        let mut img = Image::constant(2, 0.0);
        img.set(0, 0, 1, 1.0);
        img.set(2, 1, 0, 0.5);
        assert_eq!(img.to_ppm(), "P3\n2 2\n255\n0 0 0 255 0 0\n0 0 128 0 0 0\n");
    }
}
