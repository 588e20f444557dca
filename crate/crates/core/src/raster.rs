/// An RGB image with channel values nominally in `[0, 1]`, stored row-major
/// as `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize * 3, "image buffer size");
        Self { width, height, data }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.iter().copied().cycle().take(3 * n).collect())
    }

    pub fn pixel(&self, u: u32, v: u32) -> [f64; 3] {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: u32, v: u32, rgb: [f64; 3]) {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// All pixel coordinates in row-major order.
    pub fn coords(&self) -> Vec<(u32, u32)> {
        (0..self.height).flat_map(|v| (0..self.width).map(move |u| (u, v))).collect()
    }

    /// Rounds to 8 bits and back, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| f64::from(to_u8(x)) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| to_u8(x)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Self {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_round_trip_is_stable() {
        let img = Image::new(2, 1, vec![0.0, 0.5, 1.0, 0.2, 0.9, 1.3]);
        let q = img.quantized();
        assert_eq!(q, Image::from_rgb8(2, 1, &img.to_rgb8()));
        assert_eq!(q.quantized(), q);
        assert_eq!(q.pixel(1, 0)[2], 1.0);
    }

    #[test]
    fn coords_are_row_major() {
        let img = Image::filled(3, 2, [0.1, 0.2, 0.3]);
        assert_eq!(img.coords()[..4], [(0, 0), (1, 0), (2, 0), (0, 1)]);
        assert_eq!(img.pixel(2, 1), [0.1, 0.2, 0.3]);
    }
}
