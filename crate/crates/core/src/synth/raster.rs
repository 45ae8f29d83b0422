//! Grayscale images and binary masks.

/// 8-bit grayscale image; intensities are `value / 255` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count mismatch");
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Quantizes unit-range intensities with `round(255 · v)`.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        f64::from(self.get(y, x)) / 255.0
    }

    pub fn unit_values(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask size mismatch");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.intersection(other) == 0
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "iou of differently sized masks"
        );
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Square dilation with the given radius.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }

    /// Shrinks by `factor`, keeping a cell when at least half of its pixels are set.
    pub fn downsample_majority(&self, factor: usize) -> Mask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::empty(h, w);
        for cy in 0..h {
            for cx in 0..w {
                let mut count = 0;
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        count += usize::from(self.get(y, x));
                    }
                }
                out.set(cy, cx, 2 * count >= factor * factor);
            }
        }
        out
    }

    /// The mask at `1/factor` scale whose nearest upsampling has the highest
    /// IoU with `self`.
    ///
    /// All cells have equal area, so for a fixed cell count the best choice
    /// is the most covered cells; the result is the best such prefix.
    pub fn downsample_best_iou(&self, factor: usize) -> Mask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for cy in 0..h {
            for cx in 0..w {
                let mut count = 0;
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        count += usize::from(self.get(y, x));
                    }
                }
                if count > 0 {
                    cells.push((count, cy * w + cx));
                }
            }
        }
        cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let area = self.area() as f64;
        let cell = (factor * factor) as f64;
        let (mut inter, mut best, mut best_k) = (0.0, 0.0, 0);
        for (k, &(count, _)) in cells.iter().enumerate() {
            inter += count as f64;
            let iou = inter / (area + (k + 1) as f64 * cell - inter);
            if iou > best {
                best = iou;
                best_k = k + 1;
            }
        }
        let mut out = Mask::empty(h, w);
        for &(_, i) in &cells[..best_k] {
            out.bits[i] = true;
        }
        out
    }

    /// Shrinks by `factor`, keeping a cell when any of its pixels is set.
    pub fn downsample_any(&self, factor: usize) -> Mask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::empty(h, w);
        for y in 0..self.height.min(h * factor) {
            for x in 0..self.width.min(w * factor) {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        out
    }

    pub fn upsample_nearest(&self, factor: usize) -> Mask {
        let (h, w) = (self.height * factor, self.width * factor);
        let bits = (0..h * w)
            .map(|i| self.get(i / w / factor, i % w / factor))
            .collect();
        Mask::from_bits(h, w, bits)
    }

    /// Largest 8-connected component (first in scan order on ties).
    pub fn largest_component(&self) -> Mask {
        let mut label = vec![0usize; self.bits.len()];
        let mut best: Option<(usize, usize)> = None;
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            stack.push(start);
            let mut size = 0;
            while let Some(i) = stack.pop() {
                size += 1;
                let (y, x) = ((i / self.width) as isize, (i % self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0
                            || nx < 0
                            || ny >= self.height as isize
                            || nx >= self.width as isize
                        {
                            continue;
                        }
                        let j = ny as usize * self.width + nx as usize;
                        if self.bits[j] && label[j] == 0 {
                            label[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((next, size));
            }
        }
        let bits = match best {
            Some((id, _)) => label.iter().map(|&l| l == id).collect(),
            None => vec![false; self.bits.len()],
        };
        Mask::from_bits(self.height, self.width, bits)
    }

    /// Alternating zero-run / one-run lengths in row-major order, starting with zeros.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Mask, String> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(format!(
                "rle covers {total} pixels but the image has {}",
                height * width
            ));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        Ok(Mask::from_bits(height, width, bits))
    }
}
