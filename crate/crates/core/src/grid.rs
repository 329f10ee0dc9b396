//! Dense row-major 2-D grids of `f64` and the separable filters the
//! reference extractor needs.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Read with edge replication outside the grid.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Grid2 {
        Grid2 {
            width: self.width,
            height: self.height,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid2, f: impl Fn(f64, f64) -> f64 + Sync) -> Grid2 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Grid2 {
            width: self.width,
            height: self.height,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Separable Gaussian blur with edge replication; the kernel is
    /// truncated at 3 sigma. `sigma <= 0` returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Grid2 {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let tmp = convolve_rows(self, &kernel);
        convolve_cols(&tmp, &kernel)
    }

    /// Central-difference derivatives `(d/dx, d/dy)` with edge replication.
    pub fn gradient(&self) -> (Grid2, Grid2) {
        let (w, h) = (self.width, self.height);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        gx.par_chunks_mut(w)
            .zip(gy.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (rx, ry))| {
                let yi = y as isize;
                for x in 0..w {
                    let xi = x as isize;
                    rx[x] = 0.5 * (self.get_clamped(xi + 1, yi) - self.get_clamped(xi - 1, yi));
                    ry[x] = 0.5 * (self.get_clamped(xi, yi + 1) - self.get_clamped(xi, yi - 1));
                }
            });
        (Grid2::from_vec(w, h, gx), Grid2::from_vec(w, h, gy))
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_rows(g: &Grid2, kernel: &[f64]) -> Grid2 {
    let r = (kernel.len() / 2) as isize;
    let w = g.width;
    let mut out = vec![0.0; g.data.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let yi = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let xi = x as isize;
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * g.get_clamped(xi + k as isize - r, yi);
            }
            *o = acc;
        }
    });
    Grid2::from_vec(g.width, g.height, out)
}

fn convolve_cols(g: &Grid2, kernel: &[f64]) -> Grid2 {
    let r = (kernel.len() / 2) as isize;
    let w = g.width;
    let mut out = vec![0.0; g.data.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let yi = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let xi = x as isize;
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * g.get_clamped(xi, yi + k as isize - r);
            }
            *o = acc;
        }
    });
    Grid2::from_vec(g.width, g.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant() {
        let g = Grid2::filled(17, 9, 0.25);
        let b = g.gaussian_blur(2.0);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradient_of_ramp() {
        let g = Grid2::from_fn(8, 8, |x, y| 2.0 * x as f64 - y as f64);
        let (gx, gy) = g.gradient();
        assert_eq!(gx.get(3, 4), 2.0);
        assert_eq!(gy.get(3, 4), -1.0);
        // one-sided at the border because of replication
        assert_eq!(gx.get(0, 4), 1.0);
    }
}
