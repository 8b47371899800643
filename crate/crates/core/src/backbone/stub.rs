use crate::error::{Error, Result};

use super::FeatureExtractor;

/// Model-free extractor: the mean of each channel over every cell of a
/// `grid` x `grid` partition of the image.
///
/// Output layout is channel-major, then cell row, then cell column, giving
/// `3 * grid^2` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubBackbone {
    grid: usize,
    height: usize,
    width: usize,
}

impl StubBackbone {
    pub fn new(grid: usize, height: usize, width: usize) -> Result<Self> {
        if grid == 0 || height % grid != 0 || width % grid != 0 {
            return Err(Error::Config(format!(
                "stub grid {grid} must evenly divide the {height}x{width} input"
            )));
        }
        Ok(Self { grid, height, width })
    }

    pub fn feature_dim_for(grid: usize) -> usize {
        3 * grid * grid
    }
}

impl FeatureExtractor for StubBackbone {
    fn run(&self, input: &[f32], height: usize, width: usize) -> Result<Vec<f32>> {
        if (height, width) != (self.height, self.width) || input.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "stub expects {}x{}x3 input, got {height}x{width} with {} values",
                self.height,
                self.width,
                input.len()
            )));
        }
        let g = self.grid;
        let (ch, cw) = (height / g, width / g);
        let mut sums = vec![0f64; 3 * g * g];
        for y in 0..height {
            let gy = y / ch;
            for x in 0..width {
                let gx = x / cw;
                let px = &input[(y * width + x) * 3..][..3];
                for (c, &v) in px.iter().enumerate() {
                    sums[(c * g + gy) * g + gx] += v as f64;
                }
            }
        }
        let cell = (ch * cw) as f64;
        Ok(sums.into_iter().map(|s| (s / cell) as f32).collect())
    }
}
