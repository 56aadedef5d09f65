//! RGB images, PPM I/O, resizing and high-resolution tiling.

use serde::{Deserialize, Serialize};

use super::VlmError;

/// Row-major `[height][width][3]` RGB values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, VlmError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(VlmError::Image(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VlmError::Image("non-finite pixel".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary (`P6`) or ASCII (`P3`) PPM with maxval up to 255.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, VlmError> {
        let bad = |m: &str| VlmError::Image(format!("ppm: {m}"));
        let mut pos = 0;
        let next_token = |pos: &mut usize| -> Option<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let magic = next_token(&mut pos).ok_or_else(|| bad("empty"))?;
        let num = |pos: &mut usize| -> Result<usize, VlmError> {
            next_token(pos)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad header"))
        };
        let (w, h, maxval) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be 1..=255"));
        }
        let n = w.checked_mul(h).and_then(|p| p.checked_mul(3)).ok_or_else(|| bad("too large"))?;
        let scale = maxval as f32;
        let raw: Vec<u8> = match magic.as_str() {
            "P6" => {
                // exactly one whitespace byte after maxval
                let body = bytes.get(pos + 1..).ok_or_else(|| bad("truncated"))?;
                if body.len() < n {
                    return Err(bad("truncated"));
                }
                body[..n].to_vec()
            }
            "P3" => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = num(&mut pos)?;
                    if x > maxval {
                        return Err(bad("sample above maxval"));
                    }
                    v.push(x as u8);
                }
                v
            }
            _ => return Err(bad("expected P3 or P6")),
        };
        Self::new(w, h, raw.iter().map(|&b| f32::from(b) / scale).collect())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Bilinear resampling at pixel centres.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height * 3);
        let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
        for y in 0..height {
            let fy = clamp((y as f64 + 0.5) * sy - 0.5, self.height);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = clamp((x as f64 + 0.5) * sx - 0.5, self.width);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                    let bot = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                    data.push((top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        Self { width, height, data }
    }

    /// The `w x h` block whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Allowed `(rows, cols)` tile grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub grids: Vec<(usize, usize)>,
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self {
            grids: vec![(1, 1), (1, 2), (2, 1), (2, 2)],
        }
    }
}

impl GridPolicy {
    /// Grid whose aspect ratio (cols / rows) is closest to the image's, in
    /// log space; ties go to the grid with more tiles.
    pub fn choose(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let target = (width as f64 / height as f64).ln();
        self.grids
            .iter()
            .copied()
            .filter(|&(r, c)| r > 0 && c > 0)
            .min_by(|&(r1, c1), &(r2, c2)| {
                let d1 = ((c1 as f64 / r1 as f64).ln() - target).abs();
                let d2 = ((c2 as f64 / r2 as f64).ln() - target).abs();
                d1.total_cmp(&d2).then((r2 * c2).cmp(&(r1 * c1)))
            })
    }
}

/// A global view plus, for images larger than the base resolution, a
/// row-major grid of base-sized tiles cut from the resized image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    pub base: usize,
    pub grid: Option<(usize, usize)>,
    pub global: Image,
    pub tiles: Vec<Image>,
}

impl Tiling {
    /// Encoder inputs in sequence order: the global view, then the tiles.
    pub fn views(&self) -> impl Iterator<Item = &Image> {
        std::iter::once(&self.global).chain(&self.tiles)
    }

    pub fn view_count(&self) -> usize {
        1 + self.tiles.len()
    }

    /// Pastes the tiles back together.
    pub fn reassemble(&self) -> Option<Image> {
        let (rows, cols) = self.grid?;
        let (w, h) = (cols * self.base, rows * self.base);
        let mut data = vec![0.0; w * h * 3];
        for (i, t) in self.tiles.iter().enumerate() {
            let (ty, tx) = (i / cols, i % cols);
            for y in 0..self.base {
                let dst = ((ty * self.base + y) * w + tx * self.base) * 3;
                let src = y * self.base * 3;
                data[dst..dst + self.base * 3].copy_from_slice(&t.data[src..src + self.base * 3]);
            }
        }
        Some(Image {
            width: w,
            height: h,
            data,
        })
    }
}

pub fn tile_high_res(image: &Image, policy: &GridPolicy, base: usize) -> Result<Tiling, VlmError> {
    if base == 0 {
        return Err(VlmError::Image("base resolution must be positive".into()));
    }
    let global = image.resize(base, base);
    let grid = if image.width <= base && image.height <= base {
        None
    } else {
        policy.choose(image.width, image.height).filter(|&g| g != (1, 1))
    };
    let Some((rows, cols)) = grid else {
        return Ok(Tiling {
            base,
            grid: None,
            global,
            tiles: Vec::new(),
        });
    };
    let resized = image.resize(cols * base, rows * base);
    let tiles = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| resized.crop(c * base, r * base, base, base))
        .collect();
    Ok(Tiling {
        base,
        grid,
        global,
        tiles,
    })
}
