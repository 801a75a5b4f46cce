//! RGB image containers and the 3x2 grid / 1x2 row tiling used by the
//! diffusion model.
//!
//! Views are placed row-major, left to right: target view `i` (0-based)
//! lives in grid row `i / 2`, column `i % 2`. Row `r` (0-based) therefore
//! holds exactly the two targets of autoregressive step `r + 1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{bail_shape, Error, Result};

/// Interleaved HWC RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            bail_shape!(
                "image buffer of {} values does not match {height}x{width}x3",
                data.len()
            );
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Image {
            height,
            width,
            data,
        }
    }

    fn paste(&mut self, src: &Image, top: usize, left: usize) {
        for r in 0..src.height {
            let dst = ((top + r) * self.width + left) * 3;
            let s = r * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    /// Bilinear resample (half-pixel centers, edge clamped).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::filled(height, width, [0.0; 3]);
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (p00, p01, p10, p11) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                let rgb = std::array::from_fn(|ch| {
                    let top = p00[ch] as f64 * (1.0 - wx) + p01[ch] as f64 * wx;
                    let bot = p10[ch] as f64 * (1.0 - wx) + p11[ch] as f64 * wx;
                    (top * (1.0 - wy) + bot * wy) as f32
                });
                out.set_pixel(r, c, rgb);
            }
        }
        out
    }

    /// Quantize to 8 bits and write a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

macro_rules! image_newtype {
    ($name:ident, $check:expr, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Image);

        impl $name {
            pub fn new(image: Image) -> Result<Self> {
                let check: fn(usize, usize) -> bool = $check;
                if !check(image.height, image.width) {
                    bail_shape!(
                        concat!($what, ", got {}x{}"),
                        image.height,
                        image.width
                    );
                }
                Ok(Self(image))
            }

            pub fn image(&self) -> &Image {
                &self.0
            }

            pub fn into_image(self) -> Image {
                self.0
            }
        }

        impl AsRef<Image> for $name {
            fn as_ref(&self) -> &Image {
                &self.0
            }
        }
    };
}

image_newtype!(ViewImage, |h, w| h == w && h > 0, "view must be square");
image_newtype!(RowImage, |h, w| w == 2 * h && h > 0, "row must be V x 2V");
image_newtype!(
    GridImage,
    |h, w| h % 3 == 0 && w % 2 == 0 && h / 3 == w / 2 && h > 0,
    "grid must be 3V x 2V"
);

impl ViewImage {
    pub fn side(&self) -> usize {
        self.0.height
    }

    pub fn white(side: usize) -> Self {
        Self(Image::filled(side, side, [1.0; 3]))
    }
}

impl RowImage {
    pub fn side(&self) -> usize {
        self.0.height
    }
}

impl GridImage {
    pub fn side(&self) -> usize {
        self.0.height / 3
    }
}

pub fn tile_row(left: &ViewImage, right: &ViewImage) -> Result<RowImage> {
    let v = left.side();
    if right.side() != v {
        bail_shape!("row halves differ in size: {} vs {}", v, right.side());
    }
    let mut out = Image::filled(v, 2 * v, [0.0; 3]);
    out.paste(&left.0, 0, 0);
    out.paste(&right.0, 0, v);
    Ok(RowImage(out))
}

pub fn split_row(row: &RowImage) -> (ViewImage, ViewImage) {
    let v = row.side();
    (
        ViewImage(row.0.crop(0, 0, v, v)),
        ViewImage(row.0.crop(0, v, v, v)),
    )
}

pub fn tile6(views: &[ViewImage; 6]) -> Result<GridImage> {
    let v = views[0].side();
    if let Some(bad) = views.iter().find(|x| x.side() != v) {
        bail_shape!("grid views differ in size: {} vs {}", v, bad.side());
    }
    let mut out = Image::filled(3 * v, 2 * v, [0.0; 3]);
    for (i, view) in views.iter().enumerate() {
        out.paste(&view.0, (i / 2) * v, (i % 2) * v);
    }
    Ok(GridImage(out))
}

pub fn untile6(grid: &GridImage) -> [ViewImage; 6] {
    let v = grid.side();
    std::array::from_fn(|i| ViewImage(grid.0.crop((i / 2) * v, (i % 2) * v, v, v)))
}

/// Stack three rows top to bottom.
pub fn stack_rows(rows: &[RowImage; 3]) -> Result<GridImage> {
    let v = rows[0].side();
    if rows.iter().any(|r| r.side() != v) {
        bail_shape!("rows differ in size");
    }
    let mut out = Image::filled(3 * v, 2 * v, [0.0; 3]);
    for (i, row) in rows.iter().enumerate() {
        out.paste(&row.0, i * v, 0);
    }
    Ok(GridImage(out))
}

/// Row `r` (0-based) of a grid.
pub fn grid_row(grid: &GridImage, r: usize) -> RowImage {
    let v = grid.side();
    RowImage(grid.0.crop(r * v, 0, v, 2 * v))
}

/// Stack images into a `(B, 3, H, W)` tensor mapped to [-1, 1].
pub fn images_to_tensor(images: &[&Image], device: &Device, dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail_shape!("cannot build a tensor from zero images");
    };
    let (h, w) = (first.height, first.width);
    let mut buf = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            bail_shape!("batched images differ in size");
        }
        for c in 0..3 {
            for p in 0..h * w {
                buf.push(img.data[p * 3 + c] as f64 * 2.0 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`], clamping to [0, 1].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        bail_shape!("expected 3 channels, got {c}");
    }
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| {
            let mut data = vec![0f32; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    let v = flat[((i * 3 + ch) * h * w) + p];
                    data[p * 3 + ch] = ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
                }
            }
            Image {
                height: h,
                width: w,
                data,
            }
        })
        .collect())
}
