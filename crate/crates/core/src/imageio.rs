//! PNG export of image batches and contact sheets.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Lays out an `(n, 3, h, w)` batch in `[-1, 1]` as a grid with `cols` columns,
/// each image enlarged `scale` times and separated by a 1-pixel gray gutter.
pub fn grid_rgb<T: Real>(
    images: &Tensor<T>,
    cols: usize,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "expected RGB images, got {c} channels"
        )));
    }
    if n == 0 || cols == 0 || scale == 0 {
        return Err(Error::Validation("empty image grid".into()));
    }
    let rows = n.div_ceil(cols);
    let (cw, ch) = (w * scale + 1, h * scale + 1);
    let (width, height) = (cols * cw + 1, rows * ch + 1);
    let mut buf = vec![128u8; width * height * 3];
    for i in 0..n {
        let img = images.slice0(i);
        let (ox, oy) = ((i % cols) * cw + 1, (i / cols) * ch + 1);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let p = ((oy + y) * width + ox + x) * 3;
                for k in 0..3 {
                    buf[p + k] = to_u8(img[(k * h + y / scale) * w + x / scale].as_f64());
                }
            }
        }
    }
    Ok((width, height, buf))
}

pub fn write_rgb_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    rgb: &[u8],
) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Writes a contact sheet of `images` to `path`.
pub fn save_grid<T: Real>(
    images: &Tensor<T>,
    cols: usize,
    scale: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (w, h, buf) = grid_rgb(images, cols, scale)?;
    write_rgb_png(path, w, h, &buf)
}

/// Raw 8-bit RGB pixels of a PNG: `(width, height, rgb)`. Gray and alpha inputs are converted.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let pixels = &buf[..info.buffer_size()];
    let rgb = pixels
        .chunks(channels)
        .flat_map(|p| match channels {
            1 | 2 => [p[0]; 3],
            _ => [p[0], p[1], p[2]],
        })
        .collect();
    Ok((w, h, rgb))
}

/// Loads a PNG as a `(3, h, w)` image in `[-1, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let (w, h, rgb) = read_rgb_png(path)?;
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.chunks(3).enumerate() {
        for k in 0..3 {
            data[k * h * w + i] = px[k] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_values() {
        let mut t = Tensor::<f32>::full(&[3, 3, 2, 2], -1.0);
        t.slice0_mut(1).iter_mut().for_each(|v| *v = 1.0);
        let (w, h, buf) = grid_rgb(&t, 2, 2).unwrap();
        assert_eq!((w, h), (11, 11));
        assert_eq!(buf[(w + 1) * 3], 0);
        assert_eq!(buf[(w + 6) * 3], 255);
        assert_eq!(buf[0], 128);
        let dir = tempfile::tempdir().unwrap();
        save_grid(&t, 2, 2, dir.path().join("g.png")).unwrap();
        assert_eq!(read_rgb_png(dir.path().join("g.png")).unwrap(), (w, h, buf));
        assert!(grid_rgb(&Tensor::<f32>::zeros(&[1, 1, 2, 2]), 1, 1).is_err());
    }

    #[test]
    fn single_image_round_trip() {
        let t =
            Tensor::<f32>::from_vec(&[1, 3, 1, 2], vec![-1.0, 1.0, 0.2, -0.2, 1.0, -1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        let (w, h, buf) = grid_rgb(&t, 1, 1).unwrap();
        // drop the gutter to get the bare image
        let inner: Vec<u8> = (0..2)
            .flat_map(|x| buf[((w + 1 + x) * 3)..((w + 2 + x) * 3)].to_vec())
            .collect();
        assert_eq!(h, 3);
        write_rgb_png(&path, 2, 1, &inner).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 1, 2]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
    }
}
