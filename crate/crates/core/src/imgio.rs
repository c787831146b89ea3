//! On-disk image formats: 16-bit grayscale PNG for raw fields, and a small
//! raw f32 raster format (`.f32`) for pre-processed real-valued images.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

const F32_MAGIC: &[u8; 4] = b"WSF1";

/// Write a u16 intensity grid as 16-bit grayscale PNG.
pub fn write_png_u16(path: &Path, image: &Array2<u16>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (rows, cols) = image.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(cols as u32, rows as u32, |x, y| {
            Luma([image[(y as usize, x as usize)]])
        });
    buf.save(path)?;
    Ok(())
}

/// Read a 16-bit grayscale PNG into a u16 grid.
pub fn read_png_u16(path: &Path) -> Result<Array2<u16>> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "image not found: {}",
            path.display()
        )));
    }
    let img = image::open(path)?.into_luma16();
    let (cols, rows) = img.dimensions();
    let mut out = Array2::<u16>::zeros((rows as usize, cols as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = p.0[0];
    }
    Ok(out)
}

/// Read a 16-bit grayscale PNG as f32 intensities.
pub fn read_png_f32(path: &Path) -> Result<Array2<f32>> {
    Ok(read_png_u16(path)?.mapv(|p| p as f32))
}

/// Write a real-valued raster: magic, u32 rows, u32 cols, then
/// little-endian f32 row-major data.
pub fn write_f32(path: &Path, image: &Array2<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (rows, cols) = image.dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(F32_MAGIC)?;
    file.write_all(&(rows as u32).to_le_bytes())?;
    file.write_all(&(cols as u32).to_le_bytes())?;
    for &p in image.iter() {
        file.write_all(&p.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a real-valued raster written by [`write_f32`].
pub fn read_f32(path: &Path) -> Result<Array2<f32>> {
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "image not found: {}",
            path.display()
        )));
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != F32_MAGIC {
        return Err(Error::Structure(format!(
            "{} is not an f32 raster file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    file.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut data = vec![0f32; rows * cols];
    for v in &mut data {
        file.read_exact(&mut word)?;
        *v = f32::from_le_bytes(word);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Structure(format!("bad raster payload: {}", e)))
}
