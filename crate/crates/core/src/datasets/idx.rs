//! MNIST IDX ingestion. Files may be plain or gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::LabeledImageSet;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "header truncated".into(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    ensure!(
        got == want,
        Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic 0x{got:08x}, expected 0x{want:08x}"),
        }
    );
    Ok(())
}

/// Load an IDX image/label pair, rescaling bytes to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_all(ip)?;
    let lab = read_all(lp)?;
    check_magic(&img, IDX_IMAGES_MAGIC, ip)?;
    check_magic(&lab, IDX_LABELS_MAGIC, lp)?;

    let n = be_u32(&img, 4, ip)? as usize;
    let h = be_u32(&img, 8, ip)? as usize;
    let w = be_u32(&img, 12, ip)? as usize;
    let nl = be_u32(&lab, 4, lp)? as usize;
    ensure!(
        n == nl,
        Error::Consistency(format!("{} declares {n} images but {} declares {nl} labels", ip.display(), lp.display()))
    );
    let pixels = &img[16..];
    ensure!(
        pixels.len() == n * h * w,
        Error::Consistency(format!(
            "{}: header declares {n} images of {h}x{w} but payload holds {} bytes",
            ip.display(),
            pixels.len()
        ))
    );
    let labels = &lab[8..];
    ensure!(
        labels.len() == n,
        Error::Consistency(format!(
            "{}: header declares {n} labels but payload holds {}",
            lp.display(),
            labels.len()
        ))
    );

    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let content_labels: Vec<u32> = labels.iter().map(|&b| b as u32).collect();
    let num_classes = content_labels.iter().max().map_or(0, |&m| m as usize + 1).max(10);
    let set = LabeledImageSet {
        name: ip
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        images: Tensor::new(vec![n, h, w, 1], data),
        content_labels,
        num_classes,
        transform_labels: None,
    };
    set.validate()?;
    Ok(set)
}
