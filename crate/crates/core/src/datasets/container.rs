//! `DCSET1` flat binary container.
//!
//! Layout (all little-endian): the 6-byte magic `DCSET1`, then `u32` fields
//! N, H, W, C, K, F; then `N·H·W·C` f32 intensities; then N i32 content
//! labels; then `N·F` i32 transformation labels (row-major). Bin counts are
//! recovered on load as `max + 1` of each factor column.

use std::io::Write;
use std::path::Path;

use super::{LabeledImageSet, TransformLabels};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const DCSET_MAGIC: &[u8; 6] = b"DCSET1";
const HEADER_LEN: usize = 6 + 6 * 4;

pub fn write_dcset(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.validate()?;
    let f = set.transform_labels.as_ref().map_or(0, |t| t.factors());
    let mut buf = Vec::with_capacity(HEADER_LEN + set.images.len() * 4 + set.len() * (1 + f) * 4);
    buf.extend_from_slice(DCSET_MAGIC);
    for v in [
        set.len(),
        set.height(),
        set.width(),
        set.channels(),
        set.num_classes,
        f,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &set.images.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &set.content_labels {
        buf.extend_from_slice(&(l as i32).to_le_bytes());
    }
    if let Some(t) = &set.transform_labels {
        for &l in &t.values {
            buf.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dcset(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    ensure!(
        bytes.len() >= HEADER_LEN && &bytes[..6] == DCSET_MAGIC,
        fmt("missing DCSET1 header".into())
    );
    let field = |i: usize| {
        let at = 6 + 4 * i;
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
    };
    let (n, h, w, c, k, f) = (field(0), field(1), field(2), field(3), field(4), field(5));
    let px = n * h * w * c;
    let want = HEADER_LEN + 4 * (px + n + n * f);
    ensure!(
        bytes.len() == want,
        Error::Consistency(format!(
            "{}: header implies {want} bytes, file has {}",
            path.display(),
            bytes.len()
        ))
    );
    let word = |i: usize| {
        let at = HEADER_LEN + 4 * i;
        [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]
    };
    let images: Vec<f32> = (0..px).map(|i| f32::from_le_bytes(word(i))).collect();
    let to_label = |v: i32| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::Consistency(format!("negative label {v}")))
    };
    let content_labels = (0..n)
        .map(|i| to_label(i32::from_le_bytes(word(px + i))))
        .collect::<Result<Vec<_>>>()?;
    let transform_labels = if f > 0 {
        let values = (0..n * f)
            .map(|i| to_label(i32::from_le_bytes(word(px + n + i))))
            .collect::<Result<Vec<_>>>()?;
        let bins = (0..f)
            .map(|j| values.iter().skip(j).step_by(f).max().map_or(1, |&m| m as usize + 1))
            .collect();
        let names = match f {
            2 => vec!["angle".to_string(), "deform".to_string()],
            _ => (0..f).map(|j| format!("factor{j}")).collect(),
        };
        Some(TransformLabels { values, bins, names })
    } else {
        None
    };
    let set = LabeledImageSet {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dcset".into()),
        images: Tensor::new(vec![n, h, w, c], images),
        content_labels,
        num_classes: k,
        transform_labels,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_shapes, ShapeGenConfig};

    #[test]
    fn round_trip_preserves_everything_but_the_name() {
        let cfg = ShapeGenConfig {
            classes: 2,
            n_per_cell: 2,
            angle_bins: 4,
            deform_bins: 2,
            ..ShapeGenConfig::default()
        };
        let set = gen_shapes(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dcset");
        write_dcset(&set, &p).unwrap();
        let back = read_dcset(&p).unwrap();
        assert_eq!(back.images, set.images);
        assert_eq!(back.content_labels, set.content_labels);
        assert_eq!(back.num_classes, set.num_classes);
        assert_eq!(back.transform_labels, set.transform_labels);

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"DCSET1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize, set.len());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dcset");
        let mut bytes = DCSET_MAGIC.to_vec();
        for v in [2u32, 2, 2, 1, 2, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0; 8]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dcset(&p), Err(Error::Consistency(_))));
        std::fs::write(&p, b"NOTSET").unwrap();
        assert!(matches!(read_dcset(&p), Err(Error::Format { .. })));
    }
}
