//! Dataset directories: `images/<stem>.{png,ppm}` paired with
//! `annotations/<stem>.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{annotations, raster};
use crate::density::DotAnnotations;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainSample;

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub stem: String,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: DotAnnotations,
}

impl DatasetEntry {
    pub fn to_sample(&self, sigma: f64, multiple: usize) -> Result<TrainSample> {
        TrainSample::new(self.stem.clone(), &self.image, &self.annotations, sigma, multiple)
    }
}

fn list_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Load(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Loads every image/annotation pair under `root`, sorted by stem.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetEntry>> {
    let images = list_by_stem(&root.join("images"), &["png", "ppm"])?;
    let anns = list_by_stem(&root.join("annotations"), &["csv"])?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|s| !anns.contains_key(*s))
        .map(|s| format!("image `{s}` has no annotation file"))
        .chain(
            anns.keys()
                .filter(|s| !images.contains_key(*s))
                .map(|s| format!("annotation `{s}` has no image")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Load(orphans.join("; ")));
    }
    images
        .into_iter()
        .map(|(stem, image_path)| {
            let annotation_path = anns[&stem].clone();
            let rgb = raster::read_image(&image_path)?;
            let text = String::from_utf8(super::read_file(&annotation_path)?)
                .map_err(|_| Error::Load(format!("{}: not UTF-8", annotation_path.display())))?;
            let points = annotations::parse_csv(&text)
                .map_err(|e| Error::Load(format!("{}: {e}", annotation_path.display())))?;
            let annotations = DotAnnotations::new(points, rgb.width, rgb.height)
                .map_err(|e| Error::Load(format!("{}: {e}", annotation_path.display())))?;
            Ok(DatasetEntry {
                stem,
                image_path,
                annotation_path,
                image: rgb.to_tensor(),
                annotations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synth, write_atomic, SynthSpec};

    fn write_pair(root: &Path, stem: &str, csv: &str) {
        let img = raster::Rgb8 {
            width: 4,
            height: 4,
            data: vec![128; 48],
        };
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("annotations")).unwrap();
        write_atomic(&root.join(format!("images/{stem}.ppm")), &raster::encode_ppm(&img)).unwrap();
        write_atomic(&root.join(format!("annotations/{stem}.csv")), csv.as_bytes()).unwrap();
    }

    #[test]
    fn empty_annotations_and_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "b", "");
        write_pair(dir.path(), "a", "1,1\n2,3\n");
        let ds = load_dataset(dir.path()).unwrap();
        let stems: Vec<&str> = ds.iter().map(|e| e.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b"]);
        assert_eq!(ds[0].annotations.count(), 2);
        assert_eq!(ds[1].annotations.count(), 0);
        assert_eq!(ds[0].image.shape(), &[3, 4, 4]);
    }

    #[test]
    fn orphan_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "");
        std::fs::remove_file(dir.path().join("annotations/a.csv")).unwrap();
        write_atomic(&dir.path().join("annotations/zz.csv"), b"").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("`a`") && err.contains("`zz`"), "{err}");
    }

    #[test]
    fn bad_line_and_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", "1,1\noops\n");
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("line 2"));
        write_pair(dir.path(), "a", "9,1\n");
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load(_))));
    }

    #[test]
    fn synth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            images: 3,
            size: 32,
            min_count: 0,
            max_count: 9,
            seed: 4,
        };
        let written = synth::write_dataset(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (w, l) in written.iter().zip(&loaded) {
            assert_eq!(w.stem, l.stem);
            assert_eq!(w.annotations.points, l.annotations.points);
            assert_eq!(w.rgb.to_tensor(), l.image);
        }
    }
}
