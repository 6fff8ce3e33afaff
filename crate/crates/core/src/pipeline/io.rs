use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::PipelineError;
use crate::geometry::BinaryCell;
use crate::homogenize::{ElasticTensor, PropertyRow};
use crate::perturb::{PairedDataset, Record, Role};

pub const DATASET_MAGIC: &[u8; 4] = b"GUST";
pub const DATASET_VERSION: u32 = 1;

/// Writes the little-endian dataset format: header `GUST`, version, record
/// count, height, width; then per record the nominal id, a role byte and the
/// row-major pixels.
pub fn write_dataset<W: Write>(ds: &PairedDataset, mut out: W) -> Result<(), PipelineError> {
    let (h, w) = ds.resolution().unwrap_or((0, 0));
    out.write_all(DATASET_MAGIC)?;
    out.write_u32::<LittleEndian>(DATASET_VERSION)?;
    out.write_u32::<LittleEndian>(ds.records.len() as u32)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    for rec in &ds.records {
        if rec.cell.height() != h || rec.cell.width() != w {
            return Err(PipelineError::Format("records have mixed resolutions".into()));
        }
        out.write_u32::<LittleEndian>(rec.nominal_id)?;
        out.write_u8(match rec.role {
            Role::Nominal => 0,
            Role::Fabricated => 1,
        })?;
        out.write_all(rec.cell.values())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<PairedDataset, PipelineError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(PipelineError::Format("not a dataset file".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(PipelineError::Format(format!("unsupported dataset version {version}")));
    }
    let count = input.read_u32::<LittleEndian>()? as usize;
    let h = input.read_u32::<LittleEndian>()? as usize;
    let w = input.read_u32::<LittleEndian>()? as usize;
    if count > 0 && h * w == 0 {
        return Err(PipelineError::Format("zero-sized records".into()));
    }
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let nominal_id = input.read_u32::<LittleEndian>()?;
        let role = match input.read_u8()? {
            0 => Role::Nominal,
            1 => Role::Fabricated,
            b => return Err(PipelineError::Format(format!("bad role byte {b}"))),
        };
        let mut pixels = vec![0u8; h * w];
        input.read_exact(&mut pixels)?;
        let cell = BinaryCell::new(h, w, pixels).map_err(|e| PipelineError::Format(e.to_string()))?;
        records.push(Record { nominal_id, role, cell });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(PipelineError::Format("trailing bytes after last record".into()));
    }
    Ok(PairedDataset { records })
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<(), PipelineError> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset, PipelineError> {
    read_dataset(BufReader::new(File::open(path)?))
}

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "bmp", "pgm", "pbm", "pnm", "tif", "tiff"];

/// Reads every image in `dir` (sorted by file name), thresholds the 8-bit
/// gray levels (`>= threshold` is material) and resizes to `resolution` by
/// nearest-neighbour sampling.
pub fn import_cells(dir: &Path, threshold: u8, resolution: usize) -> Result<Vec<(String, BinaryCell)>, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok((file_stem(p), import_image(p, threshold, resolution)?))).collect()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn import_image(path: &Path, threshold: u8, resolution: usize) -> Result<BinaryCell, PipelineError> {
    let unreadable = |reason: String| PipelineError::UnreadableImage {
        path: path.display().to_string(),
        reason,
    };
    let img = image::open(path).map_err(|e| unreadable(e.to_string()))?;
    if img.color().has_color() || img.color().bits_per_pixel() > 16 {
        return Err(unreadable("expected an 8-bit grayscale image".into()));
    }
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    if w != h || w == 0 {
        return Err(unreadable(format!("expected a square image, got {w}x{h}")));
    }
    let s = w as usize;
    let cell = BinaryCell::from_fn(resolution, resolution, |r, c| {
        let (sr, sc) = (r * s / resolution, c * s / resolution);
        gray.get_pixel(sc as u32, sr as u32)[0] >= threshold
    })
    .map_err(|e| unreadable(e.to_string()))?;
    match cell.material_count() {
        0 => Err(PipelineError::EmptyCell {
            path: path.display().to_string(),
            kind: "material",
        }),
        n if n == cell.len() => Err(PipelineError::EmptyCell {
            path: path.display().to_string(),
            kind: "void",
        }),
        _ => Ok(cell),
    }
}

/// Writes a cell as an 8-bit grayscale PNG, material white.
pub fn export_png(cell: &BinaryCell, path: &Path) -> Result<(), PipelineError> {
    let pixels: Vec<u8> = cell.values().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(cell.width() as u32, cell.height() as u32, pixels).expect("matching buffer");
    img.save(path).map_err(|e| PipelineError::Format(e.to_string()))
}

/// Reads a table written by [`crate::homogenize::write_property_csv`];
/// rows with any non-finite component come back without a tensor.
pub fn read_property_csv(path: &Path) -> Result<Vec<PropertyRow>, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::Format(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PipelineError::Format(e.to_string()))?;
        let num = |i: usize| -> Result<f64, PipelineError> {
            rec.get(i)
                .ok_or_else(|| PipelineError::Format("short property row".into()))?
                .parse::<f64>()
                .map_err(|e| PipelineError::Format(e.to_string()))
        };
        let comps = [num(1)?, num(2)?, num(3)?, num(4)?];
        let tensor = comps.iter().all(|v| v.is_finite()).then(|| ElasticTensor {
            c: [[comps[0], comps[1], 0.0], [comps[1], comps[2], 0.0], [0.0, 0.0, comps[3]]],
        });
        rows.push(PropertyRow {
            id: rec.get(0).unwrap_or_default().to_string(),
            error: tensor.is_none().then(|| "failed".to_string()),
            tensor,
            volume_fraction: num(5)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset() -> impl Strategy<Value = PairedDataset> {
        (4usize..8, 4usize..8, 0usize..8).prop_flat_map(|(h, w, n)| {
            prop::collection::vec((0u32..5, any::<bool>(), prop::collection::vec(0u8..2, h * w)), n).prop_map(move |recs| PairedDataset {
                records: recs
                    .into_iter()
                    .map(|(id, fab, px)| Record {
                        nominal_id: id,
                        role: if fab { Role::Fabricated } else { Role::Nominal },
                        cell: BinaryCell::new(h, w, px).unwrap(),
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn dataset_round_trip(ds in dataset()) {
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &ds);
            let mut again = Vec::new();
            write_dataset(&back, &mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }

    #[test]
    fn header_layout() {
        let cell = BinaryCell::from_fn(4, 4, |r, c| r == c).unwrap();
        let ds = PairedDataset {
            records: vec![Record { nominal_id: 7, role: Role::Fabricated, cell }],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(
            buf,
            [
                b"GUST".as_slice(),
                &[1, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0, 4, 0, 0, 0, 7, 0, 0, 0, 1],
                &[1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
            ]
            .concat()
        );
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(PipelineError::Format(_))));
        buf.push(0);
        assert!(read_dataset(buf.as_slice()).is_err());
    }

    #[test]
    fn image_import() {
        let dir = tempfile::tempdir().unwrap();
        let cell = BinaryCell::from_fn(64, 64, |r, c| (r / 8 + c / 5) % 2 == 0).unwrap();
        export_png(&cell, &dir.path().join("a.png")).unwrap();
        let imported = import_cells(dir.path(), 128, 64).unwrap();
        assert_eq!(imported, vec![("a".to_string(), cell)]);

        let big = image::GrayImage::from_fn(128, 128, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]));
        big.save(dir.path().join("b.png")).unwrap();
        let down = import_image(&dir.path().join("b.png"), 128, 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(down.get(r, c), big.get_pixel(2 * c as u32, 2 * r as u32)[0] >= 128);
            }
        }

        image::GrayImage::from_pixel(16, 16, image::Luma([200])).save(dir.path().join("c.png")).unwrap();
        assert!(matches!(
            import_image(&dir.path().join("c.png"), 128, 16),
            Err(PipelineError::EmptyCell { kind: "void", .. })
        ));
        std::fs::remove_file(dir.path().join("c.png")).unwrap();
        std::fs::write(dir.path().join("d.png"), b"not an image").unwrap();
        assert!(matches!(import_cells(dir.path(), 128, 16), Err(PipelineError::UnreadableImage { .. })));
    }
}
