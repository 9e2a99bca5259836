//! Dataset file format (little-endian):
//!
//! ```text
//! magic      b"FPED"
//! version    u32 = 1
//! kind       u32 = 1 (dataset)
//! seed       u64
//! v_total    u32, D u32, P u32, R u32
//! n_train    u32, n_val u32, n_test u32
//! noise      f64, baseline f64, top_k u32
//! labels     v_total x u8
//! samples    (n_train + n_val + n_test) x {
//!              id u32, split u8,
//!              voxels R*v_total x f64, c_text D x f64, c_img D x f64,
//!              patches P*P*D x f64 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{DataConfig, Dataset, ParcellationMap, RawSample, Split};
use crate::error::{FpedError, Result};
use crate::NUM_NETWORKS;

pub(crate) const MAGIC: &[u8; 4] = b"FPED";
const VERSION: u32 = 1;
const KIND_DATASET: u32 = 1;

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let c = &ds.config;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(KIND_DATASET)?;
    w.write_u64::<LE>(c.seed)?;
    for v in [c.v_total, c.embed_dim, c.patch_grid, c.repetitions, c.n_train, c.n_val, c.n_test] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_f64::<LE>(c.noise)?;
    w.write_f64::<LE>(c.baseline)?;
    w.write_u32::<LE>(c.top_k as u32)?;
    w.write_all(ds.parcellation.labels())?;
    for s in &ds.samples {
        w.write_u32::<LE>(s.id)?;
        w.write_u8(s.split.code())?;
        write_f64s(&mut w, &s.voxels)?;
        write_f64s(&mut w, &s.c_text)?;
        write_f64s(&mut w, &s.c_img)?;
        write_f64s(&mut w, &s.patches)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FpedError::Format("not an FPED file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(FpedError::Format(format!("unsupported dataset version {version}")));
    }
    let kind = r.read_u32::<LE>()?;
    if kind != KIND_DATASET {
        return Err(FpedError::Format(format!("file kind {kind} is not a dataset")));
    }
    let seed = r.read_u64::<LE>()?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    let [v_total, embed_dim, patch_grid, repetitions, n_train, n_val, n_test] = dims;
    let noise = r.read_f64::<LE>()?;
    let baseline = r.read_f64::<LE>()?;
    let top_k = r.read_u32::<LE>()? as usize;
    let config = DataConfig {
        seed,
        n_train,
        n_val,
        n_test,
        v_total,
        embed_dim,
        patch_grid,
        repetitions,
        noise,
        baseline,
        top_k,
    };
    config.validate().map_err(|e| FpedError::Format(format!("bad header: {e}")))?;
    let mut labels = vec![0u8; v_total];
    r.read_exact(&mut labels)?;
    let parcellation = ParcellationMap::from_labels(labels)?;
    let total = n_train + n_val + n_test;
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let id = r.read_u32::<LE>()?;
        let split = Split::from_code(r.read_u8()?)?;
        let voxels = read_f64s(&mut r, repetitions * v_total)?;
        let c_text = read_f64s(&mut r, embed_dim)?;
        let c_img = read_f64s(&mut r, embed_dim)?;
        let patches = read_f64s(&mut r, patch_grid * patch_grid * embed_dim)?;
        samples.push(RawSample { id, split, voxels, c_text, c_img, patches });
    }
    Ok(Dataset { config, parcellation, samples })
}

/// One row per sample: id, split, mean repetition-averaged intensity per
/// network, then the text and image targets.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = ds.config.embed_dim;
    let v_total = ds.config.v_total;
    let r = ds.config.repetitions;
    let mut header = vec!["id".to_string(), "split".to_string()];
    header.extend(crate::NETWORK_NAMES.iter().map(|n| format!("mean_{n}")));
    header.extend((0..d).map(|i| format!("c_text_{i}")));
    header.extend((0..d).map(|i| format!("c_img_{i}")));
    writeln!(w, "{}", header.join(","))?;
    let counts = ds.parcellation.counts();
    for s in &ds.samples {
        let mut sums = [0.0f64; NUM_NETWORKS];
        for v in 0..v_total {
            let mean = (0..r).map(|k| s.voxels[k * v_total + v]).sum::<f64>() / r as f64;
            sums[ds.parcellation.labels()[v] as usize] += mean;
        }
        let mut row = vec![s.id.to_string(), s.split.as_str().to_string()];
        row.extend((0..NUM_NETWORKS).map(|k| format!("{:.9e}", sums[k] / counts[k] as f64)));
        row.extend(s.c_text.iter().map(|v| format!("{v:.17e}")));
        row.extend(s.c_img.iter().map(|v| format!("{v:.17e}")));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    #[test]
    fn binary_round_trip_is_exact() {
        let cfg = DataConfig { n_train: 3, n_val: 1, n_test: 2, v_total: 140, top_k: 14, ..Default::default() };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fped");
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
        export_csv(&ds, &dir.path().join("d.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(read_dataset(&p), Err(FpedError::Format(_))));
    }
}
