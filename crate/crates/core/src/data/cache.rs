//! Binary cache of indexed splits.
//!
//! Layout (little endian): magic `HAMSPLIT`, `u16` version, `u32` schema JSON
//! length and bytes, then train/val/test, each as `u8` split tag, `u64` row
//! count, one `u32` column per field, and one `u8` label per row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::dataset::{Dataset, SplitTag, Splits};
use super::schema::FeatureSchema;

pub const CACHE_MAGIC: &[u8; 8] = b"HAMSPLIT";
pub const CACHE_VERSION: u16 = 1;

pub fn write_splits(path: &Path, splits: &Splits) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CACHE_MAGIC)?;
    w.write_u16::<LittleEndian>(CACHE_VERSION)?;
    let schema = serde_json::to_vec(splits.schema.as_ref())?;
    w.write_u32::<LittleEndian>(schema.len() as u32)?;
    w.write_all(&schema)?;
    for d in [&splits.train, &splits.val, &splits.test] {
        w.write_u8(tag_byte(d.split()))?;
        w.write_u64::<LittleEndian>(d.len() as u64)?;
        for j in 0..d.num_fields() {
            for &i in d.column(j) {
                w.write_u32::<LittleEndian>(i)?;
            }
        }
        w.write_all(d.labels())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_splits(path: &Path) -> Result<Splits> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Data(format!("{}: not a split cache", path.display())));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("{}: unsupported cache version {version}", path.display())));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let schema: Arc<FeatureSchema> = Arc::new(serde_json::from_slice(&buf)?);
    let mut parts = Vec::with_capacity(3);
    for _ in 0..3 {
        let tag = tag_from_byte(r.read_u8()?)?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut columns = Vec::with_capacity(schema.num_fields());
        for _ in 0..schema.num_fields() {
            let mut col = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut col)?;
            columns.push(col);
        }
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)?;
        parts.push(Dataset::new(schema.clone(), columns, labels, tag)?);
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Splits {
        schema,
        train,
        val,
        test,
    })
}

fn tag_byte(t: SplitTag) -> u8 {
    match t {
        SplitTag::Full => 0,
        SplitTag::Train => 1,
        SplitTag::Val => 2,
        SplitTag::Test => 3,
    }
}

fn tag_from_byte(b: u8) -> Result<SplitTag> {
    Ok(match b {
        0 => SplitTag::Full,
        1 => SplitTag::Train,
        2 => SplitTag::Val,
        3 => SplitTag::Test,
        _ => return Err(Error::Data(format!("bad split tag {b}"))),
    })
}
