//! Flat named-array archive.
//!
//! Layout (little endian): magic `DRLABARC`, `u32` version, `u32` metadata
//! count, then `(u32 len, utf-8 key, u32 len, utf-8 value)` pairs, `u32` array
//! count, then per array `(u32 len, utf-8 name, u64 rows, u64 cols, rows*cols
//! f64)`. Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParameterBundle;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DRLABARC";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Array2<f64>)>,
}

impl Archive {
    pub fn from_bundle(bundle: &ParameterBundle, prefix: &str) -> Self {
        let mut a = Self::default();
        a.push_bundle(bundle, prefix);
        a
    }

    pub fn push_bundle(&mut self, bundle: &ParameterBundle, prefix: &str) {
        for (n, v) in bundle.names.iter().zip(&bundle.values) {
            self.arrays.push((format!("{prefix}{n}"), v.clone()));
        }
    }

    /// Copies arrays named `prefix + name` into the bundle; every parameter
    /// must be present with a matching shape.
    pub fn load_into(&self, bundle: &mut ParameterBundle, prefix: &str) -> Result<()> {
        let by_name: BTreeMap<&str, &Array2<f64>> =
            self.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for (n, v) in bundle.names.iter().zip(bundle.values.iter_mut()) {
            let key = format!("{prefix}{n}");
            let a = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Archive(format!("missing array '{key}'")))?;
            if a.dim() != v.dim() {
                return Err(Error::Archive(format!(
                    "array '{key}' has shape {:?}, expected {:?}",
                    a.dim(),
                    v.dim()
                )));
            }
            v.assign(a);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        let put_str = |w: &mut W, s: &str| -> Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
            Ok(())
        };
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            put_str(&mut w, k)?;
            put_str(&mut w, v)?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, a) in &self.arrays {
            put_str(&mut w, name)?;
            w.write_all(&(a.nrows() as u64).to_le_bytes())?;
            w.write_all(&(a.ncols() as u64).to_le_bytes())?;
            for x in a.iter() {
                w.write_all(&x.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("not a drlab archive".into()));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        let n = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(read_u64(&mut r)?));
            }
            let a = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Archive(e.to_string()))?;
            arrays.push((name, a));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Archive(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in prop::collection::vec(any::<f64>(), 1..40),
            key in "[a-z]{1,8}",
        ) {
            let mut a = Archive::default();
            a.meta.insert(key.clone(), "v".into());
            let n = vals.len();
            a.arrays.push((key, Array2::from_shape_vec((1, n), vals.clone()).unwrap()));
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            let b = Archive::read_from(buf.as_slice()).unwrap();
            let got: Vec<u64> = b.arrays[0].1.iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(Archive::read_from(&b"NOTANARCHIVE...."[..]).is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let mut p = ParameterBundle::new();
        p.add("w", Array2::zeros((2, 3)));
        let mut a = Archive::default();
        a.arrays.push(("w".into(), Array2::zeros((3, 2))));
        assert!(a.load_into(&mut p, "").is_err());
        assert!(Archive::default().load_into(&mut p, "").is_err());
    }
}
