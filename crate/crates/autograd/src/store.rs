//! Named parameter storage and its on-disk archive format.
//!
//! The archive is a flat little-endian container: magic, version, entry
//! count, then per entry (name, dtype width, dims, raw data). Round-trips
//! are bit-exact.

use crate::element::Element;
use crate::tensor::{ParamId, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SARF";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad archive magic at byte 0")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u32),
    #[error("archive dtype width {found} does not match element width {expected}")]
    DtypeMismatch { found: usize, expected: usize },
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("missing parameter in archive: {0}")]
    MissingParam(String),
    #[error("shape mismatch for {name}: archive {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Ordered collection of named dense parameters.
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    /// Bind every parameter as a fresh graph leaf (one optimizer step's view).
    pub fn bind(&self) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| Tensor::param_leaf(v.clone(), ParamId(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let entries: Vec<(&str, &ArrayD<T>)> = self.iter().collect();
        write_archive(path, &entries)
    }

    /// Load values into an existing store (names and shapes must match).
    pub fn load(&mut self, path: &Path) -> Result<(), StoreError> {
        let arrays = read_archive::<T>(path)?;
        let by_name: HashMap<String, ArrayD<T>> = arrays.into_iter().collect();
        for (i, name) in self.names.iter().enumerate() {
            let arr = by_name
                .get(name)
                .ok_or_else(|| StoreError::MissingParam(name.clone()))?;
            if arr.shape() != self.values[i].shape() {
                return Err(StoreError::ShapeMismatch {
                    name: name.clone(),
                    found: arr.shape().to_vec(),
                    expected: self.values[i].shape().to_vec(),
                });
            }
            self.values[i] = arr.clone();
        }
        Ok(())
    }
}

pub fn write_archive<T: Element>(path: &Path, entries: &[(&str, &ArrayD<T>)]) -> Result<(), StoreError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_u32::<LittleEndian>(VERSION)?;
    f.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, arr) in entries {
        let bytes = name.as_bytes();
        f.write_u32::<LittleEndian>(bytes.len() as u32)?;
        f.write_all(bytes)?;
        f.write_u8(T::BYTE_WIDTH as u8)?;
        f.write_u32::<LittleEndian>(arr.ndim() as u32)?;
        for &d in arr.shape() {
            f.write_u32::<LittleEndian>(d as u32)?;
        }
        let mut buf = Vec::with_capacity(arr.len() * T::BYTE_WIDTH);
        for &v in arr.iter() {
            v.write_le(&mut buf);
        }
        f.write_all(&buf)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_archive<T: Element>(path: &Path) -> Result<Vec<(String, ArrayD<T>)>, StoreError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(StoreError::BadVersion(version));
    }
    let count = f.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = f.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| StoreError::Io(io::Error::new(io::ErrorKind::InvalidData, "bad name")))?;
        let width = f.read_u8()? as usize;
        if width != T::BYTE_WIDTH {
            return Err(StoreError::DtypeMismatch {
                found: width,
                expected: T::BYTE_WIDTH,
            });
        }
        let ndim = f.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(f.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * T::BYTE_WIDTH];
        f.read_exact(&mut bytes)?;
        let vals: Vec<T> = bytes
            .chunks_exact(T::BYTE_WIDTH)
            .map(|c| T::read_le(c))
            .collect();
        out.push((name, ArrayD::from_shape_vec(shape, vals).unwrap()));
    }
    Ok(out)
}
