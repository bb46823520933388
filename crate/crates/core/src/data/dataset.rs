use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub type SampleId = u64;

const MAGIC: &[u8; 4] = b"UALD";
const VERSION: u32 = 1;

/// Labeled samples. Features are `[n × d]` (tabular) or `[n × H × W × C]`
/// (images); row `i` belongs to `sample_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub sample_ids: Vec<SampleId>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        sample_ids: Vec<SampleId>,
    ) -> Result<Self> {
        let names = (0..class_count).map(|k| format!("class {k}")).collect();
        Self::with_class_names(features, labels, class_count, sample_ids, names)
    }

    pub fn with_class_names(
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        sample_ids: Vec<SampleId>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || sample_ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} labels and {} ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Config(format!("duplicate sample id {dup}")));
        }
        if class_names.len() != class_count {
            return Err(Error::Config(format!(
                "{} class names for {class_count} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            sample_ids,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened per-sample feature length.
    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }

    /// `(H, W, C)` when the features are images.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.features.shape() {
            [_, h, w, c] => Some((*h, *w, *c)),
            _ => None,
        }
    }

    /// Rows at the given positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput("subset of zero rows".into()));
        }
        Ok(Self {
            features: self.features.select_rows(positions)?,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            class_count: self.class_count,
            sample_ids: positions.iter().map(|&p| self.sample_ids[p]).collect(),
            class_names: self.class_names.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Serialises into the `UALD` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MAGIC, VERSION);
        w.u64(self.len() as u64);
        let trailing = &self.features.shape()[1..];
        w.u32(trailing.len() as u32);
        for &d in trailing {
            w.u64(d as u64);
        }
        w.u32(self.class_count as u32);
        for &v in self.features.data() {
            w.f64(v);
        }
        for &l in &self.labels {
            w.u32(l as u32);
        }
        w.u64(self.sample_ids.len() as u64);
        for &id in &self.sample_ids {
            w.u64(id);
        }
        w.u32(self.class_names.len() as u32);
        for name in &self.class_names {
            w.str(name);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
        let n = r.u64()? as usize;
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 3 {
            return Err(Error::Integrity(format!("unsupported feature rank {ndim}")));
        }
        let mut shape = vec![n];
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let k = r.u32()? as usize;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > bytes.len() {
            return Err(Error::Integrity(
                "feature block larger than container".into(),
            ));
        }
        let features = Tensor::new(&shape, r.f64s_exact(numel)?)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let labels = (0..n)
            .map(|_| r.u32().map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        let id_count = r.u64()? as usize;
        if id_count != n {
            return Err(Error::Integrity(format!("{id_count} ids for {n} rows")));
        }
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let name_count = r.u32()? as usize;
        let names = (0..name_count)
            .map(|_| r.str())
            .collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::with_class_names(features, labels, k, ids, names)
            .map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let f = Tensor::new(&[3, 2], vec![0.5, 1.0, -2.0, 3.25, 4.0, 0.0]).unwrap();
        Dataset::new(f, vec![0, 1, 1], 2, vec![10, 3, 7]).unwrap()
    }

    #[test]
    fn container_round_trip_preserves_ids_and_order() {
        let d = tiny();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn image_container_round_trip() {
        let f = Tensor::new(&[2, 2, 2, 1], (0..8).map(f64::from).collect()).unwrap();
        let d = Dataset::new(f, vec![0, 1], 2, vec![0, 1]).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back.image_shape(), Some((2, 2, 1)));
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_bad_labels_and_duplicate_ids() {
        let f = Tensor::zeros(&[2, 1]);
        assert!(Dataset::new(f.clone(), vec![0, 2], 2, vec![0, 1]).is_err());
        assert!(Dataset::new(f, vec![0, 1], 2, vec![5, 5]).is_err());
    }

    #[test]
    fn truncated_container_is_integrity_error() {
        let bytes = tiny().to_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Integrity(_))
        ));
    }
}
