//! Exact cosine search over a flat matrix of unit-normalized embeddings.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::nn::loss::norm;

pub const INDEX_MAGIC: &[u8; 4] = b"SEMI";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub cosine: f64,
}

impl EmbeddingIndex {
    /// Normalizes every row; ids must be unique and vectors non-zero.
    pub fn build(items: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = items.first().map_or(0, |(_, v)| v.len());
        if items.is_empty() || dim == 0 {
            return Err(Error::invalid("index needs at least one non-empty embedding"));
        }
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(items.len());
        let mut data = Vec::with_capacity(items.len() * dim);
        for (id, v) in items {
            if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: v.len() });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate index id {id}")));
            }
            let n = norm(&v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid(format!("embedding for {id} has zero or non-finite norm")));
            }
            data.extend(v.iter().map(|x| (x / n) as f32));
            ids.push(id);
        }
        Ok(EmbeddingIndex { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine of the (normalized) query against every row, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: query.len() });
        }
        let n = norm(query);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("query has zero or non-finite norm"));
        }
        let q: Vec<f64> = query.iter().map(|v| v / n).collect();
        Ok((0..self.len()).map(|i| self.row(i).iter().zip(&q).map(|(&a, b)| a as f64 * b).sum()).collect())
    }

    /// Exact top-`k` by cosine, descending, ties broken by ascending id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 || k > self.len() {
            return Err(Error::validation("k", format!("must lie in 1..={}", self.len())));
        }
        let scores = self.scores(query)?;
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order.into_iter().map(|i| Hit { id: self.ids[i].clone(), cosine: scores[i] }).collect())
    }

    /// Searches with the stored row of an indexed id.
    pub fn search_id(&self, id: &str, k: usize) -> Result<Vec<Hit>> {
        let i = self.position(id).ok_or_else(|| Error::NotFound(format!("index id {id}")))?;
        let q: Vec<f64> = self.row(i).iter().map(|&v| v as f64).collect();
        self.search(&q, k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids = serde_json::to_vec(&self.ids).expect("ids serialize");
        let mut out = Vec::with_capacity(18 + ids.len() + 4 * self.data.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&ids);
        binio::put_f32s(&mut out, self.data.iter().copied());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version(INDEX_VERSION)?;
        let n = r.u32("row count")? as usize;
        let dim_at = r.offset();
        let dim = r.u32("dimension")? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::parse(dim_at, "index must have at least one row and one dimension"));
        }
        let len = r.u32("id block length")? as usize;
        let ids_at = r.offset();
        let ids: Vec<String> =
            serde_json::from_slice(r.take(len, "id block")?).map_err(|e| Error::parse(ids_at, format!("bad id block: {e}")))?;
        if ids.len() != n {
            return Err(Error::parse(ids_at, format!("id block holds {} ids, header says {n}", ids.len())));
        }
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::parse(ids_at, "duplicate ids"));
        }
        let count = n
            .checked_mul(dim)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::parse(r.offset(), "matrix exceeds file"))?;
        let data = r.f32s(count, "matrix")?;
        r.finish()?;
        Ok(EmbeddingIndex { ids, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EmbeddingIndex {
        EmbeddingIndex::build(vec![
            ("c".into(), vec![1.0, 0.0]),
            ("a".into(), vec![0.0, 2.0]),
            ("b".into(), vec![3.0, 0.0]),
            ("d".into(), vec![1.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn search_orders_by_cosine_then_id() {
        let idx = toy();
        let hits = idx.search(&[5.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "d"]);
        assert_eq!(hits[0].cosine, 1.0);
        assert!(idx.search(&[1.0, 0.0], 0).is_err());
        assert!(idx.search(&[1.0, 0.0], 5).is_err());
        assert!(idx.search(&[1.0], 1).is_err());
    }

    #[test]
    fn self_query_ranks_first() {
        let idx = toy();
        let hits = idx.search_id("d", 1).unwrap();
        assert_eq!(hits[0].id, "d");
        assert!((hits[0].cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let idx = toy();
        let bytes = idx.to_bytes();
        assert_eq!(EmbeddingIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(EmbeddingIndex::from_bytes(&bad), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn build_rejects_bad_rows() {
        assert!(EmbeddingIndex::build(vec![("a".into(), vec![0.0, 0.0])]).is_err());
        assert!(EmbeddingIndex::build(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]).is_err());
        assert!(EmbeddingIndex::build(vec![("a".into(), vec![1.0]), ("b".into(), vec![2.0, 1.0])]).is_err());
    }
}
