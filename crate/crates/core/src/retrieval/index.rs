use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cosine, Embedding, EmbeddingProvider, RetrievalError};
use crate::catalog::Catalog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub product_id: String,
    pub category: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub product_id: String,
    pub category: String,
    pub similarity: f64,
}

/// Exact cosine index. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    rows: Vec<IndexRow>,
}

impl VectorIndex {
    pub fn from_rows(dimension: usize, rows: Vec<IndexRow>) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::Invalid("dimension must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            if r.embedding.dimension() != dimension {
                return Err(RetrievalError::Dimension { expected: dimension, got: r.embedding.dimension() });
            }
            if r.embedding.0.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite);
            }
            if !seen.insert(r.product_id.as_str()) {
                return Err(RetrievalError::Invalid(format!("duplicate product id {}", r.product_id)));
            }
        }
        Ok(Self { dimension, rows })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, product_id: &str) -> Option<&IndexRow> {
        self.rows.iter().find(|r| r.product_id == product_id)
    }

    /// Top-k rows by descending similarity, ties by ascending product id.
    /// Rows with a zero embedding have no defined similarity and are skipped.
    pub fn nearest(&self, query: &Embedding, k: usize) -> Result<Vec<Neighbor>, RetrievalError> {
        self.nearest_filtered(query, k, |_| true)
    }

    pub fn nearest_filtered(
        &self,
        query: &Embedding,
        k: usize,
        keep: impl Fn(&IndexRow) -> bool,
    ) -> Result<Vec<Neighbor>, RetrievalError> {
        if self.rows.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if k == 0 {
            return Err(RetrievalError::Invalid("k must be at least 1".into()));
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::Dimension { expected: self.dimension, got: query.dimension() });
        }
        if query.is_zero() {
            return Err(RetrievalError::ZeroVector);
        }
        let mut scored: Vec<(f64, &IndexRow)> = Vec::with_capacity(self.rows.len());
        for row in self.rows.iter().filter(|r| keep(r)) {
            match cosine(query, &row.embedding) {
                Ok(s) => scored.push((s, row)),
                Err(RetrievalError::ZeroVector) => continue,
                Err(e) => return Err(e),
            }
        }
        let order = |a: &(f64, &IndexRow), b: &(f64, &IndexRow)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.product_id.cmp(&b.1.product_id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(similarity, r)| Neighbor { product_id: r.product_id.clone(), category: r.category.clone(), similarity })
            .collect())
    }

    /// Flat little-endian layout: dimension u32, row count u32, then per row
    /// the id and category as u32-length-prefixed UTF-8 and `dimension` f64s.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), RetrievalError> {
        w.write_all(&u32_of(self.dimension)?.to_le_bytes())?;
        w.write_all(&u32_of(self.rows.len())?.to_le_bytes())?;
        for r in &self.rows {
            write_str(w, &r.product_id)?;
            write_str(w, &r.category)?;
            for x in &r.embedding.0 {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, RetrievalError> {
        let dimension = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut rows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let product_id = read_str(r)?;
            let category = read_str(r)?;
            let mut v = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                v.push(f64::from_le_bytes(b));
            }
            rows.push(IndexRow { product_id, category, embedding: Embedding(v) });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(RetrievalError::Format("trailing bytes after last row".into()));
        }
        Self::from_rows(dimension, rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn u32_of(n: usize) -> Result<u32, RetrievalError> {
    u32::try_from(n).map_err(|_| RetrievalError::Format(format!("{n} exceeds u32")))
}

fn truncated(e: std::io::Error) -> RetrievalError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        RetrievalError::Format("truncated index file".into())
    } else {
        RetrievalError::Io(e)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), RetrievalError> {
    w.write_all(&u32_of(s.len())?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, RetrievalError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, RetrievalError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| RetrievalError::Format("non-UTF-8 string".into()))
}

/// One row per product, keyed by the embedding of its canonical text, in
/// catalog id order.
pub async fn build_index(catalog: &Catalog, provider: &EmbeddingProvider) -> Result<VectorIndex, RetrievalError> {
    if catalog.is_empty() {
        return Err(RetrievalError::Invalid("catalog is empty".into()));
    }
    let texts: Vec<String> = catalog.products().map(|p| p.canonical_text().0).collect();
    let embeddings = provider.embed(&texts).await?;
    let rows = catalog
        .products()
        .zip(embeddings)
        .map(|(p, embedding)| IndexRow { product_id: p.id.clone(), category: p.main_category.clone(), embedding })
        .collect();
    VectorIndex::from_rows(provider.dimension(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Product;
    use proptest::prelude::*;

    fn catalog(n: usize) -> Catalog {
        Catalog::from_products((0..n).map(|i| {
            let mut p = Product::new(format!("p{i:04}"), format!("Cat{}", i % 7), format!("product number {i} model {}", i * 31 % 97));
            p.features = vec![format!("feature {}", i % 13)];
            p
        }))
        .0
    }

    #[tokio::test]
    async fn three_products_three_rows_and_rebuild_identical() {
        let c = catalog(3);
        let p = EmbeddingProvider::hash(64).unwrap();
        let a = build_index(&c, &p).await.unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, build_index(&c, &p).await.unwrap());
    }

    #[tokio::test]
    async fn self_retrieval() {
        let c = catalog(200);
        let p = EmbeddingProvider::hash(384).unwrap();
        let idx = build_index(&c, &p).await.unwrap();
        for prod in c.products() {
            let q = p.embed_one(prod.canonical_text().as_str()).await.unwrap();
            let top = idx.nearest(&q, 1).unwrap();
            assert_eq!(top[0].product_id, prod.id);
            assert!((top[0].similarity - 1.0).abs() < 1e-12);
        }
    }

    #[tokio::test]
    async fn k_larger_than_index_returns_all() {
        let idx = build_index(&catalog(5), &EmbeddingProvider::hash(32).unwrap()).await.unwrap();
        let q = hash_query("anything");
        assert_eq!(idx.nearest(&q, 50).unwrap().len(), 5);
    }

    fn hash_query(t: &str) -> Embedding {
        crate::retrieval::hash_embed(t, 32)
    }

    #[test]
    fn empty_index_errors() {
        let idx = VectorIndex::from_rows(4, vec![]).unwrap();
        assert!(matches!(idx.nearest(&Embedding(vec![1.0; 4]), 1), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn persistence_roundtrip_and_truncation() {
        let rows = vec![
            IndexRow { product_id: "a".into(), category: "X".into(), embedding: Embedding(vec![1.0, -0.5, 0.25]) },
            IndexRow { product_id: "b".into(), category: "Ÿ".into(), embedding: Embedding(vec![0.0, 2.0, 1e-300]) },
        ];
        let idx = VectorIndex::from_rows(3, rows).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + (4 + 1 + 4 + 1 + 24) + (4 + 1 + 4 + 2 + 24));
        assert_eq!(VectorIndex::read_from(&mut buf.as_slice()).unwrap(), idx);
        assert!(VectorIndex::read_from(&mut &buf[..buf.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        idx.save(&path).unwrap();
        assert_eq!(VectorIndex::load(&path).unwrap(), idx);
    }

    #[test]
    fn rejects_duplicate_ids() {
        let row = IndexRow { product_id: "a".into(), category: "X".into(), embedding: Embedding(vec![1.0]) };
        assert!(VectorIndex::from_rows(1, vec![row.clone(), row]).is_err());
    }

    fn brute_force(idx: &VectorIndex, q: &Embedding) -> Vec<String> {
        let mut all: Vec<(f64, String)> = idx
            .rows()
            .iter()
            .filter(|r| !r.embedding.is_zero())
            .map(|r| {
                let dot: f64 = q.0.iter().zip(&r.embedding.0).map(|(a, b)| a * b).sum();
                (dot / (q.norm() * r.embedding.norm()), r.product_id.clone())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        all.into_iter().map(|(_, id)| id).collect()
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(
            vectors in prop::collection::vec(prop::collection::vec(-3i8..=3, 4), 1..60),
            query in prop::collection::vec(-3i8..=3, 4),
            k in 1usize..70,
        ) {
            let to_f = |v: &[i8]| Embedding(v.iter().map(|&x| f64::from(x)).collect());
            let q = to_f(&query);
            prop_assume!(!q.is_zero());
            let rows = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| IndexRow { product_id: format!("r{i:03}"), category: String::new(), embedding: to_f(v) })
                .collect();
            let idx = VectorIndex::from_rows(4, rows).unwrap();
            let got: Vec<String> = idx.nearest(&q, k).unwrap().into_iter().map(|n| n.product_id).collect();
            let mut want = brute_force(&idx, &q);
            want.truncate(k);
            prop_assert_eq!(got, want);
        }
    }
}
