//! Exact cosine top-k retrieval over precomputed report embeddings, and the
//! trainable projection of retrieved embeddings into the model width.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{io_err, shape_err, Result, TksgError};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Tolerance on the unit norm of stored index rows.
pub const NORM_TOL: f64 = 1e-6;

/// An id-labelled embedding matrix as stored on disk: a tensor file plus a
/// sidecar `.ids` file with one id per line in row order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub vectors: Tensor,
    lookup: HashMap<String, usize>,
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Tensor) -> Result<Self> {
        let (m, _) = match vectors.shape() {
            [m, d] => (*m, *d),
            s => return Err(shape_err("EmbeddingTable", format!("expected M×d, got {s:?}"))),
        };
        if ids.len() != m {
            return Err(TksgError::Invalid(format!("{} ids for {m} embedding rows", ids.len())));
        }
        let mut lookup = HashMap::with_capacity(m);
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(TksgError::Invalid(format!("duplicate id {id:?}")));
            }
        }
        Ok(EmbeddingTable { ids, vectors, lookup })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<Tensor> {
        self.position(id).map(|i| Tensor::vector(self.vectors.row(i).to_vec()))
    }

    /// Rows for the given ids, in order.
    pub fn subset(&self, ids: &[String]) -> Result<EmbeddingTable> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            let i = self
                .position(id)
                .ok_or_else(|| TksgError::Invalid(format!("no embedding for id {id:?}")))?;
            data.extend_from_slice(self.vectors.row(i));
        }
        EmbeddingTable::new(ids.to_vec(), Tensor::new(vec![ids.len(), d], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(path, &self.vectors)?;
        let mut text = self.ids.join("\n");
        text.push('\n');
        let ip = ids_path(path);
        fs::write(&ip, text).map_err(io_err(ip))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vectors = read_tensor(path)?;
        let ip = ids_path(path);
        let text = fs::read_to_string(&ip).map_err(io_err(&ip))?;
        let ids = text.lines().map(str::to_string).collect();
        EmbeddingTable::new(ids, vectors)
    }
}

/// One retrieval result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

/// Ranked retrieval output. `truncated` is set when fewer than the requested
/// number of rows were available.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedSet {
    pub hits: Vec<Hit>,
    pub truncated: bool,
}

/// Immutable index of L2-normalized report embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    table: EmbeddingTable,
}

fn normalized(row: &[f64]) -> Option<Vec<f64>> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(row.iter().map(|v| v / norm).collect())
}

impl RetrievalIndex {
    /// Normalizes every row. Stored values are rounded to `f32` so a saved
    /// index reloads bit-identically.
    pub fn build(embeddings: &Tensor, ids: Vec<String>) -> Result<Self> {
        let (m, d) = match embeddings.shape() {
            [m, d] => (*m, *d),
            s => return Err(shape_err("build_index", format!("expected M×d, got {s:?}"))),
        };
        if m == 0 {
            return Err(TksgError::Empty("build_index"));
        }
        let mut data = Vec::with_capacity(m * d);
        for i in 0..m {
            let row = normalized(embeddings.row(i)).ok_or_else(|| {
                TksgError::Invalid(format!("zero-norm embedding at row {i}"))
            })?;
            data.extend(row.into_iter().map(|v| v as f32 as f64));
        }
        let table = EmbeddingTable::new(ids, Tensor::new(vec![m, d], data)?)?;
        Ok(RetrievalIndex { table })
    }

    pub fn from_table(table: &EmbeddingTable) -> Result<Self> {
        Self::build(&table.vectors, table.ids.clone())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.table.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.table.vectors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.table.save(path)
    }

    /// Loads a saved index, checking that rows are unit-norm.
    pub fn load(path: &Path) -> Result<Self> {
        let table = EmbeddingTable::load(path)?;
        if table.is_empty() {
            return Err(TksgError::Empty("retrieval index"));
        }
        for i in 0..table.len() {
            let n = table.vectors.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(TksgError::TensorFile {
                    path: path.to_path_buf(),
                    reason: format!("row {i} has norm {n}, index rows must be unit-norm"),
                });
            }
        }
        Ok(RetrievalIndex { table })
    }

    /// Cosine similarity of the query against every row.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(shape_err(
                "query_topk",
                format!("query dim {} vs index dim {}", query.len(), self.dim()),
            ));
        }
        let q = normalized(query).ok_or_else(|| TksgError::Invalid("zero query vector".into()))?;
        let d = self.dim();
        Ok(self
            .table
            .vectors
            .data()
            .chunks(d)
            .map(|row| row.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Exact top-`k` rows by cosine similarity, ties broken by lower row
    /// index. Rows whose id equals `exclude` are skipped.
    pub fn query_topk(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<RetrievedSet> {
        if k == 0 {
            return Err(TksgError::Invalid("k must be at least 1".into()));
        }
        let sims = self.similarities(query)?;
        let mut cand: Vec<usize> = (0..sims.len())
            .filter(|&i| exclude != Some(self.table.ids[i].as_str()))
            .collect();
        let order = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        let take = k.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable_by(take, order);
            cand.truncate(take);
        }
        cand.sort_by(order);
        Ok(RetrievedSet {
            truncated: take < k,
            hits: cand
                .into_iter()
                .map(|i| Hit {
                    index: i,
                    id: self.table.ids[i].clone(),
                    similarity: sims[i],
                })
                .collect(),
        })
    }

    /// Stacked normalized embeddings of the given hits (`len × d_e`).
    pub fn gather(&self, hits: &[Hit]) -> Result<Tensor> {
        let idx: Vec<usize> = hits.iter().map(|h| h.index).collect();
        crate::tensor::gather_rows(&self.table.vectors, &idx)
    }
}

/// Linear map plus layer norm from the retrieval embedding space to the model
/// width. Retrieval embeddings themselves stay frozen.
#[derive(Clone, Debug)]
pub struct ReportProjector {
    pub linear: Linear,
    pub ln: LayerNorm,
    pub d_e: usize,
}

impl ReportProjector {
    pub fn new(store: &mut ParamStore, d_e: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        ReportProjector {
            linear: Linear::new(store, "retr.proj", d_e, d_h, true, ParamGroup::Rest, rng),
            ln: LayerNorm::new(store, "retr.ln", d_h, ParamGroup::Rest),
            d_e,
        }
    }

    /// `raw` is an `N_R × d_e` constant; returns `R` (`N_R × d_h`).
    pub fn forward(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let (_, d) = g.value(raw).dims2()?;
        if d != self.d_e {
            return Err(shape_err("project_reports", format!("embedding dim {d} vs {}", self.d_e)));
        }
        let y = self.linear.forward(g, raw)?;
        self.ln.forward(g, y)
    }
}
