//! Retrieval metrics: average precision, MAP and precision@K.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hash::{pack, BitCodeMatrix};
use crate::index::HammingIndex;
use crate::model::Model;

/// `AP = (1/n)·Σⱼ (nⱼ/j)·pos(j)` over the ranked relevance flags, where `n`
/// is the number of relevant items retrieved and `nⱼ` the number within the
/// first `j`. Zero when nothing relevant is retrieved.
pub fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (j, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (j + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

/// Fraction of relevant items among the first `cutoff` flags.
pub fn precision_at(flags: &[bool], cutoff: usize) -> Result<f64> {
    if cutoff == 0 || cutoff > flags.len() {
        return Err(Error::config(
            "K'",
            format!("cutoff {cutoff} outside [1, {}]", flags.len()),
        ));
    }
    Ok(flags[..cutoff].iter().filter(|&&f| f).count() as f64 / cutoff as f64)
}

/// Ranked relevance flags of one query, truncated at the retrieval cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_id: usize,
    pub flags: Vec<bool>,
}

impl RetrievalRun {
    pub fn correct(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Arithmetic mean of per-query AP, summed in query order.
pub fn mean_ap(runs: &[RetrievalRun]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::config("queries", "MAP needs at least one query"));
    }
    let sum: f64 = runs.iter().map(|r| average_precision(&r.flags)).sum();
    Ok(sum / runs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: usize,
    pub ap: f64,
    pub p_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub cutoff: usize,
    pub map: f64,
    pub mean_p_at_10: f64,
    pub queries: Vec<QueryResult>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,ap,p@10\n");
        for q in &self.queries {
            out.push_str(&format!("{},{},{}\n", q.query_id, q.ap, q.p_at_10));
        }
        out
    }
}

/// Runs every query code against the index with cutoff `top` (`None` means
/// full ranking).
pub fn retrieval_runs(
    index: &HammingIndex,
    query_codes: &BitCodeMatrix,
    query_labels: &[usize],
    query_ids: &[usize],
    top: Option<usize>,
) -> Result<Vec<RetrievalRun>> {
    if query_codes.n_codes() != query_labels.len() || query_ids.len() != query_labels.len() {
        return Err(Error::LabelMismatch("query codes, labels and ids differ in count".into()));
    }
    if query_codes.code_length() != index.code_length() {
        return Err(Error::dim(format!(
            "query codes have {} bits, index has {}",
            query_codes.code_length(),
            index.code_length()
        )));
    }
    let cutoff = top.unwrap_or(index.len()).max(1);
    (0..query_labels.len())
        .into_par_iter()
        .map(|q| {
            let hits = index.query_topk(query_codes.code(q), cutoff)?;
            Ok(RetrievalRun {
                query_id: query_ids[q],
                flags: hits.iter().map(|h| index.labels()[h.id] == query_labels[q]).collect(),
            })
        })
        .collect()
}

pub fn report_from_runs(runs: &[RetrievalRun], cutoff: usize) -> Result<Report> {
    let queries: Vec<QueryResult> = runs
        .iter()
        .map(|r| QueryResult {
            query_id: r.query_id,
            ap: average_precision(&r.flags),
            p_at_10: if r.flags.is_empty() {
                0.0
            } else {
                precision_at(&r.flags, r.flags.len().min(10)).unwrap()
            },
        })
        .collect();
    let map = mean_ap(runs)?;
    let mean_p_at_10 = queries.iter().map(|q| q.p_at_10).sum::<f64>() / queries.len() as f64;
    Ok(Report {
        cutoff,
        map,
        mean_p_at_10,
        queries,
    })
}

/// Binary codes for the given dataset ids under `model`.
pub fn encode_images(model: &Model, dataset: &Dataset, ids: &[usize]) -> Result<BitCodeMatrix> {
    let signs: Vec<Vec<i8>> = ids
        .par_iter()
        .map(|&i| model.code(&dataset.image(i)))
        .collect::<Result<_>>()?;
    let flat: Vec<i8> = signs.into_iter().flatten().collect();
    BitCodeMatrix::from_signs(ids.len(), model.code_length(), &flat)
}

/// Binary codes, labels and ids of the held-out queries.
pub fn encode_queries(model: &Model, dataset: &Dataset) -> Result<(BitCodeMatrix, Vec<usize>, Vec<usize>)> {
    let ids = dataset.query_ids();
    let labels = ids.iter().map(|&i| dataset.labels[i]).collect();
    Ok((encode_images(model, dataset, &ids)?, labels, ids))
}

/// Query split against the database index; `top = None` ranks everything.
pub fn evaluate(index: &HammingIndex, model: &Model, dataset: &Dataset, top: Option<usize>) -> Result<Report> {
    if index.labels() != dataset.database_labels().as_slice() {
        return Err(Error::LabelMismatch(
            "index labels differ from the dataset's train split".into(),
        ));
    }
    let (codes, labels, ids) = encode_queries(model, dataset)?;
    let runs = retrieval_runs(index, &codes, &labels, &ids, top)?;
    report_from_runs(&runs, top.unwrap_or(index.len()))
}

/// Ranked neighbours of one query as CSV lines (rank, id, distance, label, relevant).
pub fn neighbor_report(index: &HammingIndex, code: &[i8], label: Option<usize>, top: usize) -> Result<String> {
    let hits = index.query_topk(&pack(code)?, top)?;
    let mut out = String::from("rank,database_id,distance,label,relevant\n");
    for (rank, h) in hits.iter().enumerate() {
        let l = index.labels()[h.id];
        let rel = label.map(|q| (q == l) as u8).map_or(String::new(), |r| r.to_string());
        out.push_str(&format!("{},{},{},{},{}\n", rank + 1, h.id, h.distance, l, rel));
    }
    Ok(out)
}
