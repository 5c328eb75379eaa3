//! Cosine k-nearest-neighbour retrieval.

use super::{par_map, EmbeddingSet};
use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit_rows(set: &EmbeddingSet) -> Vec<f64> {
    (0..set.rows)
        .flat_map(|i| {
            let r = set.row(i);
            let n = norm(r);
            // zero rows stay zero and score 0 against everything
            r.iter()
                .map(move |&x| if n > 0.0 { x / n } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn top_k(query: &[f64], unit_db: &[f64], d: usize, k: usize) -> Result<Vec<usize>> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::Degenerate("k-NN query is the zero vector".into()));
    }
    let mut scored: Vec<(f64, usize)> = unit_db
        .chunks_exact(d)
        .enumerate()
        .map(|(j, r)| (r.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / qn, j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, j)| j).collect())
}

/// Indices of the `k` rows of `db` most cosine-similar to `query`, best
/// first; equal similarities go to the lower index.
pub fn knn_retrieve(query: &[f64], db: &EmbeddingSet, k: usize) -> Result<Vec<usize>> {
    if query.len() != db.cols {
        return Err(Error::shape(
            "knn_retrieve",
            format!("query has {} dims, db rows {}", query.len(), db.cols),
        ));
    }
    if k == 0 || k > db.rows {
        return Err(Error::Range(format!("k = {k} outside 1..={}", db.rows)));
    }
    top_k(query, &unit_rows(db), db.cols, k)
}

/// Majority-vote classification accuracy of `queries` against a labelled
/// database. Vote ties go to the class whose best neighbour ranks higher.
pub fn knn_accuracy(
    db: &EmbeddingSet,
    db_labels: &[usize],
    queries: &EmbeddingSet,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if db.rows != db_labels.len() || queries.rows != query_labels.len() || db.cols != queries.cols {
        return Err(Error::shape("knn_accuracy", "rows, labels and widths must agree"));
    }
    if k == 0 || k > db.rows {
        return Err(Error::Range(format!("k = {k} outside 1..={}", db.rows)));
    }
    let unit = unit_rows(db);
    let n_classes = db_labels.iter().max().map_or(0, |m| m + 1);
    let idx: Vec<usize> = (0..queries.rows).collect();
    let hits = par_map(&idx, |&i| -> Result<bool> {
        let nn = top_k(queries.row(i), &unit, db.cols, k)?;
        let mut votes = vec![0usize; n_classes];
        nn.iter().for_each(|&j| votes[db_labels[j]] += 1);
        let top = votes.iter().max().copied().unwrap_or(0);
        let pred = nn.iter().map(|&j| db_labels[j]).find(|&c| votes[c] == top);
        Ok(pred == Some(query_labels[i]))
    });
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / queries.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_database() {
        let db = EmbeddingSet::from_rows(
            &(0..4)
                .map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(knn_retrieve(&[0.0, 0.0, 2.0, 0.0], &db, 1).unwrap(), vec![2]);
        assert_eq!(knn_retrieve(&[0.0, 0.0, 2.0, 0.0], &db, 4).unwrap(), vec![2, 0, 1, 3]);
        assert!(matches!(knn_retrieve(&[0.0; 4], &db, 1), Err(Error::Degenerate(_))));
        assert!(knn_retrieve(&[1.0; 4], &db, 5).is_err());
    }

    #[test]
    fn voting() {
        let db = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]]).unwrap();
        let q = EmbeddingSet::from_rows(&[vec![1.0, 0.05], vec![0.05, 1.0]]).unwrap();
        assert_eq!(knn_accuracy(&db, &[0, 0, 1, 1], &q, &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(knn_accuracy(&db, &[0, 0, 1, 1], &q, &[1, 0], 3).unwrap(), 0.0);
    }
}
