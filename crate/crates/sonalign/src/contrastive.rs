//! Cosine-similarity alignment: the pairwise similarity matrix, the
//! symmetric contrastive loss over it, and argmax classification against
//! label embeddings.

use crate::error::{Error, Result};

/// Pairwise cosine similarities for a batch, `values[i * n + j]` being the
/// similarity between audio embedding `i` and text embedding `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn transposed(&self) -> SimilarityMatrix {
        let mut values = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                values[j * self.n + i] = self.values[i * self.n + j];
            }
        }
        SimilarityMatrix { n: self.n, values }
    }
}

/// `dot(a,t) / (|a| |t|)`. Errors on near-zero norms instead of silently
/// returning 0.
pub fn cosine_similarity(a: &[f64], t: &[f64]) -> Result<f64> {
    if a.len() != t.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[t.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 {
        return Err(Error::DegenerateEmbedding { index: 0 });
    }
    if nt < 1e-12 {
        return Err(Error::DegenerateEmbedding { index: 1 });
    }
    let dot: f64 = a.iter().zip(t).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nt))
}

/// All-pairs cosine similarity; errors carry the index of a degenerate
/// embedding.
pub fn similarity_matrix(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    if audio.len() != text.len() {
        return Err(Error::shape(
            "similarity_matrix",
            &[audio.len()],
            &[text.len()],
        ));
    }
    let n = audio.len();
    let check = |rows: &[Vec<f64>]| -> Result<()> {
        for (i, r) in rows.iter().enumerate() {
            if r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
                return Err(Error::DegenerateEmbedding { index: i });
            }
        }
        Ok(())
    };
    check(audio)?;
    check(text)?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = cosine_similarity(&audio[i], &text[j])?;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Symmetric contrastive loss over a similarity matrix with diagonal
/// targets: the mean of row-wise and column-wise softmax cross-entropy,
/// logits scaled by `scale`.
pub fn contrastive_loss(s: &SimilarityMatrix, scale: f64) -> Result<f64> {
    Ok(contrastive_loss_and_grad(s, scale)?.0)
}

/// Loss plus its gradient with respect to every matrix entry.
pub fn contrastive_loss_and_grad(s: &SimilarityMatrix, scale: f64) -> Result<(f64, Vec<f64>)> {
    if scale <= 0.0 {
        return Err(Error::invalid("contrastive_loss", "scale must be > 0"));
    }
    let n = s.n;
    let ce_rows = |m: &SimilarityMatrix| -> (f64, Vec<f64>) {
        // returns mean CE and softmax probabilities row-major
        let mut p = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| scale * m.get(i, j)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                p[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                p[i * n + j] /= z;
            }
            total += -(row[i] - max - z.ln());
        }
        (total / n as f64, p)
    };
    let (ce_row, p_row) = ce_rows(s);
    let st = s.transposed();
    let (ce_col, p_col) = ce_rows(&st);
    let loss = 0.5 * (ce_row + ce_col);
    let mut grad = vec![0.0; n * n];
    let coeff = scale / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            grad[i * n + j] = coeff * (p_row[i * n + j] + p_col[j * n + i] - delta);
        }
    }
    Ok((loss, grad))
}

/// Argmax cosine similarity against the label embeddings; ties break to
/// the lowest class id. Returns the winner and the full score list.
pub fn classify(
    embedding: &[f64],
    class_embeddings: &[(usize, Vec<f64>)],
) -> Result<(usize, Vec<(usize, f64)>)> {
    if class_embeddings.is_empty() {
        return Err(Error::invalid("classify", "need at least one class"));
    }
    let mut scores = Vec::with_capacity(class_embeddings.len());
    for (id, emb) in class_embeddings {
        scores.push((*id, cosine_similarity(embedding, emb)?));
    }
    let mut best = scores[0];
    for &(id, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && id < best.0) {
            best = (id, s);
        }
    }
    Ok((best.0, scores))
}
