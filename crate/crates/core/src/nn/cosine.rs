use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{Module, ParamTensor};

/// Fixed temperature applied to cosine similarities.
pub const COSINE_SCALE: f64 = 10.0;

/// Norms below this are clamped, so zero vectors score 0 instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `scale * cos(embedding, row_c)` for every row.
pub fn cosine_logits(embedding: &[f64], rows: ArrayView2<f64>, scale: f64) -> Vec<f64> {
    let ne = norm(embedding).max(NORM_EPS);
    rows.rows()
        .into_iter()
        .map(|w| {
            let w = w.to_vec();
            let nw = norm(&w).max(NORM_EPS);
            let dot: f64 = embedding.iter().zip(&w).map(|(a, b)| a * b).sum();
            scale * dot / (ne * nw)
        })
        .collect()
}

/// Batched [`cosine_logits`]: `n x d` embeddings against `c x d` rows.
pub fn cosine_logits_batch(
    embeddings: ArrayView2<f64>,
    rows: ArrayView2<f64>,
    scale: f64,
) -> Array2<f64> {
    let mut out = Array2::zeros((embeddings.nrows(), rows.nrows()));
    for (i, e) in embeddings.rows().into_iter().enumerate() {
        let logits = cosine_logits(&e.to_vec(), rows, scale);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&logits));
    }
    out
}

/// Gradients of a loss through [`cosine_logits_batch`]: given
/// `dL/dlogits` (`n x c`) returns `(dL/dembeddings, dL/drows)`.
pub fn cosine_backward(
    embeddings: ArrayView2<f64>,
    rows: ArrayView2<f64>,
    scale: f64,
    grad_logits: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut ge = Array2::zeros(embeddings.raw_dim());
    let mut gw = Array2::zeros(rows.raw_dim());
    let row_norms: Vec<f64> = rows.rows().into_iter().map(|w| norm(&w.to_vec())).collect();
    for (i, e) in embeddings.rows().into_iter().enumerate() {
        let e_norm_raw = norm(&e.to_vec());
        let ne = e_norm_raw.max(NORM_EPS);
        for (c, w) in rows.rows().into_iter().enumerate() {
            let g = grad_logits[[i, c]];
            if g == 0.0 {
                continue;
            }
            let nw = row_norms[c].max(NORM_EPS);
            let dot: f64 = e.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            let cos = dot / (ne * nw);
            // d cos / d e = w / (|e||w|) - cos e / |e|^2. A clamped (zero)
            // vector scores a constant 0, so neither side gets a gradient.
            if e_norm_raw <= NORM_EPS || row_norms[c] <= NORM_EPS {
                continue;
            }
            for k in 0..e.len() {
                ge[[i, k]] += scale * g * (w[k] / (ne * nw) - cos / (ne * ne) * e[k]);
                gw[[c, k]] += scale * g * (e[k] / (ne * nw) - cos / (nw * nw) * w[k]);
            }
        }
    }
    (ge, gw)
}

/// Classification head scoring embeddings by scaled cosine similarity to
/// one weight row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    /// `classes x embed`
    pub weight: ParamTensor,
    pub scale: f64,
}

impl CosineHead {
    pub fn new<R: Rng + ?Sized>(name: &str, classes: usize, embed: usize, rng: &mut R) -> Self {
        let mut head = Self {
            weight: ParamTensor::he(format!("{name}.weight"), classes, embed, embed, rng),
            scale: COSINE_SCALE,
        };
        head.normalize_rows();
        head
    }

    pub fn forward(&self, embeddings: ArrayView2<f64>) -> Array2<f64> {
        cosine_logits_batch(embeddings, self.weight.value.view(), self.scale)
    }

    /// Accumulates the weight gradient, returns the embedding gradient.
    pub fn backward(
        &mut self,
        embeddings: ArrayView2<f64>,
        grad_logits: ArrayView2<f64>,
    ) -> Array2<f64> {
        let (ge, gw) = cosine_backward(
            embeddings,
            self.weight.value.view(),
            self.scale,
            grad_logits,
        );
        self.weight.grad += &gw;
        ge
    }

    /// Rescales every class row to unit length.
    pub fn normalize_rows(&mut self) {
        for mut row in self.weight.value.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / n);
        }
    }
}

impl Module for CosineHead {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight]
    }
}
