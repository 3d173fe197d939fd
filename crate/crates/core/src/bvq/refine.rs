//! Joint refinement of codebooks and indices.
//!
//! Each sub-vector carries logits over its codebook's entries. A step draws
//! Gumbel noise, takes the hard argmax of `logits + noise` for the forward
//! reconstruction, and back-propagates through `softmax((logits + noise)/τ)`
//! (straight-through). Codebook latents pass through an INT4 fake quantizer
//! with a straight-through rounding gradient, and each codebook scale gets
//! the step-size gradient `∂q/∂s = round(v/s) − v/s` (or the clamp bound when
//! saturated). The objective is the sum of per-cluster reconstruction MSEs;
//! the returned model is the best one seen under noise-free evaluation.

use ndarray::Array2;
use serde::Serialize;

use super::{partition_blocks, BvqConfig, BvqError, BvqModel, Codebook};
use crate::quantizer::{qmax, qmin};

/// Soft-assignment loss with fixed noise and temperature:
/// `L = (1/(n·dim)) Σ_v ‖Σ_c p_vc·e_c − w_v‖²`, `p_v = softmax((z_v + g_v)/τ)`.
#[derive(Debug, Clone)]
pub struct SoftAssignment<'a> {
    pub targets: &'a [f64],
    pub noise: &'a [f64],
    pub dim: usize,
    pub entries: usize,
    pub tau: f64,
}

/// Softmax of `(logits + noise) / tau`, max-shifted.
pub fn tempered_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(z, g)| (z + g) / tau).collect();
    let peak = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| libm::exp(s - peak)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Pulls `∂L/∂p` back through the tempered softmax to `∂L/∂z`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64], tau: f64) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pc, gc)| pc * (gc - inner) / tau).collect()
}

impl SoftAssignment<'_> {
    fn count(&self) -> usize {
        self.targets.len() / self.dim
    }

    pub fn loss(&self, logits: &[f64], codebook: &[f64]) -> f64 {
        let (n, d, c) = (self.count(), self.dim, self.entries);
        let mut total = 0.0;
        for v in 0..n {
            let p = tempered_softmax(&logits[v * c..(v + 1) * c], &self.noise[v * c..(v + 1) * c], self.tau);
            for e in 0..d {
                let y: f64 = (0..c).map(|k| p[k] * codebook[k * d + e]).sum();
                let r = y - self.targets[v * d + e];
                total += r * r;
            }
        }
        total / (n * d) as f64
    }

    /// Analytic `(∂L/∂logits, ∂L/∂codebook)`.
    pub fn gradient(&self, logits: &[f64], codebook: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, d, c) = (self.count(), self.dim, self.entries);
        let norm = 2.0 / (n * d) as f64;
        let mut g_logits = vec![0.0; n * c];
        let mut g_book = vec![0.0; c * d];
        for v in 0..n {
            let p = tempered_softmax(&logits[v * c..(v + 1) * c], &self.noise[v * c..(v + 1) * c], self.tau);
            let grad_y: Vec<f64> = (0..d)
                .map(|e| {
                    let y: f64 = (0..c).map(|k| p[k] * codebook[k * d + e]).sum();
                    norm * (y - self.targets[v * d + e])
                })
                .collect();
            let grad_p: Vec<f64> = (0..c)
                .map(|k| (0..d).map(|e| grad_y[e] * codebook[k * d + e]).sum())
                .collect();
            g_logits[v * c..(v + 1) * c].copy_from_slice(&softmax_backward(&p, &grad_p, self.tau));
            for k in 0..c {
                for e in 0..d {
                    g_book[k * d + e] += p[k] * grad_y[e];
                }
            }
        }
        (g_logits, g_book)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub best_step: Option<usize>,
    pub steps: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-codebook training state.
struct Book {
    latent: Vec<f64>,
    scale: f64,
}

impl Book {
    fn quantized(&self) -> Vec<f64> {
        let (lo, hi) = (qmin(4) as f64, qmax(4) as f64);
        self.latent
            .iter()
            .map(|&v| (v / self.scale).round_ties_even().clamp(lo, hi) * self.scale)
            .collect()
    }

    fn to_codebook(&self) -> Codebook {
        Codebook::with_scale(&self.latent, self.scale as f32)
    }
}

pub fn gumbel_refine(
    model: &BvqModel,
    w: &Array2<f64>,
    config: &BvqConfig,
) -> Result<(BvqModel, RefineReport), BvqError> {
    config.validate()?;
    model.validate()?;
    let layout = model.layout;
    if (w.nrows(), w.ncols()) != (layout.rows, layout.cols) {
        return Err(BvqError::Shape(format!(
            "model is {}x{}, weights are {}x{}",
            layout.rows,
            layout.cols,
            w.nrows(),
            w.ncols()
        )));
    }
    let part_config = BvqConfig {
        block_rows: layout.block_rows,
        block_cols: layout.block_cols,
        vector_len: layout.vector_len,
        codebook_entries: layout.codebook_entries,
        ..config.clone()
    };
    let part = partition_blocks(w, &part_config)?;
    let (l, c) = (layout.vector_len, layout.codebook_entries);
    let nsub = layout.subvector_count();
    let book_of: Vec<usize> = (0..nsub).map(|v| model.codebook_of_subvector(v)).collect();
    let mut cluster_size = vec![0usize; model.codebooks.len()];
    for &b in &book_of {
        cluster_size[b] += 1;
    }

    let mut books: Vec<Book> = model
        .codebooks
        .iter()
        .map(|cb| Book {
            latent: cb.dequantized(),
            scale: cb.scale as f64,
        })
        .collect();

    // Logits start at the Gaussian-mixture posterior around the current
    // entries, with variance set by the mean nearest-entry residual.
    let mut logits = vec![0.0; nsub * c];
    {
        let tables: Vec<Vec<f64>> = books.iter().map(Book::quantized).collect();
        let mut d2 = vec![0.0; nsub * c];
        let mut min_total = 0.0;
        for v in 0..nsub {
            let x = part.subvector(v);
            let t = &tables[book_of[v]];
            for k in 0..c {
                d2[v * c + k] = t[k * l..(k + 1) * l].iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            }
            min_total += d2[v * c..(v + 1) * c].iter().copied().fold(f64::INFINITY, f64::min);
        }
        let spread = (min_total / nsub as f64).max(1e-12);
        for (z, d) in logits.iter_mut().zip(&d2) {
            *z = -d / (2.0 * spread);
        }
        // Keep the incoming hard assignment as the starting argmax.
        for v in 0..nsub {
            let row = &mut logits[v * c..(v + 1) * c];
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row[model.indices[v] as usize] = peak + 1e-9;
        }
    }

    let evaluate = |books: &[Book], logits: &[f64]| -> (Vec<u16>, f64) {
        let tables: Vec<Vec<f64>> = books.iter().map(Book::quantized).collect();
        let mut idx = Vec::with_capacity(nsub);
        let mut sse = 0.0;
        for v in 0..nsub {
            let k = argmax(&logits[v * c..(v + 1) * c]);
            idx.push(k as u16);
            let t = &tables[book_of[v]][k * l..(k + 1) * l];
            sse += t.iter().zip(part.subvector(v)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        (idx, sse / (nsub * l) as f64)
    };

    let initial_mse = model.mse(w);
    let mut best_mse = initial_mse;
    let mut best_model = model.clone();
    let mut best_step = None;

    let mut rng = crate::rng::substream(config.seed, 0x6d62);
    let mut noise = vec![0.0; c];
    let steps = config.steps;
    for step in 0..steps {
        let frac = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
        let tau = config.tau_initial * (config.tau_final / config.tau_initial).powf(frac);
        let tables: Vec<Vec<f64>> = books.iter().map(Book::quantized).collect();
        let mut g_logits = vec![0.0; nsub * c];
        let mut g_q: Vec<Vec<f64>> = books.iter().map(|b| vec![0.0; b.latent.len()]).collect();
        let mut loss = 0.0;
        for v in 0..nsub {
            noise.iter_mut().for_each(|g| *g = crate::rng::gumbel(&mut rng));
            let z = &logits[v * c..(v + 1) * c];
            let p = tempered_softmax(z, &noise, tau);
            let hard = argmax(&z.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<_>>());
            let b = book_of[v];
            let table = &tables[b];
            let norm = 2.0 / (cluster_size[b] * l) as f64;
            let x = part.subvector(v);
            let grad_y: Vec<f64> = (0..l)
                .map(|e| {
                    let r = table[hard * l + e] - x[e];
                    loss += r * r / (cluster_size[b] * l) as f64;
                    norm * r
                })
                .collect();
            let grad_p: Vec<f64> = (0..c)
                .map(|k| (0..l).map(|e| grad_y[e] * table[k * l + e]).sum())
                .collect();
            g_logits[v * c..(v + 1) * c].copy_from_slice(&softmax_backward(&p, &grad_p, tau));
            for e in 0..l {
                g_q[b][hard * l + e] += grad_y[e];
            }
        }
        if !loss.is_finite() {
            return Err(BvqError::Divergence { step });
        }

        for (z, g) in logits.iter_mut().zip(&g_logits) {
            *z -= config.logit_learning_rate * g;
        }
        let (lo, hi) = (qmin(4) as f64, qmax(4) as f64);
        for (book, gq) in books.iter_mut().zip(&g_q) {
            let mut g_scale = 0.0;
            for (v, g) in book.latent.iter_mut().zip(gq) {
                let ratio = *v / book.scale;
                let q = ratio.round_ties_even();
                if q < lo {
                    g_scale += g * lo;
                } else if q > hi {
                    g_scale += g * hi;
                } else {
                    g_scale += g * (q - ratio);
                    *v -= config.learning_rate * g;
                }
            }
            let next = book.scale - config.learning_rate * g_scale;
            // Scales stay representable in f32 so the stored model matches.
            book.scale = (next.max(1e-8) as f32) as f64;
        }

        let (idx, mse) = evaluate(&books, &logits);
        if !mse.is_finite() {
            return Err(BvqError::Divergence { step });
        }
        if mse < best_mse {
            best_mse = mse;
            best_step = Some(step);
            best_model = BvqModel {
                layout,
                cluster_map: model.cluster_map.clone(),
                codebooks: books.iter().map(Book::to_codebook).collect(),
                indices: idx,
            };
        }
    }

    let final_mse = best_model.mse(w);
    Ok((
        best_model,
        RefineReport {
            initial_mse,
            final_mse,
            best_step,
            steps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvq::{kmeans_init, partition_blocks, planted_weights, Clustering};
    use crate::quantizer::fake_quant_per_tensor;
    use crate::rng::{gumbel, seeded, standard_normal};

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = seeded(seed);
            let targets: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let noise: Vec<f64> = (0..4).map(|_| gumbel(&mut rng)).collect();
            let logits: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let book: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            let prob = SoftAssignment {
                targets: &targets,
                noise: &noise,
                dim: 2,
                entries: 2,
                tau: 1.0,
            };
            let (gz, gb) = prob.gradient(&logits, &book);
            let fz = central_difference(|z| prob.loss(z, &book), &logits, 1e-5);
            let fb = central_difference(|b| prob.loss(&logits, b), &book, 1e-5);
            assert!(max_rel(&gz, &fz) <= 1e-4, "seed {seed}: {gz:?} vs {fz:?}");
            assert!(max_rel(&gb, &fb) <= 1e-4, "seed {seed}: {gb:?} vs {fb:?}");
        }
    }

    #[test]
    fn hard_limit_equals_index_lookup() {
        // As τ → 0 the soft reconstruction collapses to the argmax entry.
        let book = [1.0, 2.0, -3.0, 0.5];
        let logits = [0.3, -0.2];
        let noise = [0.0, 0.0];
        let p = tempered_softmax(&logits, &noise, 1e-4);
        let y: Vec<f64> = (0..2).map(|e| p[0] * book[e] + p[1] * book[2 + e]).collect();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    fn planted_case(seed: u64) -> (Array2<f64>, BvqConfig) {
        let w = planted_weights(64, 64, 8, 4, 0.01, seed);
        let config = BvqConfig {
            block_rows: 4,
            block_cols: 8,
            vector_len: 8,
            codebook_entries: 4,
            clustering: Clustering::PerBlockRow,
            seed,
            ..BvqConfig::default()
        };
        (w, config)
    }

    #[test]
    fn refine_never_worsens_and_beats_scalar_int4() {
        for seed in 0..4 {
            let (w, config) = planted_case(seed);
            let init = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
            let (model, report) = gumbel_refine(&init, &w, &config).unwrap();
            model.validate().unwrap();
            assert!(report.final_mse <= report.initial_mse);
            assert_eq!(report.final_mse, model.mse(&w));
            let direct = crate::bvq::mse(&w, &fake_quant_per_tensor(&w, 4).unwrap());
            assert!(report.final_mse <= direct, "seed {seed}: {report:?} direct {direct}");
        }
    }

    #[test]
    fn refine_is_deterministic() {
        let (w, config) = planted_case(7);
        let init = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        let a = gumbel_refine(&init, &w, &config).unwrap();
        let b = gumbel_refine(&init, &w, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refine_rejects_mismatched_weights() {
        let (w, config) = planted_case(1);
        let init = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        let other = Array2::zeros((32, 64));
        assert!(matches!(gumbel_refine(&init, &other, &config), Err(BvqError::Shape(_))));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (w, mut config) = planted_case(2);
        let init = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        config.learning_rate = 1e300;
        config.logit_learning_rate = 1e300;
        match gumbel_refine(&init, &w, &config) {
            Err(BvqError::Divergence { step }) => assert!(step < config.steps),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
