use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::{Batch, BatchItem};
use crate::config::ModelConfig;
use crate::matrix::Matrix;

/// Two items of different lengths with random targets compatible with `cfg`.
pub fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: [(&[usize], &[usize]); 2] = [(&[1, 2, 3], &[2, 1, 3]), (&[4, 5], &[1, 2])];
    let items: Vec<BatchItem> = specs
        .iter()
        .enumerate()
        .map(|(i, (p, d))| {
            let t: usize = d.iter().sum();
            let mut rand_matrix = |cols: usize| {
                Matrix::new(t, cols, (0..t * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let mel = rand_matrix(cfg.n_mels);
            let ssl = rand_matrix(cfg.ssl_dim);
            BatchItem {
                id: format!("utt{i}"),
                phonemes: p.to_vec(),
                durations: d.to_vec(),
                pitch: (0..t).map(|_| rng.random_range(0.0..6.0)).collect(),
                energy: (0..t).map(|_| rng.random_range(0.0..2.0)).collect(),
                mel,
                ssl: cfg.variant.has_ssl_branch().then_some(ssl),
            }
        })
        .collect();
    Batch::from_items(&items).unwrap()
}

/// Plain-loop reference implementations over row-major `[rows, cols]` data,
/// written without the graph so they can check the layer wiring.
pub mod oracle {
    use crate::nn::ParamStore;

    fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
        store.by_name(name).unwrap_or_else(|| panic!("missing {name}")).value.data()
    }

    pub fn affine(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
        let rows = x.len() / din;
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                out[r * dout + o] = b[o] + (0..din).map(|i| x[r * din + i] * w[i * dout + o]).sum::<f64>();
            }
        }
        out
    }

    pub fn linear(store: &ParamStore, name: &str, x: &[f64], din: usize, dout: usize) -> Vec<f64> {
        affine(x, p(store, &format!("{name}.weight")), p(store, &format!("{name}.bias")), din, dout)
    }

    pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64], d: usize) -> Vec<f64> {
        let (gamma, beta) = (p(store, &format!("{name}.gamma")), p(store, &format!("{name}.beta")));
        x.chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter()
                    .enumerate()
                    .map(move |(i, v)| (v - mean) * inv * gamma[i] + beta[i])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn conv(store: &ParamStore, name: &str, x: &[f64], kw: usize, din: usize, dout: usize) -> Vec<f64> {
        let (k, bias) = (p(store, &format!("{name}.kernel")), p(store, &format!("{name}.bias")));
        let l = x.len() / din;
        let pad = (kw / 2) as isize;
        let mut out = vec![0.0; l * dout];
        for t in 0..l {
            for o in 0..dout {
                let mut acc = bias[o];
                for j in 0..kw {
                    let s = t as isize + j as isize - pad;
                    if (0..l as isize).contains(&s) {
                        for i in 0..din {
                            acc += x[s as usize * din + i] * k[(j * din + i) * dout + o];
                        }
                    }
                }
                out[t * dout + o] = acc;
            }
        }
        out
    }

    pub fn self_attention(store: &ParamStore, name: &str, x: &[f64], d: usize, heads: usize) -> Vec<f64> {
        let q = linear(store, &format!("{name}.query"), x, d, d);
        let k = linear(store, &format!("{name}.key"), x, d, d);
        let v = linear(store, &format!("{name}.value"), x, d, d);
        let l = x.len() / d;
        let dh = d / heads;
        let mut a = vec![0.0; l * d];
        for h in 0..heads {
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..l {
                    for c in 0..dh {
                        a[i * d + h * dh + c] += e[j] / z * v[j * d + h * dh + c];
                    }
                }
            }
        }
        linear(store, &format!("{name}.output"), &a, d, d)
    }

    /// One unpadded FFT block with dropout off.
    pub fn fft_block(store: &ParamStore, name: &str, x: &[f64], d: usize, heads: usize, ffn: usize, kw: usize) -> Vec<f64> {
        let a = self_attention(store, &format!("{name}.attn"), x, d, heads);
        let r: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let x = layer_norm(store, &format!("{name}.attn_norm"), &r, d);
        let f = conv(store, &format!("{name}.conv1"), &x, kw, d, ffn);
        let f: Vec<f64> = f.into_iter().map(|v| v.max(0.0)).collect();
        let f = conv(store, &format!("{name}.conv2"), &f, 1, ffn, d);
        let r: Vec<f64> = x.iter().zip(&f).map(|(u, v)| u + v).collect();
        layer_norm(store, &format!("{name}.ffn_norm"), &r, d)
    }

    pub fn add_positions(x: &[f64], d: usize) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(idx, v)| {
                let (pos, i) = (idx / d, idx % d);
                let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                v + if i % 2 == 0 { angle.sin() } else { angle.cos() }
            })
            .collect()
    }
}
