//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

use wander_core::EmbeddingVector;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// exp of the Shannon entropy of the spectrum of K/n, K the cosine kernel.
pub fn vendi_oracle(xs: &[Vec<f64>]) -> f64 {
    let n = xs.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { cosine(&xs[i], &xs[j]) } / n as f64).collect())
        .collect();
    let h: f64 = jacobi_eigenvalues(k)
        .into_iter()
        .filter(|&l| l > 1e-12)
        .map(|l| -l * l.ln())
        .sum();
    h.exp()
}

/// Mean cosine distance to the k nearest of `pool`, skipping index `skip`.
pub fn novelty_oracle(pool: &[Vec<f64>], x: &[f64], k: usize, skip: Option<usize>) -> f64 {
    let mut d: Vec<f64> = pool
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, p)| 1.0 - cosine(p, x))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = k.min(d.len());
    d[..k].iter().sum::<f64>() / k as f64
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian vector rounded to f32, so oracle and library see identical inputs.
pub fn random_embedding<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> (Vec<f64>, EmbeddingVector) {
    let v: Vec<f32> = gaussian_vec(rng, dim).into_iter().map(|x| x as f32).collect();
    (v.iter().map(|&x| f64::from(x)).collect(), EmbeddingVector::new(v).unwrap())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &t in &idx[i..=j] {
                r[t] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub mod one_good_arm {
    //! A world where only one emitter ever moves a prompt: it sends the child to
    //! a fresh pseudo-random direction, while every other operation returns the
    //! parent unchanged and generation is noise-free.

    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use wander_core::emitters::EmitterId;
    use wander_core::providers::{
        EmbedRequest, EmbedResponse, Embedder, GenerateRequest, GenerateResponse, Generator, MutateRequest,
        MutateResponse, MutationContext, MutationOp, Mutator, ProviderError,
    };
    use wander_core::{EmbeddingVector, Providers};

    pub const DIM: usize = 64;

    struct World {
        good: EmitterId,
    }

    fn vector_for(text: &str) -> Vec<f32> {
        let mut seed = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            seed = (seed ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        super::gaussian_vec(&mut rng, DIM).into_iter().map(|x| x as f32).collect()
    }

    impl Mutator for World {
        fn mutate(&self, _request: &MutateRequest, context: &MutationContext) -> Result<MutateResponse, ProviderError> {
            let text = match &context.operation {
                MutationOp::Mutate {
                    emitter: Some(e),
                    ..
                } if *e == self.good => format!("probe {}", context.stream_seed),
                MutationOp::Mutate { parent_prompt, .. } | MutationOp::TowardCell { parent_prompt, .. } => {
                    parent_prompt.clone()
                }
                MutationOp::Crossover { parents } => parents[0].clone(),
            };
            Ok(MutateResponse { text, usage: None })
        }
    }

    impl Generator for World {
        fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ProviderError> {
            Ok(GenerateResponse {
                artifact_ref: request.prompt.clone(),
                digest: String::new(),
            })
        }
    }

    impl Embedder for World {
        fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, ProviderError> {
            Ok(EmbedResponse {
                embedding: EmbeddingVector::new(vector_for(&request.payload)).expect("non-zero"),
            })
        }
    }

    pub fn providers(good: EmitterId) -> Providers {
        let w = Arc::new(World { good });
        Providers {
            mutator: w.clone(),
            generator: w.clone(),
            embedder: w,
            rater: None,
            perceptual: None,
        }
    }
}

/// Per-generation metrics rebuilt from a raw `events.jsonl` with the oracle
/// implementations: (vendi, mean pairwise distance, min novelty, relevance, cumulative tokens).
pub fn metrics_from_log(events_jsonl: &str, k: usize) -> Vec<(f64, f64, f64, f64, u64)> {
    use base64::Engine as _;
    use serde_json::Value;

    fn decode(v: &Value) -> Vec<f64> {
        let bytes = base64::engine::general_purpose::STANDARD.decode(v.as_str().unwrap()).unwrap();
        bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect()
    }

    struct Member {
        id: u64,
        image: Vec<f64>,
        text: Vec<f64>,
    }
    let member = |ind: &Value| Member {
        id: ind["id"].as_u64().unwrap(),
        image: decode(&ind["embedding"]),
        text: decode(&ind["prompt_embedding"]),
    };
    let mut pool: Vec<Member> = Vec::new();
    let mut initial_text = None;
    let mut tokens = 0u64;
    let mut generation = 0u64;
    let mut out = Vec::new();
    let snapshot = |pool: &[Member], initial: &[f64], tokens: u64| {
        let images: Vec<Vec<f64>> = pool.iter().map(|m| m.image.clone()).collect();
        let n = images.len();
        let mut dist = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                dist += 1.0 - cosine(&images[i], &images[j]);
            }
        }
        let min_nov = (0..n)
            .map(|i| novelty_oracle(&images, &images[i], k, Some(i)))
            .fold(f64::INFINITY, f64::min);
        let rel = pool.iter().map(|m| cosine(initial, &m.text)).sum::<f64>() / n as f64;
        (vendi_oracle(&images), dist / (n * (n - 1) / 2) as f64, min_nov, rel, tokens)
    };
    for line in events_jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let record: Value = serde_json::from_str(line).unwrap();
        match record["record"].as_str().unwrap() {
            "seed" => {
                let m = member(&record["individual"]);
                initial_text.get_or_insert_with(|| m.text.clone());
                pool.push(m);
            }
            _ => {
                let e = &record["event"];
                let g = e["generation"].as_u64().unwrap();
                if out.is_empty() {
                    out.push(snapshot(&pool, initial_text.as_ref().unwrap(), tokens));
                }
                if g != generation && generation > 0 {
                    out.push(snapshot(&pool, initial_text.as_ref().unwrap(), tokens));
                }
                generation = g;
                tokens += e["usage"]["prompt_tokens"].as_u64().unwrap() + e["usage"]["completion_tokens"].as_u64().unwrap();
                match e["outcome"]["result"].as_str().unwrap() {
                    "filled" => pool.push(member(&e["child"])),
                    "replaced" => {
                        let evicted = e["outcome"]["evicted"].as_u64().unwrap();
                        let slot = pool.iter().position(|m| m.id == evicted).unwrap();
                        pool[slot] = member(&e["child"]);
                    }
                    _ => {}
                }
            }
        }
    }
    out.push(snapshot(&pool, initial_text.as_ref().unwrap(), tokens));
    out
}
