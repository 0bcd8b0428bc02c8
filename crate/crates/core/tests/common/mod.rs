//! Shared fixtures and a dense reference implementation of the model.
//!
//! The reference works on plain `Vec<Vec<f64>>` matrices with explicit
//! adjacency and full attention matrices, and shares no code with the tape.

#![allow(dead_code)]

use hicqa::autodiff::Matrix;
use hicqa::corpus::{Capacity, Corpus, QaRecord, Sample};
use hicqa::graph::{HeteroGraph, NodeType, Relation};
use hicqa::model::{GatHead, HyperParams, Linear, ModelParams};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Dense = Vec<Vec<f64>>;

pub fn unit<R: Rng>(rng: &mut R, f: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..f).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A valid corpus with `sizes[i]` QAs in sample `i` and random unit embeddings.
pub fn random_corpus<R: Rng>(rng: &mut R, sizes: &[usize], f: usize) -> Corpus {
    let mut c = Corpus::new(f);
    for (i, &k) in sizes.iter().enumerate() {
        let sample_id = format!("s{i}");
        let qas = (0..k)
            .map(|j| QaRecord {
                qa_id: format!("{sample_id}-{j}"),
                question_text: format!("q{j}"),
                answer_text: format!("a{j}"),
                qa_embedding: unit(rng, f),
                nli_entailment: rng.random_range(0.0..=1.0),
                capacity_label: Capacity::from_index(rng.random_range(0..3)).unwrap(),
            })
            .collect();
        c.samples.push(Sample {
            sample_id,
            image_embedding: unit(rng, f),
            caption_embedding: unit(rng, f),
            caption_text: format!("caption {i}"),
            qas,
        });
    }
    c
}

/// Overwrites every parameter with N(0, scale²) draws, biases and norms included.
pub fn randomize<R: Rng>(params: &mut ModelParams<Matrix<f64>>, rng: &mut R, scale: f64) {
    params.visit_mut(|_, m| {
        for x in m.data_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

pub fn to_dense(m: &Matrix<f64>) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mm(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(a: &Dense) -> Dense {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

fn zeros(n: usize, d: usize) -> Dense {
    vec![vec![0.0; d]; n]
}

fn affine(x: &Dense, l: &Linear<Matrix<f64>>) -> Dense {
    let y = mm(x, &to_dense(&l.weight));
    match &l.bias {
        Some(b) => y.into_iter().map(|r| r.iter().zip(b.row(0)).map(|(v, c)| v + c).collect()).collect(),
        None => y,
    }
}

fn features(g: &HeteroGraph, t: NodeType) -> Dense {
    let table = g.nodes(t);
    (0..table.len()).map(|i| table.row(i).to_vec()).collect()
}

/// Adjacency `A[dst][src]` (edge count) and attribute `E[dst][src]`.
fn adjacency(g: &HeteroGraph, r: Relation) -> (Dense, Dense) {
    let rel = g.relation(r);
    let (n_src, n_dst) = (g.nodes(r.src_type()).len(), g.nodes(r.dst_type()).len());
    let mut a = zeros(n_dst, n_src);
    let mut e = zeros(n_dst, n_src);
    for (i, &(s, d)) in rel.edges.iter().enumerate() {
        a[d][s] += 1.0;
        if let Some(&v) = rel.edge_attr.get(i) {
            e[d][s] = v;
        }
    }
    (a, e)
}

fn sage(h_src: &Dense, h_dst: &Dense, a: &Dense, p: &hicqa::model::SageParams<Matrix<f64>>) -> Dense {
    let mut mean = mm(a, h_src);
    for (row, adj) in mean.iter_mut().zip(a) {
        let deg: f64 = adj.iter().sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|x| *x /= deg);
        }
    }
    relu(&add(&affine(h_dst, &p.w_self), &mm(&mean, &to_dense(&p.w_neigh))))
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Returns the output and, per head, the full `n_dst × n_src` attention matrix.
fn gat(
    h_src: &Dense,
    h_dst: &Dense,
    a: &Dense,
    e: &Dense,
    heads: &[GatHead<Matrix<f64>>],
    slope: f64,
) -> (Dense, Vec<Dense>) {
    let n_dst = h_dst.len();
    let n_src = h_src.len();
    let mut acc: Option<Dense> = None;
    let mut maps = Vec::new();
    for head in heads {
        let ps = affine(h_src, &head.w);
        let pd = affine(h_dst, &head.w);
        let d = ps.first().map_or(head.w.weight.cols(), |r| r.len());
        let att = head.att.data();
        let we = head.w_edge.row(0);
        let mut weights = zeros(n_dst, n_src);
        for u in 0..n_dst {
            let scores: Vec<Option<f64>> = (0..n_src)
                .map(|v| {
                    (a[u][v] > 0.0).then(|| {
                        (0..d)
                            .map(|k| {
                                att[k] * leaky(pd[u][k], slope)
                                    + att[d + k] * leaky(ps[v][k], slope)
                                    + att[2 * d + k] * leaky(we[k] * e[u][v], slope)
                            })
                            .sum::<f64>()
                    })
                })
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for v in 0..n_src {
                if let Some(s) = scores[v] {
                    weights[u][v] = (s - max).exp() / z;
                }
            }
        }
        let msg = mm(&weights, &ps);
        acc = Some(match acc {
            Some(t) => add(&t, &msg),
            None => msg,
        });
        maps.push(weights);
    }
    let k = heads.len() as f64;
    let out = acc.unwrap().into_iter().map(|r| r.into_iter().map(|x| (x / k).max(0.0)).collect()).collect();
    (out, maps)
}

fn layer_norm(x: &Dense, gamma: &Matrix<f64>, beta: &Matrix<f64>, eps: f64) -> Dense {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gamma.get(0, j) + beta.get(0, j)).collect()
        })
        .collect()
}

pub struct DenseOutput {
    pub hidden: Vec<Dense>,
    pub z_keep: Dense,
    pub z_cap: Dense,
    /// `(layer, relation, head) → n_dst × n_src` attention matrix.
    pub attention: Vec<(usize, Relation, usize, Dense)>,
}

/// Eval-mode forward pass.
pub fn dense_forward(g: &HeteroGraph, p: &ModelParams<Matrix<f64>>, hyper: &HyperParams) -> DenseOutput {
    let mut h: Vec<Dense> = NodeType::ALL.iter().map(|&t| affine(&features(g, t), &p.proj[t.index()])).collect();
    let mut attention = Vec::new();
    for (l, lp) in p.layers.iter().enumerate() {
        let mut fused: Vec<Option<Dense>> = vec![None, None, None];
        for r in Relation::ALL {
            let (a, e) = adjacency(g, r);
            let (hs, hd) = (&h[r.src_type().index()], &h[r.dst_type().index()]);
            let out = match r {
                Relation::DescribedBy => sage(hs, hd, &a, &lp.described_by),
                Relation::AskedAbout => sage(hs, hd, &a, &lp.asked_about),
                Relation::Supports => {
                    let (o, maps) = gat(hs, hd, &a, &e, &lp.supports, hyper.leaky_slope);
                    attention.extend(maps.into_iter().enumerate().map(|(k, m)| (l, r, k, m)));
                    o
                }
                Relation::Similar => {
                    let (o, maps) = gat(hs, hd, &a, &e, &lp.similar, hyper.leaky_slope);
                    attention.extend(maps.into_iter().enumerate().map(|(k, m)| (l, r, k, m)));
                    o
                }
            };
            let slot = &mut fused[r.dst_type().index()];
            *slot = Some(match slot.take() {
                Some(acc) => add(&acc, &out),
                None => out,
            });
        }
        h = NodeType::ALL
            .iter()
            .map(|&t| {
                let i = t.index();
                let pre = match &fused[i] {
                    Some(s) => add(&relu(s), &h[i]),
                    None => h[i].clone(),
                };
                layer_norm(&pre, &lp.norm[i].gamma, &lp.norm[i].beta, hyper.ln_eps)
            })
            .collect();
    }
    let qa = &h[NodeType::Qa.index()];
    let head = |m: &hicqa::model::Mlp<Matrix<f64>>| affine(&relu(&affine(qa, &m.hidden)), &m.out);
    DenseOutput { z_keep: head(&p.keep), z_cap: head(&p.cap), hidden: h, attention }
}

/// Largest `|a - b| / max(1, |b|)` over two equally shaped matrices.
pub fn max_scaled_diff(a: &Matrix<f64>, b: &Dense) -> f64 {
    assert_eq!(a.rows(), b.len(), "row count");
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        assert_eq!(a.cols(), row.len(), "column count");
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - v).abs() / v.abs().max(1.0));
        }
    }
    worst
}

/// A corpus whose keep signal is linearly separable: clean QAs lie close to
/// their image with high entailment, noisy ones point away with low
/// entailment. Returns the corpus and the clean flag of every QA in order.
pub fn separable_corpus(n_samples: usize, qas: usize, f: usize, seed: u64) -> (Corpus, Vec<bool>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut c = Corpus::new(f);
    let mut clean = Vec::new();
    for i in 0..n_samples {
        let image = unit(&mut rng, f);
        let sample_id = format!("s{i:03}");
        let qa_records = (0..qas)
            .map(|j| {
                let good = rng.random_bool(0.5);
                let sign = if good { 1.0 } else { -1.0 };
                let jitter = unit(&mut rng, f);
                let raw: Vec<f64> = image.iter().zip(&jitter).map(|(a, b)| sign * a + 0.3 * b).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                clean.push(good);
                QaRecord {
                    qa_id: format!("{sample_id}-{j}"),
                    question_text: "q".into(),
                    answer_text: "a".into(),
                    qa_embedding: raw.iter().map(|x| x / n).collect(),
                    nli_entailment: if good { rng.random_range(0.8..=1.0) } else { rng.random_range(0.0..=0.2) },
                    capacity_label: Capacity::from_index(j % 3).unwrap(),
                }
            })
            .collect();
        c.samples.push(Sample {
            sample_id,
            image_embedding: image.clone(),
            caption_embedding: unit(&mut rng, f),
            caption_text: "caption".into(),
            qas: qa_records,
        });
    }
    (c, clean)
}
