use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use semrec::optim::{gaussian_matrix, rng_from_seed, Parameters};
use semrec::rqvae::*;
use semrec::Error;

fn small_cfg() -> RqVaeConfig {
    RqVaeConfig {
        n_levels: 2,
        codebook_size: 4,
        hidden: 5,
        latent: 3,
        lr: 1e-3,
        epochs: 3,
        batch: 8,
        seed: 7,
        ..RqVaeConfig::default()
    }
}

fn clustered(n: usize, dim: usize, clusters: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    let centers: Array2<f64> = gaussian_matrix(&mut rng, clusters, dim, 1.0);
    let mut x: Array2<f64> = gaussian_matrix(&mut rng, n, dim, 0.1);
    for i in 0..n {
        let c = i % clusters;
        let mut row = x.row_mut(i);
        row += &centers.row(c);
    }
    x
}

#[test]
fn quantize_hand_example() {
    let cb = Codebook::new(1, array![[0.0f64, 0.0], [1.0, 1.0]]);
    let q = quantize(array![0.9, 1.2].view(), &[cb]);
    assert_eq!(q.codes, vec![1]);
    assert!((q.residual[0] + 0.1).abs() < 1e-12 && (q.residual[1] - 0.2).abs() < 1e-12);
    assert_eq!(q.residual_norms.len(), 2);
}

#[test]
fn quantize_exact_code_leaves_zero_residual() {
    let cb = Codebook::new(1, array![[0.5f32, -1.0], [2.0, 3.0]]);
    let q = quantize(array![2.0f32, 3.0].view(), &[cb]);
    assert_eq!(q.residual, array![0.0f32, 0.0]);
    assert_eq!(q.quantized, array![2.0f32, 3.0]);
}

#[test]
fn quantize_tie_takes_lowest_index() {
    let vectors = array![[5.0, 5.0], [6.0, 6.0], [1.0, 0.0], [7.0, 7.0], [8.0, 8.0], [-1.0, 0.0]];
    let q = quantize(array![0.0, 0.0].view(), &[Codebook::new(1, vectors)]);
    assert_eq!(q.codes, vec![2]);
}

#[test]
fn telescoping_identity_is_exact_in_double() {
    let mut rng = rng_from_seed(3);
    let books: Vec<Codebook<f64>> = (0..4)
        .map(|m| {
            let v: Array2<f32> = gaussian_matrix(&mut rng, 16, 8, 1.0 / (m + 1) as f64);
            Codebook::new(m + 1, v.mapv(f64::from))
        })
        .collect();
    for _ in 0..1000 {
        let z: Array1<f64> = (0..8).map(|_| rng.random_range(-2.0f32..2.0) as f64).collect();
        let q = quantize(z.view(), &books);
        let lhs = &z - &q.quantized;
        for (a, b) in lhs.iter().zip(q.residual.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

/// Encoder and decoder that compute the identity through the ReLU.
fn identity_mlp(d: usize) -> Mlp<f64> {
    let eye = Array2::<f64>::eye(d);
    let mut w1 = Array2::zeros((d, 2 * d));
    w1.slice_mut(ndarray::s![.., ..d]).assign(&eye);
    w1.slice_mut(ndarray::s![.., d..]).assign(&(-&eye));
    let mut w2 = Array2::zeros((2 * d, d));
    w2.slice_mut(ndarray::s![..d, ..]).assign(&eye);
    w2.slice_mut(ndarray::s![d.., ..]).assign(&(-&eye));
    Mlp { w1, b1: Array1::zeros(2 * d), w2, b2: Array1::zeros(d) }
}

fn model_with_books(books: Vec<Array2<f64>>, d: usize) -> RqVae<f64> {
    RqVae {
        encoder: identity_mlp(d),
        decoder: identity_mlp(d),
        codebooks: books.into_iter().enumerate().map(|(m, b)| Codebook::new(m as u32 + 1, b)).collect(),
        lambda_q: 0.25,
        lambda_d: 0.01,
        beta_commit: 0.25,
        tau: 1.0,
    }
}

#[test]
fn perfect_autoencoder_has_zero_recon_and_quant() {
    let x = array![[1.0, 2.0], [-1.0, 0.5]];
    let model = model_with_books(vec![x.clone()], 2);
    let parts = model.loss_total(x.view());
    assert_eq!(parts.recon, 0.0);
    assert_eq!(parts.quant, 0.0);
}

#[test]
fn uniform_soft_usage_gives_minimum_diversity() {
    let book = Array2::<f64>::ones((4, 2));
    let model = model_with_books(vec![book.clone(), book], 2);
    let x = array![[0.3, -0.2], [1.0, 1.0], [4.0, 0.0]];
    let parts = model.loss_total(x.view());
    assert!((parts.div - 2.0 * -(4.0f64).ln()).abs() < 1e-12);
    assert!((neg_entropy(&[0.25; 4]) + 1.3863).abs() < 1e-4);
    assert_eq!(neg_entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
    let empty = model.loss_total(Array2::<f64>::zeros((0, 2)).view());
    assert_eq!(empty.div, 0.0);
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / n
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = RqVaeConfig { lambda_d: 0.5, ..small_cfg() };
    let mut model = RqVae::<f64>::new(6, &cfg).unwrap();
    let x = clustered(3, 6, 3, 11);
    init_codebooks(&mut model, &FixedInputs(x.view()), &cfg);
    // spread codes so soft assignments are not saturated
    let mut rng = rng_from_seed(5);
    for cb in model.codebooks.iter_mut() {
        cb.vectors += &gaussian_matrix::<f64, _>(&mut rng, 4, 3, 0.5);
    }
    let frozen = model.freeze(x.view());
    let mut grads = model.zeros_like();
    let (_, dx, _) = model.loss_and_grad(x.view(), &mut grads);
    let analytic = grads.tensors();
    let h = 1e-6;
    for (t, name) in model.tensor_specs().iter().enumerate() {
        let mut fd = Vec::new();
        for j in 0..analytic[t].len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][j] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t][j] -= h;
            fd.push((plus.surrogate_loss(x.view(), &frozen).total - minus.surrogate_loss(x.view(), &frozen).total) / (2.0 * h));
        }
        let e = rel_err(analytic[t], &fd);
        assert!(e < 1e-4, "{} relative error {e}", name.0);
    }
    let mut fd = Vec::new();
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[idx] -= h;
        fd.push((model.surrogate_loss(xp.view(), &frozen).total - model.surrogate_loss(xm.view(), &frozen).total) / (2.0 * h));
    }
    assert!(rel_err(dx.as_slice().unwrap(), &fd) < 1e-4);
}

#[test]
fn straight_through_passes_recon_gradient_unchanged() {
    // Under a frozen quantization the decoder input is z + const, so the
    // recon gradient w.r.t. the encoder output equals the gradient w.r.t.
    // the decoder input.
    let cfg = RqVaeConfig { lambda_q: 0.0, lambda_d: 0.0, ..small_cfg() };
    let model = RqVae::<f64>::new(4, &cfg).unwrap();
    let x = clustered(2, 4, 2, 1);
    let frozen = model.freeze(x.view());
    let z = model.encode(x.view());
    let dec_in = &z + &frozen.delta;
    let h = 1e-6;
    for i in 0..2 {
        for j in 0..3 {
            let mut dp = dec_in.clone();
            dp[[i, j]] += h;
            let mut dm = dec_in.clone();
            dm[[i, j]] -= h;
            let recon = |d: &Array2<f64>| {
                let xh = model.decode(d.view());
                (&x - &xh).mapv(|v| v * v).sum() / 2.0
            };
            let ddec = (recon(&dp) - recon(&dm)) / (2.0 * h);
            let mut zp = z.clone();
            zp[[i, j]] += h;
            let mut zm = z.clone();
            zm[[i, j]] -= h;
            let dz = (recon(&(&zp + &frozen.delta)) - recon(&(&zm + &frozen.delta))) / (2.0 * h);
            assert!((ddec - dz).abs() < 1e-8);
        }
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let x = clustered(64, 8, 4, 2);
    let cfg = RqVaeConfig { n_levels: 2, codebook_size: 8, hidden: 16, latent: 4, lr: 3e-3, epochs: 30, batch: 16, ..small_cfg() };
    let a = train_rqvae(&mut FixedInputs(x.view()), &cfg).unwrap();
    let b = train_rqvae(&mut FixedInputs(x.view()), &cfg).unwrap();
    assert_eq!(a.model, b.model);
    let first = a.history.first().unwrap().loss.recon;
    let last = a.history.last().unwrap().loss.recon;
    assert!(last < first, "recon {first} -> {last}");
    assert!(a.aborted.is_none());
}

#[test]
fn non_finite_input_aborts_with_finite_state() {
    let mut x = clustered(16, 4, 2, 2);
    let cfg = RqVaeConfig { codebook_size: 2, epochs: 2, ..small_cfg() };
    x[[3, 1]] = f64::NAN;
    let out = train_rqvae(&mut FixedInputs(x.view()), &cfg).unwrap();
    assert!(out.aborted.is_some());
    assert!(out.model.all_finite());
}

#[test]
fn kmeans_recovers_separated_clusters() {
    let pts = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0], [-10.0, 5.0], [-10.1, 5.0]];
    let mut rng = rng_from_seed(0);
    let c = kmeans(pts.view(), 3, 10, &mut rng);
    let mut xs: Vec<f64> = c.column(0).to_vec();
    xs.sort_by(f64::total_cmp);
    assert!((xs[0] + 10.05).abs() < 1e-9 && (xs[1] - 0.05).abs() < 1e-9 && (xs[2] - 10.05).abs() < 1e-9);
}

#[test]
fn identical_items_differ_only_at_last_level() {
    let cfg = RqVaeConfig { n_levels: 3, codebook_size: 8, hidden: 8, latent: 4, ..small_cfg() };
    let model = RqVae::<f64>::new(5, &cfg).unwrap();
    let row = Array2::from_shape_fn((1, 5), |(_, j)| j as f64 * 0.3 - 0.5);
    let x = ndarray::concatenate(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
    let ids = assign_ids(x.view(), &model).unwrap();
    check_bijection(&ids).unwrap();
    assert_eq!(ids[0].tokens[..2], ids[1].tokens[..2]);
    assert_eq!(ids[1].tokens[..2], ids[2].tokens[..2]);
    assert_ne!(ids[0].tokens[2], ids[1].tokens[2]);
    assert_ne!(ids[1].tokens[2], ids[2].tokens[2]);
    let single = assign_ids(x.slice(ndarray::s![..1, ..]), &model).unwrap();
    assert_eq!(single[0].tokens, ids[0].tokens);
}

#[test]
fn collision_exhaustion_reports_cluster_size() {
    let cfg = RqVaeConfig { n_levels: 2, codebook_size: 2, ..small_cfg() };
    let model = RqVae::<f64>::new(3, &cfg).unwrap();
    let x = Array2::<f64>::ones((3, 3));
    match assign_ids(x.view(), &model) {
        Err(Error::CollisionExhausted { colliding, k, .. }) => {
            assert_eq!((colliding, k), (3, 2));
        }
        other => panic!("expected collision error, got {other:?}"),
    }
}

#[test]
fn synthetic_catalog_gets_unique_ids() {
    let x = clustered(200, 16, 8, 9).mapv(|v| v as f32);
    let cfg = RqVaeConfig { n_levels: 4, codebook_size: 32, hidden: 32, latent: 8, lr: 1e-3, epochs: 5, batch: 50, ..small_cfg() };
    let out = train_rqvae(&mut FixedInputs(x.view()), &cfg).unwrap();
    let ids = assign_ids(x.view(), &out.model).unwrap();
    assert_eq!(ids.len(), 200);
    check_bijection(&ids).unwrap();
}

#[test]
fn csv_and_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ids = vec![
        SemanticId { item_id: 0, tokens: vec![3, 1, 4] },
        SemanticId { item_id: 1, tokens: vec![1, 5, 9] },
    ];
    let p = dir.path().join("ids.csv");
    write_semantic_ids(&p, &ids).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("item_id,c1,c2,c3\n0,3,1,4\n"));
    assert_eq!(read_semantic_ids(&p).unwrap(), ids);

    let model = RqVae::<f32>::new(6, &small_cfg()).unwrap();
    model.save(&dir.path().join("tok"), 7).unwrap();
    let back = RqVae::<f32>::load(&dir.path().join("tok")).unwrap();
    assert_eq!(back, model);
}

#[test]
fn bad_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ids.csv");
    std::fs::write(&p, "item_id,c1,c2\n0,1,2\n1,x,2\n").unwrap();
    let err = read_semantic_ids(&p).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
}

#[test]
fn perplexity_bounds() {
    let uniform: Vec<Vec<u32>> = (0..8).map(|i| vec![i % 4]).collect();
    assert!((code_perplexity(&uniform, 0, 4) - 4.0).abs() < 1e-12);
    let single: Vec<Vec<u32>> = vec![vec![2]; 5];
    assert!((code_perplexity(&single, 0, 4) - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn div_is_bounded(seed in 0u64..200, b in 1usize..6) {
        let cfg = RqVaeConfig { n_levels: 3, codebook_size: 5, ..small_cfg() };
        let mut model = RqVae::<f64>::new(4, &cfg).unwrap();
        model.codebooks.iter_mut().for_each(|c| c.vectors.mapv_inplace(|v| v * 10.0));
        let x = clustered(b, 4, 2, seed);
        let div = model.loss_total(x.view()).div;
        prop_assert!(div <= 1e-12);
        prop_assert!(div >= -3.0 * (5.0f64).ln() - 1e-9);
    }

    #[test]
    fn extra_level_with_zero_code_never_increases_residual(seed in 0u64..500) {
        let mut rng = rng_from_seed(seed);
        let mut books: Vec<Codebook<f64>> = (0..2)
            .map(|m| Codebook::new(m + 1, gaussian_matrix(&mut rng, 6, 3, 1.0)))
            .collect();
        let z: Array2<f64> = gaussian_matrix(&mut rng, 1, 3, 2.0);
        let before = quantize(z.row(0), &books);
        let mut extra: Array2<f64> = gaussian_matrix(&mut rng, 6, 3, 1.0);
        extra.row_mut(4).fill(0.0);
        books.push(Codebook::new(3, extra));
        let after = quantize(z.row(0), &books);
        prop_assert!(after.residual_norms[3] <= before.residual_norms[2]);
        prop_assert_eq!(&after.codes[..2], &before.codes[..]);
    }

    #[test]
    fn assign_ids_is_bijective(seed in 0u64..40, n in 1usize..40) {
        let cfg = RqVaeConfig { n_levels: 2, codebook_size: 40, hidden: 6, latent: 3, seed, ..small_cfg() };
        let model = RqVae::<f64>::new(4, &cfg).unwrap();
        let x = clustered(n, 4, 3, seed);
        let ids = assign_ids(x.view(), &model).unwrap();
        let set: std::collections::HashSet<_> = ids.iter().map(|i| i.tokens.clone()).collect();
        prop_assert_eq!(set.len(), n);
    }
}
