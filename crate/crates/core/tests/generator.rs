use ndarray::Array2;
use proptest::prelude::*;
use semrec::decoder::{beam_search, CatalogTrie};
use semrec::generator::*;
use semrec::optim::Parameters;
use semrec::rqvae::SemanticId;
use semrec::Error;

fn tiny_cfg() -> GeneratorConfig {
    GeneratorConfig {
        n_layers: 2,
        n_heads: 2,
        width: 8,
        ffn_mult: 2,
        max_len: 16,
        lr: 1e-2,
        epochs: 1,
        batch: 4,
        seed: 3,
        init_std: 0.3,
        ..GeneratorConfig::default()
    }
}

fn tiny(seed: u64) -> Generator<f64> {
    Generator::new(VocabSpec::new(2, 3), &GeneratorConfig { seed, ..tiny_cfg() }).unwrap()
}

#[test]
fn prompt_token_formula() {
    let vocab = VocabSpec::new(2, 3);
    let p = build_prompt(&[SemanticId { item_id: 0, tokens: vec![0, 2] }], &vocab, 64).unwrap();
    assert_eq!(p.token_ids, vec![1, 2, 7]);
    let two = build_prompt_codes(&[&[0, 1], &[2, 2]], &vocab, 64).unwrap();
    assert_eq!(two.token_ids.len(), 5);
    let cut = build_prompt_codes(&[&[0, 0], &[1, 1], &[2, 1]], &vocab, 3).unwrap();
    assert_eq!(cut.token_ids, vec![1, 2 + 2, 2 + 3 + 1]);
    assert!(build_prompt_codes(&[], &vocab, 10).is_err());
    assert_eq!(vocab.size(), 8);
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut m = tiny(1);
    m.w_out.fill(0.0);
    m.b_out.fill(0.0);
    let batch = vec![Sequence::full(vec![1, 2, 6, 3, 7])];
    let loss = ntp_loss(&m, &batch).unwrap();
    assert!((loss - (8.0f64).ln()).abs() < 1e-12);
}

#[test]
fn delta_distribution_gives_near_zero_loss() {
    let mut m = tiny(1);
    m.w_out.fill(0.0);
    m.b_out.fill(0.0);
    m.b_out[5] = 60.0;
    let loss = ntp_loss(&m, &[Sequence::full(vec![1, 5, 5, 5])]).unwrap();
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn fully_masked_batch_is_an_error() {
    let m = tiny(1);
    assert!(ntp_loss(&m, &[Sequence::full(vec![1, PAD, PAD])]).is_err());
    assert!(ntp_loss(&m, &[Sequence { tokens: vec![1, 2, 3], loss_from: 3 }]).is_err());
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn gradients_match_finite_differences() {
    let m = tiny(5);
    let batch = vec![
        Sequence::full(vec![1, 2, 6, 4, 7, 3]),
        Sequence { tokens: vec![1, 4, 5, 2, 6], loss_from: 3 },
    ];
    let mut g = m.zeros_like();
    ntp_loss_and_grad(&m, &batch, &mut g).unwrap();
    let h = 1e-6;
    for (t, (name, _)) in m.tensor_specs().iter().enumerate() {
        let analytic = g.tensors()[t].to_vec();
        let mut fd = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let mut p = m.clone();
            p.tensors_mut()[t][j] += h;
            let mut q = m.clone();
            q.tensors_mut()[t][j] -= h;
            fd.push((ntp_loss(&p, &batch).unwrap() - ntp_loss(&q, &batch).unwrap()) / (2.0 * h));
        }
        if analytic.iter().all(|&v| v == 0.0) {
            assert!(fd.iter().all(|v| v.abs() < 1e-8), "{name}");
            continue;
        }
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-3, "{name}: relative error {e}");
    }
}

#[test]
fn logprobs_normalised_and_repeatable() {
    let m = Generator::<f32>::new(VocabSpec::new(2, 3), &tiny_cfg()).unwrap();
    let a = m.next_token_logprobs(&[1, 2, 6]).unwrap();
    let b = m.next_token_logprobs(&[1, 2, 6]).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let total: f64 = a.iter().map(|&v| (v as f64).exp()).sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert!(matches!(m.next_token_logprobs(&[1; 16]), Err(Error::Overlength { .. })));
}

/// Straightforward double-precision re-implementation of the forward pass.
fn oracle_logits(m: &Generator<f64>, tokens: &[u32]) -> Vec<f64> {
    let d = m.width();
    let nh = m.n_heads;
    let dh = d / nh;
    let n = tokens.len();
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64;
        x.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
    };
    let matvec = |x: &[f64], w: &Array2<f64>, b: &[f64]| -> Vec<f64> {
        (0..w.ncols()).map(|c| b[c] + (0..w.nrows()).map(|r| x[r] * w[[r, c]]).sum::<f64>()).collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| m.tok_emb[[tokens[i] as usize, j]] + m.pos_emb[[i, j]]).collect())
        .collect();
    for blk in &m.blocks {
        let a: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, blk.ln1_g.as_slice().unwrap(), blk.ln1_b.as_slice().unwrap())).collect();
        let qkv: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, &blk.w_qkv, blk.b_qkv.as_slice().unwrap())).collect();
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..nh {
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|t| qkv[i][h * dh + t] * qkv[j][d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - mx).exp() / z;
                    for t in 0..dh {
                        att[i][h * dh + t] += p * qkv[j][2 * d + h * dh + t];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&att[i], &blk.w_o, blk.b_o.as_slice().unwrap());
            for j in 0..d {
                xs[i][j] += o[j];
            }
            let b = ln(&xs[i], blk.ln2_g.as_slice().unwrap(), blk.ln2_b.as_slice().unwrap());
            let hid: Vec<f64> = matvec(&b, &blk.w_1, blk.b_1.as_slice().unwrap()).into_iter().map(gelu).collect();
            let f = matvec(&hid, &blk.w_2, blk.b_2.as_slice().unwrap());
            for j in 0..d {
                xs[i][j] += f[j];
            }
        }
    }
    let last = ln(&xs[n - 1], m.lnf_g.as_slice().unwrap(), m.lnf_b.as_slice().unwrap());
    let logits = matvec(&last, &m.w_out, m.b_out.as_slice().unwrap());
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[test]
fn logprobs_match_reference_forward() {
    let m = tiny(9);
    let prefix = [1, 3, 6, 2, 5];
    let got = m.next_token_logprobs(&prefix).unwrap();
    let want = oracle_logits(&m, &prefix);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let m = tiny(4);
    let toks = [1, 2, 6, 4, 7, 3, 5];
    let (logits, _) = m.forward(&toks).unwrap();
    let mut st = m.start();
    for (i, &t) in toks.iter().enumerate() {
        m.extend(&mut st, t).unwrap();
        for (a, b) in st.logits().iter().zip(logits.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_order_does_not_change_loss() {
    let m = tiny(2);
    let a = vec![Sequence::full(vec![1, 2, 6]), Sequence::full(vec![1, 4, 5, 3, 7]), Sequence::full(vec![1, 3, 7])];
    let mut b = a.clone();
    b.reverse();
    let la = ntp_loss(&m, &a).unwrap();
    let lb = ntp_loss(&m, &b).unwrap();
    assert!((la - lb).abs() < 1e-12);
}

#[test]
fn memorizes_fixed_patterns() {
    // Ten users, each with a fixed history whose next item must be recalled.
    let vocab = VocabSpec::new(2, 8);
    let n_items = 40u32;
    let ids: Vec<SemanticId> = (0..n_items).map(|i| SemanticId { item_id: i, tokens: vec![i / 8, i % 8] }).collect();
    let table = IdTable::new(&ids, vocab).unwrap();
    let users: Vec<Vec<u32>> = (0..10u32).map(|u| (0..4).map(|j| (u * 7 + j * 13 + u * j) % n_items).collect()).collect();
    let train: Vec<Sequence> = users.iter().map(|h| Sequence::full(table.prompt(h, 64).unwrap().token_ids)).collect();
    let cfg = GeneratorConfig { n_layers: 2, n_heads: 2, width: 32, ffn_mult: 2, max_len: 16, lr: 1e-2, epochs: 150, batch: 10, seed: 1, init_std: 0.1, ..GeneratorConfig::default() };
    let out = train_on_sequences::<f32>(vocab, &train, &[], &cfg).unwrap();
    let trie = CatalogTrie::build(&ids).unwrap();
    for h in &users {
        let prompt = table.prompt(&h[..3], 16).unwrap();
        let best = beam_search(&out.model, &prompt, &trie, 1).unwrap();
        assert_eq!(best[0].item, h[3], "history {h:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let vocab = VocabSpec::new(2, 3);
    let seqs = vec![Sequence::full(vec![1, 2, 6, 3, 7]), Sequence::full(vec![1, 4, 5, 2, 5])];
    let valid = vec![Sequence { tokens: vec![1, 2, 6, 4, 5], loss_from: 3 }];
    let cfg = GeneratorConfig { epochs: 4, ..tiny_cfg() };
    let a = train_on_sequences::<f32>(vocab, &seqs, &valid, &cfg).unwrap();
    let b = train_on_sequences::<f32>(vocab, &seqs, &valid, &cfg).unwrap();
    let trace = |o: &GeneratorOutcome<f32>| o.history.iter().map(|e| e.val_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(trace(&a), trace(&b));
    assert_eq!(a.model, b.model);
    let best = a.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, best);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Generator::<f32>::new(VocabSpec::new(2, 3), &tiny_cfg()).unwrap();
    m.save(dir.path(), 3, 0, 1.5).unwrap();
    assert_eq!(Generator::<f32>::load(dir.path()).unwrap(), m);
}

proptest! {
    #[test]
    fn token_ids_roundtrip(m in 1u32..9, k in 1u32..600, a in 0u32..1000, b in 0u32..1000) {
        let v = VocabSpec::new(m, k);
        let level = a % m + 1;
        let code = b % k;
        let t = v.token_id(level, code);
        prop_assert!(t >= 2 && (t as usize) < v.size());
        prop_assert_eq!(v.decode(t), Some((level, code)));
    }

    #[test]
    fn truncation_keeps_whole_items(len in 1usize..12, max_len in 3usize..30) {
        let vocab = VocabSpec::new(2, 5);
        let hist: Vec<Vec<u32>> = (0..len).map(|i| vec![(i % 5) as u32, ((i * 3) % 5) as u32]).collect();
        let refs: Vec<&[u32]> = hist.iter().map(|h| h.as_slice()).collect();
        let p = build_prompt_codes(&refs, &vocab, max_len).unwrap();
        prop_assert!(p.token_ids.len() <= max_len);
        prop_assert_eq!((p.token_ids.len() - 1) % 2, 0);
        let kept = (p.token_ids.len() - 1) / 2;
        for (j, chunk) in p.token_ids[1..].chunks(2).enumerate() {
            let want = &hist[len - kept + j];
            prop_assert_eq!(vocab.decode(chunk[0]), Some((1, want[0])));
            prop_assert_eq!(vocab.decode(chunk[1]), Some((2, want[1])));
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits(t in 1usize..7, tok in 0u32..8, seed in 0u64..20) {
        let m = tiny(seed);
        let a = vec![1u32, 2, 6, 4, 7, 3, 5, 2];
        let mut b = a.clone();
        for x in b.iter_mut().skip(t + 1) {
            *x = tok;
        }
        let (la, _) = m.forward(&a).unwrap();
        let (lb, _) = m.forward(&b).unwrap();
        for i in 0..=t {
            for (x, y) in la.row(i).iter().zip(lb.row(i)) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
