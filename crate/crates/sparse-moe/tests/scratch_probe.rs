use sparse_moe::harness::checkpoint;
use sparse_moe::harness::{Corpus, ModelParams, Phase};
use sparse_moe::kernel::softplus;
use sparse_moe::Tape;
use std::path::Path;

#[test]
#[ignore]
fn probe() {
    let path = std::env::var("PROBE_CKPT").unwrap();
    let (cfg, entries) = checkpoint::load(Path::new(&path)).unwrap();
    let params = ModelParams::from_named(&cfg, entries).unwrap();
    let corpus = Corpus::load(
        &cfg.corpus,
        cfg.vocab_size,
        cfg.seed,
        cfg.train_tokens,
        cfg.eval_tokens,
    )
    .unwrap();
    let batch = corpus.eval_batch(cfg.context_len, cfg.batch_size, 0).unwrap();

    // Rebuild h0 and the clean gate logits by hand.
    let mut tape = Tape::new();
    let embp = tape_param(&mut tape, &params.embed);
    let wencp = tape_param(&mut tape, &params.w_enc);
    let wgp = tape_param(&mut tape, &params.moe.w_gate);
    let wnp = tape_param(&mut tape, &params.moe.w_noise);
    let emb = tape.embed_window(embp, &batch.ids, cfg.context_len).unwrap();
    let enc = tape.matmul(emb, wencp).unwrap();
    let h0 = tape.tanh(enc);
    let clean = tape.matmul(h0, wgp).unwrap();
    let raw_noise = tape.matmul(h0, wnp).unwrap();
    let cleanv = tape.value(clean).clone();
    let rawv = tape.value(raw_noise).clone();

    let (rows, n) = cleanv.shape();
    let mut col_means = vec![0.0; n];
    for r in 0..rows {
        for j in 0..n {
            col_means[j] += cleanv.at(r, j) / rows as f64;
        }
    }
    let mut sorted = col_means.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("clean logit column means (desc): {sorted:.3?}");

    let mut gap45 = 0.0;
    let mut spread = 0.0;
    for r in 0..rows {
        let mut row: Vec<f64> = (0..n).map(|j| cleanv.at(r, j)).collect();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        gap45 += (row[3] - row[4]) / rows as f64;
        spread += (row[0] - row[n - 1]) / rows as f64;
    }
    println!("mean per-row clean gap 4th->5th: {gap45:.3}, mean top-to-bottom spread: {spread:.3}");

    let mut sd = Vec::new();
    for r in 0..rows {
        for j in 0..n {
            sd.push(softplus(rawv.at(r, j)));
        }
    }
    sd.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "stddev quantiles: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3}",
        sd[0],
        sd[sd.len() / 4],
        sd[sd.len() / 2],
        sd[3 * sd.len() / 4],
        sd[sd.len() - 1]
    );

    // Actual eval-phase forward for gates + load, noise off at eval.
    let mut t2 = Tape::new();
    let n2 = sparse_moe::harness::model::register(&params, &mut t2).unwrap();
    let out =
        sparse_moe::harness::model::forward(&mut t2, &n2, &cfg, &params.thresholds, &batch, Phase::Eval)
            .unwrap();
    let gates = t2.value(out.gates);
    let mut imp = vec![0.0; n];
    for r in 0..rows {
        for j in 0..n {
            imp[j] += gates.at(r, j);
        }
    }
    let mut imps = imp.clone();
    imps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("importance (desc): {imps:.2?}");
}

fn tape_param(t: &mut Tape, m: &sparse_moe::Matrix) -> sparse_moe::kernel::NodeId {
    t.param(m.clone())
}
