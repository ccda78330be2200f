// Temporary diagnostic scaffold; not part of the suite.
use headatlas_core::corpus::Vocab;
use headatlas_core::model::{forward, load_checkpoint, InterventionSpec};
use headatlas_core::provenance::logit_lens_score;
use std::path::Path;

#[test]
#[ignore]
fn diag_retrieval_heads() {
    let dir = std::env::var("DIAG_DIR").unwrap_or_else(|_| "/tmp/cal4".into());
    let weights = load_checkpoint(Path::new(&format!("{dir}/model.ckpt"))).unwrap();
    let vocab = Vocab::build();
    let sets: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{dir}/head_sets.json")).unwrap())
            .unwrap();
    let ret: Vec<(usize, usize)> = sets["data"]["retrieval"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| (h[0].as_u64().unwrap() as usize, h[1].as_u64().unwrap() as usize))
        .collect();
    println!("retrieval heads: {ret:?}");

    let text = std::fs::read_to_string(format!("{dir}/qa_eval_oracle.jsonl")).unwrap();
    let dh = weights.config.model_dim / weights.config.n_heads;
    for line in text.lines().filter(|l| l.contains("\"mode\"")).take(3) {
        let ex: serde_json::Value = serde_json::from_str(line).unwrap();
        let prompt: Vec<usize> = ex["prompt"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_u64().unwrap() as usize)
            .collect();
        let jr = (
            ex["j_ret"][0].as_u64().unwrap() as usize,
            ex["j_ret"][1].as_u64().unwrap() as usize,
        );
        let words: Vec<String> =
            prompt.iter().map(|&t| vocab.word(t).unwrap().to_string()).collect();
        println!("\n=== prompt: {}", words.join(" "));
        println!("value span {jr:?} = {}", words[jr.0..jr.1].join(" "));
        let trace = forward(&weights, &prompt, &InterventionSpec::none(), true).unwrap();
        let last = prompt.len() - 1;
        for &(l, h) in &ret {
            let row = trace.attn_row(l, h, last);
            let mut idx: Vec<usize> = (0..=last).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let top: Vec<String> = idx[..3]
                .iter()
                .map(|&j| format!("{}@{j}:{:.2}", words[j], row[j]))
                .collect();
            let mut copy_hits = 0usize;
            let mut n = 0usize;
            for j in jr.0..jr.1 {
                let v = &trace.layers[l].v
                    [(h * prompt.len() + j) * dh..(h * prompt.len() + j + 1) * dh];
                let own = logit_lens_score(&weights, l, h, v, prompt[j]).unwrap_or(0.0);
                let mut better = 0;
                for t in 0..vocab.size() {
                    if t != prompt[j]
                        && logit_lens_score(&weights, l, h, v, t).unwrap_or(f64::MIN) > own
                    {
                        better += 1;
                    }
                }
                if better == 0 {
                    copy_hits += 1;
                }
                n += 1;
            }
            println!(
                "L{l}H{h}: top attn {} | OV copy top-1 {}/{}",
                top.join(" "),
                copy_hits,
                n
            );
        }
    }
}
