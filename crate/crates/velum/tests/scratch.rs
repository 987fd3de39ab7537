// Temporary tuning harness; removed before finalizing.
use std::sync::Arc;
use std::time::Instant;

use velum::experiments::{
    DatastoreSel, EncoderSel, Lab, LabSpec, SanitizeKind, ScenarioConfig,
};

fn lab_spec() -> LabSpec {
    LabSpec::default()
}

#[test]
#[ignore]
fn probe_lab() {
    let t0 = Instant::now();
    let spec = lab_spec();
    let lab = Lab::new(spec).unwrap();
    println!(
        "lab built in {:?}: |V|={} priv_train={} pub_train={} valid={} eval={}",
        t0.elapsed(),
        lab.vocab.len(),
        lab.private_train.len(),
        lab.public_train.len(),
        lab.private_valid.len(),
        lab.private_eval.len(),
    );
    let t1 = Instant::now();
    let public = lab.encoder(&EncoderSel::Public).unwrap();
    println!("public encoder in {:?}", t1.elapsed());
    let t2 = Instant::now();
    let private = lab.encoder(&EncoderSel::Private).unwrap();
    println!("private encoder in {:?}", t2.elapsed());

    // Utility sanity: perplexity of eval split under each encoder.
    let eval_ppl = |params: &Arc<velum::lm::LmParams>| -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for doc in &lab.private_eval.documents {
            if doc.tokens.is_empty() {
                continue;
            }
            total += params.sequence_perplexity(&doc.tokens).unwrap();
            n += 1;
        }
        total / n as f64
    };
    println!("eval ppl public={:.2} private={:.2}", eval_ppl(&public), eval_ppl(&private));

    let t3 = Instant::now();
    let ds = lab
        .datastore(&DatastoreSel::Private, &EncoderSel::Private)
        .unwrap();
    println!("private datastore {} entries in {:?}", ds.len(), t3.elapsed());

    for (name, cfg) in [
        (
            "pub-enc none",
            ScenarioConfig::new("a", EncoderSel::Public, DatastoreSel::None),
        ),
        (
            "priv-enc none",
            ScenarioConfig::new("b", EncoderSel::Private, DatastoreSel::None),
        ),
        (
            "priv-enc priv-ds",
            ScenarioConfig::new("c", EncoderSel::Private, DatastoreSel::Private),
        ),
        (
            "sanitized both",
            ScenarioConfig::new(
                "d",
                EncoderSel::Sanitized(SanitizeKind::EndOfText),
                DatastoreSel::Sanitized(SanitizeKind::EndOfText),
            ),
        ),
        ("priv-enc pub-ds", {
            ScenarioConfig::new("e", EncoderSel::Private, DatastoreSel::Public)
        }),
    ] {
        let t = Instant::now();
        let report = lab.run_scenario(&cfg).unwrap();
        println!(
            "{name}: eval_ppl={:.2} targeted={} (p{} e{} u{}) untargeted_good={} k={} l={} [{:?}]",
            report.eval_ppl,
            report.targeted_total,
            report.targeted_phone,
            report.targeted_email,
            report.targeted_url,
            report.untargeted_good,
            report.chosen_k,
            report.chosen_lambda,
            t.elapsed(),
        );
    }
    println!("total {:?}", t0.elapsed());
}
