//! Caption scores recomputed by brute force: each caption gets its own fresh
//! forward pass and a full backward sweep, then plain-loop inner products.
//! Nothing is shared with the library's stop-node path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use relcap::data::{EncodedExample, END, PAD, START};
use relcap::model::{Model, ModelConfig};
use relcap::selection;

const MAX_QUESTION: usize = 8;

fn random_example(
    rng: &mut ChaCha12Rng,
    qvocab: usize,
    cvocab: usize,
    answers: usize,
    captions: usize,
    objects: usize,
    fdim: usize,
) -> EncodedExample {
    let qlen = rng.gen_range(2..=5);
    let mut question_tokens: Vec<usize> = (0..qlen).map(|_| rng.gen_range(4..qvocab)).collect();
    question_tokens.resize(MAX_QUESTION, PAD);
    let captions = (0..captions)
        .map(|_| {
            let t = rng.gen_range(1..=4);
            let mut c = vec![START];
            c.extend((0..t).map(|_| rng.gen_range(4..cvocab)));
            c.push(END);
            c
        })
        .collect();
    let answer_scores = (0..answers).map(|_| rng.gen_range(0.05..0.95)).collect();
    let features = (0..objects * fdim).map(|_| rng.gen_range(-0.9..0.9)).collect();
    EncodedExample {
        image_id: "rig".into(),
        question_tokens,
        question_len: qlen,
        captions,
        answer_scores,
        features,
        valid_objects: objects,
        feature_dim: fdim,
        max_objects: objects,
        relevant_caption_index: 0,
        attention_truth: None,
    }
}

fn object_field(model: &Model, ex: &EncodedExample, pick_caption: Option<usize>) -> Vec<Vec<f64>> {
    let t = model.forward_example(ex).expect("forward");
    let loss = match pick_caption {
        None => t.spred,
        Some(i) => t.caption_nlls[i].nll,
    };
    let g = t.tape.backward(loss).expect("backward");
    t.objects.iter().map(|&o| g.dense(o, t.tape.value(o).len())).collect()
}

#[test]
fn scores_match_an_independent_backward_per_caption() {
    let mut rng = ChaCha12Rng::seed_from_u64(417);
    let started = std::time::Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let objects = rng.gen_range(1..=4);
        let captions = rng.gen_range(2..=4);
        let fdim = rng.gen_range(3..=6);
        let answers = rng.gen_range(2..=4);
        let (qvocab, cvocab) = (9, 12);
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: rng.gen_range(3..=5),
            attn_dim: 3,
            decoder_att_dim: 4,
            decoder_lang_dim: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, qvocab, cvocab, answers, fdim, 1000 + case);
        let ex = random_example(&mut rng, qvocab, cvocab, answers, captions, objects, fdim);

        let trace = model.forward_example(&ex).unwrap();
        let lib = selection::report(&trace, 0.0).unwrap();

        let answer_field = object_field(&model, &ex, None);
        let mut oracle = Vec::with_capacity(captions);
        for i in 0..captions {
            let nll_field = object_field(&model, &ex, Some(i));
            let mut total = 0.0;
            for (a, n) in answer_field.iter().zip(&nll_field) {
                for (x, y) in a.iter().zip(n) {
                    total += x * -y;
                }
            }
            oracle.push(total);
        }

        for (i, (l, o)) in lib.inner_products.iter().zip(&oracle).enumerate() {
            let d = (l - o).abs();
            worst = worst.max(d);
            assert!(d < 1e-6, "case {case} caption {i}: library {l} vs oracle {o}");
        }

        let mut best: Option<usize> = None;
        for (i, &g) in oracle.iter().enumerate() {
            if g > 0.0 && best.map_or(true, |b| g > oracle[b]) {
                best = Some(i);
            }
        }
        assert_eq!(lib.selected, best, "case {case}: argmax disagrees");
    }
    assert!(worst < 1e-6, "worst disagreement {worst}");
    assert!(started.elapsed().as_secs() < 60, "took {:?}", started.elapsed());
}

#[test]
fn anti_aligned_fields_leave_only_the_answer_loss() {
    let mut rng = ChaCha12Rng::seed_from_u64(98);
    let cfg = ModelConfig {
        embed_dim: 4,
        hidden_dim: 5,
        attn_dim: 4,
        decoder_att_dim: 5,
        decoder_lang_dim: 5,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 9, 12, 3, 5, 7);
    let ex = random_example(&mut rng, 9, 12, 3, 3, 3, 5);

    let mut trace = model.forward_example(&ex).unwrap();
    let answer_field = object_field(&model, &ex, None);
    let norm2: f64 = answer_field.iter().flatten().map(|x| x * x).sum();
    assert!(norm2 > 0.0, "rig needs a nonzero answer gradient");

    // a caption whose likelihood gradient is the exact negation of the answer
    // gradient has an nll field equal to the answer field
    let g: Vec<f64> = (0..ex.captions.len())
        .map(|_| selection::inner_product(&answer_field, &answer_field))
        .collect();
    for &gi in &g {
        assert!((gi + norm2).abs() < 1e-12, "score should be -|G|^2, got {gi}");
    }

    let selected = selection::select(&g, 0.0).unwrap();
    assert_eq!(selected, None, "nothing anti-aligned is feasible");
    let feasible: Vec<usize> =
        g.iter().enumerate().filter(|(_, &gi)| gi > 0.0).map(|(i, _)| i).collect();
    assert!(feasible.is_empty());

    let vqa = trace.vqa_loss;
    let nlls: Vec<_> = trace.caption_nlls.iter().map(|c| c.nll).collect();
    let joint = selection::joint_loss(&mut trace.tape, vqa, &nlls, selected).unwrap();
    assert_eq!(joint, vqa, "the loss node itself is reused");
    assert_eq!(
        trace.tape.value(joint).values()[0],
        trace.tape.value(vqa).values()[0],
        "identical to the last bit"
    );
}
