use cvattn::autodiff::Tape;
use cvattn::config;
use cvattn::model::{Mode, Model};
use cvattn::tasks;
use cvattn::CTensor;

// Row j of a causally masked decoder depends only on decoder rows 0..=j and
// the encoder memory, and every sub-layer (attention rows, layer norm, the
// feed-forward) does its arithmetic per row in the same order regardless of
// how many rows follow. Decoding one prefix at a time must therefore
// reproduce the full teacher-forced pass bit for bit — not approximately.
// Autoregressive generation shares its first step with the teacher-forced
// pass too, because no fed-back label has entered the decoder yet.
#[test]
fn prefix_decoding_is_bitwise_equal_to_the_full_pass() {
    let mut cfg = config::preset("toy-sequence").unwrap();
    cfg.task.n_samples = 80;
    cfg.finalize().unwrap();
    let model = Model::<f32>::init(cfg.model.clone(), 9).unwrap();
    let data = tasks::generate(&cfg.task).unwrap();
    let samples = tasks::cast_samples::<f32>(&data.test);
    assert!(!samples.is_empty());

    let steps = cfg.task.seq_out;
    let c = cfg.task.n_classes;
    for s in &samples {
        let mut tape = Tape::new();
        let full = model
            .sequence_logits(&mut tape, &s.tokens, &s.labels, &mut Mode::Eval)
            .unwrap();
        let full = tape.value(full).clone();

        let mut enc_tape = Tape::new();
        let mem = model.encode(&mut enc_tape, &s.tokens, &mut Mode::Eval).unwrap();
        let memory = enc_tape.value(mem).clone();
        for j in 0..steps {
            let mut step_tape = Tape::new();
            let m = step_tape.leaf(memory.clone());
            let mut dec_in = CTensor::<f32>::zeros(&[j + 1, c]);
            for r in 1..=j {
                for k in 0..c {
                    dec_in.re_mut()[r * c + k] = s.labels.re()[(r - 1) * c + k];
                }
            }
            let y = model
                .decode(&mut step_tape, m, &dec_in, &mut Mode::Eval)
                .unwrap();
            let logits = model.head(&mut step_tape, y).unwrap();
            let row = step_tape.value(logits);
            for k in 0..c {
                assert_eq!(
                    row.at2(j, k).0,
                    full.at2(j, k).0,
                    "prefix decode of step {j} disagrees with the full pass at class {k}"
                );
            }
        }

        let (ar_logits, _) = model.generate(&s.tokens).unwrap();
        for k in 0..c {
            assert_eq!(
                ar_logits.at2(0, k).0,
                full.at2(0, k).0,
                "generation diverged from teacher forcing before any feedback"
            );
        }
    }
}
