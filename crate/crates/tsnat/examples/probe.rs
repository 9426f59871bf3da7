//! Scratch probe: dev teacher-forced losses vs fixed-L_max NAR decoding.

use tsnat::data::{read_corpus, Vocab};
use tsnat::inference::{encode_utterance, greedy_decode, nar_graph};
use tsnat::model::{DecodeMode, FwdCtx};
use tsnat::training::{assemble_batch, joint_loss, load_checkpoint};

fn main() {
    let ckpt = load_checkpoint(std::path::Path::new("/tmp/toy/e30_ckpt/averaged.ckpt")).unwrap();
    let model = ckpt.into_model().unwrap();
    let dev = read_corpus(std::path::Path::new("/tmp/toy/dev.tsnc")).unwrap();

    // teacher-forced dev losses (same path as training, no masking)
    let idx: Vec<usize> = (0..dev.utterances.len()).collect();
    let mut l_ar = 0.0;
    let mut l_nar = 0.0;
    let mut n = 0.0;
    for chunk in idx.chunks(8) {
        let batch = assemble_batch(&dev, chunk, None).unwrap();
        let mut ctx = FwdCtx::eval(&model.params);
        let nodes = joint_loss(&model, &mut ctx, &batch, 0.7).unwrap();
        l_ar += ctx.tape.scalar_value(nodes.ar);
        l_nar += ctx.tape.scalar_value(nodes.nar);
        n += 1.0;
    }
    println!("dev teacher-forced: AR {:.4}  NAR {:.4}", l_ar / n, l_nar / n);

    // NAR argmax accuracy when the decoder runs at the TRUE length vs L_max
    let mut correct_true_len = 0usize;
    let mut correct_lmax = 0usize;
    let mut total = 0usize;
    for u in dev.utterances.iter().take(50) {
        let enc = encode_utterance(&model, u).unwrap();
        let live = u.transcript.len() + 1;

        // true-length NAR pass
        let mut ctx = FwdCtx::eval(&model.params);
        let enc_node = ctx.tape.leaf(&[1, enc.t, enc.d], &enc.data, false);
        let masks = vec![Vocab::MASK; live];
        let (logits, _) = model
            .decoder_forward(&mut ctx, &masks, enc_node, DecodeMode::Nar)
            .unwrap();
        let v = model.cfg.vocab_size;
        let vals = ctx.tape.value(logits);
        for (i, &want) in u.transcript.iter().enumerate() {
            let row = &vals[i * v..(i + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0 as u32;
            if argmax == want {
                correct_true_len += 1;
            }
            total += 1;
        }

        // fixed L_max graph argmax on the same positions
        let graph = nar_graph(&model, &enc).unwrap();
        for (i, &want) in u.transcript.iter().enumerate() {
            let row = graph.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0 as u32;
            if argmax == want {
                correct_lmax += 1;
            }
        }
        if u.id == "utt-00000" {
            println!(
                "utt-00000 ref={:?} greedy@Lmax={:?}",
                u.transcript,
                greedy_decode(&graph)
            );
        }
    }
    println!(
        "NAR argmax accuracy: true-length {:.3}  fixed-Lmax {:.3}  ({total} tokens)",
        correct_true_len as f64 / total as f64,
        correct_lmax as f64 / total as f64
    );

    // position-wise NAR accuracy + EOS placement + AR teacher-forced accuracy
    let mut pos_correct = vec![0usize; 14];
    let mut pos_total = vec![0usize; 14];
    let mut eos_right = 0usize;
    let mut len_err_sum = 0isize;
    let mut ar_correct = 0usize;
    let mut ar_total = 0usize;
    for u in &dev.utterances {
        let enc = encode_utterance(&model, u).unwrap();
        let graph = nar_graph(&model, &enc).unwrap();
        let live = u.transcript.len();
        for (i, &want) in u.transcript.iter().enumerate() {
            let row = graph.row(i);
            let am = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32;
            if am == want { pos_correct[i] += 1; }
            pos_total[i] += 1;
        }
        let eos_row = graph.row(live);
        let am = eos_row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32;
        if am == Vocab::EOS { eos_right += 1; }
        let hyp = greedy_decode(&graph);
        len_err_sum += hyp.len() as isize - live as isize;

        // AR teacher-forced next-token accuracy
        let mut input = vec![Vocab::BOS];
        input.extend_from_slice(&u.transcript);
        let mut ctx = FwdCtx::eval(&model.params);
        let enc_node = ctx.tape.leaf(&[1, enc.t, enc.d], &enc.data, false);
        let (logits, _) = model.decoder_forward(&mut ctx, &input, enc_node, DecodeMode::Ar).unwrap();
        let v = model.cfg.vocab_size;
        let vals = ctx.tape.value(logits);
        let mut targets = u.transcript.clone();
        targets.push(Vocab::EOS);
        for (i, &want) in targets.iter().enumerate() {
            let row = &vals[i * v..(i + 1) * v];
            let am = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32;
            if am == want { ar_correct += 1; }
            ar_total += 1;
        }
    }
    println!("AR teacher-forced dev accuracy: {:.3}", ar_correct as f64 / ar_total as f64);
    println!("NAR EOS-row argmax correct: {}/{}", eos_right, dev.utterances.len());
    println!("mean greedy length error: {:.2}", len_err_sum as f64 / dev.utterances.len() as f64);
    for i in 0..14 {
        if pos_total[i] > 0 {
            print!("p{i}:{:.2} ", pos_correct[i] as f64 / pos_total[i] as f64);
        }
    }
    println!();
}
