mod common;

use dan::config::{DecoderKind, RunConfig};
use dan::decoder::{DecodeOutput, Vocabulary};
use dan::model::Recognizer;
use dan::synth::{generate_dataset, GlyphFont, RenderOpts, Sample, DEFAULT_ALPHABET};
use dan::train::*;
use dan::{DanError, Tensor};

fn tiny_run(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = common::tiny_config(DecoderKind::Dan);
    run.seed = seed;
    run.epochs = 3;
    run.batch_size = 4;
    run.lr_decay_epoch = 2;
    run
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(n, (1, 4), DEFAULT_ALPHABET, &GlyphFont::default(), &RenderOpts::default(), seed).unwrap()
}

fn params_bits(m: &Recognizer) -> Vec<u64> {
    m.store().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn epoch_batches_cover_every_sample_once() {
    let widths: Vec<usize> = (0..23).map(|i| 10 + (i * 7) % 30).collect();
    let b = epoch_batches(&widths, 4, 3, 0);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..23).collect::<Vec<_>>());
    assert!(b.iter().all(|x| x.len() <= 4));
    assert_eq!(b, epoch_batches(&widths, 4, 3, 0));
    assert_ne!(b, epoch_batches(&widths, 4, 3, 1));
}

#[test]
fn one_epoch_writes_one_log_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(1);
    run.epochs = 1;
    let mut t = Trainer::new(&run).unwrap();
    t.fit(&data(10, 1), &data(4, 2), dir.path()).unwrap();
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,loss,cer,wer,seq_acc");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let train = data(24, 3);
    let run_once = || {
        let mut t = Trainer::new(&tiny_run(5)).unwrap();
        let losses: Vec<f64> = (0..3).map(|_| t.train_epoch(&train, &[]).unwrap().loss).collect();
        (losses, params_bits(&t.model))
    };
    let (la, pa) = run_once();
    let (lb, pb) = run_once();
    assert_eq!(pa, pb);
    assert_eq!(la, lb);
    assert!(la[2] < la[0], "losses {la:?}");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let train = data(16, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(&tiny_run(6)).unwrap();
    full.fit(&train, &[], &dir.path().join("full")).unwrap();

    let mut first = Trainer::new(&tiny_run(6)).unwrap();
    first.run.epochs = 1;
    let part = dir.path().join("part");
    first.fit(&train, &[], &part).unwrap();
    let mut resumed = Trainer::resume(&part.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed.next_epoch, 1);
    resumed.run.epochs = 3;
    resumed.fit(&train, &[], &part).unwrap();
    assert_eq!(params_bits(&resumed.model), params_bits(&full.model));
    assert_eq!(resumed.opt, full.opt);
    let log = std::fs::read_to_string(part.join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn checkpoint_round_trip_decodes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_run(7)).unwrap();
    t.train_epoch(&data(8, 5), &[]).unwrap();
    let path = dir.path().join("m.bin");
    t.save(&path).unwrap();
    let (loaded, ckpt) = Recognizer::load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.run, t.run);
    assert_eq!(params_bits(&loaded), params_bits(&t.model));
    for s in data(6, 6) {
        assert_eq!(loaded.decode(&s.image).unwrap(), t.model.decode(&s.image).unwrap());
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    std::fs::write(&p, b"NOTACKPTxxxx").unwrap();
    assert!(matches!(Recognizer::load_checkpoint(&p), Err(DanError::Checkpoint(_))));
    assert!(Recognizer::load_checkpoint(&dir.path().join("none.bin")).is_err());
}

#[test]
fn crop_vote_single_and_identical_strategies() {
    let m = Recognizer::new(&common::tiny_config(DecoderKind::Dan), 8).unwrap();
    for s in data(4, 7) {
        let plain = m.decode(&s.image).unwrap();
        assert_eq!(crop_vote(&m, &s.image, &[(0, 0)]).unwrap(), plain);
        assert_eq!(crop_vote(&m, &s.image, &[(0, 0), (0, 0), (0, 0)]).unwrap(), plain);
    }
    assert!(crop_vote(&m, &data(1, 7)[0].image, &[]).is_err());
}

fn output_with_logits(rows: &[[f64; 3]], text: &str) -> DecodeOutput {
    DecodeOutput {
        text: text.into(),
        logits: Tensor::new(&[rows.len(), 3], rows.concat()).unwrap(),
        centers: vec![(0, 0); rows.len()],
        steps: rows.len(),
        maps: Tensor::zeros(&[rows.len(), 1, 1]),
    }
}

#[test]
fn confidence_is_mean_max_probability() {
    let sharp = output_with_logits(&[[0.0, 8.0, 0.0], [9.0, 0.0, 0.0]], "x");
    let flat = output_with_logits(&[[0.0, 0.1, 0.0], [0.2, 0.0, 0.0]], "y");
    let p = |row: [f64; 3], i: usize| row[i].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
    let expected = (p([0.0, 8.0, 0.0], 1) + p([9.0, 0.0, 0.0], 0)) / 2.0;
    assert!((sharp.confidence() - expected).abs() < 1e-12);
    assert!(sharp.confidence() > flat.confidence());
}

#[test]
fn crop_vote_prefers_more_confident_crop() {
    let m = Recognizer::new(&common::tiny_config(DecoderKind::Dan), 9).unwrap();
    let img = data(1, 8).remove(0).image;
    let strategies = [(0, 0), (10, 10)];
    let outs: Vec<DecodeOutput> = strategies
        .iter()
        .map(|&s| crop_vote(&m, &img, &[s]).unwrap())
        .collect();
    let best = if outs[1].confidence() > outs[0].confidence() { &outs[1] } else { &outs[0] };
    assert_eq!(&crop_vote(&m, &img, &strategies).unwrap(), best);
    assert_eq!(DEFAULT_CROPS.len(), 6);
}

#[test]
fn report_schema_and_ratios() {
    let m = Recognizer::new(&common::tiny_config(DecoderKind::Dan), 10).unwrap();
    let samples = data(6, 9);
    let rows = eval_rows(
        &m,
        &samples,
        &[Perturbation::Pad(0.1), Perturbation::Stretch(0.2)],
        Some(&[(0, 0), (5, 5)]),
        1,
    )
    .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.split.as_str()).collect();
    assert_eq!(names, ["clean", "pad", "stretch", "crop_vote"]);
    assert_eq!(rows[0].gap, 0.0);
    for r in &rows {
        assert_eq!(r.n, 6);
        assert!((r.gap - (r.accuracy - rows[0].accuracy)).abs() < 1e-15);
        if rows[0].accuracy > 0.0 {
            assert!((r.ratio + r.gap / rows[0].accuracy).abs() < 1e-15);
        }
    }
    let csv = report_csv(&rows);
    assert!(csv.starts_with("split,n,cer,wer,accuracy,gap,ratio\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn evaluation_rejects_foreign_symbols() {
    let m = Recognizer::new(&common::tiny_config(DecoderKind::Dan), 11).unwrap();
    let mut s = data(1, 10);
    s[0].label = "xyz".into();
    assert!(matches!(evaluate(&m, &s), Err(DanError::Vocab(_))));
}

#[test]
fn misalignment_uses_character_steps() {
    let m = Recognizer::new(&common::tiny_config(DecoderKind::Dan), 12).unwrap();
    let samples = data(5, 11);
    let r = evaluate(&m, &samples).unwrap();
    let mm = r.misalignment(&[(0, 3), (3, 10)]);
    assert_eq!(mm.samples.len(), 5);
    for (o, (len, count)) in r.outputs.iter().zip(&mm.samples) {
        assert!(*count < o.steps.max(1));
        assert!(*len >= 1);
    }
    let csv = compare_csv(&r, &r, &[(0, 3), (3, 10)]);
    assert!(csv.starts_with("bucket_lo,bucket_hi,n,mm_per_img_a,mm_per_img_b,cer_a,cer_b,cer_improvement\n"));
    let _ = Vocabulary::EOS;
}
