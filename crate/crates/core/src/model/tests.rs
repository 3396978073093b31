use super::*;
use crate::audio::FeatureMatrix;
use serde_json::json;

fn small(k: usize) -> EncoderConfig {
    EncoderConfig {
        mel_bins: 4,
        channels: 3,
        n_blocks: 1,
        kernel: 3,
        embedding_dim: 2,
        n_outputs: k,
        local_tap_window: 3,
        seed: 5,
    }
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn feats(t: usize, f: usize, seed: u64) -> FeatureMatrix {
    let mut r = lcg(seed);
    FeatureMatrix {
        frames: Tensor::new(vec![t, f], (0..t * f).map(|_| r() as f32).collect()).unwrap(),
        frame_advance_s: 0.008,
        window_s: 0.02,
        mel_bins: f,
    }
}

fn frames_of(rows: &[&[f32]], k: usize) -> FrameEmbeddings {
    let t = rows.len();
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let e = data.len() / t / k;
    FrameEmbeddings {
        values: Tensor::new(vec![t, k, e], data).unwrap(),
        utterance_id: "u".into(),
    }
}

#[test]
fn output_shapes() {
    let teacher: Encoder = Encoder::new(EncoderConfig::teacher()).unwrap();
    let f = feats(40, 24, 1);
    let (d, fr) = teacher_forward(&teacher, &f, "u").unwrap();
    assert_eq!(fr.values.shape(), &[40, 1, 16]);
    assert_eq!(d.vector.len(), 16);
    let student: Encoder = Encoder::new(EncoderConfig::student(2)).unwrap();
    let (embs, fr) = student_forward(&student, &f, "m").unwrap();
    assert_eq!(fr.values.shape(), &[40, 2, 16]);
    assert_eq!(embs.len(), 2);
    assert_eq!(encode_frames(&student, &f, "m").unwrap().values.shape(), &[40, 2, 16]);
}

#[test]
fn feature_dim_mismatch_is_rejected() {
    let teacher: Encoder = Encoder::new(EncoderConfig::teacher()).unwrap();
    assert!(matches!(teacher_forward(&teacher, &feats(10, 20, 1), "u"), Err(Error::Shape { .. })));
}

#[test]
fn forward_is_deterministic() {
    let student: Encoder = Encoder::new(EncoderConfig::student(2)).unwrap();
    let f = feats(30, 24, 2);
    assert_eq!(student_forward(&student, &f, "m").unwrap(), student_forward(&student, &f, "m").unwrap());
    let again: Encoder = Encoder::new(EncoderConfig::student(2)).unwrap();
    assert_eq!(again, student);
}

#[test]
fn tap_cases() {
    let c = frames_of(&[&[0.5, -2.0], &[0.5, -2.0], &[0.5, -2.0]], 1);
    assert_eq!(tap(&c).unwrap()[0].vector, vec![0.5, -2.0]);
    let two = frames_of(&[&[1.0, 0.0], &[0.0, 1.0]], 1);
    assert_eq!(tap(&two).unwrap()[0].vector, vec![0.5, 0.5]);

    let f = frames_of(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 9.0], &[0.0, 1.0, 1.0, 2.0]], 2);
    let pooled = tap(&f).unwrap();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(f.values.clone()).unwrap();
    let m = tape.mean_axis(x, 0).unwrap();
    let flat: Vec<f32> = pooled.iter().flat_map(|e| e.vector.clone()).collect();
    assert_eq!(flat, tape.value(m).data());
    assert_eq!(pooled[1].slot, 1);
}

#[test]
fn local_tap_cases() {
    let c = frames_of(&[&[3.0f32, 1.0][..]; 20], 1);
    assert_eq!(local_tap(&c, 11).unwrap(), c);

    let short = frames_of(&[&[1.0, 0.0], &[2.0, 3.0], &[6.0, 3.0]], 1);
    let y = local_tap(&short, 11).unwrap();
    for t in 0..3 {
        assert_eq!(y.values.row(t), &[3.0, 2.0]);
    }

    let ramp: Vec<Vec<f32>> = (0..30).map(|t| vec![t as f32, (t * t) as f32 * 0.1]).collect();
    let refs: Vec<&[f32]> = ramp.iter().map(|r| r.as_slice()).collect();
    let r = frames_of(&refs, 1);
    let y = local_tap(&r, 11).unwrap();
    for t in 5..25 {
        for c in 0..2 {
            let mut s = 0.0f64;
            for u in t - 5..=t + 5 {
                s += ramp[u][c] as f64;
            }
            assert!((y.values.data()[t * 2 + c] as f64 - s / 11.0).abs() < 1e-4);
        }
    }
    assert_eq!(local_tap(&r, 1).unwrap(), r);
}

#[test]
fn tap_after_local_tap_on_constant_sequence() {
    let c = frames_of(&[&[0.25f32, -1.0, 2.0, 4.0][..]; 7], 2);
    assert_eq!(tap(&local_tap(&c, 11).unwrap()).unwrap(), tap(&c).unwrap());
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn scalar_objective<T: Real>(enc: &Encoder<T>, x: &Tensor<T>, weights: &Tensor<T>, tape: &mut Tape<T>) -> (Vec<Var>, Var) {
    let vars = enc.bind(tape, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let out = enc.forward_on(tape, &vars, xv).unwrap();
    let w = tape.constant(weights.clone()).unwrap();
    let p = tape.mul(out.frames, w).unwrap();
    let sq = tape.mul(p, p).unwrap();
    (vars, tape.sum(sq).unwrap())
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let k = 1 + (seed % 2) as usize;
        let cfg = EncoderConfig { seed, ..small(k) };
        let mut enc: Encoder<f32> = Encoder::new(cfg.clone()).unwrap();
        let mut r = lcg(seed + 7);
        // zero biases put ReLU inputs exactly on the kink in dead regions
        for (name, t) in enc.params_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.1 * r() as f32);
            }
        }
        let f = feats(9, 4, 100 + seed);
        let x = enc.prepare(&f).unwrap();
        let weights = Tensor::new(vec![9, k * 2], (0..9 * k * 2).map(|_| r() as f32).collect()).unwrap();

        let mut tape = Tape::new();
        let (vars, loss) = scalar_objective(&enc, &x, &weights, &mut tape);
        let grads = tape.backward(loss).unwrap();

        let e64: Encoder<f64> = enc.cast();
        let (x64, w64) = (x.cast::<f64>(), weights.cast::<f64>());
        let eval = |e: &Encoder<f64>| {
            let mut t = Tape::new();
            let (_, l) = scalar_objective(e, &x64, &w64, &mut t);
            t.value(l).item().unwrap()
        };
        for (pi, v) in vars.iter().enumerate() {
            let g: Vec<f64> = grads.get(*v).unwrap().data().iter().map(|&g| g as f64).collect();
            let mut fd = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let base = e64.params()[pi].1.data()[i];
                let h = 1e-4 * base.abs().max(1.0);
                let mut plus = e64.clone();
                plus.params_mut()[pi].1.data_mut()[i] = base + h;
                let mut minus = e64.clone();
                minus.params_mut()[pi].1.data_mut()[i] = base - h;
                fd.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            }
            let err = rel_err(&g, &fd);
            assert!(err < 1e-3, "seed {seed} param {}: rel err {err}", enc.params()[pi].0);
        }
    }
}

#[test]
fn translation_consistency_of_interior_frames() {
    let cfg = EncoderConfig {
        n_blocks: 2,
        kernel: 5,
        ..small(1)
    };
    let enc: Encoder<f64> = Encoder::new(cfg).unwrap();
    let mut r = lcg(3);
    let base: Vec<f64> = (0..60 * 4).map(|_| r()).collect();
    let shift = 7;
    let mut shifted: Vec<f64> = (0..shift * 4).map(|_| r()).collect();
    shifted.extend_from_slice(&base);
    let run = |data: Vec<f64>| {
        let t = data.len() / 4;
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::new(vec![t, 4], data).unwrap()).unwrap();
        let y = enc.encode_on(&mut tape, &vars, x).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(base), run(shifted));
    // five convolutions of width 5 see 10 frames to either side
    let reach = 10;
    for t in reach..60 - reach {
        assert_eq!(a.row(t), b.row(t + shift), "frame {t}");
    }
}

#[test]
fn swapping_projection_blocks_swaps_slots() {
    let enc: Encoder = Encoder::new(EncoderConfig::student(2)).unwrap();
    let e = enc.embedding_dim();
    let mut swapped = enc.clone();
    for (name, t) in swapped.params_mut() {
        if name == "proj.w" {
            let cols = t.shape()[1];
            for row in t.data_mut().chunks_mut(cols) {
                let (a, b) = row.split_at_mut(e);
                a.swap_with_slice(b);
            }
        } else if name == "proj.b" {
            let (a, b) = t.data_mut().split_at_mut(e);
            a.swap_with_slice(b);
        }
    }
    let f = feats(25, 24, 9);
    let (ea, fa) = student_forward(&enc, &f, "m").unwrap();
    let (eb, fb) = student_forward(&swapped, &f, "m").unwrap();
    assert_eq!(ea[0].vector, eb[1].vector);
    assert_eq!(ea[1].vector, eb[0].vector);
    for t in 0..25 {
        let (ra, rb) = (&fa.values.data()[t * 2 * e..(t + 1) * 2 * e], &fb.values.data()[t * 2 * e..(t + 1) * 2 * e]);
        assert_eq!(ra[..e], rb[e..]);
        assert_eq!(ra[e..], rb[..e]);
    }
}

fn sample_checkpoint() -> Checkpoint {
    let enc: Encoder = Encoder::new(small(2)).unwrap();
    let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
    let _: u64 = rand::Rng::gen(&mut rng);
    Checkpoint {
        kind: "student".into(),
        config: json!({"encoder": enc.config(), "lr": 0.001, "note": "x"}),
        epoch: 3,
        rng_state: Some(checkpoint::RngState::capture(&rng)),
        metrics: vec![json!({"epoch": 0, "loss": 1.25e-3}), json!({"epoch": 1, "loss": 0.1 + 0.2})],
        tensors: enc.into_params(),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let ck = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.mseb");
    let p2 = dir.path().join("b.mseb");
    ck.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let enc = loaded.encoder().unwrap();
    assert_eq!(enc.params(), Encoder::<f32>::new(small(2)).unwrap().params());

    let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
    let _: u64 = rand::Rng::gen(&mut rng);
    let mut restored = loaded.rng_state.unwrap().restore().unwrap();
    assert_eq!(rand::Rng::gen::<u64>(&mut restored), rand::Rng::gen::<u64>(&mut rng));
}

#[test]
fn malformed_checkpoints_are_format_errors() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    for cut in [0, 4, 12, 40, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));

    let (_, header) = Checkpoint::from_bytes(&bytes).unwrap();
    let mut h2 = header.clone();
    h2.format_version = 2;
    let json = serde_json::to_vec(&h2).unwrap();
    let mut v2 = MAGIC.to_vec();
    v2.extend_from_slice(&(json.len() as u64).to_le_bytes());
    v2.extend_from_slice(&json);
    v2.extend_from_slice(&bytes[13 + serde_json::to_vec(&header).unwrap().len()..]);
    assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Format(m)) if m.contains("version")));
}

#[test]
fn config_hash_mismatch_warns() {
    let ck = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.mseb");
    ck.save(&p).unwrap();
    let (_, w) = Checkpoint::load_checked(&p, &ck.config).unwrap();
    assert!(w.is_empty());
    let (_, w) = Checkpoint::load_checked(&p, &json!({"other": 1})).unwrap();
    assert_eq!(w.len(), 1);
}

