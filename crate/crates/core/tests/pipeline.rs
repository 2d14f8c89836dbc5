use streamseg::eval::average_precision;
use streamseg::frame::{patchify_masks, read_sequence, write_sequence, SequenceReader};
use streamseg::pipeline::{run_sequence, Pipeline, RunConfig};
use streamseg::synth::{generate, NoiseSpec, SceneSpec};
use streamseg::train::{toy_train, TrainConfig};
use streamseg::Error;

fn small_scene(frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::acceptance(3);
    spec.frames = frames;
    spec
}

#[test]
fn first_frame_registers_one_instance_per_merged_mask() {
    let seq = generate(&small_scene(1)).unwrap();
    let masks = patchify_masks(&seq.frames[0]);
    let mut p = Pipeline::new(RunConfig { intra_threshold: 1.0, ..RunConfig::default() }, None).unwrap();
    let out = p.process_frame(&seq.frames[0]).unwrap();
    assert_eq!(p.scene.instances.len(), masks.len());
    assert_eq!(out.fusion.label_to_instance.len(), masks.len());
}

#[test]
fn runs_are_deterministic() {
    let seq = generate(&small_scene(6)).unwrap();
    let run = || run_sequence(seq.frames.iter().cloned().map(Ok), &RunConfig::default(), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.events, b.events);
}

#[test]
fn bad_frame_reports_its_index_and_stage() {
    let seq = generate(&small_scene(4)).unwrap();
    let mut frames = seq.frames.clone();
    frames[2].pose[0][0] = 1.5;
    let err = match run_sequence(frames.into_iter().map(Ok), &RunConfig::default(), None) {
        Err(e) => e,
        Ok(_) => panic!("corrupt pose accepted"),
    };
    assert!(err.is_validation(), "{err}");
    match err {
        Error::Stage { t, .. } => assert_eq!(t, 2),
        other => panic!("expected a stage error, got {other}"),
    }
}

#[test]
fn repeated_frame_index_is_rejected() {
    let seq = generate(&small_scene(2)).unwrap();
    let mut p = Pipeline::new(RunConfig::default(), None).unwrap();
    p.process_frame(&seq.frames[1]).unwrap();
    let err = p.process_frame(&seq.frames[0]).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn bank_cap_aborts_instead_of_evicting() {
    let seq = generate(&small_scene(4)).unwrap();
    let cfg = RunConfig { max_bank: Some(3), ..RunConfig::default() };
    let err = match run_sequence(seq.frames.iter().cloned().map(Ok), &cfg, None) {
        Err(e) => e,
        Ok(_) => panic!("cap ignored"),
    };
    assert!(format!("{err}").contains("cap of 3"), "{err}");
}

#[test]
fn sequences_stream_from_disk() {
    let seq = generate(&small_scene(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &seq.frames).unwrap();
    let back = read_sequence(dir.path()).unwrap();
    assert!(seq.frames.iter().zip(&back).all(|(a, b)| a.same_bits(b)));
    let reader = SequenceReader::open(dir.path()).unwrap();
    assert_eq!(reader.len(), 3);
    let out = run_sequence(reader, &RunConfig::default(), None).unwrap();
    assert_eq!(out.latency.frames.len(), 3);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let seq = generate(&small_scene(3)).unwrap();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, ..TrainConfig::default() };
    let a = toy_train(&[seq.frames.clone()], &cfg, None).unwrap();
    let b = toy_train(&[seq.frames.clone()], &TrainConfig { epochs: 0, ..cfg.clone() }, None).unwrap();
    assert_eq!(a.weights, b.weights);
}

#[test]
fn noiseless_single_object_is_recovered() {
    let mut spec = SceneSpec::acceptance(1);
    spec.objects.truncate(1);
    spec.frames = 4;
    spec.oversegment = 1;
    spec.noise = NoiseSpec { feature_sigma: 0.0, depth_sigma: 0.0, pose_jitter: 0.0, attention_sigma: 0.0, view_strength: 0.0 };
    let seq = generate(&spec).unwrap();
    let out = run_sequence(seq.frames.iter().cloned().map(Ok), &RunConfig::default(), None).unwrap();
    let ap = average_precision(&out.predictions, &seq.ground_truth(0.05)).unwrap();
    assert_eq!(ap.ap25, 1.0);
}
