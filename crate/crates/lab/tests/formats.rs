use rflow_core::estimator::ConditionSeq;
use rflow_core::rfm::TrainItem;
use rflow_core::toydata::EventTaskSpec;
use rflow_core::Tensor;
use rflow_lab::checkpoint::{Checkpoint, VERSION};
use rflow_lab::config::{parse_json, RunConfig};
use rflow_lab::format::{decode_container, decode_dataset, encode_container, encode_dataset, load_dataset};
use rflow_lab::pipeline::train_rfm;
use rflow_lab::report::trajectory_csv;
use rflow_lab::store::{load_store, save_store};
use rflow_lab::task::Task;
use rflow_lab::LabError;
use rflow_core::exec::Sequential;
use rflow_core::rfm::TrainConfig;
use rflow_core::{GuidanceConfig, SolverConfig, Trajectory};

fn items() -> Vec<TrainItem> {
    Task::Events(EventTaskSpec {
        num_items: 3,
        ..EventTaskSpec::default()
    })
    .generate()
    .unwrap()
}

#[test]
fn container_layout_is_bit_exact() {
    let t = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
    let bytes = encode_container(&[("ab".into(), t)]);
    let mut want = b"RFCK".to_vec();
    for v in [1u32, 1, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(b"ab");
    for v in [1u32, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.5f32).to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let mut its = items();
    its[1].c = its[1].c.to_null();
    let bytes = encode_dataset(&its);
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back.len(), its.len());
    for (a, b) in its.iter().zip(&back) {
        assert_eq!(a.x1.shape(), b.x1.shape());
        assert!(a.x1.data().iter().zip(b.x1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.c, b.c);
    }
    assert_eq!(encode_dataset(&back), bytes);
}

#[test]
fn empty_dataset_is_a_valid_file() {
    let bytes = encode_dataset(&[]);
    assert_eq!(bytes.len(), 12);
    assert_eq!(&bytes[8..], &0u32.to_le_bytes());
    assert!(decode_dataset(&bytes).unwrap().is_empty());
}

#[test]
fn truncated_dataset_is_rejected_whole() {
    let bytes = encode_dataset(&items());
    for cut in [3, 11, 40, bytes.len() - 1] {
        let err = decode_dataset(&bytes[..cut]).unwrap_err();
        assert!(err.contains("truncated"), "{cut}: {err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cut.rfds");
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let e = load_dataset(&p).unwrap_err();
    assert!(matches!(e, LabError::Format { .. }));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn bad_magic_and_version_report_the_bytes() {
    let mut bytes = encode_dataset(&items());
    bytes[0] = b'X';
    let err = decode_dataset(&bytes).unwrap_err();
    assert!(err.contains("bad magic") && err.contains("58"), "{err}");
    let mut bytes = encode_container(&[]);
    bytes[4] = 9;
    let err = decode_container(&bytes).unwrap_err();
    assert!(err.contains("version 9"), "{err}");
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = encode_dataset(&items());
    bytes.push(0);
    assert!(decode_dataset(&bytes).unwrap_err().contains("trailing"));
}

#[test]
fn missing_file_is_a_missing_prerequisite() {
    let e = load_dataset(std::path::Path::new("/nonexistent/data.rfds")).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn config_is_strict_and_reports_position() {
    let p = std::path::Path::new("cfg.json");
    let e = parse_json::<RunConfig>("{\n  \"seed\": 1,\n  \"sed\": 2\n}", p).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("line 3"), "{msg}");
    assert_eq!(e.exit_code(), 2);
    let e = parse_json::<RunConfig>("{\"seed\": 1,,}", p).unwrap_err();
    assert!(e.to_string().contains("column"));
    let cfg: RunConfig = parse_json("{}", p).unwrap();
    assert_eq!(cfg, RunConfig::default());
    let back: RunConfig = parse_json(&cfg.to_value().to_string(), p).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn reflow_defaults() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.reflow.solver, SolverConfig::euler(25));
    assert_eq!(cfg.reflow.guidance, GuidanceConfig::scale(4.5));
    assert_eq!(cfg.reflow.train.cond_drop_prob, 0.0);
}

fn tiny_checkpoint() -> (Task, Checkpoint) {
    let task = Task::Gauss(rflow_core::toydata::GaussTaskSpec {
        samples_per_class: 4,
        ..Default::default()
    });
    let items = task.generate().unwrap();
    let tc = TrainConfig {
        steps: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (ck, _) = train_rfm(
        &task,
        &task.tiny_estimator(),
        &items,
        &tc,
        0,
        4.5,
        serde_json::json!({"note": "test"}),
        &Sequential,
        &mut |_| {},
    )
    .unwrap();
    (task, ck)
}

#[test]
fn checkpoint_round_trip_keeps_params_adam_and_meta() {
    let (_, ck) = tiny_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.rfck");
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.config, ck.config);
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.meta.version, VERSION);
    let (a, b) = (ck.adam.clone().unwrap(), back.adam.clone().unwrap());
    assert_eq!((a.step, a.m, a.v), (b.step, b.m, b.v));
    let q = dir.path().join("b.rfck");
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn checkpoint_for_the_wrong_task_is_a_mismatch() {
    let (_, ck) = tiny_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.rfck");
    ck.save(&p).unwrap();
    let e = rflow_lab::checkpoint::load_for_task(&p, &Task::Events(EventTaskSpec::default())).unwrap_err();
    assert_eq!(e.exit_code(), 5);
}

#[test]
fn store_round_trip_across_shards() {
    let (_, ck) = tiny_checkpoint();
    let its = Task::Gauss(Default::default()).generate().unwrap();
    let its = &its[..7];
    let store = rflow_lab::pipeline::reflow_generate(
        &ck,
        its,
        &SolverConfig::euler(2),
        &GuidanceConfig::scale(4.5),
        1,
        &Sequential,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = save_store(dir.path(), &store, 3, serde_json::Value::Null).unwrap();
    assert_eq!(meta.shards.len(), 3);
    let (back, meta2) = load_store(dir.path()).unwrap();
    assert_eq!(back.triplets, store.triplets);
    assert_eq!(back.meta, store.meta);
    assert_eq!(meta2.id, meta.id);
    assert_eq!(back.meta.steps, 2);
    assert!(matches!(load_store(&dir.path().join("nope")), Err(LabError::Missing(_))));
}

#[test]
fn trajectory_csv_keeps_the_first_eight_dims() {
    let tr = Trajectory {
        times: vec![0.0, 1.0],
        states: vec![Tensor::zeros(&[3, 4]), Tensor::filled(&[3, 4], 1.0)],
        fields: vec![Tensor::zeros(&[3, 4])],
    };
    let text = String::from_utf8(trajectory_csv(&[tr]).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample,index,t,x0,x1,x2,x3,x4,x5,x6,x7");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], "0,1,1,1,1,1,1,1,1,1,1");
}

#[test]
fn condition_null_flag_survives() {
    let it = TrainItem {
        x1: Tensor::zeros(&[1, 2]),
        c: ConditionSeq::new(Tensor::filled(&[1, 8], 1.0)).to_null(),
    };
    let back = decode_dataset(&encode_dataset(&[it.clone()])).unwrap();
    assert!(back[0].c.null);
    assert_eq!(back[0].c, it.c);
}
