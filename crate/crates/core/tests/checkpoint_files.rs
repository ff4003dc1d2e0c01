use slimsplit::checkpoint::{Checkpoint, CheckpointError};
use slimsplit::slim::WidthSet;
use slimsplit::zoo::{build_student, build_teacher, BottleneckSpec, CompressorVariant, ConfigMode, SplitStudent, StudentOptions, TeacherNet};

#[test]
fn models_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = build_teacher(21);
    let student = build_student(
        &teacher,
        BottleneckSpec::new(24, CompressorVariant::SruCru).unwrap(),
        WidthSet::parse_list("0.5,1.0").unwrap(),
        ConfigMode::FullConfig,
        StudentOptions::default(),
    )
    .unwrap();

    let tp = dir.path().join("teacher.ckpt");
    let sp = dir.path().join("student.ckpt");
    teacher.to_checkpoint().unwrap().save(&tp).unwrap();
    student.to_checkpoint().unwrap().save(&sp).unwrap();

    let t2 = TeacherNet::from_checkpoint(&Checkpoint::load(&tp).unwrap()).unwrap();
    let s2 = SplitStudent::from_checkpoint(&Checkpoint::load(&sp).unwrap()).unwrap();
    assert_eq!(t2.weight_hash(), teacher.weight_hash());
    assert_eq!(s2.weight_hash(), student.weight_hash());
    assert_eq!(s2.width_set, student.width_set);
    assert_eq!(s2.bottleneck, student.bottleneck);
    assert!(s2.decoder_matches(&t2));

    // saving again reproduces the file byte for byte
    let again = dir.path().join("again.ckpt");
    s2.to_checkpoint().unwrap().save(&again).unwrap();
    assert_eq!(std::fs::read(&sp).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    build_teacher(3).to_checkpoint().unwrap().save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    flipped[good.len() / 2] ^= 0x10;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Checksum { .. })));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(Checkpoint::load(&path).is_err());

    assert!(matches!(Checkpoint::load(dir.path().join("missing.ckpt")), Err(CheckpointError::Io(_))));

    // a student checkpoint is not a teacher
    let teacher = build_teacher(3);
    assert!(SplitStudent::from_checkpoint(&teacher.to_checkpoint().unwrap()).is_err());
}
