use digress::checkpoint;
use digress::config::RunConfig;
use digress::error::AppError;
use digress::{io, pipeline};
use digress_core::backend::InpaintDenoiser;
use digress_core::centroid::{estimate_centroid, CentroidConfig};

#[test]
fn bundled_checkpoint_loads_and_records_its_training() {
    let (b, side) = checkpoint::load(&checkpoint::bundled_checkpoint()).unwrap();
    assert_eq!(side.weights_fingerprint, format!("{:016x}", b.weights_fingerprint()));
    assert_eq!(b.spec().latent_shape, [4, 16, 16]);
    let t = side.training.expect("bundled checkpoint has a training record");
    assert!(t.final_probe_loss < 0.5 * t.initial_probe_loss);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("toy.bin");
    std::fs::copy(checkpoint::bundled_checkpoint(), &bin).unwrap();
    std::fs::copy(checkpoint::sidecar_path(&checkpoint::bundled_checkpoint()), checkpoint::sidecar_path(&bin)).unwrap();
    assert!(checkpoint::load(&bin).is_ok());
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    let err = checkpoint::load(&bin).unwrap_err();
    assert!(matches!(err, AppError::Format { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn centroid_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (b, _) = pipeline::load_backend(None).unwrap();
    let corpus = checkpoint::bundled_corpus();
    let inputs = pipeline::load_inputs(&b, &corpus.join("images/0004.png"), &corpus.join("masks/0004.png")).unwrap();
    let tau = b.null_text_embedding(8).unwrap();
    let c = estimate_centroid(&b, &inputs.image, &inputs.mask, &tau, &CentroidConfig { samples: 3, ..Default::default() }).unwrap();
    let path = dir.path().join("c.bin");
    pipeline::write_centroid(&path, &c, &RunConfig::default()).unwrap();
    assert_eq!(pipeline::read_centroid(&path).unwrap(), c);
}

#[test]
fn truncated_tensor_dumps_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    let t = digress_core::Tensor::from_fn(&[2, 3], |i| i as f64);
    io::write_tensors(&path, &[("t".into(), t.clone())]).unwrap();
    assert_eq!(io::read_tensors(&path).unwrap(), vec![("t".to_string(), t)]);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(io::read_tensors(&path), Err(AppError::Format { .. })));
    let missing = dir.path().join("none.bin");
    assert!(matches!(io::read_tensors(&missing), Err(AppError::Input { .. })));
}

#[test]
fn corpus_masks_match_the_latent_grid() {
    let index = digress::corpus::read_index(&checkpoint::bundled_corpus()).unwrap();
    assert_eq!(index.entries.len(), 256);
    let (b, _) = pipeline::load_backend(None).unwrap();
    for e in index.entries.iter().take(8) {
        let corpus = checkpoint::bundled_corpus();
        let inputs = pipeline::load_inputs(&b, &corpus.join(&e.image), &corpus.join(&e.mask)).unwrap();
        let f = inputs.mask.context_fraction();
        assert!(f > 0.0 && f < 1.0);
    }
}
