use lreid_core::data::{synthetic_stream, SyntheticSpec};
use lreid_core::trainer::{run_stream, NoopObserver};
use lreid_core::{Error, Method, TrainConfig, Trainer};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        train_identities: 4,
        test_identities: 3,
        samples_per_identity: (3, 5),
        input_dim: 6,
        latent_dim: 3,
        ..SyntheticSpec::default()
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        identities_per_batch: 2,
        samples_per_identity: 2,
        iterations_per_epoch: Some(2),
        embedding_dim: 4,
        hidden: vec![8],
        num_vertices: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn each_training_split_is_read_only_during_its_own_step() {
    for method in Method::ALL {
        let stream = synthetic_stream(&spec(), 4, 1, None).unwrap();
        let trainer = Trainer::new(method, config(), 6).unwrap();
        let out = run_stream(stream, trainer, &mut NoopObserver).unwrap();
        for (s, reads) in out.train_reads.iter().enumerate() {
            for (d, &n) in reads.iter().enumerate() {
                assert_eq!(n, usize::from(d <= s), "{method}: domain {d} after step {}", s + 1);
            }
        }
        assert_eq!(out.trainer.model().classifier.classes(), 4 * 4);
    }
}

#[test]
fn released_split_refuses_reads() {
    let mut stream = synthetic_stream(&spec(), 2, 0, None).unwrap();
    stream.domains[0].release_train();
    assert!(matches!(stream.domains[0].train(), Err(Error::Protocol(_))));
    let mut t = Trainer::new(Method::Aka, config(), 6).unwrap();
    assert!(matches!(run_stream_after_release(&mut t), Err(Error::Protocol(_))));
}

fn run_stream_after_release(t: &mut Trainer) -> lreid_core::Result<()> {
    let mut stream = synthetic_stream(&spec(), 2, 0, None).unwrap();
    stream.domains[1].release_train();
    t.train_domain(1, stream.domains[0].train()?)?;
    t.train_domain(2, stream.domains[1].train()?)?;
    Ok(())
}

#[test]
fn metrics_matrix_covers_every_step_and_domain() {
    let stream = synthetic_stream(&spec(), 3, 2, None).unwrap();
    let trainer = Trainer::new(Method::Lwf, config(), 6).unwrap();
    let out = run_stream(stream, trainer, &mut NoopObserver).unwrap();
    let by_step = out.report.by_step();
    assert_eq!(by_step.len(), 3);
    for entries in by_step.values() {
        assert_eq!(entries.len(), 3 + 1);
    }
}
