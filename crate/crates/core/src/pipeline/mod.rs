//! Training, evaluation, checkpoints and reports for the full model.

mod config;
mod eval;
mod forward;
mod model;
mod train;

pub use config::*;
pub use eval::*;
pub use forward::*;
pub use model::*;
pub use train::*;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use crate::perturb::CueLexicons;
    use crate::worldgen::{build_dataset, Dataset, GenConfig, WorldSchema};

    fn tiny_data() -> Dataset {
        build_dataset(
            &WorldSchema::default(),
            &GenConfig {
                train: 48,
                valid: 16,
                testdev: 16,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn tiny_cfg(mode: Mode) -> PipelineConfig {
        PipelineConfig {
            mode,
            dim: 16,
            engine_hidden: 16,
            epochs: 2,
            batch_size: 8,
            curriculum_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn components_resum_to_total() {
        let data = tiny_data();
        let idx = data.train.scene_indices().unwrap();
        for mode in [Mode::VisualOracle, Mode::ReadingOracle, Mode::EndToEnd, Mode::Noisy] {
            let mut cfg = tiny_cfg(mode);
            cfg.weights = LossWeights {
                look: 0.5,
                read: 2.0,
                think: 0.25,
                answer: 1.5,
            };
            let model = Model::new(&cfg, &data.schema).unwrap();
            for (q, &s) in data.train.questions.iter().zip(&idx).take(6) {
                for gold_feed in [false, true] {
                    let mut g = Graph::new(&model.store);
                    let mut rng = crate::nn::RngState::new(1);
                    let l = example_loss(&model, &mut g, &data.train.scenes[s], q, &mut rng, gold_feed).unwrap();
                    let p = &l.parts;
                    let w = &cfg.weights;
                    let resum = w.look * p.look + w.read * p.read + w.think * p.think + w.answer * p.answer;
                    assert!((resum - p.total).abs() < 1e-9, "{mode:?}");
                    assert_eq!(p.look == 0.0, mode == Mode::VisualOracle);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(Mode::EndToEnd);
        cfg.weights = LossWeights {
            look: 0.0,
            read: 0.0,
            think: 0.0,
            answer: 0.0,
        };
        let model = Model::new(&cfg, &data.schema).unwrap();
        let q = &data.train.questions[0];
        let mut g = Graph::new(&model.store);
        let l = example_loss(&model, &mut g, data.train.scene_of(q).unwrap(), q, &mut crate::nn::RngState::new(0), false)
            .unwrap();
        assert_eq!(l.parts.total, 0.0);
    }

    #[test]
    fn missing_supervision_names_field() {
        let data = tiny_data();
        let model = Model::new(&tiny_cfg(Mode::EndToEnd), &data.schema).unwrap();
        let mut q = data.train.questions[0].clone();
        q.bitmaps.clear();
        let mut g = Graph::new(&model.store);
        let r = example_loss(&model, &mut g, data.train.scene_of(&q).unwrap(), &q, &mut crate::nn::RngState::new(0), false);
        assert!(matches!(r, Err(crate::Error::Data(f)) if f == "bitmaps"));
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(Mode::EndToEnd);
        cfg.epochs = 0;
        let init = Model::new(&cfg, &data.schema).unwrap();
        let (m, log) = train(&cfg, &data).unwrap();
        assert_eq!(m.store.hash_prefix(""), init.store.hash_prefix(""));
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_isolates_heads() {
        let data = tiny_data();
        let cfg = tiny_cfg(Mode::VisualOracle);
        let init = Model::new(&cfg, &data.schema).unwrap();
        let (a, la) = train(&cfg, &data).unwrap();
        let (b, lb) = train(&cfg, &data).unwrap();
        assert_eq!(la.without_timing(), lb.without_timing());
        assert_eq!(a.store.hash_prefix(""), b.store.hash_prefix(""));
        assert_eq!(a.store.hash_prefix("look.heads"), init.store.hash_prefix("look.heads"));
        assert!(la.epochs[1].loss.total < la.epochs[0].loss.total);
    }

    #[test]
    fn checkpoint_round_trip_preserves_metrics() {
        let data = tiny_data();
        let (m, _) = train(&tiny_cfg(Mode::EndToEnd), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p, &data.schema).unwrap();
        let a = evaluate_split(&m, &data.testdev, "testdev", Ablation::None).unwrap();
        let b = evaluate_split(&back, &data.testdev, "testdev", Ablation::None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n, data.testdev.questions.len());
    }

    #[test]
    fn explain_is_stable_and_resolves_ids() {
        let data = tiny_data();
        let model = Model::new(&tiny_cfg(Mode::EndToEnd), &data.schema).unwrap();
        let q = &data.testdev.questions[3];
        let a = run_explain(&model, &data.testdev, &q.question_id).unwrap();
        assert_eq!(a, run_explain(&model, &data.testdev, &q.question_id).unwrap());
        let scene = data.testdev.scene_of(q).unwrap();
        for s in &a.steps {
            for o in &s.active {
                assert!(scene.objects.iter().any(|x| x.id == o.id && x.category == o.category));
            }
        }
        assert!(!a.steps.is_empty() && a.steps.len() <= 5);
        assert!(matches!(
            run_explain(&model, &data.testdev, "nope"),
            Err(crate::Error::UnknownQuestion(_))
        ));
    }

    #[test]
    fn learning_rate_decays_linearly() {
        let cfg = PipelineConfig {
            epochs: 11,
            lr_final_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(lr_factor(&cfg, 1), 1.0);
        assert!((lr_factor(&cfg, 6) - 0.55).abs() < 1e-12);
        assert!((lr_factor(&cfg, 11) - 0.1).abs() < 1e-12);
        let bad = PipelineConfig {
            lr_final_fraction: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bitmap_agreement_counts() {
        let g = vec![vec![true, false], vec![false, true]];
        assert_eq!(bitmap_agreement(&g, &g), (true, 1.0));
        let (e, i) = bitmap_agreement(&g[..1], &g);
        assert!(!e && (i - 0.5).abs() < 1e-12);
        assert_eq!(bitmap_agreement(&[vec![false]], &[vec![false]]), (true, 1.0));
    }

    #[test]
    fn stripped_relations_change_some_oracle_answers() {
        use crate::exec_engine::oracle_execute;
        let data = build_dataset(&WorldSchema::default(), &GenConfig { train: 0, valid: 0, testdev: 300, ..Default::default() }).unwrap();
        let changed = data
            .testdev
            .questions
            .iter()
            .filter(|q| q.program.has_relate())
            .filter(|q| {
                let s = Ablation::StripRelations.apply(data.testdev.scene_of(q).unwrap());
                oracle_execute(&s, &q.program, &data.schema).unwrap().short_answer != q.short_answer
            })
            .count();
        assert!(changed > 0);
    }

    #[test]
    fn unmasked_perturbation_rows_are_consistent() {
        let data = tiny_data();
        let model = Model::new(&tiny_cfg(Mode::EndToEnd), &data.schema).unwrap();
        let lex = CueLexicons::for_schema(&data.schema);
        let r = full_report(&model, &data.testdev, "testdev", &lex).unwrap();
        assert_eq!(r, full_report(&model, &data.testdev, "testdev", &lex).unwrap());
        for row in r.scene_ablation.iter().chain(&r.perturbation) {
            assert!((row.from - row.to - row.drop).abs() < 1e-12);
        }
        assert!(r.drop_table_csv().starts_with("mask,subset"));
    }
}
