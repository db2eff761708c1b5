use std::collections::HashMap;
use std::f64::consts::PI;

use cmkd_core::data::{
    generate_dataset, generate_sample, generate_scene, iou, make_expression, miou, predict_mask, render, Cell, Color, DatasetSpec,
    SceneObject, SceneSpec, ShapeKind, Vocabulary, BACKGROUND, MAX_TEXT_LEN, PAD,
};
use cmkd_core::exec::Serial;
use cmkd_core::rng::CounterRng;
use cmkd_core::{Error, Tensor};
use proptest::prelude::*;

fn object(shape: ShapeKind, color: Color, center: (u32, u32), size: u32) -> SceneObject {
    SceneObject {
        shape,
        color,
        center,
        size,
    }
}

/// Finds the objects an expression describes, reading only the words.
fn resolve(words: &[&str], scene: &SceneSpec) -> Vec<usize> {
    let color = Color::ALL.into_iter().find(|c| words.contains(&c.word())).unwrap();
    let shape = ShapeKind::ALL.into_iter().find(|s| words.contains(&s.word())).unwrap();
    let place: Vec<&str> = match words.iter().position(|&w| w == "at") {
        Some(i) => words[i + 2..].to_vec(),
        None => Vec::new(),
    };
    let row = if place.contains(&"top") {
        Some(0)
    } else if place.contains(&"bottom") {
        Some(2)
    } else if place.is_empty() {
        None
    } else {
        Some(1)
    };
    let col = if place.contains(&"left") {
        Some(0)
    } else if place.contains(&"right") {
        Some(2)
    } else if place.is_empty() {
        None
    } else {
        Some(1)
    };
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let cell = o.cell(scene.canvas);
            o.color == color && o.shape == shape && row.is_none_or(|r| cell.row == r) && col.is_none_or(|c| cell.col == c)
        })
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn expressions_resolve_to_exactly_the_target() {
    for appearance_only in [false, true] {
        for seed in 0..10_000u64 {
            let (scene, sample) = generate_sample(seed, 0, 64, appearance_only).unwrap();
            let words: Vec<&str> = sample.token_ids[..sample.real_len as usize]
                .iter()
                .map(|&id| Vocabulary.token(id).unwrap())
                .collect();
            assert_eq!(resolve(&words, &scene), vec![scene.target], "seed {seed}: {words:?}");
            assert_eq!(words.contains(&"at"), !appearance_only);
            assert!(sample.token_ids[sample.real_len as usize..].iter().all(|&t| t == PAD));
            assert!(sample.mask.iter().any(|&m| m), "seed {seed}: empty target");
            assert!((2..=4).contains(&scene.objects.len()));
        }
    }
}

#[test]
fn expression_templates() {
    let scene = SceneSpec {
        canvas: 48,
        objects: vec![
            object(ShapeKind::Circle, Color::Red, (8, 8), 5),
            object(ShapeKind::Circle, Color::Red, (40, 40), 5),
        ],
        target: 0,
    };
    assert_eq!(
        make_expression(&scene, false).unwrap(),
        ["the", "red", "circle", "at", "the", "top", "left"]
    );
    assert!(matches!(make_expression(&scene, true), Err(Error::NotUnique)));
    let scene = SceneSpec {
        canvas: 48,
        objects: vec![object(ShapeKind::Triangle, Color::Blue, (24, 30), 5)],
        target: 0,
    };
    assert_eq!(make_expression(&scene, true).unwrap(), ["the", "blue", "triangle"]);
    assert_eq!(
        make_expression(&scene, false).unwrap(),
        ["the", "blue", "triangle", "at", "the", "center"]
    );
    assert_eq!(Cell { row: 1, col: 2 }.words(), ["right", "side"]);
}

#[test]
fn vocabulary_round_trips() {
    let (ids, len) = Vocabulary.encode(&["the", "green", "square"]).unwrap();
    assert_eq!(len, 3);
    assert_eq!(Vocabulary.token(ids[1]), Some("green"));
    assert_eq!(Vocabulary.id("<pad>"), Some(PAD));
    assert!(Vocabulary.encode(&["the", "purple"]).is_err());
    assert!(matches!(
        Vocabulary.encode(&["the"; MAX_TEXT_LEN + 1]),
        Err(Error::TextTooLong { .. })
    ));
}

#[test]
fn generation_is_deterministic_and_index_addressed() {
    let spec = DatasetSpec {
        seed: 4,
        count: 20,
        canvas: 48,
        appearance_only: false,
    };
    let a = generate_dataset(&spec, &Serial).unwrap();
    let b = generate_dataset(&spec, &Serial).unwrap();
    assert_eq!(a, b);
    for (i, s) in a.iter().enumerate() {
        assert_eq!(&generate_sample(4, i as u64, 48, false).unwrap().1, s);
    }
    let longer = generate_dataset(&DatasetSpec { count: 30, ..spec }, &Serial).unwrap();
    assert_eq!(&longer[..20], &a[..]);
}

#[test]
fn train_and_validation_seeds_do_not_share_samples() {
    let make = |seed| {
        generate_dataset(
            &DatasetSpec {
                seed,
                count: 300,
                canvas: 64,
                appearance_only: true,
            },
            &Serial,
        )
        .unwrap()
    };
    let (train, val) = (make(1), make(2));
    for v in &val {
        assert!(train.iter().all(|t| t.image != v.image));
    }
}

#[test]
fn unsupported_canvas_is_rejected() {
    assert!(matches!(generate_scene(0, 50, false), Err(Error::InvalidConfig(_))));
}

#[test]
fn circle_area_is_close_to_analytic() {
    for size in 4..=16u32 {
        let scene = SceneSpec {
            canvas: 48,
            objects: vec![object(ShapeKind::Circle, Color::Green, (24, 24), size)],
            target: 0,
        };
        let area = render(&scene).masks[0].iter().filter(|&&m| m).count() as f64;
        let r = size as f64;
        assert!((area - PI * r * r).abs() <= 4.0 * r, "r={r} area={area}");
        let sq = SceneSpec {
            objects: vec![object(ShapeKind::Square, Color::Green, (24, 24), size)],
            ..scene
        };
        let area = render(&sq).masks[0].iter().filter(|&&m| m).count() as f64;
        assert!((area - 2.0 * r * r).abs() <= 4.0 * r * 2f64.sqrt());
    }
}

#[test]
fn masks_are_disjoint_and_background_is_grey() {
    for seed in 0..500u64 {
        let scene = generate_scene(seed, 48, seed % 2 == 0).unwrap();
        let rendered = render(&scene);
        let c = scene.canvas;
        for p in 0..c * c {
            let owners: Vec<usize> = (0..scene.objects.len()).filter(|&k| rendered.masks[k][p]).collect();
            assert!(owners.len() <= 1);
            let px = &rendered.image.data()[p * 3..p * 3 + 3];
            match owners.first() {
                None => assert_eq!(px, &[BACKGROUND; 3]),
                Some(&k) => assert_eq!(px, &scene.objects[k].color.rgb()),
            }
        }
        for o in &scene.objects {
            assert!(o.center.0 >= o.size && o.center.0 + o.size <= c as u32);
            assert!(o.center.1 >= o.size && o.center.1 + o.size <= c as u32);
        }
    }
}

#[test]
fn target_attributes_are_balanced() {
    for appearance_only in [false, true] {
        let n = 6000u64;
        let mut shapes: HashMap<ShapeKind, usize> = HashMap::new();
        let mut colors: HashMap<Color, usize> = HashMap::new();
        for seed in 0..n {
            let scene = generate_scene(seed, 64, appearance_only).unwrap();
            let t = scene.target_object();
            *shapes.entry(t.shape).or_default() += 1;
            *colors.entry(t.color).or_default() += 1;
        }
        for s in ShapeKind::ALL {
            let share = shapes[&s] as f64 / (n as f64 / 3.0);
            assert!((0.7..=1.3).contains(&share), "{s:?}: {share}");
        }
        for c in Color::ALL {
            let share = colors[&c] as f64 / (n as f64 / 4.0);
            assert!((0.7..=1.3).contains(&share), "{c:?}: {share}");
        }
    }
}

#[test]
fn iou_edge_cases() {
    assert_eq!(iou(&[false, false], &[false, false]).unwrap(), 1.0);
    assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
    assert_eq!(iou(&[true, true, false], &[true, false, false]).unwrap(), 0.5);
    assert!(matches!(miou(&[], &[]), Err(Error::EmptyDataset)));
    assert!(iou(&[true], &[true, false]).is_err());
    let logits = Tensor::<f64>::from_f64(&[1, 3, 1], &[-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(predict_mask(&logits), vec![false, false, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn miou_matches_counting(n in 1usize..6, len in 1usize..40, seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let mut draw = || (0..len).map(|_| rng.next_f64() < 0.4).collect::<Vec<bool>>();
        let preds: Vec<Vec<bool>> = (0..n).map(|_| draw()).collect();
        let gts: Vec<Vec<bool>> = (0..n).map(|_| draw()).collect();
        let mut total = 0.0;
        for (p, g) in preds.iter().zip(&gts) {
            let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
            let union = p.iter().zip(g).filter(|(a, b)| **a || **b).count();
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
        prop_assert_eq!(miou(&preds, &gts).unwrap(), total / n as f64);
    }
}
