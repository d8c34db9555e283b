mod common;

use common::randn;
use gatecl::data::{
    generate_synthetic, make_task_stream, preprocess, resize_linear, window, window_offsets, zscore_per_subject,
    PreprocessConfig, RawRecording, SyntheticSpec, SyntheticSubjectSpec, TaskStream, WindowSample,
};
use gatecl::numerics::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

/// Every start position whose window fits, stepping by half a window.
fn offsets_by_enumeration(len: usize, w: usize) -> Vec<usize> {
    let step = (w / 2).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= len {
        out.push(start);
        start += step;
    }
    out
}

/// Two-point linear interpolation on the index grid, evaluated position by position.
fn resize_by_interpolation(row: &[f64], target: usize) -> Vec<f64> {
    let d = row.len();
    (0..target)
        .map(|j| {
            let pos = j as f64 * (d - 1) as f64 / (target - 1) as f64;
            let lo = pos.floor() as usize;
            if lo + 1 >= d {
                return row[d - 1];
            }
            let frac = pos - lo as f64;
            row[lo] * (1.0 - frac) + row[lo + 1] * frac
        })
        .collect()
}

#[test]
fn window_examples() {
    assert_eq!(window_offsets(400, 200).unwrap(), vec![0, 100, 200]);
    assert_eq!(window_offsets(200, 200).unwrap(), vec![0]);
    assert_eq!(window_offsets(399, 200).unwrap().len(), 2);
    assert!(window_offsets(100, 0).is_err());
    let sig = Tensor::new(&[1, 6], (0..6).map(f64::from).collect()).unwrap();
    let ws = window(&sig, 4).unwrap();
    assert_eq!(ws.len(), 2);
    assert_eq!(ws[1].data(), &[2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn resize_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = randn(&[3, 200], &mut rng);
    assert_eq!(resize_linear(&x, 200).unwrap(), x);

    let d = 77;
    let ramp = Tensor::new(&[1, d], (0..d).map(|v| v as f64).collect()).unwrap();
    let r = resize_linear(&ramp, 200).unwrap();
    for (j, &v) in r.data().iter().enumerate() {
        let exact = j as f64 * (d - 1) as f64 / 199.0;
        assert!((v - exact).abs() <= 1e-9);
    }

    let x = randn(&[9, 128], &mut rng);
    let r = resize_linear(&x, 200).unwrap();
    assert_eq!(r.shape(), &[9, 200]);
    for c in 0..9 {
        let want = resize_by_interpolation(&x.data()[c * 128..(c + 1) * 128], 200);
        for (a, b) in r.data()[c * 200..(c + 1) * 200].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
    assert!(resize_linear(&Tensor::<f64>::zeros(&[2, 1]).unwrap(), 200).is_err());
}

fn recording(subject: u32, rows: &[&[f64]]) -> RawRecording {
    let len = rows[0].len();
    RawRecording {
        subject,
        activity: 0,
        sampling_rate: 50.0,
        samples: Tensor::new(&[rows.len(), len], rows.concat()).unwrap(),
    }
}

#[test]
fn zscore_examples() {
    let (z, w) = zscore_per_subject(&[recording(1, &[&[0.0, 2.0]])]).unwrap();
    assert!(w.is_empty());
    assert_eq!(z[0].samples.data(), &[-1.0, 1.0]);

    let (z, w) = zscore_per_subject(&[recording(1, &[&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]])]).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(&z[0].samples.data()[..3], &[0.0, 0.0, 0.0]);
}

fn moments(recs: &[RawRecording], c: usize) -> (f64, f64) {
    let vals: Vec<f64> = recs
        .iter()
        .flat_map(|r| {
            let l = r.len();
            r.samples.data()[c * l..(c + 1) * l].to_vec()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn synthetic_without_noise_is_an_exact_channel_scaling() {
    let base = SyntheticSpec {
        noise: 0.0,
        subjects: 3,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&base).unwrap();
    let specs = base.subject_specs();
    for r in &ds.recordings {
        let s = specs.iter().find(|s| s.subject == r.subject).unwrap();
        let rec_index = ds
            .recordings
            .iter()
            .filter(|o| o.subject == r.subject && o.activity == r.activity)
            .position(|o| std::ptr::eq(o, r))
            .unwrap();
        let canon = base.canonical_signal(r.activity, rec_index).unwrap();
        let len = r.len();
        for c in 0..base.channels {
            for j in 0..len {
                let want = s.scale[c] * canon.data()[c * len + j] + s.offset[c];
                assert_eq!(r.samples.data()[c * len + j], want);
            }
        }
    }

    // unit gains: subjects are identically distributed
    let unit: Vec<SyntheticSubjectSpec> = (0..2)
        .map(|i| SyntheticSubjectSpec {
            subject: 1 + i,
            scale: vec![1.0; 9],
            offset: vec![0.0; 9],
            noise: 0.0,
        })
        .collect();
    let ds = generate_synthetic(&SyntheticSpec {
        subject_specs: Some(unit),
        ..base.clone()
    })
    .unwrap();
    for k in 0..base.classes {
        let mean = |t: u32| -> Vec<f64> {
            let recs: Vec<&RawRecording> = ds.recordings.iter().filter(|r| r.subject == t && r.activity == k).collect();
            let len = recs[0].len();
            (0..9)
                .map(|c| recs.iter().map(|r| r.samples.data()[c * len..(c + 1) * len].iter().sum::<f64>()).sum::<f64>() / (recs.len() * len) as f64)
                .collect()
        };
        for (a, b) in mean(1).iter().zip(mean(2)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn synthetic_rejects_non_positive_gains() {
    let bad = SyntheticSpec {
        subject_specs: Some(vec![SyntheticSubjectSpec {
            subject: 1,
            scale: vec![0.0; 9],
            offset: vec![0.0; 9],
            noise: 0.0,
        }]),
        ..SyntheticSpec::default()
    };
    assert!(generate_synthetic(&bad).is_err());
    assert!(generate_synthetic(&SyntheticSpec {
        scale_range: (-1.0, 2.0),
        ..SyntheticSpec::default()
    })
    .is_err());
}

fn subjects_dataset(n: usize) -> Vec<WindowSample> {
    let ds = generate_synthetic(&SyntheticSpec {
        subjects: n,
        recordings_per_class: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    preprocess(&ds, &PreprocessConfig::default()).unwrap().0
}

fn check_stream(stream: &TaskStream) {
    for task in &stream.tasks {
        let train = task.train.samples_uncounted();
        for class in 0..stream.num_classes {
            let n_train = train.iter().filter(|s| s.y == class).count();
            let n_test = task.test.iter().filter(|s| s.y == class).count();
            let n = n_train + n_test;
            if n >= 2 {
                let want = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
                assert_eq!(n_test, want, "subject {} class {class}", task.subject);
            }
        }
        let keys: BTreeSet<u64> = train.iter().map(|s| s.x.checksum()).collect();
        assert!(task.test.iter().all(|s| !keys.contains(&s.x.checksum())));
        assert!(train.iter().chain(&task.test).all(|s| s.t == task.subject));
    }
}

#[test]
fn streams_have_one_task_per_subject() {
    for n in [8, 30] {
        let samples = subjects_dataset(n);
        let stream = make_task_stream(&samples, 6, 3).unwrap();
        assert_eq!(stream.len(), n);
        let subjects: BTreeSet<u32> = stream.order().into_iter().collect();
        assert_eq!(subjects.len(), n);
        check_stream(&stream);
    }
}

#[test]
fn stream_serialization_is_deterministic() {
    let samples = subjects_dataset(4);
    let a = make_task_stream(&samples, 6, 11).unwrap();
    let b = make_task_stream(&samples, 6, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(make_task_stream(&samples, 6, 12).unwrap().order(), a.order());
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.save(d1.path()).unwrap();
    b.save(d2.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 1);
    for name in names {
        let x = std::fs::read(d1.path().join(&name)).unwrap();
        let y = std::fs::read(d2.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    let back = TaskStream::load(d1.path()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn single_window_class_goes_to_training() {
    let mut samples = subjects_dataset(2);
    let lone = WindowSample {
        y: 5,
        ..samples[0].clone()
    };
    samples.retain(|s| !(s.t == lone.t && s.y == 5));
    samples.push(lone.clone());
    let stream = make_task_stream(&samples, 6, 0).unwrap();
    assert_eq!(stream.warnings.len(), 1);
    let task = stream.tasks.iter().find(|t| t.subject == lone.t).unwrap();
    assert!(task.test.iter().all(|s| s.y != 5));
    assert_eq!(task.train.samples_uncounted().iter().filter(|s| s.y == 5).count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_count_formula(len in 1usize..600, w in 1usize..300) {
        prop_assume!(len >= w);
        let offsets = window_offsets(len, w).unwrap();
        prop_assert_eq!(&offsets, &offsets_by_enumeration(len, w));
        let step = (w / 2).max(1);
        prop_assert_eq!(offsets.len(), (len - w) / step + 1);
    }

    #[test]
    fn resize_keeps_endpoints(seed in any::<u64>(), c in 1usize..5, d in 2usize..300, target in 2usize..300) {
        let x = randn(&[c, d], &mut ChaCha8Rng::seed_from_u64(seed));
        let r = resize_linear(&x, target).unwrap();
        for ch in 0..c {
            prop_assert_eq!(r.data()[ch * target], x.data()[ch * d]);
            prop_assert_eq!(r.data()[ch * target + target - 1], x.data()[ch * d + d - 1]);
            let want = resize_by_interpolation(&x.data()[ch * d..(ch + 1) * d], target);
            for (a, b) in r.data()[ch * target..(ch + 1) * target].iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn zscore_moments_and_idempotence(seed in any::<u64>(), recs in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<RawRecording> = (0..recs)
            .map(|i| RawRecording {
                subject: 7,
                activity: i % 2,
                sampling_rate: 50.0,
                samples: randn(&[c, 20 + 7 * i], &mut rng).map(|v| 3.0 * v + 5.0),
            })
            .collect();
        let (z, w) = zscore_per_subject(&raw).unwrap();
        prop_assert!(w.is_empty());
        for ch in 0..c {
            let (m, s) = moments(&z, ch);
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
        let (zz, _) = zscore_per_subject(&z).unwrap();
        for (a, b) in z.iter().zip(&zz) {
            for (x, y) in a.samples.data().iter().zip(b.samples.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
