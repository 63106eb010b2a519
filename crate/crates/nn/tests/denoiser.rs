use c2v_core::geometry::AuxChannels;
use c2v_core::phantom::PhantomSpec;
use c2v_core::{ConditionSet, Grid, Volume};
use c2v_nn::checkpoint::Checkpoint;
use c2v_nn::gradcheck;
use c2v_nn::tape::{Tape, Tensor};
use c2v_nn::train::{ema_update, TrainConfig, TrainPair, Trainer};
use c2v_nn::{DenoiserConfig, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A synthetic pair on an `n³` grid: the tiny networks only need matching shapes.
fn small_pair(n: usize, seed: u64) -> TrainPair {
    let grid = Grid::centered_cube(n, 1.0).unwrap();
    let r0 = 0.9 + 0.1 * seed as f64;
    let s_p = Volume::from_fn(grid, |p| {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r0 - 0.8
    });
    let s_w = Volume::from_fn(grid, |p| {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r0
    });
    let cond = ConditionSet::from_sdfs(s_p, s_w, None, AuxChannels::ALL).unwrap();
    let image = cond.ribbon.map(|r| 0.2 + 0.8 * r);
    TrainPair { cond, image }
}

#[test]
fn every_op_passes_gradient_check() {
    for rep in gradcheck::op_suite(11).unwrap() {
        assert!(
            rep.rel_error < 1e-6,
            "{}: relative error {:e}",
            rep.name,
            rep.rel_error
        );
        assert!(rep.checked > 0);
    }
}

#[test]
fn tiny_unet_passes_gradient_check() {
    for aux in [AuxChannels::NONE, AuxChannels::ALL] {
        let rep = gradcheck::unet_check(&DenoiserConfig::tiny(aux), 3).unwrap();
        assert!(rep.rel_error < 1e-6, "relative error {:e}", rep.rel_error);
    }
}

#[test]
fn output_shape_and_zero_at_init() {
    let cfg = DenoiserConfig::tiny(AuxChannels::ALL);
    let model = Model::new(cfg, 1).unwrap();
    let pair = small_pair(4, 1);
    let out = model.predict(&pair.image, &pair.cond, 10).unwrap();
    assert_eq!(out.dims(), [4, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn timestep_conditioning_is_live() {
    let cfg = DenoiserConfig::tiny(AuxChannels::ALL);
    let mut model = Model::new(cfg, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let names = model.params().names().to_vec();
    for (n, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if n.starts_with("out.conv") {
            *t = random_tensor(&mut r, &t.shape.clone());
        }
    }
    let pair = small_pair(4, 1);
    let a = model.predict(&pair.image, &pair.cond, 10).unwrap();
    let b = model.predict(&pair.image, &pair.cond, 700).unwrap();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 0.0);
    // forward is a pure function of parameters and inputs
    assert_eq!(a, model.predict(&pair.image, &pair.cond, 10).unwrap());
}

#[test]
fn parameter_count_is_a_function_of_the_config() {
    // hand count for the tiny network without auxiliary channels
    let cfg = DenoiserConfig::tiny(AuxChannels::NONE);
    let conv = |i: usize, o: usize, k: usize| o * i * k * k * k + o;
    let lin = |i: usize, o: usize| o * i + o;
    let norm = |c: usize| 2 * c;
    let e = 16;
    let res = |i: usize, o: usize| {
        norm(i)
            + conv(i, o, 3)
            + lin(e, 2 * o)
            + norm(o)
            + conv(o, o, 3)
            + if i != o { conv(i, o, 1) } else { 0 }
    };
    let attn = |c: usize| norm(c) + conv(c, 12, 1) + conv(4, c, 1);
    let expected = lin(8, e)
        + lin(e, e)
        + conv(1, 4, 3)
        + res(4, 4)
        + conv(4, 4, 3)
        + res(4, 6)
        + attn(6)
        + res(6, 6)
        + attn(6)
        + res(6, 6)
        + res(12, 6)
        + attn(6)
        + res(10, 4)
        + norm(4)
        + conv(5, 1, 3);
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(
        Model::new(cfg.clone(), 0).unwrap().params().count(),
        expected
    );
    assert_eq!(
        Model::new(cfg.clone(), 99).unwrap().params().count(),
        expected
    );

    // the desk network, pinned
    let desk = DenoiserConfig::desk(AuxChannels::ALL);
    assert_eq!(desk.param_count(), DESK_PARAMS);
    let none = DenoiserConfig::desk(AuxChannels::NONE);
    assert_eq!(
        desk.param_count() - none.param_count(),
        4 * 16 * 27 + 4 * 27
    );
}

const DESK_PARAMS: usize = 1_675_400;

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
    let c = tape.constant(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
    let y = tape.add(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    // conditioning inputs are constants and get nothing
    assert!(tape.grad(c).is_none());
    assert!(matches!(
        tape.backward(s),
        Err(c2v_nn::NnError::BackwardTwice)
    ));
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![3]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn attention_commutes_with_position_permutation() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (heads, dh, l) = (2, 3, 12);
    let qkv = random_tensor(&mut r, &[1, 3 * heads * dh, l, 1, 1]);
    let mut perm: Vec<usize> = (0..l).collect();
    for i in (1..l).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let permute = |t: &Tensor| {
        let c = t.shape[1];
        let mut out = t.clone();
        for ch in 0..c {
            for (j, &p) in perm.iter().enumerate() {
                out.data[ch * l + j] = t.data[ch * l + p];
            }
        }
        out
    };
    let run = |t: Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let o = tape.attention(v, heads).unwrap();
        tape.value(o).clone()
    };
    let a = permute(&run(qkv.clone()));
    let b = run(permute(&qkv));
    let err = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-12, "max deviation {err:e}");
}

fn tiny_trainer(seed: u64, ema: f64) -> Trainer {
    let tcfg = TrainConfig {
        epochs: 1,
        learning_rate: 1e-2,
        batch_size: 1,
        ema_rate: ema,
        total_steps: 100,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(DenoiserConfig::tiny(AuxChannels::ALL), tcfg).unwrap()
}

#[test]
fn ema_follows_its_definition() {
    let pair = small_pair(4, 1);
    let mut t = tiny_trainer(4, 0.9);
    let before = t.ema.clone();
    t.step(&[&pair]).unwrap();
    for ((e, o), n) in t
        .ema
        .tensors()
        .iter()
        .zip(before.tensors())
        .zip(t.model.params().tensors())
    {
        for ((&e, &o), &n) in e.data.iter().zip(&o.data).zip(&n.data) {
            assert_eq!(e, 0.9 * o + (1.0 - 0.9) * n);
        }
    }
    let mut a = before.clone();
    ema_update(&mut a, t.model.params(), 0.5);
    assert!(a != before);
}

#[test]
fn single_example_overfits() {
    let pair = small_pair(8, 2);
    let mut cfg = DenoiserConfig::tiny(AuxChannels::ALL);
    cfg.resolution = 8;
    let tcfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 1,
        total_steps: 100,
        seed: 6,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, tcfg).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step(&[&pair]).unwrap()).collect();
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(
        tail <= 0.5 * losses[0],
        "first {} last-10 mean {tail}",
        losses[0]
    );
}

#[test]
fn training_is_deterministic() {
    let data = vec![small_pair(4, 1), small_pair(4, 2), small_pair(4, 3)];
    let run = || {
        let mut t = tiny_trainer(9, 0.99);
        t.tcfg.epochs = 3;
        t.tcfg.batch_size = 2;
        t.fit(&data, |_| {}).unwrap();
        (t.state.loss_curve.clone(), t.ema.clone())
    };
    let (a, ea) = run();
    let (b, eb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    let mut other = tiny_trainer(10, 0.99);
    other.tcfg.epochs = 3;
    other.fit(&data, |_| {}).unwrap();
    assert_ne!(other.state.loss_curve, a);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = vec![small_pair(4, 1), small_pair(4, 2)];
    let mut t = tiny_trainer(12, 0.99);
    t.fit(&data, |_| {}).unwrap();
    let ck = Checkpoint::from_trainer(&t);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"C2CK");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.c2ck");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    // resuming continues the step and epoch counters
    let mut resumed = back.into_trainer().unwrap();
    let step = resumed.state.step;
    resumed.tcfg.epochs = 2;
    resumed.fit(&data, |_| {}).unwrap();
    assert_eq!(resumed.state.epoch, 2);
    assert_eq!(resumed.state.step, step + 2);

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn in_channels_follow_the_auxiliary_set() {
    for (aux, n) in [
        (AuxChannels::NONE, 1),
        ("edge,ribbon".parse().unwrap(), 3),
        (AuxChannels::ALL, 5),
    ] {
        let cfg = DenoiserConfig::tiny(aux);
        assert_eq!(cfg.in_channels, n);
        let model = Model::new(cfg, 0).unwrap();
        let pair = small_pair(4, 1);
        let input = model.input(&pair.image, &pair.cond).unwrap();
        assert_eq!(input.shape, vec![1, n, 4, 4, 4]);
        assert_eq!(&input.data[..64], pair.image.data());
    }
}

#[test]
#[ignore]
fn desk_step_timing() {
    let spec = PhantomSpec::default();
    let ph = spec.generate().unwrap();
    let cond = ConditionSet::from_meshes(
        &ph.pial,
        &ph.white,
        ph.image.grid().clone(),
        AuxChannels::ALL,
    )
    .unwrap();
    let pair = TrainPair {
        cond,
        image: ph.image,
    };
    let mut t = Trainer::new(DenoiserConfig::default(), TrainConfig::default()).unwrap();
    for _ in 0..3 {
        let s = std::time::Instant::now();
        let loss = t.step(&[&pair, &pair]).unwrap();
        eprintln!("step loss {loss:.4} in {:.2}s", s.elapsed().as_secs_f64());
    }
    let s = std::time::Instant::now();
    let m = t.ema_model();
    let _ = m.predict(&pair.image, &pair.cond, 500).unwrap();
    eprintln!(
        "inference {:.2}s; params {}",
        s.elapsed().as_secs_f64(),
        m.params().count()
    );
}
