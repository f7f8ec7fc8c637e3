use super::*;
use proptest::prelude::*;
use rand::SeedableRng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn tiny_config() -> GanTrainConfig {
    GanTrainConfig {
        steps: 4,
        batch_size: 4,
        resolution: 8,
        latent_dim: 8,
        mapping_layers: 2,
        channels: vec![6, 4],
        disc_channels: vec![4],
        checkpoint_interval: 2,
        ..GanTrainConfig::default()
    }
}

fn blobs(n: usize) -> Vec<GrayImage> {
    (0..n)
        .map(|i| {
            let mut img = GrayImage::new(8, 8);
            img.set(i % 8, (i / 8) % 8, 1.0);
            img
        })
        .collect()
}

#[test]
fn loss_values_match_analytic_cases() {
    assert!((generator_loss(&[0.0]) - 2f64.ln()).abs() < 1e-10);
    assert!(generator_loss(&[50.0]) < 1e-20);
    assert_eq!(generator_loss(&[0.0, 0.0]), generator_loss(&[0.0]));
    assert!((discriminator_loss(&[0.0], &[0.0]) - 2.0 * 2f64.ln()).abs() < 1e-10);
    assert!(discriminator_loss(&[50.0], &[-50.0]) < 1e-20);
}

#[test]
fn r1_cases() {
    assert_eq!(r1_penalty(&Tensor::zeros(&[3, 1, 2, 2]), 10.0), 0.0);
    assert_eq!(r1_penalty(&Tensor::full(&[1, 1, 2, 2], 1.0), 10.0), 20.0);
}

proptest! {
    #[test]
    fn discriminator_loss_swap_identity(r in proptest::collection::vec(-20.0f64..20.0, 1..8), f in proptest::collection::vec(-20.0f64..20.0, 1..8)) {
        let nr: Vec<f64> = r.iter().map(|v| -v).collect();
        let nf: Vec<f64> = f.iter().map(|v| -v).collect();
        prop_assert!((discriminator_loss(&r, &f) - discriminator_loss(&nf, &nr)).abs() < 1e-12);
        prop_assert!(discriminator_loss(&r, &f) >= 0.0);
    }

    #[test]
    fn r1_nonnegative_and_linear(g in proptest::collection::vec(-5.0f64..5.0, 8), gamma in 0.0f64..50.0) {
        let t = Tensor::from_vec(&[2, 4], g);
        let p = r1_penalty(&t, gamma);
        prop_assert!(p >= 0.0);
        prop_assert_eq!(r1_penalty(&t, 2.0 * gamma), 2.0 * p);
    }

    #[test]
    fn generator_loss_decreases_in_each_logit(l in proptest::collection::vec(-10.0f64..10.0, 1..6), k in 0usize..6) {
        let k = k % l.len();
        let h = 1e-4;
        let mut p = l.clone();
        p[k] += h;
        let mut m = l.clone();
        m[k] -= h;
        let fd = (generator_loss(&p) - generator_loss(&m)) / (2.0 * h);
        let analytic = -sigmoid(-l[k]) / l.len() as f64;
        prop_assert!(analytic < 0.0);
        prop_assert!(fd < 0.0);
        prop_assert!(rel_err(fd, analytic) <= 1e-4);
    }
}

#[test]
fn mapping_contracts() {
    let z = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.25, -0.75]);
    assert_eq!(map_latent(&z, &Mapping::identity(3)).unwrap(), z);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Mapping::new(3, 3, &mut rng);
    let a = map_latent(&z, &m).unwrap();
    assert_eq!(a, map_latent(&z, &m).unwrap());
    let swapped = Tensor::from_vec(&[2, 3], vec![0.0, 0.25, -0.75, 0.5, -1.0, 2.0]);
    let b = map_latent(&swapped, &m).unwrap();
    assert_eq!(a.item(0), b.item(1));
    assert_eq!(a.item(1), b.item(0));
    let bad = Tensor::from_vec(&[1, 3], vec![0.0, f64::NAN, 1.0]);
    assert!(map_latent(&bad, &m).is_err());
}

#[test]
fn style_conv_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rgb in [false, true] {
        let mut layer = StyleConv::new(5, 3, 4, if rgb { 1 } else { 3 }, rgb, &mut rng);
        layer.noise_strength.value = vec![0.3, -0.2, 0.1, 0.5];
        let x = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let w = Tensor::randn(&[2, 5], &mut rng);
        let out_ch = layer.out_ch;
        let probe = Tensor::randn(&[2, out_ch, 4, 4], &mut rng);
        let noise_rng = ChaCha8Rng::seed_from_u64(9);
        let obj = |l: &StyleConv, x: &Tensor, w: &Tensor| -> f64 {
            let mut r = noise_rng.clone();
            l.forward(x, w, &mut r).0.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut r = noise_rng.clone();
        let (_, cache) = layer.forward(&x, &w, &mut r);
        layer.zero_grad();
        let (gx, gw) = layer.backward(&x, &w, &cache, &probe);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (obj(&layer, &p, &w) - obj(&layer, &m, &w)) / (2.0 * h);
            assert!(rel_err(fd, gx.data()[i]) <= 1e-4, "x[{i}] {fd} vs {}", gx.data()[i]);
        }
        for i in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            let fd = (obj(&layer, &x, &p) - obj(&layer, &x, &m)) / (2.0 * h);
            assert!(rel_err(fd, gw.data()[i]) <= 1e-4, "w[{i}] {fd} vs {}", gw.data()[i]);
        }
        let values = layer.flat_values();
        let grads = layer.flat_grads();
        for i in 0..values.len() {
            let mut vp = values.clone();
            vp[i] += h;
            let mut lp = layer.clone();
            lp.load_flat(&vp).unwrap();
            let mut vm = values.clone();
            vm[i] -= h;
            let mut lm = layer.clone();
            lm.load_flat(&vm).unwrap();
            let fd = (obj(&lp, &x, &w) - obj(&lm, &x, &w)) / (2.0 * h);
            assert!(rel_err(fd, grads[i]) <= 1e-4, "param {i} {fd} vs {}", grads[i]);
        }
    }
}

#[test]
fn generator_loss_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = tiny_config();
    let (mut g, d) = fresh(&config, &mut rng);
    let z = Tensor::randn(&[3, 8], &mut rng);
    let noise_rng = ChaCha8Rng::seed_from_u64(5);
    let obj = |g: &Generator| -> f64 {
        let mut r = noise_rng.clone();
        let img = g.forward(&z, &mut r).0;
        generator_loss(d.infer(&img).data())
    };
    let mut r = noise_rng.clone();
    let (img, cache) = g.forward(&z, &mut r);
    let mut dd = d.clone();
    let (logits, trace) = dd.forward(&img);
    let gl = logits.map(|l| -sigmoid(-l) / 3.0);
    let gx = dd.backward(&trace, &gl);
    g.zero_grad();
    g.backward(&cache, &gx);
    let values = g.flat_values();
    let grads = g.flat_grads();
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..values.len()).step_by(3) {
        let mut vp = values.clone();
        vp[i] += h;
        let mut gp = g.clone();
        gp.load_flat(&vp).unwrap();
        let mut vm = values.clone();
        vm[i] -= h;
        let mut gm = g.clone();
        gm.load_flat(&vm).unwrap();
        let fd = (obj(&gp) - obj(&gm)) / (2.0 * h);
        if fd.abs().max(grads[i].abs()) < 1e-8 {
            continue;
        }
        checked += 1;
        assert!(rel_err(fd, grads[i]) <= 1e-4, "param {i} {fd} vs {}", grads[i]);
    }
    assert!(checked > 50);
}

#[test]
fn r1_parameter_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut disc = Sequential::new(vec![
        Layer::Conv(Conv2d::new(1, 3, 3, 1.0, &mut rng)),
        Layer::Silu,
        Layer::AvgPool2,
        Layer::Flatten,
        Layer::Linear(Linear::new(3 * 4, 4, 1.0, &mut rng)),
        Layer::Silu,
        Layer::Linear(Linear::new(4, 1, 1.0, &mut rng)),
    ]);
    let reals = Tensor::randn(&[3, 1, 4, 4], &mut rng);
    let gamma = 10.0;
    let penalty_of = |d: &Sequential| -> f64 {
        let mut d = d.clone();
        let (l, tr) = d.forward(&reals);
        r1_penalty(&d.backward(&tr, &Tensor::full(l.shape(), 1.0)), gamma)
    };
    disc.zero_grad();
    let p = r1_accumulate(&mut disc, &reals, gamma);
    assert!((p - penalty_of(&disc)).abs() < 1e-12);
    let values = disc.flat_values();
    let grads = disc.flat_grads();
    let h = 1e-6;
    for i in 0..values.len() {
        let mut vp = values.clone();
        vp[i] += h;
        let mut dp = disc.clone();
        dp.load_flat(&vp).unwrap();
        let mut vm = values.clone();
        vm[i] -= h;
        let mut dm = disc.clone();
        dm.load_flat(&vm).unwrap();
        let fd = (penalty_of(&dp) - penalty_of(&dm)) / (2.0 * h);
        assert!(rel_err(fd, grads[i]) <= 1e-4, "param {i} {fd} vs {}", grads[i]);
    }
}

#[test]
fn zero_learning_rate_step_keeps_weights() {
    let mut t = GanTrainer::new(&blobs(8), &tiny_config()).unwrap();
    let g0 = t.generator.flat_values();
    let d0 = t.discriminator.flat_values();
    t.opt_g.config.lr = 0.0;
    t.opt_d.config.lr = 0.0;
    t.step();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(t.generator.flat_values()), bits(g0));
    assert_eq!(bits(t.discriminator.flat_values()), bits(d0));
}

#[test]
fn missing_pretrained_weights_name_the_path() {
    let mut c = tiny_config();
    c.init = GanInit::Pretrained;
    c.pretrained_path = Some("/nonexistent/ffhq.ckpt".into());
    match GanTrainer::new(&blobs(4), &c) {
        Err(Error::MissingWeights(p)) => assert_eq!(p, PathBuf::from("/nonexistent/ffhq.ckpt")),
        other => panic!("unexpected {:?}", other.err()),
    }
}

#[test]
fn pretrained_init_loads_compatible_checkpoint() {
    let run = train_gan(&blobs(8), &tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(GanModel::file_name(Stage::TwoCell, 4));
    assert!(path.ends_with("gan_two_cell_s4.ckpt"));
    run.checkpoints[1].save(&path).unwrap();
    let mut c = tiny_config();
    c.init = GanInit::Pretrained;
    c.pretrained_path = Some(path.clone());
    let t = GanTrainer::new(&blobs(4), &c).unwrap();
    assert_eq!(t.generator.clone().flat_values(), run.checkpoints[1].generator.clone().flat_values());
    let back = GanModel::load(&path).unwrap();
    assert_eq!(back.sample(3, 1).unwrap(), run.checkpoints[1].sample(3, 1).unwrap());
}

#[test]
fn training_emits_checkpoints_and_rejects_empty_input() {
    let run = train_gan(&blobs(8), &tiny_config()).unwrap();
    assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![2, 4]);
    assert_eq!(run.stats.len(), 4);
    assert!(run.stats.iter().all(|s| s.d_loss.is_finite() && s.g_loss.is_finite()));
    assert!(matches!(train_gan(&[], &tiny_config()), Err(Error::Empty(_))));
}

#[test]
fn sampling_is_deterministic_at_configured_resolution() {
    let run = train_gan(&blobs(8), &tiny_config()).unwrap();
    let m = &run.checkpoints[0];
    let a = m.sample(5, 3).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|i| i.width() == 8 && i.height() == 8));
    assert!(a.iter().flat_map(|i| i.pixels()).all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, m.sample(5, 3).unwrap());
    assert_ne!(a, m.sample(5, 4).unwrap());
}

#[test]
fn config_validation() {
    assert!(tiny_config().validate().is_ok());
    let mut c = tiny_config();
    c.resolution = 16;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.lr_generator = 0.0;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.init = GanInit::Pretrained;
    assert!(c.validate().is_err());
}
