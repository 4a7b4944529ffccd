use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use solidtex::critic::{CriticConfig, Discriminators};
use solidtex::generator::{make_noise_pyramid, Generator, GeneratorConfig};
use solidtex::nn::Parameters;
use solidtex::slicer::{sample_plane, SlicePlane};
use solidtex::trainer::generator_gradient;
use solidtex::Axis;

#[test]
fn generator_gradient_through_slices_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = GeneratorConfig {
        levels: 2,
        noise_channels: 2,
        width: 3,
        leaky_slope: 0.2,
    };
    let g = Generator::new(cfg, &mut rng).unwrap();
    let ccfg = CriticConfig {
        width: 3,
        kernels: vec![3, 1],
        leaky_slope: 0.2,
    };
    let d = Discriminators::new(1, 8, &ccfg, None, &mut rng).unwrap();
    let z = make_noise_pyramid(4, 2, 2, &mut rng).unwrap();
    let mut planes: Vec<SlicePlane> = (0..3)
        .map(|_| sample_plane(4, &Axis::ALL, false, &mut rng).unwrap())
        .collect();
    planes.push(SlicePlane::Oblique45 {
        rotation_axis: Axis::Y,
        offset: 0.3,
    });
    let (_, grad) = generator_gradient(&mut g.clone(), &d, 1, &z, &planes).unwrap();
    let loss = |g: &Generator| generator_gradient(&mut g.clone(), &d, 1, &z, &planes).unwrap().0;
    let h = 1e-6;
    let analytic: Vec<Vec<f64>> = grad.params().iter().map(|(_, p)| p.to_vec()).collect();
    let mut checked = 0;
    for (pi, a) in analytic.iter().enumerate() {
        for i in [0, a.len() / 2, a.len() - 1] {
            let mut p = g.clone();
            p.params_mut()[pi][i] += h;
            let mut m = g.clone();
            m.params_mut()[pi][i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (fd - a[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {pi}[{i}]: analytic {} vs fd {fd}",
                a[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 30);
}
